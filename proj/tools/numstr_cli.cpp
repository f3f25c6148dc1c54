// numstr: synthesize numeral-string datasets, cluster anchors, train the
// grid detector, and run/evaluate recognition.

#include "numstr/detector.hpp"
#include "numstr/eval.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace numstr;

namespace {

std::vector<Anchor> read_anchor_file(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open anchor file " + file.string());
    std::vector<Anchor> anchors;
    double w, h;
    while (in >> w >> h) {
        if (w <= 0 || h <= 0) throw FormatError(file.string() + ": non-positive anchor dims");
        anchors.push_back({w, h});
    }
    if (anchors.empty()) throw FormatError(file.string() + ": no anchors");
    return anchors;
}

/// Ground-truth box shapes mapped to the reference test-time input scale
/// (height 128, width from the sizing rule), the frame anchors are used in.
std::vector<BoxShape> reference_box_shapes(const Dataset& ds) {
    std::vector<BoxShape> shapes;
    for (const StringSample& s : ds.samples) {
        LetterboxInfo info;
        info.orig_h = s.image.height;
        info.orig_w = s.image.width;
        info.target_h = kInputHeight;
        info.target_w = target_input_width(s.image.width);
        info.scale = std::min(static_cast<double>(info.target_w) / info.orig_w,
                              static_cast<double>(info.target_h) / info.orig_h);
        for (const DigitAnnotation& a : s.annotations)
            shapes.push_back({a.box.width() * info.scale, a.box.height() * info.scale});
    }
    return shapes;
}

void draw_box(Image& img, const BoundingBox& b, std::uint8_t value) {
    const int x0 = std::clamp(static_cast<int>(std::lround(b.x_min)), 0, img.width - 1);
    const int x1 = std::clamp(static_cast<int>(std::lround(b.x_max)) - 1, 0, img.width - 1);
    const int y0 = std::clamp(static_cast<int>(std::lround(b.y_min)), 0, img.height - 1);
    const int y1 = std::clamp(static_cast<int>(std::lround(b.y_max)) - 1, 0, img.height - 1);
    for (int x = x0; x <= x1; ++x) {
        img.at(y0, x) = value;
        img.at(y1, x) = value;
    }
    for (int y = y0; y <= y1; ++y) {
        img.at(y, x0) = value;
        img.at(y, x1) = value;
    }
}

struct TrainFlags {
    TrainConfig cfg;
    std::string scales;

    void attach(CLI::App* cmd) {
        cmd->add_option("--epochs", cfg.epochs_max, "maximum training epochs");
        cmd->add_option("--patience", cfg.patience, "early-stopping patience (epochs)");
        cmd->add_option("--seed", cfg.seed, "RNG seed");
        cmd->add_option("--batch", cfg.sgd.batch_size, "mini-batch size");
        cmd->add_option("--lr", cfg.sgd.learning_rate, "initial learning rate");
        cmd->add_option("--final-lr", cfg.sgd.final_rate, "final learning rate");
        cmd->add_option("--momentum", cfg.sgd.momentum, "SGD momentum");
        cmd->add_option("--weight-decay", cfg.sgd.weight_decay, "weight decay");
        cmd->add_option("--net-width", cfg.net_width, "backbone channel scale");
        cmd->add_option("--grad-clip", cfg.grad_clip, "gradient norm cap (0 disables)");
        cmd->add_option("--coord-weight", cfg.loss_weights.coord, "coordinate loss weight");
        cmd->add_option("--obj-weight", cfg.loss_weights.obj, "responsible objectness loss weight");
        cmd->add_option("--noobj-weight", cfg.loss_weights.noobj, "empty-slot objectness loss weight");
        cmd->add_option("--cls-weight", cfg.loss_weights.cls, "class loss weight");
        cmd->add_option("--multi-scale-every", cfg.multi_scale_every,
                        "batches between input-size redraws");
        cmd->add_option("--scales", scales, "input sizes, e.g. 96x192,128x256");
        cmd->add_option("--conf", cfg.thresholds.confidence, "confidence threshold");
        cmd->add_option("--nms", cfg.thresholds.nms_iou, "NMS IoU threshold");
    }

    void finish() {
        if (scales.empty()) return;
        cfg.scale_choices.clear();
        std::istringstream is(scales);
        std::string tok;
        while (std::getline(is, tok, ',')) {
            const auto x = tok.find('x');
            if (x == std::string::npos)
                throw ConfigError("bad --scales entry '" + tok + "' (want HxW)");
            cfg.scale_choices.emplace_back(std::stoi(tok.substr(0, x)),
                                           std::stoi(tok.substr(x + 1)));
        }
    }
};

TrainResult run_training(const fs::path& train_dir, const fs::path& val_dir,
                         const std::vector<Anchor>& anchors, const TrainConfig& cfg) {
    const Dataset train_ds = load_dataset(train_dir);
    const Dataset val_ds = load_dataset(val_dir);
    TrainResult result = train(train_ds, val_ds, anchors, cfg);
    for (std::size_t e = 0; e < result.history.epochs.size(); ++e)
        std::cout << "epoch " << e << " loss " << result.history.epochs[e].train_loss
                  << " val_acc " << result.history.epochs[e].val_accuracy << "\n";
    std::cout << "best epoch " << result.history.best_epoch << " val_acc "
              << result.history.best_val_accuracy << "\n";
    return result;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"handwritten numeral string recognition via grid detection"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value config file (flags take precedence)");

    // gendigits
    auto* gen = app.add_subcommand("gendigits", "render a synthetic isolated-digit IDX archive");
    int gen_count = 10000;
    std::uint64_t gen_seed = 0;
    std::string gen_images, gen_labels;
    gen->add_option("--count", gen_count, "number of digits");
    gen->add_option("--seed", gen_seed, "RNG seed");
    gen->add_option("--out-images", gen_images, "output IDX image file")->required();
    gen->add_option("--out-labels", gen_labels, "output IDX label file")->required();

    // synth
    auto* synth = app.add_subcommand("synth", "synthesize an annotated string dataset");
    std::string sy_images, sy_labels, sy_out;
    SynthConfig sy_cfg;
    synth->add_option("--digits-images", sy_images, "IDX image file of isolated digits")->required();
    synth->add_option("--digits-labels", sy_labels, "IDX label file")->required();
    synth->add_option("--out", sy_out, "output dataset root (train/val/test created)")->required();
    synth->add_option("--count", sy_cfg.count, "total string count")->required();
    synth->add_option("--min-len", sy_cfg.min_len, "minimum string length");
    synth->add_option("--max-len", sy_cfg.max_len, "maximum string length");
    synth->add_option("--gap-min", sy_cfg.gap_min, "minimum inter-digit gap (px, negative = overlap)");
    synth->add_option("--gap-max", sy_cfg.gap_max, "maximum inter-digit gap (px)");
    synth->add_option("--border", sy_cfg.border, "canvas border (px)");
    synth->add_option("--seed", sy_cfg.seed, "RNG seed");
    synth->add_option("--frac-train", sy_cfg.frac_train, "train fraction");
    synth->add_option("--frac-val", sy_cfg.frac_val, "val fraction");
    synth->add_option("--frac-test", sy_cfg.frac_test, "test fraction");

    // anchors
    auto* anch = app.add_subcommand("anchors", "cluster anchor priors from ground-truth boxes");
    std::string an_data;
    int an_k = 3;
    std::uint64_t an_seed = 0;
    anch->add_option("--data", an_data, "dataset directory")->required();
    anch->add_option("--k", an_k, "number of anchors");
    anch->add_option("--seed", an_seed, "RNG seed");

    // train
    auto* tr = app.add_subcommand("train", "train the detector");
    std::string tr_train, tr_val, tr_anchors, tr_out;
    TrainFlags tr_flags;
    tr->add_option("--train", tr_train, "training dataset directory")->required();
    tr->add_option("--val", tr_val, "validation dataset directory")->required();
    tr->add_option("--anchors", tr_anchors, "anchor file (width height rows)")->required();
    tr->add_option("--out", tr_out, "output checkpoint file")->required();
    tr_flags.attach(tr);

    // predict
    auto* pr = app.add_subcommand("predict", "recognize a single image");
    std::string pr_model, pr_image, pr_overlay;
    Thresholds pr_thr;
    pr->add_option("--model", pr_model, "checkpoint file")->required();
    pr->add_option("--image", pr_image, "input PGM image")->required();
    pr->add_option("--overlay", pr_overlay, "write a PGM with predicted boxes drawn");
    pr->add_option("--conf", pr_thr.confidence, "confidence threshold");
    pr->add_option("--nms", pr_thr.nms_iou, "NMS IoU threshold");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate on an annotated dataset");
    std::string ev_model, ev_data;
    EvalThresholds ev_thr;
    bool ev_tsv = false;
    ev->add_option("--model", ev_model, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--conf", ev_thr.pipeline.confidence, "confidence threshold");
    ev->add_option("--nms", ev_thr.pipeline.nms_iou, "NMS IoU threshold");
    ev->add_option("--match-iou", ev_thr.match_iou, "matching IoU threshold");
    ev->add_flag("--tsv", ev_tsv, "emit TSV instead of the aligned table");

    // context-exp
    auto* cx = app.add_subcommand(
        "context-exp", "contrast isolated-digit training against string training");
    std::string cx_isolated, cx_strings, cx_anchors;
    TrainFlags cx_flags;
    cx->add_option("--isolated", cx_isolated, "dataset root of 1-digit samples (train/val)")
        ->required();
    cx->add_option("--strings", cx_strings, "dataset root of strings (train/val/test)")->required();
    cx->add_option("--anchors", cx_anchors, "anchor file; clustered from string data if omitted");
    int cx_k = 1;
    cx->add_option("--k", cx_k, "anchor count when clustering implicitly");
    cx_flags.attach(cx);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*gen) {
            auto [images, labels] = render_digits(gen_count, gen_seed);
            write_idx_files(images, labels, gen_images, gen_labels);
            std::cout << "wrote " << images.size() << " digits\n";
        } else if (*synth) {
            const DigitSet source = load_idx_files(sy_images, sy_labels);
            auto [train_ds, val_ds, test_ds] = generate_dataset(sy_cfg, source);
            save_dataset(train_ds, fs::path(sy_out) / "train");
            save_dataset(val_ds, fs::path(sy_out) / "val");
            save_dataset(test_ds, fs::path(sy_out) / "test");
            std::cout << "wrote " << train_ds.samples.size() << "/" << val_ds.samples.size() << "/"
                      << test_ds.samples.size() << " train/val/test samples to " << sy_out << "\n";
        } else if (*anch) {
            const Dataset ds = load_dataset(an_data);
            const AnchorResult result = kmeans_anchors(reference_box_shapes(ds), an_k, an_seed);
            std::cout.precision(17);
            for (const Anchor& a : result.anchors) std::cout << a.width << " " << a.height << "\n";
            std::cerr << "mean IoU " << result.mean_iou << "\n";
        } else if (*tr) {
            tr_flags.finish();
            const std::vector<Anchor> anchors = read_anchor_file(tr_anchors);
            const TrainResult result = run_training(tr_train, tr_val, anchors, tr_flags.cfg);
            save_model(result.model, tr_flags.cfg, tr_out);
            std::cout << "saved " << tr_out << "\n";
        } else if (*pr) {
            const DetectorModel model = load_model(pr_model);
            const Image image = read_pgm(pr_image);
            const StringReading reading = predict_string(model, image, pr_thr);
            std::cout << pr_image << '\t' << reading.text << '\t' << reading.probability << '\t';
            for (std::size_t i = 0; i < reading.detections.size(); ++i) {
                const Detection& d = reading.detections[i];
                std::cout << (i ? ";" : "") << d.cls.value << ',' << d.box.x_min << ','
                          << d.box.y_min << ',' << d.box.x_max << ',' << d.box.y_max;
            }
            std::cout << "\n";
            if (!pr_overlay.empty()) {
                Image overlay = image;
                for (const Detection& d : reading.detections) draw_box(overlay, d.box, 0);
                write_pgm(overlay, pr_overlay);
            }
        } else if (*ev) {
            const DetectorModel model = load_model(ev_model);
            const Dataset ds = load_dataset(ev_data);
            DigitRecall recall;
            const EvalReport report = evaluate(model, ds, ev_thr, &recall);
            std::cout << (ev_tsv ? report.to_tsv() : report.to_table());
            std::cerr << "digit recall " << recall.recall() << " (" << recall.matched << "/"
                      << recall.total_gt << ")\n";
        } else if (*cx) {
            cx_flags.finish();
            const Dataset strings_test = load_dataset(fs::path(cx_strings) / "test");
            std::vector<Anchor> anchors;
            if (!cx_anchors.empty()) {
                anchors = read_anchor_file(cx_anchors);
            } else {
                const Dataset strings_train = load_dataset(fs::path(cx_strings) / "train");
                anchors =
                    kmeans_anchors(reference_box_shapes(strings_train), cx_k, cx_flags.cfg.seed).anchors;
            }
            std::cout << "== training on isolated digits ==\n";
            const TrainResult iso = run_training(fs::path(cx_isolated) / "train",
                                                 fs::path(cx_isolated) / "val", anchors,
                                                 cx_flags.cfg);
            std::cout << "== training on strings ==\n";
            const TrainResult str = run_training(fs::path(cx_strings) / "train",
                                                 fs::path(cx_strings) / "val", anchors,
                                                 cx_flags.cfg);
            EvalThresholds thr;
            thr.pipeline = cx_flags.cfg.thresholds;
            const EvalReport iso_report = evaluate(iso.model, strings_test, thr);
            const EvalReport str_report = evaluate(str.model, strings_test, thr);
            std::cout << "isolated-trained string accuracy: " << iso_report.overall.accuracy_pct
                      << "%\n";
            std::cout << "string-trained string accuracy:   " << str_report.overall.accuracy_pct
                      << "%\n";
            std::cout << "gap: " << str_report.overall.accuracy_pct - iso_report.overall.accuracy_pct
                      << " percentage points\n";
        }
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
