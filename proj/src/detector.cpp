#include "numstr/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

namespace numstr {

namespace {
constexpr int kPerAnchor = 15;

template <typename T>
double logistic(T t) {
    return 1.0 / (1.0 + std::exp(-static_cast<double>(t)));
}

double logit(double p) {
    return std::log(p / (1.0 - p));
}
} // namespace

template <typename T>
TargetTensor<T> assign_targets(const std::vector<DigitAnnotation>& annotations,
                               const std::vector<Anchor>& anchors, int grid_h, int grid_w,
                               int stride) {
    const int n_anchors = static_cast<int>(anchors.size());
    if (n_anchors < 1) throw ArgumentError("assign_targets: no anchors");
    if (grid_h < 1 || grid_w < 1 || stride < 1) throw ArgumentError("assign_targets: bad grid");

    TargetTensor<T> t;
    t.n_anchors = n_anchors;
    t.values = Tensor3<T>(n_anchors * kPerAnchor, grid_h, grid_w);
    t.responsible.assign(static_cast<std::size_t>(n_anchors) * grid_h * grid_w, 0);
    std::vector<double> owner_area(t.responsible.size(), 0.0);

    for (const DigitAnnotation& a : annotations) {
        const double cx = a.box.x_center();
        const double cy = a.box.y_center();
        const double w = a.box.width();
        const double h = a.box.height();
        const int col = std::clamp(static_cast<int>(std::floor(cx / stride)), 0, grid_w - 1);
        const int row = std::clamp(static_cast<int>(std::floor(cy / stride)), 0, grid_h - 1);
        int best = 0;
        double best_iou = concentric_iou(w, h, anchors[0].width, anchors[0].height);
        for (int b = 1; b < n_anchors; ++b) {
            const double v = concentric_iou(w, h, anchors[b].width, anchors[b].height);
            if (v > best_iou) {
                best_iou = v;
                best = b;
            }
        }
        const std::size_t slot = (static_cast<std::size_t>(best) * grid_h + row) * grid_w + col;
        if (t.responsible[slot]) {
            // collision: larger-area digit keeps the slot
            ++t.collisions;
            if (a.box.area() <= owner_area[slot]) continue;
        }
        t.responsible[slot] = 1;
        owner_area[slot] = a.box.area();
        const int base = best * kPerAnchor;
        t.values.at(base + 0, row, col) = static_cast<T>(cx / stride - col);
        t.values.at(base + 1, row, col) = static_cast<T>(cy / stride - row);
        t.values.at(base + 2, row, col) = static_cast<T>(std::log(w / anchors[best].width));
        t.values.at(base + 3, row, col) = static_cast<T>(std::log(h / anchors[best].height));
        t.values.at(base + 4, row, col) = T(1);
        for (int c = 0; c < 10; ++c)
            t.values.at(base + 5 + c, row, col) = c == a.cls.value ? T(1) : T(0);
    }
    return t;
}

template <typename T>
Tensor3<T> target_to_prediction(const TargetTensor<T>& target) {
    Tensor3<T> pred(target.values.c, target.values.h, target.values.w);
    constexpr double kSaturated = 12.0; // logistic(12) ~ 0.999994
    for (int b = 0; b < target.n_anchors; ++b) {
        const int base = b * kPerAnchor;
        for (int row = 0; row < pred.h; ++row)
            for (int col = 0; col < pred.w; ++col) {
                if (!target.is_responsible(b, row, col)) {
                    pred.at(base + 4, row, col) = static_cast<T>(-kSaturated);
                    continue;
                }
                pred.at(base + 0, row, col) =
                    static_cast<T>(logit(static_cast<double>(target.values.at(base + 0, row, col))));
                pred.at(base + 1, row, col) =
                    static_cast<T>(logit(static_cast<double>(target.values.at(base + 1, row, col))));
                pred.at(base + 2, row, col) = target.values.at(base + 2, row, col);
                pred.at(base + 3, row, col) = target.values.at(base + 3, row, col);
                pred.at(base + 4, row, col) = static_cast<T>(kSaturated);
                for (int c = 0; c < 10; ++c)
                    pred.at(base + 5 + c, row, col) = static_cast<T>(
                        target.values.at(base + 5 + c, row, col) > T(0.5) ? 2 * kSaturated : 0);
            }
    }
    return pred;
}

template <typename T>
LossResult<T> detection_loss(const Tensor3<T>& pred, const TargetTensor<T>& target,
                             const LossWeights& weights) {
    if (pred.c != target.values.c || pred.h != target.values.h || pred.w != target.values.w)
        throw ShapeError("detection_loss: prediction/target shape mismatch");

    LossResult<T> result;
    result.grad = Tensor3<T>(pred.c, pred.h, pred.w);
    double loss = 0;

    for (int b = 0; b < target.n_anchors; ++b) {
        const int base = b * kPerAnchor;
        for (int row = 0; row < pred.h; ++row)
            for (int col = 0; col < pred.w; ++col) {
                const double p_obj = logistic(pred.at(base + 4, row, col));
                if (!target.is_responsible(b, row, col)) {
                    loss += weights.noobj * p_obj * p_obj;
                    result.grad.at(base + 4, row, col) = static_cast<T>(
                        weights.noobj * 2.0 * p_obj * p_obj * (1.0 - p_obj));
                    continue;
                }
                // center offsets through the logistic
                for (int k = 0; k < 2; ++k) {
                    const double s = logistic(pred.at(base + k, row, col));
                    const double err = s - static_cast<double>(target.values.at(base + k, row, col));
                    loss += weights.coord * err * err;
                    result.grad.at(base + k, row, col) =
                        static_cast<T>(weights.coord * 2.0 * err * s * (1.0 - s));
                }
                // raw log-size residuals
                for (int k = 2; k < 4; ++k) {
                    const double err = static_cast<double>(pred.at(base + k, row, col)) -
                                       static_cast<double>(target.values.at(base + k, row, col));
                    loss += weights.coord * err * err;
                    result.grad.at(base + k, row, col) = static_cast<T>(weights.coord * 2.0 * err);
                }
                const double obj_err = p_obj - 1.0;
                loss += weights.obj * obj_err * obj_err;
                result.grad.at(base + 4, row, col) =
                    static_cast<T>(weights.obj * 2.0 * obj_err * p_obj * (1.0 - p_obj));
                for (int c = 0; c < 10; ++c) {
                    const double err = static_cast<double>(pred.at(base + 5 + c, row, col)) -
                                       static_cast<double>(target.values.at(base + 5 + c, row, col));
                    loss += weights.cls * err * err;
                    result.grad.at(base + 5 + c, row, col) = static_cast<T>(weights.cls * 2.0 * err);
                }
            }
    }
    result.loss = loss;
    return result;
}

void TrainConfig::validate() const {
    sgd.validate();
    if (epochs_max < 1) throw ConfigError("TrainConfig: epochs_max must be >= 1");
    if (patience < 1) throw ConfigError("TrainConfig: patience must be >= 1");
    if (multi_scale_every < 1) throw ConfigError("TrainConfig: multi_scale_every must be >= 1");
    if (scale_choices.empty()) throw ConfigError("TrainConfig: no scale choices");
    if (net_width < 1) throw ConfigError("TrainConfig: net_width must be >= 1");
    if (grad_clip < 0) throw ConfigError("TrainConfig: grad_clip must be >= 0");
}

namespace {

double default_string_accuracy(const DetectorModel& model, const Dataset& val,
                               const Thresholds& thresholds) {
    int correct = 0;
    for (const StringSample& s : val.samples)
        if (predict_string(model, s.image, thresholds).text == s.label) ++correct;
    return static_cast<double>(correct) / static_cast<double>(val.samples.size());
}

struct SampleGrad {
    Params<float> grads;
    double loss = 0;
    int collisions = 0;
};

void accumulate(Params<float>& into, const Params<float>& from, float scale) {
    for (std::size_t i = 0; i < into.weights.size(); ++i) {
        for (std::size_t j = 0; j < into.weights[i].size(); ++j)
            into.weights[i][j] += scale * from.weights[i][j];
        for (std::size_t j = 0; j < into.biases[i].size(); ++j)
            into.biases[i][j] += scale * from.biases[i][j];
    }
}

} // namespace

TrainResult train(const Dataset& train_data, const Dataset& val_data,
                  const std::vector<Anchor>& anchors, const TrainConfig& cfg,
                  const ValMetric& val_metric) {
    cfg.validate();
    if (train_data.samples.empty() || val_data.samples.empty())
        throw ArgumentError("train: empty dataset");
    if (anchors.empty()) throw ArgumentError("train: no anchors");

    NetSpec spec = NetSpec::miniature(static_cast<int>(anchors.size()) * kPerAnchor, cfg.net_width);
    const int stride = spec.stride();
    for (auto [h, w] : cfg.scale_choices)
        if (h % stride != 0 || w % stride != 0)
            throw ConfigError("TrainConfig: scale choice not divisible by stride " +
                              std::to_string(stride));

    DetectorModel model{spec, init_params<float>(spec, cfg.seed), anchors};
    Params<float> velocity = zeros_like<float>(spec);

    const Rng master(cfg.seed);
    const std::size_t n_train = train_data.samples.size();
    const std::size_t batches_per_epoch = (n_train + cfg.sgd.batch_size - 1) / cfg.sgd.batch_size;
    const std::size_t total_batches = batches_per_epoch * static_cast<std::size_t>(cfg.epochs_max);

    TrainHistory history;
    Params<float> best_params = model.params;
    double best_acc = -1;
    int epochs_since_best = 0;
    std::size_t global_batch = 0;
    Rng scale_rng = master.fork(0x5ca1e);
    int cur_h = cfg.scale_choices[0].first, cur_w = cfg.scale_choices[0].second;

    const int n_threads = worker_threads();

    for (int epoch = 0; epoch < cfg.epochs_max; ++epoch) {
        // seeded shuffle
        std::vector<std::size_t> order(n_train);
        for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
        Rng shuffle_rng = master.fork(0x5000 + epoch);
        for (std::size_t i = n_train; i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1)]);

        double epoch_loss = 0;
        std::size_t epoch_samples = 0;

        for (std::size_t batch = 0; batch < batches_per_epoch; ++batch, ++global_batch) {
            if (global_batch % static_cast<std::size_t>(cfg.multi_scale_every) == 0) {
                const auto pick = cfg.scale_choices[scale_rng.uniform_int(
                    0, static_cast<std::int64_t>(cfg.scale_choices.size()) - 1)];
                cur_h = pick.first;
                cur_w = pick.second;
                history.scale_events.push_back(
                    {static_cast<int>(global_batch), cur_h, cur_w});
            }
            const std::size_t begin = batch * cfg.sgd.batch_size;
            const std::size_t end = std::min(begin + cfg.sgd.batch_size, n_train);
            const std::size_t bn = end - begin;

            std::vector<SampleGrad> per_sample(bn);
            auto run_sample = [&](std::size_t j) {
                const StringSample& s = train_data.samples[order[begin + j]];
                auto [input, info] = prepare_image<float>(s.image, cur_h, cur_w);
                std::vector<DigitAnnotation> scaled = s.annotations;
                for (DigitAnnotation& a : scaled) a.box = to_network_frame(a.box, info);
                TargetTensor<float> target =
                    assign_targets<float>(scaled, anchors, cur_h / stride, cur_w / stride, stride);
                ForwardCache<float> cache;
                const Tensor3<float> out = forward(spec, model.params, input, &cache);
                LossResult<float> lr = detection_loss(out, target, cfg.loss_weights);
                per_sample[j].grads = zeros_like<float>(spec);
                backward(spec, model.params, cache, lr.grad, per_sample[j].grads);
                per_sample[j].loss = lr.loss;
                per_sample[j].collisions = target.collisions;
            };
            if (n_threads > 1 && bn > 1) {
                std::vector<std::thread> pool;
                std::size_t chunk = (bn + n_threads - 1) / n_threads;
                for (int t = 0; t < n_threads; ++t) {
                    const std::size_t lo = t * chunk, hi = std::min(bn, lo + chunk);
                    if (lo >= hi) break;
                    pool.emplace_back([&, lo, hi] {
                        for (std::size_t j = lo; j < hi; ++j) run_sample(j);
                    });
                }
                for (auto& th : pool) th.join();
            } else {
                for (std::size_t j = 0; j < bn; ++j) run_sample(j);
            }

            // fixed-order reduction keeps results independent of thread count
            Params<float> grads = zeros_like<float>(spec);
            double batch_loss = 0;
            for (std::size_t j = 0; j < bn; ++j) {
                accumulate(grads, per_sample[j].grads, 1.0f / static_cast<float>(bn));
                batch_loss += per_sample[j].loss;
                history.collisions += per_sample[j].collisions;
            }
            batch_loss /= static_cast<double>(bn);
            if (!std::isfinite(batch_loss))
                throw TrainingError("training diverged (non-finite loss) at epoch " +
                                    std::to_string(epoch) + ", batch " + std::to_string(batch));

            // occasional loss spikes otherwise snowball through momentum
            if (cfg.grad_clip > 0) {
                double norm2 = 0;
                for (const auto& w : grads.weights)
                    for (float g : w) norm2 += static_cast<double>(g) * g;
                for (const auto& b : grads.biases)
                    for (float g : b) norm2 += static_cast<double>(g) * g;
                const double norm = std::sqrt(norm2);
                if (norm > cfg.grad_clip) {
                    const float s = static_cast<float>(cfg.grad_clip / norm);
                    for (auto& w : grads.weights)
                        for (float& g : w) g *= s;
                    for (auto& b : grads.biases)
                        for (float& g : b) g *= s;
                }
            }
            epoch_loss += batch_loss * static_cast<double>(bn);
            epoch_samples += bn;

            const double progress =
                total_batches > 1 ? static_cast<double>(global_batch) / (total_batches - 1) : 0.0;
            const double lr =
                cfg.sgd.learning_rate + (cfg.sgd.final_rate - cfg.sgd.learning_rate) * progress;
            try {
                sgd_step(spec, model.params, grads, velocity, lr, cfg.sgd.momentum,
                         cfg.sgd.weight_decay);
            } catch (const TrainingError& e) {
                throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(batch));
            }
        }

        EpochStats stats;
        stats.train_loss = epoch_loss / static_cast<double>(epoch_samples);
        stats.val_accuracy = val_metric
                                 ? val_metric(model)
                                 : default_string_accuracy(model, val_data, cfg.thresholds);
        history.epochs.push_back(stats);

        if (stats.val_accuracy > best_acc) {
            best_acc = stats.val_accuracy;
            best_params = model.params;
            history.best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            // on a tie prefer the most-trained checkpoint, but a tie is
            // not an improvement as far as patience is concerned
            if (stats.val_accuracy == best_acc) {
                best_params = model.params;
                history.best_epoch = epoch;
            }
            ++epochs_since_best;
            if (epochs_since_best >= cfg.patience) break;
        }
    }

    history.best_val_accuracy = best_acc;
    return TrainResult{DetectorModel{spec, std::move(best_params), anchors}, std::move(history)};
}

// ------------------------------------------------------------- model I/O

void save_model(const DetectorModel& model, const TrainConfig& cfg,
                const std::filesystem::path& file) {
    save_params(model.spec, model.params, file);
    std::ofstream meta(file.string() + ".meta", std::ios::binary);
    if (!meta) throw IoError("cannot write " + file.string() + ".meta");
    meta.precision(17);
    for (const Anchor& a : model.anchors) meta << "anchor\t" << a.width << '\t' << a.height << '\n';
    meta << "learning_rate=" << cfg.sgd.learning_rate << '\n';
    meta << "final_rate=" << cfg.sgd.final_rate << '\n';
    meta << "momentum=" << cfg.sgd.momentum << '\n';
    meta << "weight_decay=" << cfg.sgd.weight_decay << '\n';
    meta << "batch_size=" << cfg.sgd.batch_size << '\n';
    meta << "epochs_max=" << cfg.epochs_max << '\n';
    meta << "patience=" << cfg.patience << '\n';
    meta << "multi_scale_every=" << cfg.multi_scale_every << '\n';
    meta << "seed=" << cfg.seed << '\n';
    meta << "net_width=" << cfg.net_width << '\n';
    meta << "grad_clip=" << cfg.grad_clip << '\n';
    meta << "coord_weight=" << cfg.loss_weights.coord << '\n';
    meta << "obj_weight=" << cfg.loss_weights.obj << '\n';
    meta << "noobj_weight=" << cfg.loss_weights.noobj << '\n';
    meta << "cls_weight=" << cfg.loss_weights.cls << '\n';
    meta << "scale_choices=";
    for (std::size_t i = 0; i < cfg.scale_choices.size(); ++i)
        meta << (i ? " " : "") << cfg.scale_choices[i].first << 'x' << cfg.scale_choices[i].second;
    meta << '\n';
}

DetectorModel load_model(const std::filesystem::path& file) {
    auto [spec, params] = load_params(file);
    DetectorModel model{std::move(spec), std::move(params), {}};
    std::ifstream meta(file.string() + ".meta", std::ios::binary);
    if (!meta) throw IoError("cannot open " + file.string() + ".meta");
    std::string line;
    while (std::getline(meta, line)) {
        if (line.rfind("anchor\t", 0) != 0) continue;
        std::istringstream is(line.substr(7));
        Anchor a;
        if (!(is >> a.width >> a.height))
            throw FormatError(file.string() + ".meta: malformed anchor line");
        model.anchors.push_back(a);
    }
    if (model.anchors.empty())
        throw FormatError(file.string() + ".meta: no anchors recorded");
    const int expect = static_cast<int>(model.anchors.size()) * kPerAnchor;
    if (model.spec.out_channels() != expect)
        throw FormatError(file.string() + ": head channels do not match anchor count");
    return model;
}

template struct TargetTensor<float>;
template struct TargetTensor<double>;
template TargetTensor<float> assign_targets<float>(const std::vector<DigitAnnotation>&,
                                                   const std::vector<Anchor>&, int, int, int);
template TargetTensor<double> assign_targets<double>(const std::vector<DigitAnnotation>&,
                                                     const std::vector<Anchor>&, int, int, int);
template Tensor3<float> target_to_prediction<float>(const TargetTensor<float>&);
template Tensor3<double> target_to_prediction<double>(const TargetTensor<double>&);
template LossResult<float> detection_loss<float>(const Tensor3<float>&, const TargetTensor<float>&,
                                                 const LossWeights&);
template LossResult<double> detection_loss<double>(const Tensor3<double>&,
                                                   const TargetTensor<double>&,
                                                   const LossWeights&);

} // namespace numstr
