#include "numstr/inference.hpp"

#include <algorithm>
#include <cmath>

namespace numstr {

int target_input_width(int string_width) {
    if (string_width < 1) throw ArgumentError("target_input_width: width must be >= 1");
    if (string_width <= 75) return 128;
    const long mult = std::lround(string_width * 1.70 / 32.0);
    return std::max(128, static_cast<int>(mult) * 32);
}

BoundingBox to_network_frame(const BoundingBox& box, const LetterboxInfo& info) {
    return {box.x_min * info.scale + info.pad_x, box.y_min * info.scale + info.pad_y,
            box.x_max * info.scale + info.pad_x, box.y_max * info.scale + info.pad_y};
}

BoundingBox to_image_frame(const BoundingBox& box, const LetterboxInfo& info) {
    return {(box.x_min - info.pad_x) / info.scale, (box.y_min - info.pad_y) / info.scale,
            (box.x_max - info.pad_x) / info.scale, (box.y_max - info.pad_y) / info.scale};
}

template <typename T>
std::pair<Tensor3<T>, LetterboxInfo> prepare_image(const Image& image, int target_h, int target_w) {
    if (image.height < 1 || image.width < 1) throw ArgumentError("prepare_image: zero-area input");
    if (target_h < 1 || target_w < 1) throw ArgumentError("prepare_image: bad target dims");

    LetterboxInfo info;
    info.orig_h = image.height;
    info.orig_w = image.width;
    info.target_h = target_h;
    info.target_w = target_w;
    info.scale = std::min(static_cast<double>(target_w) / image.width,
                          static_cast<double>(target_h) / image.height);
    const int new_w = std::max(1, static_cast<int>(std::lround(image.width * info.scale)));
    const int new_h = std::max(1, static_cast<int>(std::lround(image.height * info.scale)));
    info.pad_x = (target_w - new_w) / 2;
    info.pad_y = (target_h - new_h) / 2;

    Tensor3<T> out(1, target_h, target_w, T(1)); // white letterbox
    for (int y = 0; y < new_h; ++y) {
        const double sy = std::clamp((y + 0.5) / info.scale - 0.5, 0.0, image.height - 1.0);
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, image.height - 1);
        const double fy = sy - y0;
        for (int x = 0; x < new_w; ++x) {
            const double sx = std::clamp((x + 0.5) / info.scale - 0.5, 0.0, image.width - 1.0);
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const double fx = sx - x0;
            const double v = image.at(y0, x0) * (1 - fx) * (1 - fy) +
                             image.at(y0, x1) * fx * (1 - fy) +
                             image.at(y1, x0) * (1 - fx) * fy + image.at(y1, x1) * fx * fy;
            out.at(0, y + info.pad_y, x + info.pad_x) = static_cast<T>(v / 255.0);
        }
    }
    return {std::move(out), info};
}

namespace {
template <typename T>
double logistic(T t) {
    return 1.0 / (1.0 + std::exp(-static_cast<double>(t)));
}
} // namespace

template <typename T>
std::vector<Detection> decode_grid(const Tensor3<T>& pred, const std::vector<Anchor>& anchors,
                                   int stride, double conf_threshold,
                                   const LetterboxInfo* map_back) {
    if (conf_threshold < 0 || conf_threshold >= 1)
        throw ArgumentError("decode_grid: conf_threshold must be in [0,1)");
    const int n_anchors = static_cast<int>(anchors.size());
    constexpr int kPerAnchor = 15; // 4 coords + objectness + 10 classes
    if (n_anchors < 1 || pred.c != n_anchors * kPerAnchor)
        throw ShapeError("decode_grid: prediction channels do not match anchor count");

    std::vector<Detection> dets;
    for (int b = 0; b < n_anchors; ++b) {
        const int base = b * kPerAnchor;
        for (int row = 0; row < pred.h; ++row)
            for (int col = 0; col < pred.w; ++col) {
                const double objectness = logistic(pred.at(base + 4, row, col));
                // stable softmax over the 10 class scores
                double max_score = pred.at(base + 5, row, col);
                for (int c = 1; c < 10; ++c)
                    max_score = std::max(max_score, static_cast<double>(pred.at(base + 5 + c, row, col)));
                double denom = 0;
                double best_p = 0;
                int best_c = 0;
                for (int c = 0; c < 10; ++c) {
                    const double e = std::exp(pred.at(base + 5 + c, row, col) - max_score);
                    denom += e;
                    if (e > best_p) {
                        best_p = e;
                        best_c = c;
                    }
                }
                const double posterior = objectness * (best_p / denom);
                if (posterior < conf_threshold) continue;

                const double cx = (logistic(pred.at(base + 0, row, col)) + col) * stride;
                const double cy = (logistic(pred.at(base + 1, row, col)) + row) * stride;
                const double w = anchors[b].width * std::exp(static_cast<double>(pred.at(base + 2, row, col)));
                const double h = anchors[b].height * std::exp(static_cast<double>(pred.at(base + 3, row, col)));
                BoundingBox box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
                if (map_back) box = to_image_frame(box, *map_back);
                dets.push_back(Detection{box, DigitClass{best_c}, posterior});
            }
    }
    return dets;
}

StringReading assemble_string(const std::vector<Detection>& dets) {
    StringReading reading;
    reading.detections = dets;
    std::sort(reading.detections.begin(), reading.detections.end(),
              [](const Detection& a, const Detection& b) {
                  if (a.box.x_center() != b.box.x_center()) return a.box.x_center() < b.box.x_center();
                  if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
                  return a.cls.value < b.cls.value;
              });
    reading.probability = 1.0;
    for (const Detection& d : reading.detections) {
        reading.text.push_back(d.cls.to_char());
        reading.probability *= d.posterior;
    }
    reading.empty = reading.detections.empty();
    return reading;
}

StringReading predict_string(const DetectorModel& model, const Image& image,
                             const Thresholds& thresholds) {
    const int width = target_input_width(image.width);
    auto [input, info] = prepare_image<float>(image, kInputHeight, width);
    const Tensor3<float> out = forward(model.spec, model.params, input);
    const std::vector<Detection> raw =
        decode_grid(out, model.anchors, model.spec.stride(), thresholds.confidence, &info);
    return assemble_string(nms(raw, thresholds.nms_iou));
}

template std::pair<Tensor3<float>, LetterboxInfo> prepare_image<float>(const Image&, int, int);
template std::pair<Tensor3<double>, LetterboxInfo> prepare_image<double>(const Image&, int, int);
template std::vector<Detection> decode_grid<float>(const Tensor3<float>&,
                                                   const std::vector<Anchor>&, int, double,
                                                   const LetterboxInfo*);
template std::vector<Detection> decode_grid<double>(const Tensor3<double>&,
                                                    const std::vector<Anchor>&, int, double,
                                                    const LetterboxInfo*);

} // namespace numstr
