#pragma once

#include "numstr/anchors.hpp"
#include "numstr/core.hpp"
#include "numstr/net.hpp"

namespace numstr {

/// Network input height used at test time; Eq-style width sizing picks
/// the width.
constexpr int kInputHeight = 128;

/// Network input width as a function of the test-image width: 128 for
/// narrow strings, otherwise 1.70x the string width rounded to the
/// nearest multiple of the network stride (32).
int target_input_width(int string_width);

/// Maps between original-image and letterboxed network coordinates:
/// x_net = x_img * scale + pad_x.
struct LetterboxInfo {
    int orig_h = 0, orig_w = 0;
    int target_h = 0, target_w = 0;
    double scale = 1.0;
    int pad_x = 0, pad_y = 0;
};

BoundingBox to_network_frame(const BoundingBox& box, const LetterboxInfo& info);
BoundingBox to_image_frame(const BoundingBox& box, const LetterboxInfo& info);

/// Aspect-preserving bilinear resize onto a white canvas of the target
/// dims, centered. Intensities are scaled to [0,1].
template <typename T>
std::pair<Tensor3<T>, LetterboxInfo> prepare_image(const Image& image, int target_h, int target_w);

/// Decode raw grid outputs into detections with posterior >= threshold.
/// Boxes are reported in the original image frame when `map_back` is
/// given, otherwise in the network input frame.
template <typename T>
std::vector<Detection> decode_grid(const Tensor3<T>& pred, const std::vector<Anchor>& anchors,
                                   int stride, double conf_threshold,
                                   const LetterboxInfo* map_back = nullptr);

/// The most probable interpretation of a string: digit classes in
/// left-to-right reading order with probability = product of the
/// per-digit posteriors.
struct StringReading {
    std::string text;
    double probability = 1.0;
    std::vector<Detection> detections; // sorted by box x-center
    bool empty = false;                // no detections survived
};

/// Order NMS-filtered detections by x-center and fold their posteriors.
StringReading assemble_string(const std::vector<Detection>& dets);

struct DetectorModel {
    NetSpec spec;
    Params<float> params;
    std::vector<Anchor> anchors;
};

struct Thresholds {
    // Class scores are regressed to one-hot values, so the softmax class
    // probability of a perfectly fit slot tops out at e/(e+9) ~ 0.232 and
    // posteriors never reach the classic 0.25; an untrained net sits near
    // 0.5 * 0.1 = 0.05. The default splits that gap.
    double confidence = 0.10;
    double nms_iou = 0.45;
};

/// Full test-time pipeline: size, letterbox, forward, decode, NMS,
/// assemble.
StringReading predict_string(const DetectorModel& model, const Image& image,
                             const Thresholds& thresholds = {});

} // namespace numstr
