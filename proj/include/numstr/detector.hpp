#pragma once

#include "numstr/data.hpp"
#include "numstr/inference.hpp"

#include <functional>

namespace numstr {

/// Per-slot regression targets plus the responsibility mask. Layout
/// matches the prediction tensor: per anchor b, channels b*15 ..
/// b*15+14 hold (t_x, t_y, t_w, t_h, t_obj, 10 class scores).
template <typename T>
struct TargetTensor {
    Tensor3<T> values;
    std::vector<std::uint8_t> responsible; // indexed (b * grid_h + row) * grid_w + col
    int n_anchors = 0;
    int collisions = 0; // digits that lost their (cell, anchor) slot

    bool is_responsible(int b, int row, int col) const {
        return responsible[(static_cast<std::size_t>(b) * values.h + row) * values.w + col] != 0;
    }
};

/// Assign each ground-truth digit to the cell containing its center and
/// the best-IoU anchor within it. Boxes must already be in the network
/// input frame. Slot collisions keep the larger-area digit and are
/// counted.
template <typename T>
TargetTensor<T> assign_targets(const std::vector<DigitAnnotation>& annotations,
                               const std::vector<Anchor>& anchors, int grid_h, int grid_w,
                               int stride);

/// Pseudo-prediction that decodes back to the encoded boxes (coordinate
/// targets pushed through the inverse logistic, responsible slots given
/// saturated objectness/class scores).
template <typename T>
Tensor3<T> target_to_prediction(const TargetTensor<T>& target);

struct LossWeights {
    double coord = 5.0;
    double obj = 1.0;
    double noobj = 0.5;
    double cls = 1.0;
};

template <typename T>
struct LossResult {
    double loss = 0;
    Tensor3<T> grad; // d loss / d prediction
};

/// Weighted sum-squared detection/classification error. Center offsets
/// and objectness are squashed by the logistic before comparison; w/h
/// and class scores are compared raw.
template <typename T>
LossResult<T> detection_loss(const Tensor3<T>& pred, const TargetTensor<T>& target,
                             const LossWeights& weights);

struct TrainConfig {
    SgdConfig sgd;
    int epochs_max = 60;
    int patience = 5;
    int multi_scale_every = 10; // batches between input-size redraws
    std::vector<std::pair<int, int>> scale_choices = {
        {96, 192},  {96, 256},  {96, 320},  {128, 192}, {128, 256},
        {128, 320}, {160, 192}, {160, 256}, {160, 320},
    }; // (height, width), centered on the 128x256 training shape
    std::uint64_t seed = 0;
    int net_width = 16;      // channel scale of the miniature backbone
    double grad_clip = 50.0; // global L2 norm cap per batch, 0 disables
    LossWeights loss_weights;
    Thresholds thresholds; // used for validation string accuracy

    void validate() const;
};

struct ScaleEvent {
    int batch_index = 0; // global batch index at which the size was redrawn
    int height = 0, width = 0;
};

struct EpochStats {
    double train_loss = 0;
    double val_accuracy = 0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    std::vector<ScaleEvent> scale_events;
    int best_epoch = -1; // 0-based
    double best_val_accuracy = 0;
    long collisions = 0; // target-assignment collisions seen while training
};

struct TrainResult {
    DetectorModel model; // best-validation parameters
    TrainHistory history;
};

/// Validation metric hook: maps the current model to a score in [0,1].
/// Defaults to string accuracy on the validation set.
using ValMetric = std::function<double(const DetectorModel&)>;

/// Mini-batch SGD with multi-scale letterboxed inputs, linear learning
/// rate decay and early stopping on validation string accuracy.
TrainResult train(const Dataset& train_data, const Dataset& val_data,
                  const std::vector<Anchor>& anchors, const TrainConfig& cfg,
                  const ValMetric& val_metric = {});

/// Checkpoint plus a text sidecar (<file>.meta) recording anchors and
/// the training configuration.
void save_model(const DetectorModel& model, const TrainConfig& cfg,
                const std::filesystem::path& file);
DetectorModel load_model(const std::filesystem::path& file);

} // namespace numstr
