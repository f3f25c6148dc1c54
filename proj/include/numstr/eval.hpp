#pragma once

#include "numstr/data.hpp"
#include "numstr/inference.hpp"

namespace numstr {

/// Greedy class-agnostic matching between detections and ground truth.
struct MatchResult {
    struct Pair {
        std::size_t gt = 0;
        std::size_t det = 0;
        double iou = 0;
    };
    std::vector<Pair> pairs;
    std::vector<std::size_t> unmatched_gt;
    std::vector<std::size_t> unmatched_det;
};

/// Detections take turns by descending posterior; each claims the
/// unmatched ground-truth box of maximal IoU if that IoU reaches the
/// threshold.
MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<DigitAnnotation>& gts, double iou_threshold = 0.5);

enum class Verdict { correct, classification_error, detection_error };

/// Single-cause attribution of a failed string: detection errors
/// (missing, spurious or mispositioned digits) take precedence over
/// classification errors (all digits located, at least one misread).
Verdict attribute_errors(const StringReading& reading, const StringSample& sample,
                         double iou_threshold = 0.5);

struct EvalRow {
    int length = 0; // 0 = overall average row
    int samples = 0;
    double accuracy_pct = 0;
    double classification_pct = 0;
    double detection_pct = 0;
};

struct EvalReport {
    std::vector<EvalRow> per_length; // ascending length
    EvalRow overall;

    std::string to_tsv() const;   // length accuracy class_err det_err samples
    std::string to_table() const; // aligned human-readable table
};

struct EvalThresholds {
    Thresholds pipeline;     // confidence + NMS
    double match_iou = 0.5;  // detection/ground-truth matching
};

/// Digit-level detection stats, kept alongside string-level reporting.
struct DigitRecall {
    long matched = 0;
    long total_gt = 0;
    double recall() const { return total_gt ? static_cast<double>(matched) / total_gt : 0.0; }
};

/// Run the pipeline over every sample, attribute verdicts and aggregate
/// per string length.
EvalReport evaluate(const DetectorModel& model, const Dataset& dataset,
                    const EvalThresholds& thresholds = {}, DigitRecall* digit_recall = nullptr);

} // namespace numstr
