#include "numstr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace numstr {

MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<DigitAnnotation>& gts, double iou_threshold) {
    if (iou_threshold <= 0 || iou_threshold >= 1)
        throw ArgumentError("match_detections: iou_threshold must be in (0,1)");

    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        if (dets[i].posterior != dets[j].posterior) return dets[i].posterior > dets[j].posterior;
        if (dets[i].box.x_min != dets[j].box.x_min) return dets[i].box.x_min < dets[j].box.x_min;
        return dets[i].cls.value < dets[j].cls.value;
    });

    MatchResult result;
    std::vector<bool> gt_taken(gts.size(), false);
    std::vector<bool> det_taken(dets.size(), false);
    for (std::size_t di : order) {
        double best_iou = 0;
        std::size_t best_gt = gts.size();
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_taken[gi]) continue;
            const double v = iou(dets[di].box, gts[gi].box);
            if (v > best_iou) {
                best_iou = v;
                best_gt = gi;
            }
        }
        if (best_gt < gts.size() && best_iou >= iou_threshold) {
            gt_taken[best_gt] = true;
            det_taken[di] = true;
            result.pairs.push_back({best_gt, di, best_iou});
        }
    }
    for (std::size_t gi = 0; gi < gts.size(); ++gi)
        if (!gt_taken[gi]) result.unmatched_gt.push_back(gi);
    for (std::size_t di = 0; di < dets.size(); ++di)
        if (!det_taken[di]) result.unmatched_det.push_back(di);
    return result;
}

Verdict attribute_errors(const StringReading& reading, const StringSample& sample,
                         double iou_threshold) {
    if (reading.text == sample.label) return Verdict::correct;
    const MatchResult m = match_detections(reading.detections, sample.annotations, iou_threshold);
    if (!m.unmatched_gt.empty() || !m.unmatched_det.empty()) return Verdict::detection_error;
    return Verdict::classification_error;
}

namespace {

EvalRow make_row(int length, int samples, int correct, int cls_err, int det_err) {
    EvalRow row;
    row.length = length;
    row.samples = samples;
    const double n = samples;
    row.accuracy_pct = 100.0 * correct / n;
    row.classification_pct = 100.0 * cls_err / n;
    row.detection_pct = 100.0 * det_err / n;
    return row;
}

} // namespace

std::string EvalReport::to_tsv() const {
    std::ostringstream os;
    os.precision(10);
    os << "length\taccuracy\tclass_err\tdet_err\tsamples\n";
    for (const EvalRow& r : per_length)
        os << r.length << '\t' << r.accuracy_pct << '\t' << r.classification_pct << '\t'
           << r.detection_pct << '\t' << r.samples << '\n';
    os << "all\t" << overall.accuracy_pct << '\t' << overall.classification_pct << '\t'
       << overall.detection_pct << '\t' << overall.samples << '\n';
    return os.str();
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    os << "Length  Samples  Accuracy (%)  Classification (%)  Detection (%)\n";
    char buf[96];
    for (const EvalRow& r : per_length) {
        std::snprintf(buf, sizeof(buf), "%6d  %7d  %12.2f  %18.2f  %13.2f\n", r.length, r.samples,
                      r.accuracy_pct, r.classification_pct, r.detection_pct);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%6s  %7d  %12.2f  %18.2f  %13.2f\n", "all", overall.samples,
                  overall.accuracy_pct, overall.classification_pct, overall.detection_pct);
    os << buf;
    return os.str();
}

EvalReport evaluate(const DetectorModel& model, const Dataset& dataset,
                    const EvalThresholds& thresholds, DigitRecall* digit_recall) {
    if (dataset.samples.empty()) throw ArgumentError("evaluate: empty dataset");

    struct Tally {
        int samples = 0, correct = 0, cls_err = 0, det_err = 0;
    };
    std::map<int, Tally> by_length;
    Tally total;
    DigitRecall recall;

    for (const StringSample& s : dataset.samples) {
        const StringReading reading = predict_string(model, s.image, thresholds.pipeline);
        const Verdict v = attribute_errors(reading, s, thresholds.match_iou);
        Tally& t = by_length[static_cast<int>(s.label.size())];
        ++t.samples;
        ++total.samples;
        switch (v) {
            case Verdict::correct: ++t.correct; ++total.correct; break;
            case Verdict::classification_error: ++t.cls_err; ++total.cls_err; break;
            case Verdict::detection_error: ++t.det_err; ++total.det_err; break;
        }
        const MatchResult m =
            match_detections(reading.detections, s.annotations, thresholds.match_iou);
        recall.matched += static_cast<long>(m.pairs.size());
        recall.total_gt += static_cast<long>(s.annotations.size());
    }

    EvalReport report;
    for (const auto& [length, t] : by_length)
        report.per_length.push_back(make_row(length, t.samples, t.correct, t.cls_err, t.det_err));
    report.overall = make_row(0, total.samples, total.correct, total.cls_err, total.det_err);
    if (digit_recall) *digit_recall = recall;
    return report;
}

} // namespace numstr
