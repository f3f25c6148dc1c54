#include "numstr/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace numstr {

namespace {

double shape_iou(const BoxShape& b, const Anchor& a) {
    return concentric_iou(b.width, b.height, a.width, a.height);
}

double median(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Run {
    std::vector<Anchor> anchors;
    std::vector<int> assign;
    double mean_iou = 0;
    std::vector<double> trace;
};

Run lloyd(const std::vector<BoxShape>& boxes, std::vector<Anchor> anchors, int max_iter) {
    const int k = static_cast<int>(anchors.size());
    Run run;
    run.assign.assign(boxes.size(), -1);

    auto assign_all = [&](const std::vector<Anchor>& a, std::vector<int>& out) {
        double total = 0;
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            int best = 0;
            double best_iou = shape_iou(boxes[i], a[0]);
            for (int c = 1; c < k; ++c) {
                const double v = shape_iou(boxes[i], a[c]);
                if (v > best_iou) {
                    best_iou = v;
                    best = c;
                }
            }
            out[i] = best;
            total += best_iou;
        }
        return total / static_cast<double>(boxes.size());
    };

    run.mean_iou = assign_all(anchors, run.assign);
    run.trace.push_back(run.mean_iou);

    for (int iter = 0; iter < max_iter; ++iter) {
        // median update per cluster
        std::vector<Anchor> next(k);
        for (int c = 0; c < k; ++c) {
            std::vector<double> ws, hs;
            for (std::size_t i = 0; i < boxes.size(); ++i)
                if (run.assign[i] == c) {
                    ws.push_back(boxes[i].width);
                    hs.push_back(boxes[i].height);
                }
            if (ws.empty()) {
                next[c] = anchors[c]; // empty cluster keeps its centroid
            } else {
                next[c] = Anchor{median(ws), median(hs)};
            }
        }

        std::vector<int> next_assign(boxes.size());
        const double next_mean = assign_all(next, next_assign);
        if (next_mean < run.mean_iou - 1e-12) break; // median step stopped helping
        const bool stable = next_assign == run.assign && next == anchors;
        anchors = std::move(next);
        run.assign = std::move(next_assign);
        run.mean_iou = next_mean;
        run.trace.push_back(next_mean);
        if (stable) break;
    }
    run.anchors = std::move(anchors);
    return run;
}

} // namespace

AnchorResult kmeans_anchors(const std::vector<BoxShape>& boxes, int k, std::uint64_t seed) {
    if (k < 1) throw ArgumentError("kmeans_anchors: k must be >= 1");
    if (static_cast<int>(boxes.size()) < k)
        throw ArgumentError("kmeans_anchors: fewer boxes than clusters");

    std::set<std::pair<double, double>> distinct;
    for (const BoxShape& b : boxes) {
        if (b.width <= 0 || b.height <= 0)
            throw ArgumentError("kmeans_anchors: non-positive box dimensions");
        distinct.insert({b.width, b.height});
    }
    if (static_cast<int>(distinct.size()) < k)
        throw ConfigError("kmeans_anchors: k exceeds the number of distinct box shapes");

    constexpr int kRestarts = 10;
    constexpr int kMaxIter = 300;
    Rng rng(seed);
    Run best;
    best.mean_iou = -1;
    for (int r = 0; r < kRestarts; ++r) {
        // init from k distinct box shapes
        std::vector<Anchor> init;
        std::set<std::pair<double, double>> used;
        while (static_cast<int>(init.size()) < k) {
            const BoxShape& b = boxes[rng.uniform_int(0, static_cast<std::int64_t>(boxes.size()) - 1)];
            if (used.insert({b.width, b.height}).second) init.push_back(Anchor{b.width, b.height});
        }
        Run run = lloyd(boxes, std::move(init), kMaxIter);
        if (run.mean_iou > best.mean_iou) best = std::move(run);
    }

    AnchorResult result;
    result.mean_iou = best.mean_iou;
    result.iou_trace = std::move(best.trace);
    result.anchors = std::move(best.anchors);
    std::sort(result.anchors.begin(), result.anchors.end(), [](const Anchor& a, const Anchor& b) {
        if (a.area() != b.area()) return a.area() < b.area();
        return a.width < b.width;
    });
    return result;
}

} // namespace numstr
