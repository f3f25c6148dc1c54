#include "numstr/anchors.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace numstr;

namespace {

/// Exhaustive-restart Lloyd oracle for the planted 2-cluster instance:
/// try every pair of distinct shapes as the initialization and keep the
/// best converged mean IoU.
AnchorResult lloyd_oracle_k2(const std::vector<BoxShape>& boxes) {
    std::vector<std::pair<double, double>> distinct;
    for (const BoxShape& b : boxes) {
        std::pair<double, double> p{b.width, b.height};
        if (std::find(distinct.begin(), distinct.end(), p) == distinct.end()) distinct.push_back(p);
    }
    AnchorResult best;
    best.mean_iou = -1;
    for (std::size_t i = 0; i < distinct.size(); ++i)
        for (std::size_t j = i + 1; j < distinct.size(); ++j) {
            std::vector<Anchor> anchors = {{distinct[i].first, distinct[i].second},
                                           {distinct[j].first, distinct[j].second}};
            for (int iter = 0; iter < 300; ++iter) {
                std::vector<std::vector<double>> ws(2), hs(2);
                for (const BoxShape& b : boxes) {
                    const double i0 = concentric_iou(b.width, b.height, anchors[0].width,
                                                     anchors[0].height);
                    const double i1 = concentric_iou(b.width, b.height, anchors[1].width,
                                                     anchors[1].height);
                    const int c = i1 > i0 ? 1 : 0;
                    ws[c].push_back(b.width);
                    hs[c].push_back(b.height);
                }
                std::vector<Anchor> next = anchors;
                for (int c = 0; c < 2; ++c) {
                    if (ws[c].empty()) continue;
                    std::sort(ws[c].begin(), ws[c].end());
                    std::sort(hs[c].begin(), hs[c].end());
                    const std::size_t n = ws[c].size();
                    next[c].width = n % 2 ? ws[c][n / 2] : 0.5 * (ws[c][n / 2 - 1] + ws[c][n / 2]);
                    next[c].height = n % 2 ? hs[c][n / 2] : 0.5 * (hs[c][n / 2 - 1] + hs[c][n / 2]);
                }
                if (next[0] == anchors[0] && next[1] == anchors[1]) break;
                anchors = next;
            }
            double total = 0;
            for (const BoxShape& b : boxes)
                total += std::max(
                    concentric_iou(b.width, b.height, anchors[0].width, anchors[0].height),
                    concentric_iou(b.width, b.height, anchors[1].width, anchors[1].height));
            const double mean = total / boxes.size();
            if (mean > best.mean_iou) {
                best.mean_iou = mean;
                best.anchors = anchors;
            }
        }
    std::sort(best.anchors.begin(), best.anchors.end(),
              [](const Anchor& a, const Anchor& b) { return a.area() < b.area(); });
    return best;
}

} // namespace

TEST_SUITE_BEGIN("anchors");

TEST_CASE("single repeated shape") {
    std::vector<BoxShape> boxes(25, BoxShape{10, 20});
    const AnchorResult r = kmeans_anchors(boxes, 1, 0);
    REQUIRE(r.anchors.size() == 1);
    CHECK(r.anchors[0].width == doctest::Approx(10));
    CHECK(r.anchors[0].height == doctest::Approx(20));
    CHECK(r.mean_iou == doctest::Approx(1.0));
}

TEST_CASE("planted two-shape population is recovered") {
    std::vector<BoxShape> boxes;
    Rng rng(5);
    for (int i = 0; i < 100; ++i)
        boxes.push_back({16 + rng.uniform(-0.4, 0.4), 32 + rng.uniform(-0.4, 0.4)});
    for (int i = 0; i < 100; ++i)
        boxes.push_back({32 + rng.uniform(-0.4, 0.4), 32 + rng.uniform(-0.4, 0.4)});

    const AnchorResult r = kmeans_anchors(boxes, 2, 0);
    REQUIRE(r.anchors.size() == 2);
    CHECK(std::abs(r.anchors[0].width - 16) <= 1.0);
    CHECK(std::abs(r.anchors[0].height - 32) <= 1.0);
    CHECK(std::abs(r.anchors[1].width - 32) <= 1.0);
    CHECK(std::abs(r.anchors[1].height - 32) <= 1.0);

    const AnchorResult oracle = lloyd_oracle_k2(boxes);
    CHECK(r.mean_iou == doctest::Approx(oracle.mean_iou).epsilon(1e-6));
}

TEST_CASE("mean IoU trace is monotone non-decreasing") {
    Rng rng(13);
    std::vector<BoxShape> boxes;
    for (int i = 0; i < 500; ++i) boxes.push_back({rng.uniform(6, 30), rng.uniform(15, 30)});
    const AnchorResult r = kmeans_anchors(boxes, 3, 7);
    for (std::size_t i = 1; i < r.iou_trace.size(); ++i)
        CHECK(r.iou_trace[i] >= r.iou_trace[i - 1] - 1e-9);
}

TEST_CASE("every anchor owns at least one box at convergence") {
    Rng rng(29);
    std::vector<BoxShape> boxes;
    for (int i = 0; i < 300; ++i) boxes.push_back({rng.uniform(5, 40), rng.uniform(10, 35)});
    const AnchorResult r = kmeans_anchors(boxes, 3, 1);
    std::vector<int> counts(3, 0);
    for (const BoxShape& b : boxes) {
        int best = 0;
        double best_iou = -1;
        for (int c = 0; c < 3; ++c) {
            const double v = concentric_iou(b.width, b.height, r.anchors[c].width,
                                            r.anchors[c].height);
            if (v > best_iou) {
                best_iou = v;
                best = c;
            }
        }
        ++counts[best];
    }
    for (int c = 0; c < 3; ++c) CHECK(counts[c] > 0);
}

TEST_CASE("deterministic in (boxes, k, seed)") {
    Rng rng(3);
    std::vector<BoxShape> boxes;
    for (int i = 0; i < 200; ++i) boxes.push_back({rng.uniform(5, 40), rng.uniform(10, 35)});
    const AnchorResult a = kmeans_anchors(boxes, 3, 11);
    const AnchorResult b = kmeans_anchors(boxes, 3, 11);
    CHECK(a.anchors == b.anchors);
    CHECK(a.mean_iou == b.mean_iou);
}

TEST_CASE("errors") {
    std::vector<BoxShape> boxes(5, BoxShape{10, 10});
    CHECK_THROWS_AS(kmeans_anchors(boxes, 0, 0), ArgumentError);
    CHECK_THROWS_AS(kmeans_anchors(boxes, 6, 0), ArgumentError);  // fewer boxes than k
    CHECK_THROWS_AS(kmeans_anchors(boxes, 2, 0), ConfigError);    // k > distinct shapes
}

TEST_CASE("aspect ratios match a population tuned to three ratio groups") {
    // digit-geometry population: heights near 28, width/height ratios
    // clustered at 0.5, 0.6 and 1.0
    Rng rng(41);
    std::vector<BoxShape> boxes;
    const double ratios[3] = {0.5, 0.6, 1.0};
    for (int i = 0; i < 10000; ++i) {
        const double h = 28 + rng.uniform(-1.5, 1.5);
        const double r = ratios[i % 3] + rng.uniform(-0.02, 0.02);
        boxes.push_back({h * r, h});
    }
    const AnchorResult res = kmeans_anchors(boxes, 3, 0);
    REQUIRE(res.anchors.size() == 3);
    std::vector<double> got;
    for (const Anchor& a : res.anchors) got.push_back(a.width / a.height);
    std::sort(got.begin(), got.end());
    CHECK(std::abs(got[0] - 0.5) < 0.05);
    CHECK(std::abs(got[1] - 0.6) < 0.05);
    CHECK(std::abs(got[2] - 1.0) < 0.05);
}

TEST_SUITE_END();
