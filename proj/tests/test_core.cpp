#include "numstr/core.hpp"

#include <doctest.h>

#include <algorithm>

using namespace numstr;

namespace {

// O(n^2) reference NMS: checks every candidate against every kept box.
std::vector<Detection> nms_bruteforce(std::vector<Detection> dets, double threshold) {
    std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.posterior != b.posterior) return a.posterior > b.posterior;
        if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
        return a.cls.value < b.cls.value;
    });
    std::vector<Detection> kept;
    for (const Detection& d : dets) {
        bool suppressed = false;
        for (const Detection& k : kept)
            if (k.cls == d.cls && iou(k.box, d.box) >= threshold) suppressed = true;
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

Detection random_detection(Rng& rng) {
    const double x = rng.uniform(0, 100), y = rng.uniform(0, 40);
    const double w = rng.uniform(4, 30), h = rng.uniform(4, 30);
    return {{x, y, x + w, y + h},
            DigitClass{static_cast<int>(rng.uniform_int(0, 9))},
            rng.uniform()};
}

} // namespace

TEST_SUITE_BEGIN("core");

TEST_CASE("iou basics") {
    const BoundingBox a{0, 0, 10, 10};
    CHECK(iou(a, a) == doctest::Approx(1.0));
    CHECK(iou(a, {20, 20, 30, 30}) == 0.0);
    CHECK(iou(a, {5, 0, 15, 10}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("iou symmetry and range") {
    Rng rng(7);
    for (int i = 0; i < 500; ++i) {
        const BoundingBox a = random_detection(rng).box;
        const BoundingBox b = random_detection(rng).box;
        const double v = iou(a, b);
        CHECK(v == iou(b, a));
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("concentric iou") {
    CHECK(concentric_iou(10, 20, 10, 20) == doctest::Approx(1.0));
    CHECK(concentric_iou(10, 10, 20, 20) == doctest::Approx(0.25));
}

TEST_CASE("nms suppresses same-class overlap") {
    // A and B overlap with IoU 0.6
    const Detection a{{0, 0, 10, 10}, DigitClass{5}, 0.9};
    const Detection b{{0, 0, 10, 6}, DigitClass{5}, 0.8};
    REQUIRE(iou(a.box, b.box) == doctest::Approx(0.6));
    const auto kept = nms({a, b}, 0.45);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0] == a);
}

TEST_CASE("nms never suppresses across classes") {
    const Detection a{{0, 0, 10, 10}, DigitClass{5}, 0.9};
    const Detection b{{0, 0, 10, 6}, DigitClass{7}, 0.8};
    const auto kept = nms({a, b}, 0.45);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0] == a);
    CHECK(kept[1] == b);
}

TEST_CASE("nms empty input") {
    CHECK(nms({}, 0.45).empty());
}

TEST_CASE("nms matches the brute-force reference") {
    Rng rng(123);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Detection> dets;
        const int n = static_cast<int>(rng.uniform_int(0, 50));
        for (int i = 0; i < n; ++i) dets.push_back(random_detection(rng));
        CHECK(nms(dets, 0.45) == nms_bruteforce(dets, 0.45));
    }
}

TEST_CASE("nms output properties") {
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Detection> dets;
        for (int i = 0; i < 30; ++i) dets.push_back(random_detection(rng));
        const auto kept = nms(dets, 0.45);
        // subset of input
        for (const Detection& k : kept)
            CHECK(std::find(dets.begin(), dets.end(), k) != dets.end());
        // same-class pairs stay below the threshold
        for (std::size_t i = 0; i < kept.size(); ++i)
            for (std::size_t j = i + 1; j < kept.size(); ++j)
                if (kept[i].cls == kept[j].cls) CHECK(iou(kept[i].box, kept[j].box) < 0.45);
        // the top detection of each class survives
        for (int c = 0; c < 10; ++c) {
            const Detection* top = nullptr;
            for (const Detection& d : dets)
                if (d.cls.value == c && (!top || d.posterior > top->posterior)) top = &d;
            if (top) CHECK(std::find(kept.begin(), kept.end(), *top) != kept.end());
        }
    }
}

TEST_SUITE_END();
