#include "numstr/core.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

namespace numstr {

int worker_threads() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("NUMSTR_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1 && cap < n) n = cap;
    }
    return n;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (ix <= 0 || iy <= 0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

double concentric_iou(double w_a, double h_a, double w_b, double h_b) {
    const double inter = std::min(w_a, w_b) * std::min(h_a, h_b);
    return inter / (w_a * h_a + w_b * h_b - inter);
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        const Detection& a = dets[i];
        const Detection& b = dets[j];
        if (a.posterior != b.posterior) return a.posterior > b.posterior;
        if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
        return a.cls.value < b.cls.value;
    });

    std::vector<Detection> kept;
    for (std::size_t idx : order) {
        const Detection& cand = dets[idx];
        bool keep = true;
        for (const Detection& k : kept) {
            if (k.cls == cand.cls && iou(k.box, cand.box) >= iou_threshold) {
                keep = false;
                break;
            }
        }
        if (keep) kept.push_back(cand);
    }
    return kept;
}

} // namespace numstr
