#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace numstr {

// Error categories. The CLI maps these onto exit codes:
// usage errors -> 1, data/format errors -> 2, training/numeric errors -> 3.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Deterministic 64-bit RNG with explicit, platform-stable derivations.
/// std::uniform_* distributions are implementation-defined, so bounded
/// draws are done by hand here.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // splitmix64 warmup so nearby seeds decorrelate
        next();
        next();
    }

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform real in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next() % span);
    }

    /// Derive an independent stream, e.g. per sample: Rng(seed).fork(index).
    Rng fork(std::uint64_t stream) const {
        Rng r(state_ ^ (0x2545f4914f6cdd1dull * (stream + 1)));
        return r;
    }

  private:
    std::uint64_t state_;
};

/// Worker-parallelism cap: min(hardware threads, NUMSTR_THREADS if set).
int worker_threads();

/// Grayscale raster, row-major, 0 = black ink, 255 = white background.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels; // height * width

    Image() = default;
    Image(int h, int w, std::uint8_t fill = 255)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

    bool operator==(const Image&) const = default;
};

/// Axis-aligned box in image coordinates, origin top-left, x_min < x_max.
struct BoundingBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double x_center() const { return 0.5 * (x_min + x_max); }
    double y_center() const { return 0.5 * (y_min + y_max); }
    bool valid() const { return x_min < x_max && y_min < y_max; }

    bool operator==(const BoundingBox&) const = default;
};

/// Digit class, value in [0, 9].
struct DigitClass {
    int value = 0;

    char to_char() const { return static_cast<char>('0' + value); }
    bool operator==(const DigitClass&) const = default;
};

/// A decoded digit candidate: box, class and its posterior probability.
struct Detection {
    BoundingBox box;
    DigitClass cls;
    double posterior = 0.0;

    bool operator==(const Detection&) const = default;
};

/// Ground-truth digit inside a string sample.
struct DigitAnnotation {
    DigitClass cls;
    BoundingBox box;

    bool operator==(const DigitAnnotation&) const = default;
};

/// A numeral-string image with ordered per-digit ground truth.
struct StringSample {
    Image image;
    std::vector<DigitAnnotation> annotations; // sorted by box x-center
    std::string label;                        // one char per annotation

    bool operator==(const StringSample&) const = default;
};

/// Intersection over union of two valid boxes; 0 when disjoint.
double iou(const BoundingBox& a, const BoundingBox& b);

/// IoU of two box shapes aligned at a common center (anchor distance).
double concentric_iou(double w_a, double h_a, double w_b, double h_b);

/// Greedy class-wise non-maximum suppression. Detections are ranked by
/// posterior descending (ties: smaller x_min, then smaller class); a
/// detection is kept iff its IoU with every kept detection of the same
/// class is below the threshold.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

} // namespace numstr
