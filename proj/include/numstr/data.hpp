#pragma once

#include "numstr/core.hpp"

#include <filesystem>
#include <iosfwd>
#include <utility>

namespace numstr {

/// Isolated digits ready for string synthesis. Images are normalized to
/// dark-ink-on-white and trimmed to their ink bounding box on load.
struct DigitSet {
    std::vector<Image> images;
    std::vector<DigitClass> labels;
    std::vector<int> source_ids; // record index in the origin archive

    std::size_t size() const { return images.size(); }
};

enum class Split { train, val, test };

std::string split_name(Split s);

struct Dataset {
    std::vector<StringSample> samples;
    Split split_tag = Split::train;
};

/// Synthetic-string generation parameters.
struct SynthConfig {
    int min_len = 2;
    int max_len = 6;
    int gap_min = -6; // pixels; negative = horizontal overlap
    int gap_max = 12;
    int border = 5;
    double jitter_frac = 0.15; // vertical jitter, fraction of digit height
    std::uint64_t seed = 0;
    int count = 0;
    double frac_train = 0.7;
    double frac_val = 0.15;
    double frac_test = 0.15;

    void validate() const;
};

// ---- IDX archives (big-endian headers, magic 0x803 images / 0x801 labels) ----

DigitSet load_idx(std::istream& image_bytes, std::istream& label_bytes);
DigitSet load_idx_files(const std::filesystem::path& image_file,
                        const std::filesystem::path& label_file);

/// Write 28x28 rasters plus labels as a standard IDX archive pair.
void write_idx_files(const std::vector<Image>& images, const std::vector<DigitClass>& labels,
                     const std::filesystem::path& image_file,
                     const std::filesystem::path& label_file);

// ---- string synthesis ----

struct DigitGlyph {
    Image image;
    DigitClass cls;
};

/// Concatenate digits left-to-right on a white canvas. gaps[k] separates
/// digit k and k+1 (negative = overlap, composited darkest-pixel);
/// jitters[k] shifts digit k vertically off the canvas mid-line (empty =
/// no jitter). The canvas is the tight box of all placed digits expanded
/// by `border` on every side.
StringSample synth_string(const std::vector<DigitGlyph>& digits, const std::vector<int>& gaps,
                          int border, const std::vector<int>& jitters = {});

/// Build train/val/test datasets. Source records are partitioned into
/// three disjoint pools before composition, so a digit image never
/// appears in two splits. Fully reproducible from config.seed.
std::tuple<Dataset, Dataset, Dataset> generate_dataset(const SynthConfig& config,
                                                       const DigitSet& source);

// ---- dataset persistence (images/NNNNNN.pgm + annotations.tsv) ----

void save_dataset(const Dataset& ds, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

// ---- PGM (binary, maxval 255) ----

void write_pgm(const Image& img, const std::filesystem::path& file);
Image read_pgm(const std::filesystem::path& file);

// ---- procedural digit source ----

/// Render `count` synthetic isolated digits (28x28, dark-on-white) from a
/// seeded stroke-font model with random affine variation. Stands in for
/// an external isolated-digit archive so the pipeline is self-contained;
/// pair with write_idx_files to produce a standard archive.
std::pair<std::vector<Image>, std::vector<DigitClass>> render_digits(int count,
                                                                     std::uint64_t seed);

} // namespace numstr
