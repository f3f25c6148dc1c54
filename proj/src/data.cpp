#include "numstr/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

namespace numstr {

namespace fs = std::filesystem;

std::string split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

void SynthConfig::validate() const {
    if (min_len < 1 || min_len > max_len)
        throw ConfigError("invalid string length range [" + std::to_string(min_len) + ", " +
                          std::to_string(max_len) + "]");
    if (count <= 0) throw ConfigError("count must be positive");
    if (border < 0) throw ConfigError("border must be non-negative");
    if (gap_min > gap_max) throw ConfigError("gap_min exceeds gap_max");
    const double sum = frac_train + frac_val + frac_test;
    if (frac_train < 0 || frac_val < 0 || frac_test < 0 || std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("split fractions must be non-negative and sum to 1");
}

// ---------------------------------------------------------------- IDX I/O

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_u32_be(std::istream& in, const char* what) {
    std::uint8_t b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw FormatError(std::string("truncated IDX stream while reading ") + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

void write_u32_be(std::ostream& out, std::uint32_t v) {
    std::uint8_t b[4] = {std::uint8_t(v >> 24), std::uint8_t(v >> 16), std::uint8_t(v >> 8),
                         std::uint8_t(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

/// Flip polarity when the 1-pixel border ring is mostly dark (ink-on-black
/// archives such as MNIST-style dumps).
void normalize_polarity(Image& img) {
    if (img.height < 1 || img.width < 1) return;
    std::uint64_t sum = 0, n = 0;
    for (int x = 0; x < img.width; ++x) {
        sum += img.at(0, x) + img.at(img.height - 1, x);
        n += 2;
    }
    for (int y = 1; y + 1 < img.height; ++y) {
        sum += img.at(y, 0) + img.at(y, img.width - 1);
        n += 2;
    }
    if (n == 0) return;
    if (sum / n < 128) {
        for (auto& p : img.pixels) p = 255 - p;
    }
}

constexpr int kInkThreshold = 250; // anything darker than near-white counts as ink

Image trim_to_ink(const Image& img) {
    int x0 = img.width, y0 = img.height, x1 = -1, y1 = -1;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (img.at(y, x) < kInkThreshold) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0) return img; // blank raster, keep as-is
    Image out(y1 - y0 + 1, x1 - x0 + 1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) out.at(y - y0, x - x0) = img.at(y, x);
    return out;
}

} // namespace

DigitSet load_idx(std::istream& image_bytes, std::istream& label_bytes) {
    const std::uint32_t img_magic = read_u32_be(image_bytes, "image magic");
    if (img_magic != kImageMagic)
        throw FormatError("bad IDX image magic number");
    const std::uint32_t count = read_u32_be(image_bytes, "image count");
    const std::uint32_t rows = read_u32_be(image_bytes, "rows");
    const std::uint32_t cols = read_u32_be(image_bytes, "cols");

    const std::uint32_t lbl_magic = read_u32_be(label_bytes, "label magic");
    if (lbl_magic != kLabelMagic)
        throw FormatError("bad IDX label magic number");
    const std::uint32_t lbl_count = read_u32_be(label_bytes, "label count");
    if (lbl_count != count)
        throw FormatError("IDX image/label count mismatch: " + std::to_string(count) + " vs " +
                          std::to_string(lbl_count));

    DigitSet set;
    set.images.reserve(count);
    set.labels.reserve(count);
    set.source_ids.reserve(count);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t i = 0; i < count; ++i) {
        if (!image_bytes.read(reinterpret_cast<char*>(buf.data()), buf.size()))
            throw IoError("truncated IDX image stream at record " + std::to_string(i));
        char lbl;
        if (!label_bytes.get(lbl))
            throw IoError("truncated IDX label stream at record " + std::to_string(i));
        if (lbl < 0 || lbl > 9)
            throw FormatError("IDX label out of range at record " + std::to_string(i));
        Image img(static_cast<int>(rows), static_cast<int>(cols));
        img.pixels = buf;
        normalize_polarity(img);
        set.images.push_back(trim_to_ink(img));
        set.labels.push_back(DigitClass{lbl});
        set.source_ids.push_back(static_cast<int>(i));
    }
    return set;
}

DigitSet load_idx_files(const fs::path& image_file, const fs::path& label_file) {
    std::ifstream imgs(image_file, std::ios::binary);
    if (!imgs) throw IoError("cannot open " + image_file.string());
    std::ifstream lbls(label_file, std::ios::binary);
    if (!lbls) throw IoError("cannot open " + label_file.string());
    return load_idx(imgs, lbls);
}

void write_idx_files(const std::vector<Image>& images, const std::vector<DigitClass>& labels,
                     const fs::path& image_file, const fs::path& label_file) {
    if (images.size() != labels.size()) throw ArgumentError("image/label count mismatch");
    if (images.empty()) throw ArgumentError("nothing to write");
    const int rows = images.front().height;
    const int cols = images.front().width;
    std::ofstream imgs(image_file, std::ios::binary);
    if (!imgs) throw IoError("cannot write " + image_file.string());
    write_u32_be(imgs, kImageMagic);
    write_u32_be(imgs, static_cast<std::uint32_t>(images.size()));
    write_u32_be(imgs, static_cast<std::uint32_t>(rows));
    write_u32_be(imgs, static_cast<std::uint32_t>(cols));
    for (const Image& im : images) {
        if (im.height != rows || im.width != cols)
            throw ArgumentError("IDX archives require uniform raster dimensions");
        imgs.write(reinterpret_cast<const char*>(im.pixels.data()), im.pixels.size());
    }
    std::ofstream lbls(label_file, std::ios::binary);
    if (!lbls) throw IoError("cannot write " + label_file.string());
    write_u32_be(lbls, kLabelMagic);
    write_u32_be(lbls, static_cast<std::uint32_t>(labels.size()));
    for (DigitClass c : labels) lbls.put(static_cast<char>(c.value));
}

// ---------------------------------------------------------------- synthesis

StringSample synth_string(const std::vector<DigitGlyph>& digits, const std::vector<int>& gaps,
                          int border, const std::vector<int>& jitters) {
    if (digits.empty()) throw ArgumentError("synth_string: no digits");
    if (gaps.size() + 1 != digits.size())
        throw ArgumentError("synth_string: need exactly len(digits)-1 gaps");
    if (!jitters.empty() && jitters.size() != digits.size())
        throw ArgumentError("synth_string: jitters must match digit count");
    if (border < 0) throw ArgumentError("synth_string: negative border");

    const std::size_t n = digits.size();
    for (std::size_t k = 0; k + 1 < n; ++k) {
        const int narrower = std::min(digits[k].image.width, digits[k + 1].image.width);
        if (gaps[k] < -narrower + 1)
            throw ArgumentError("synth_string: gap " + std::to_string(gaps[k]) +
                                " exceeds neighbor width " + std::to_string(narrower));
    }

    // Place in an unbounded frame: x cumulative, y centered on a common
    // mid-line plus per-digit jitter.
    std::vector<int> xs(n), ys(n);
    int x = 0;
    for (std::size_t k = 0; k < n; ++k) {
        xs[k] = x;
        const int h = digits[k].image.height;
        ys[k] = -(h / 2) + (jitters.empty() ? 0 : jitters[k]);
        x += digits[k].image.width;
        if (k + 1 < n) x += gaps[k];
    }

    int min_x = xs[0], min_y = ys[0], max_x = xs[0], max_y = ys[0];
    for (std::size_t k = 0; k < n; ++k) {
        min_x = std::min(min_x, xs[k]);
        min_y = std::min(min_y, ys[k]);
        max_x = std::max(max_x, xs[k] + digits[k].image.width);
        max_y = std::max(max_y, ys[k] + digits[k].image.height);
    }

    StringSample sample;
    sample.image = Image(max_y - min_y + 2 * border, max_x - min_x + 2 * border);
    for (std::size_t k = 0; k < n; ++k) {
        const Image& g = digits[k].image;
        const int ox = xs[k] - min_x + border;
        const int oy = ys[k] - min_y + border;
        for (int yy = 0; yy < g.height; ++yy)
            for (int xx = 0; xx < g.width; ++xx) {
                std::uint8_t& dst = sample.image.at(oy + yy, ox + xx);
                dst = std::min(dst, g.at(yy, xx)); // darkest pixel wins
            }
        sample.annotations.push_back(DigitAnnotation{
            digits[k].cls, BoundingBox{double(ox), double(oy), double(ox + g.width),
                                       double(oy + g.height)}});
        sample.label.push_back(digits[k].cls.to_char());
    }
    return sample;
}

namespace {

StringSample make_sample(const DigitSet& source, const std::vector<int>& pool,
                         const SynthConfig& cfg, Rng rng) {
    const int len = static_cast<int>(rng.uniform_int(cfg.min_len, cfg.max_len));
    std::vector<DigitGlyph> digits;
    digits.reserve(len);
    for (int k = 0; k < len; ++k) {
        const int rec = pool[rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1)];
        digits.push_back(DigitGlyph{source.images[rec], source.labels[rec]});
    }
    std::vector<int> gaps(len - 1);
    for (int k = 0; k + 1 < len; ++k) {
        int g = static_cast<int>(rng.uniform_int(cfg.gap_min, cfg.gap_max));
        const int narrower = std::min(digits[k].image.width, digits[k + 1].image.width);
        gaps[k] = std::max(g, -narrower + 1);
    }
    std::vector<int> jitters(len);
    for (int k = 0; k < len; ++k) {
        const int amp = static_cast<int>(std::lround(cfg.jitter_frac * digits[k].image.height));
        jitters[k] = amp > 0 ? static_cast<int>(rng.uniform_int(-amp, amp)) : 0;
    }
    return synth_string(digits, gaps, cfg.border, jitters);
}

} // namespace

std::tuple<Dataset, Dataset, Dataset> generate_dataset(const SynthConfig& config,
                                                       const DigitSet& source) {
    config.validate();
    if (source.size() == 0) throw ConfigError("empty digit source");

    // Disjoint source pools first, then composition (writer-disjointness proxy).
    std::vector<int> order(source.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng pool_rng = Rng(config.seed).fork(0x9001);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[pool_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1)]);

    const auto n = static_cast<std::int64_t>(source.size());
    const std::int64_t n_train = std::llround(config.frac_train * static_cast<double>(n));
    const std::int64_t n_val = std::llround(config.frac_val * static_cast<double>(n));
    std::array<std::vector<int>, 3> pools;
    pools[0].assign(order.begin(), order.begin() + n_train);
    pools[1].assign(order.begin() + n_train, order.begin() + std::min(n, n_train + n_val));
    pools[2].assign(order.begin() + std::min(n, n_train + n_val), order.end());

    const int c_train = static_cast<int>(std::llround(config.frac_train * config.count));
    const int c_val = static_cast<int>(std::llround(config.frac_val * config.count));
    const std::array<int, 3> counts = {c_train, c_val, config.count - c_train - c_val};

    std::array<Dataset, 3> out;
    std::uint64_t sample_index = 0;
    for (int s = 0; s < 3; ++s) {
        out[s].split_tag = static_cast<Split>(s);
        if (counts[s] > 0 && pools[s].empty())
            throw ConfigError("split pool for '" + split_name(static_cast<Split>(s)) +
                              "' too small to form any string");
        out[s].samples.reserve(counts[s]);
        for (int i = 0; i < counts[s]; ++i, ++sample_index)
            out[s].samples.push_back(
                make_sample(source, pools[s], config, Rng(config.seed).fork(sample_index)));
    }
    return {std::move(out[0]), std::move(out[1]), std::move(out[2])};
}

// ---------------------------------------------------------------- PGM

void write_pgm(const Image& img, const fs::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write " + file.string());
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
    if (!out) throw IoError("short write to " + file.string());
}

Image read_pgm(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open " + file.string());
    std::string magic;
    in >> magic;
    if (magic != "P5") throw FormatError(file.string() + ": not a binary PGM");
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w < 1 || h < 1 || maxval != 255)
        throw FormatError(file.string() + ": unsupported PGM header");
    in.get(); // single whitespace after header
    Image img(h, w);
    if (!in.read(reinterpret_cast<char*>(img.pixels.data()), img.pixels.size()))
        throw IoError(file.string() + ": truncated pixel data");
    return img;
}

// ---------------------------------------------------------------- dataset files

namespace {

std::string image_filename(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06zu.pgm", index);
    return buf;
}

std::string format_coord(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace

void save_dataset(const Dataset& ds, const fs::path& root) {
    fs::create_directories(root / "images");
    std::ofstream tsv(root / "annotations.tsv", std::ios::binary);
    if (!tsv) throw IoError("cannot write " + (root / "annotations.tsv").string());
    tsv << "#format=1\n";
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const StringSample& s = ds.samples[i];
        const std::string name = image_filename(i);
        write_pgm(s.image, root / "images" / name);
        for (std::size_t d = 0; d < s.annotations.size(); ++d) {
            const DigitAnnotation& a = s.annotations[d];
            tsv << name << '\t' << s.label << '\t' << d << '\t' << a.cls.value << '\t'
                << format_coord(a.box.x_min) << '\t' << format_coord(a.box.y_min) << '\t'
                << format_coord(a.box.x_max) << '\t' << format_coord(a.box.y_max) << '\n';
        }
    }
}

Dataset load_dataset(const fs::path& root) {
    std::ifstream tsv(root / "annotations.tsv", std::ios::binary);
    if (!tsv) throw IoError("cannot open " + (root / "annotations.tsv").string());
    std::string line;
    if (!std::getline(tsv, line) || line.rfind("#format=1", 0) != 0)
        throw FormatError((root / "annotations.tsv").string() + ": missing #format=1 header");

    Dataset ds;
    const std::string base = root.filename().string();
    if (base == "val") ds.split_tag = Split::val;
    else if (base == "test") ds.split_tag = Split::test;

    std::map<std::string, std::size_t> by_file; // filename -> sample index
    int line_no = 1;
    while (std::getline(tsv, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (std::size_t p = 0; p <= line.size(); ++p) {
            if (p == line.size() || line[p] == '\t') {
                f.push_back(line.substr(start, p - start));
                start = p + 1;
            }
        }
        if (f.size() != 8)
            throw FormatError("annotations.tsv line " + std::to_string(line_no) + ": expected 8 fields, got " +
                              std::to_string(f.size()));
        std::size_t sample_idx;
        auto it = by_file.find(f[0]);
        if (it == by_file.end()) {
            sample_idx = ds.samples.size();
            by_file.emplace(f[0], sample_idx);
            StringSample s;
            const fs::path img_path = root / "images" / f[0];
            if (!fs::exists(img_path))
                throw IoError("annotations.tsv line " + std::to_string(line_no) +
                              ": referenced image missing: " + img_path.string());
            s.image = read_pgm(img_path);
            s.label = f[1];
            ds.samples.push_back(std::move(s));
        } else {
            sample_idx = it->second;
            if (ds.samples[sample_idx].label != f[1])
                throw FormatError("annotations.tsv line " + std::to_string(line_no) +
                                  ": label disagrees with earlier rows");
        }
        DigitAnnotation a;
        try {
            const int digit_index = std::stoi(f[2]);
            a.cls.value = std::stoi(f[3]);
            a.box.x_min = std::stod(f[4]);
            a.box.y_min = std::stod(f[5]);
            a.box.x_max = std::stod(f[6]);
            a.box.y_max = std::stod(f[7]);
            if (digit_index != static_cast<int>(ds.samples[sample_idx].annotations.size()))
                throw FormatError("annotations.tsv line " + std::to_string(line_no) +
                                  ": digit_index out of order");
        } catch (const FormatError&) {
            throw;
        } catch (const std::exception&) {
            throw FormatError("annotations.tsv line " + std::to_string(line_no) +
                              ": malformed numeric field");
        }
        if (a.cls.value < 0 || a.cls.value > 9)
            throw FormatError("annotations.tsv line " + std::to_string(line_no) + ": class out of range");
        if (!a.box.valid())
            throw FormatError("annotations.tsv line " + std::to_string(line_no) + ": degenerate box");
        ds.samples[sample_idx].annotations.push_back(a);
    }

    for (const StringSample& s : ds.samples)
        if (s.label.size() != s.annotations.size())
            throw FormatError("sample with label '" + s.label + "' has " +
                              std::to_string(s.annotations.size()) + " annotation rows");
    return ds;
}

// ---------------------------------------------------------------- digit rendering

namespace {

// 5x7 digit skeletons, one bit per cell.
constexpr std::array<std::array<std::uint8_t, 7>, 10> kFont = {{
    {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110}, // 0
    {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110}, // 1
    {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111}, // 2
    {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110}, // 3
    {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010}, // 4
    {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110}, // 5
    {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110}, // 6
    {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000}, // 7
    {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110}, // 8
    {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100}, // 9
}};

constexpr int kCell = 4;
constexpr int kBaseW = 5 * kCell; // 20
constexpr int kBaseH = 7 * kCell; // 28

std::vector<std::uint8_t> rasterize_base(int digit, bool thick) {
    std::vector<std::uint8_t> base(kBaseW * kBaseH, 0);
    for (int r = 0; r < 7; ++r)
        for (int c = 0; c < 5; ++c)
            if (kFont[digit][r] & (1 << (4 - c)))
                for (int y = r * kCell; y < (r + 1) * kCell; ++y)
                    for (int x = c * kCell; x < (c + 1) * kCell; ++x)
                        base[y * kBaseW + x] = 1;
    if (thick) {
        std::vector<std::uint8_t> d = base;
        for (int y = 0; y < kBaseH; ++y)
            for (int x = 0; x < kBaseW; ++x)
                if (base[y * kBaseW + x]) {
                    if (x > 0) d[y * kBaseW + x - 1] = 1;
                    if (x + 1 < kBaseW) d[y * kBaseW + x + 1] = 1;
                    if (y > 0) d[(y - 1) * kBaseW + x] = 1;
                    if (y + 1 < kBaseH) d[(y + 1) * kBaseW + x] = 1;
                }
        base = std::move(d);
    }
    return base;
}

double sample_base(const std::vector<std::uint8_t>& base, double bx, double by) {
    const int x0 = static_cast<int>(std::floor(bx));
    const int y0 = static_cast<int>(std::floor(by));
    const double fx = bx - x0, fy = by - y0;
    auto v = [&](int x, int y) -> double {
        if (x < 0 || y < 0 || x >= kBaseW || y >= kBaseH) return 0.0;
        return base[y * kBaseW + x];
    };
    return v(x0, y0) * (1 - fx) * (1 - fy) + v(x0 + 1, y0) * fx * (1 - fy) +
           v(x0, y0 + 1) * (1 - fx) * fy + v(x0 + 1, y0 + 1) * fx * fy;
}

} // namespace

std::pair<std::vector<Image>, std::vector<DigitClass>> render_digits(int count,
                                                                     std::uint64_t seed) {
    if (count <= 0) throw ArgumentError("render_digits: count must be positive");
    std::vector<Image> images;
    std::vector<DigitClass> labels;
    images.reserve(count);
    labels.reserve(count);
    const Rng master(seed);
    for (int i = 0; i < count; ++i) {
        Rng rng = master.fork(i);
        const int digit = static_cast<int>(rng.uniform_int(0, 9));
        const bool thick = rng.uniform() < 0.4;
        const auto base = rasterize_base(digit, thick);

        const double theta = rng.uniform(-0.14, 0.14);
        const double shear = rng.uniform(-0.22, 0.22);
        const double sy = rng.uniform(0.70, 0.92);
        const double sx = sy * rng.uniform(0.85, 1.15);

        // forward map: out = R(theta) * Shear * Scale * base-centered
        const double ct = std::cos(theta), st = std::sin(theta);
        const double m00 = ct * sx, m01 = (ct * shear - st) * sy;
        const double m10 = st * sx, m11 = (st * shear + ct) * sy;
        const double det = m00 * m11 - m01 * m10;
        const double i00 = m11 / det, i01 = -m01 / det;
        const double i10 = -m10 / det, i11 = m00 / det;

        Image img(28, 28, 255);
        for (int y = 0; y < 28; ++y)
            for (int x = 0; x < 28; ++x) {
                const double u = x - 13.5, v = y - 13.5;
                const double bx = i00 * u + i01 * v + (kBaseW - 1) * 0.5;
                const double by = i10 * u + i11 * v + (kBaseH - 1) * 0.5;
                const double ink = std::min(1.0, 1.6 * sample_base(base, bx, by));
                img.at(y, x) = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - ink)));
            }
        images.push_back(std::move(img));
        labels.push_back(DigitClass{digit});
    }
    return {std::move(images), std::move(labels)};
}

} // namespace numstr
