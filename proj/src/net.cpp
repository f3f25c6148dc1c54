#include "numstr/net.hpp"

#include <bit>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace numstr {

namespace {

constexpr double kLeakySlope = 0.1;

void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, 1.0f, a, lda, b, ldb, beta, c, ldc);
}
void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, 1.0, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
void im2col3x3(const Tensor3<T>& in, std::vector<T>& cols) {
    const int hw = in.h * in.w;
    cols.assign(static_cast<std::size_t>(in.c) * 9 * hw, T(0));
    for (int c = 0; c < in.c; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                T* row = cols.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
                for (int y = 0; y < in.h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= in.h) continue;
                    const int x0 = std::max(0, 1 - kx);
                    const int x1 = std::min(in.w, in.w + 1 - kx);
                    const T* src = &in.v[(static_cast<std::size_t>(c) * in.h + sy) * in.w];
                    for (int x = x0; x < x1; ++x) row[y * in.w + x] = src[x + kx - 1];
                }
            }
}

template <typename T>
void col2im3x3(const std::vector<T>& cols, Tensor3<T>& out) {
    const int hw = out.h * out.w;
    std::fill(out.v.begin(), out.v.end(), T(0));
    for (int c = 0; c < out.c; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const T* row = cols.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
                for (int y = 0; y < out.h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= out.h) continue;
                    const int x0 = std::max(0, 1 - kx);
                    const int x1 = std::min(out.w, out.w + 1 - kx);
                    T* dst = &out.v[(static_cast<std::size_t>(c) * out.h + sy) * out.w];
                    for (int x = x0; x < x1; ++x) dst[x + kx - 1] += row[y * out.w + x];
                }
            }
}

} // namespace

NetSpec NetSpec::miniature(int head_channels, int width_scale) {
    NetSpec s;
    s.in_channels = 1;
    const int ws = width_scale;
    s.layers = {
        {LayerKind::conv3x3, ws},     {LayerKind::maxpool, 0},
        {LayerKind::conv3x3, 2 * ws}, {LayerKind::maxpool, 0},
        {LayerKind::conv3x3, 4 * ws}, {LayerKind::maxpool, 0},
        {LayerKind::conv3x3, 4 * ws}, {LayerKind::maxpool, 0},
        {LayerKind::conv3x3, 8 * ws}, {LayerKind::maxpool, 0},
        {LayerKind::conv3x3, 8 * ws}, {LayerKind::conv1x1, head_channels},
    };
    return s;
}

void NetSpec::validate() const {
    if (in_channels < 1) throw ShapeError("NetSpec: in_channels must be >= 1");
    if (layers.empty()) throw ShapeError("NetSpec: no layers");
    for (const LayerSpec& l : layers)
        if (l.kind != LayerKind::maxpool && l.out_channels < 1)
            throw ShapeError("NetSpec: conv layer needs positive out_channels");
}

int NetSpec::stride() const {
    int s = 1;
    for (const LayerSpec& l : layers)
        if (l.kind == LayerKind::maxpool) s *= 2;
    return s;
}

int NetSpec::out_channels() const {
    int c = in_channels;
    for (const LayerSpec& l : layers)
        if (l.kind != LayerKind::maxpool) c = l.out_channels;
    return c;
}

std::size_t NetSpec::param_count() const {
    std::size_t n = 0;
    int c = in_channels;
    for (const LayerSpec& l : layers) {
        if (l.kind == LayerKind::maxpool) continue;
        const int k = l.kind == LayerKind::conv3x3 ? 9 : 1;
        n += static_cast<std::size_t>(l.out_channels) * c * k + l.out_channels;
        c = l.out_channels;
    }
    return n;
}

void SgdConfig::validate() const {
    if (learning_rate <= 0 || final_rate <= 0 || weight_decay < 0 || batch_size < 1)
        throw ConfigError("SgdConfig: rates and batch size must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("SgdConfig: momentum must be in [0,1)");
}

template <typename T>
Params<T> zeros_like(const NetSpec& spec) {
    Params<T> p;
    p.weights.resize(spec.layers.size());
    p.biases.resize(spec.layers.size());
    int c = spec.in_channels;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (l.kind == LayerKind::maxpool) continue;
        const int k = l.kind == LayerKind::conv3x3 ? 9 : 1;
        p.weights[i].assign(static_cast<std::size_t>(l.out_channels) * c * k, T(0));
        p.biases[i].assign(l.out_channels, T(0));
        c = l.out_channels;
    }
    return p;
}

template <typename T>
Params<T> init_params(const NetSpec& spec, std::uint64_t seed) {
    spec.validate();
    Params<T> p = zeros_like<T>(spec);
    Rng rng(seed);
    int c = spec.in_channels;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (l.kind == LayerKind::maxpool) continue;
        const int k = l.kind == LayerKind::conv3x3 ? 9 : 1;
        const double bound = std::sqrt(6.0 / (static_cast<double>(c) * k));
        for (T& w : p.weights[i]) w = static_cast<T>(rng.uniform(-bound, bound));
        c = l.out_channels;
    }
    return p;
}

template <typename T>
Tensor3<T> forward(const NetSpec& spec, const Params<T>& params, const Tensor3<T>& input,
                   ForwardCache<T>* cache) {
    spec.validate();
    if (input.c != spec.in_channels)
        throw ShapeError("forward: input has " + std::to_string(input.c) + " channels, spec wants " +
                         std::to_string(spec.in_channels));
    const int stride = spec.stride();
    if (input.h % stride != 0 || input.w % stride != 0)
        throw ShapeError("forward: input " + std::to_string(input.h) + "x" + std::to_string(input.w) +
                         " not divisible by stride " + std::to_string(stride));

    if (cache) {
        cache->inputs.assign(spec.layers.size(), {});
        cache->preact.assign(spec.layers.size(), {});
        cache->argmax.assign(spec.layers.size(), {});
    }

    Tensor3<T> cur = input;
    std::vector<T> cols;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (cache) cache->inputs[i] = cur;
        if (l.kind == LayerKind::maxpool) {
            Tensor3<T> out(cur.c, cur.h / 2, cur.w / 2);
            std::vector<int> arg(out.size());
            for (int c = 0; c < cur.c; ++c)
                for (int y = 0; y < out.h; ++y)
                    for (int x = 0; x < out.w; ++x) {
                        int best_idx = (c * cur.h + 2 * y) * cur.w + 2 * x;
                        T best = cur.v[best_idx];
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const int idx = (c * cur.h + 2 * y + dy) * cur.w + 2 * x + dx;
                                if (cur.v[idx] > best) { // ties keep the lowest index
                                    best = cur.v[idx];
                                    best_idx = idx;
                                }
                            }
                        out.at(c, y, x) = best;
                        arg[(static_cast<std::size_t>(c) * out.h + y) * out.w + x] = best_idx;
                    }
            if (cache) cache->argmax[i] = std::move(arg);
            cur = std::move(out);
        } else {
            const int hw = cur.h * cur.w;
            Tensor3<T> out(l.out_channels, cur.h, cur.w);
            if (l.kind == LayerKind::conv3x3) {
                im2col3x3(cur, cols);
                gemm(CblasNoTrans, CblasNoTrans, l.out_channels, hw, cur.c * 9,
                     params.weights[i].data(), cur.c * 9, cols.data(), hw, T(0), out.v.data(), hw);
            } else {
                gemm(CblasNoTrans, CblasNoTrans, l.out_channels, hw, cur.c,
                     params.weights[i].data(), cur.c, cur.v.data(), hw, T(0), out.v.data(), hw);
            }
            for (int oc = 0; oc < l.out_channels; ++oc) {
                const T b = params.biases[i][oc];
                T* row = out.v.data() + static_cast<std::size_t>(oc) * hw;
                for (int j = 0; j < hw; ++j) row[j] += b;
            }
            if (cache) cache->preact[i] = out;
            if (l.kind == LayerKind::conv3x3) {
                for (T& v : out.v)
                    if (v < T(0)) v *= static_cast<T>(kLeakySlope);
            }
            cur = std::move(out);
        }
    }
    if (cache) cache->output = cur;
    return cur;
}

template <typename T>
void backward(const NetSpec& spec, const Params<T>& params, const ForwardCache<T>& cache,
              const Tensor3<T>& output_gradient, Params<T>& grads, Tensor3<T>* input_gradient) {
    if (cache.inputs.size() != spec.layers.size())
        throw ArgumentError("backward: cache does not match spec (run forward with a cache first)");
    if (output_gradient.c != cache.output.c || output_gradient.h != cache.output.h ||
        output_gradient.w != cache.output.w)
        throw ShapeError("backward: output gradient shape mismatch");

    Tensor3<T> dcur = output_gradient;
    std::vector<T> cols, dcols;
    for (std::size_t ri = spec.layers.size(); ri-- > 0;) {
        const LayerSpec& l = spec.layers[ri];
        const Tensor3<T>& in = cache.inputs[ri];
        if (l.kind == LayerKind::maxpool) {
            Tensor3<T> din(in.c, in.h, in.w);
            const auto& arg = cache.argmax[ri];
            for (std::size_t j = 0; j < dcur.size(); ++j) din.v[arg[j]] += dcur.v[j];
            dcur = std::move(din);
        } else {
            const int hw = in.h * in.w;
            if (l.kind == LayerKind::conv3x3) {
                // leaky derivative w.r.t. pre-activation
                const Tensor3<T>& pre = cache.preact[ri];
                for (std::size_t j = 0; j < dcur.size(); ++j)
                    if (pre.v[j] < T(0)) dcur.v[j] *= static_cast<T>(kLeakySlope);
            }
            for (int oc = 0; oc < l.out_channels; ++oc) {
                T s = T(0);
                const T* row = dcur.v.data() + static_cast<std::size_t>(oc) * hw;
                for (int j = 0; j < hw; ++j) s += row[j];
                grads.biases[ri][oc] += s;
            }
            if (l.kind == LayerKind::conv3x3) {
                im2col3x3(in, cols);
                gemm(CblasNoTrans, CblasTrans, l.out_channels, in.c * 9, hw, dcur.v.data(), hw,
                     cols.data(), hw, T(1), grads.weights[ri].data(), in.c * 9);
                if (ri > 0 || input_gradient) {
                    dcols.assign(static_cast<std::size_t>(in.c) * 9 * hw, T(0));
                    gemm(CblasTrans, CblasNoTrans, in.c * 9, hw, l.out_channels,
                         params.weights[ri].data(), in.c * 9, dcur.v.data(), hw, T(0),
                         dcols.data(), hw);
                    Tensor3<T> din(in.c, in.h, in.w);
                    col2im3x3(dcols, din);
                    dcur = std::move(din);
                }
            } else {
                gemm(CblasNoTrans, CblasTrans, l.out_channels, in.c, hw, dcur.v.data(), hw,
                     in.v.data(), hw, T(1), grads.weights[ri].data(), in.c);
                if (ri > 0 || input_gradient) {
                    Tensor3<T> din(in.c, in.h, in.w);
                    gemm(CblasTrans, CblasNoTrans, in.c, hw, l.out_channels,
                         params.weights[ri].data(), in.c, dcur.v.data(), hw, T(0), din.v.data(),
                         hw);
                    dcur = std::move(din);
                }
            }
        }
    }
    if (input_gradient) *input_gradient = std::move(dcur);
}

template <typename T>
void sgd_step(const NetSpec& spec, Params<T>& params, const Params<T>& grads, Params<T>& velocity,
              double lr, double momentum, double weight_decay) {
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        for (T g : grads.weights[i])
            if (!std::isfinite(static_cast<double>(g)))
                throw TrainingError("non-finite weight gradient in layer " + std::to_string(i));
        for (T g : grads.biases[i])
            if (!std::isfinite(static_cast<double>(g)))
                throw TrainingError("non-finite bias gradient in layer " + std::to_string(i));
    }
    auto update = [&](std::vector<T>& p, const std::vector<T>& g, std::vector<T>& v) {
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = static_cast<T>(momentum * v[j] - lr * (g[j] + weight_decay * p[j]));
            p[j] += v[j];
        }
    };
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        update(params.weights[i], grads.weights[i], velocity.weights[i]);
        update(params.biases[i], grads.biases[i], velocity.biases[i]);
    }
}

// ------------------------------------------------------------- checkpoint

namespace {
constexpr char kMagic[4] = {'N', 'S', 'R', 'M'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}
std::uint32_t read_u32(std::istream& in, const char* what) {
    std::uint32_t v;
    if (!in.read(reinterpret_cast<char*>(&v), 4))
        throw FormatError(std::string("truncated checkpoint while reading ") + what);
    return v;
}
} // namespace

void save_params(const NetSpec& spec, const Params<float>& params,
                 const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write " + file.string());
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u32(out, static_cast<std::uint32_t>(spec.in_channels));
    write_u32(out, static_cast<std::uint32_t>(spec.layers.size()));
    for (const LayerSpec& l : spec.layers) {
        write_u32(out, static_cast<std::uint32_t>(l.kind));
        write_u32(out, static_cast<std::uint32_t>(l.out_channels));
    }
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        out.write(reinterpret_cast<const char*>(params.weights[i].data()),
                  params.weights[i].size() * sizeof(float));
        out.write(reinterpret_cast<const char*>(params.biases[i].data()),
                  params.biases[i].size() * sizeof(float));
    }
    if (!out) throw IoError("short write to " + file.string());
}

std::pair<NetSpec, Params<float>> load_params(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open " + file.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError(file.string() + ": not an NSRM checkpoint");
    const std::uint32_t version = read_u32(in, "version");
    if (version != kVersion)
        throw FormatError(file.string() + ": unsupported checkpoint version " +
                          std::to_string(version));
    NetSpec spec;
    spec.in_channels = static_cast<int>(read_u32(in, "in_channels"));
    const std::uint32_t n_layers = read_u32(in, "layer count");
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        const std::uint32_t kind = read_u32(in, "layer kind");
        const std::uint32_t oc = read_u32(in, "layer channels");
        if (kind > 2) throw FormatError(file.string() + ": unknown layer kind");
        spec.layers.push_back({static_cast<LayerKind>(kind), static_cast<int>(oc)});
    }
    spec.validate();
    Params<float> params = zeros_like<float>(spec);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (!in.read(reinterpret_cast<char*>(params.weights[i].data()),
                     params.weights[i].size() * sizeof(float)) ||
            !in.read(reinterpret_cast<char*>(params.biases[i].data()),
                     params.biases[i].size() * sizeof(float)))
            throw FormatError(file.string() + ": truncated parameter payload");
    }
    return {spec, std::move(params)};
}

// explicit instantiations: float for training, double for gradient checks
template struct Tensor3<float>;
template struct Tensor3<double>;
template Params<float> zeros_like<float>(const NetSpec&);
template Params<double> zeros_like<double>(const NetSpec&);
template Params<float> init_params<float>(const NetSpec&, std::uint64_t);
template Params<double> init_params<double>(const NetSpec&, std::uint64_t);
template Tensor3<float> forward<float>(const NetSpec&, const Params<float>&, const Tensor3<float>&,
                                       ForwardCache<float>*);
template Tensor3<double> forward<double>(const NetSpec&, const Params<double>&,
                                         const Tensor3<double>&, ForwardCache<double>*);
template void backward<float>(const NetSpec&, const Params<float>&, const ForwardCache<float>&,
                              const Tensor3<float>&, Params<float>&, Tensor3<float>*);
template void backward<double>(const NetSpec&, const Params<double>&, const ForwardCache<double>&,
                               const Tensor3<double>&, Params<double>&, Tensor3<double>*);
template void sgd_step<float>(const NetSpec&, Params<float>&, const Params<float>&, Params<float>&,
                              double, double, double);
template void sgd_step<double>(const NetSpec&, Params<double>&, const Params<double>&,
                               Params<double>&, double, double, double);

} // namespace numstr
