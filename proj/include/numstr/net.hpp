#pragma once

#include "numstr/core.hpp"

#include <filesystem>

namespace numstr {

/// Dense CHW tensor. float in training, double in gradient-check tests.
template <typename T>
struct Tensor3 {
    int c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor3() = default;
    Tensor3(int c_, int h_, int w_, T fill = T(0))
        : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, fill) {}

    T& at(int ch, int y, int x) { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    T at(int ch, int y, int x) const { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    std::size_t size() const { return v.size(); }
};

enum class LayerKind : std::uint32_t {
    conv3x3 = 0, // stride 1, pad 1, leaky-ReLU slope 0.1
    maxpool = 1, // 2x2, stride 2
    conv1x1 = 2, // linear head
};

struct LayerSpec {
    LayerKind kind;
    int out_channels = 0; // ignored for maxpool
};

struct NetSpec {
    int in_channels = 1;
    std::vector<LayerSpec> layers;

    /// Channel progression 16-32-64-64-128-128 with five 2x2 pools and a
    /// 1x1 linear head (stride 32).
    static NetSpec miniature(int head_channels, int width_scale = 16);

    void validate() const;
    int stride() const;       // product of pool factors
    int out_channels() const; // channels after the last layer
    std::size_t param_count() const;
};

/// Per-conv-layer weights and biases; pool slots stay empty so indices
/// line up with NetSpec.layers.
template <typename T>
struct Params {
    std::vector<std::vector<T>> weights;
    std::vector<std::vector<T>> biases;

    void fill(T v) {
        for (auto& w : weights) std::fill(w.begin(), w.end(), v);
        for (auto& b : biases) std::fill(b.begin(), b.end(), v);
    }
};

struct SgdConfig {
    double learning_rate = 1e-3;
    double final_rate = 5e-4;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 64;

    void validate() const;
};

template <typename T>
struct ForwardCache {
    std::vector<Tensor3<T>> inputs;         // input to each layer
    std::vector<Tensor3<T>> preact;         // conv pre-activation (for leaky mask)
    std::vector<std::vector<int>> argmax;   // pool winner indices (lowest on ties)
    Tensor3<T> output;
};

template <typename T>
Params<T> init_params(const NetSpec& spec, std::uint64_t seed);

template <typename T>
Params<T> zeros_like(const NetSpec& spec);

/// Run the network. Input spatial dims must be divisible by the spec
/// stride. Pass a cache to enable backward().
template <typename T>
Tensor3<T> forward(const NetSpec& spec, const Params<T>& params, const Tensor3<T>& input,
                   ForwardCache<T>* cache = nullptr);

/// Exact gradients of forward() w.r.t. parameters (accumulated into
/// `grads`) and optionally the input.
template <typename T>
void backward(const NetSpec& spec, const Params<T>& params, const ForwardCache<T>& cache,
              const Tensor3<T>& output_gradient, Params<T>& grads,
              Tensor3<T>* input_gradient = nullptr);

/// v <- momentum*v - lr*(grad + weight_decay*param); param <- param + v.
/// Throws TrainingError on non-finite gradients before touching params.
template <typename T>
void sgd_step(const NetSpec& spec, Params<T>& params, const Params<T>& grads,
              Params<T>& velocity, double lr, double momentum, double weight_decay);

// Checkpoint: magic "NSRM", u32 version, NetSpec descriptor, then f32
// parameter values (little-endian) in layer order, weights before biases.
void save_params(const NetSpec& spec, const Params<float>& params,
                 const std::filesystem::path& file);
std::pair<NetSpec, Params<float>> load_params(const std::filesystem::path& file);

} // namespace numstr
