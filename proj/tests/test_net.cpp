#include "numstr/net.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace numstr;

namespace {

Tensor3<double> random_tensor(int c, int h, int w, Rng& rng) {
    Tensor3<double> t(c, h, w);
    for (auto& v : t.v) v = rng.uniform(-1, 1);
    return t;
}

Params<double> random_params(const NetSpec& spec, std::uint64_t seed) {
    Params<double> p = init_params<double>(spec, seed);
    Rng rng(seed + 1);
    for (auto& b : p.biases)
        for (auto& v : b) v = rng.uniform(-0.3, 0.3);
    return p;
}

/// Scalar objective: dot(forward(params, input), probe).
double objective(const NetSpec& spec, const Params<double>& params, const Tensor3<double>& input,
                 const Tensor3<double>& probe) {
    const Tensor3<double> out = forward(spec, params, input);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out.v[i] * probe.v[i];
    return s;
}

struct FlatParam {
    std::size_t layer;
    bool bias;
    std::size_t index;
};

std::vector<FlatParam> enumerate_params(const Params<double>& p) {
    std::vector<FlatParam> flat;
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        for (std::size_t i = 0; i < p.weights[l].size(); ++i) flat.push_back({l, false, i});
        for (std::size_t i = 0; i < p.biases[l].size(); ++i) flat.push_back({l, true, i});
    }
    return flat;
}

double& param_ref(Params<double>& p, const FlatParam& f) {
    return f.bias ? p.biases[f.layer][f.index] : p.weights[f.layer][f.index];
}

/// Central finite-difference check over `probes` randomly chosen
/// parameters; returns the worst relative error.
double fd_check(const NetSpec& spec, Params<double> params, const Tensor3<double>& input,
                std::uint64_t seed, int probes) {
    Rng rng(seed);
    Tensor3<double> probe = random_tensor(spec.out_channels(), input.h / spec.stride(),
                                          input.w / spec.stride(), rng);

    ForwardCache<double> cache;
    forward(spec, params, input, &cache);
    Params<double> grads = zeros_like<double>(spec);
    backward(spec, params, cache, probe, grads);

    const auto flat = enumerate_params(params);
    REQUIRE(!flat.empty());
    const double eps = 1e-4;
    double worst = 0;
    for (int k = 0; k < probes; ++k) {
        const FlatParam& f = flat[rng.uniform_int(0, static_cast<std::int64_t>(flat.size()) - 1)];
        double& p = param_ref(params, f);
        const double saved = p;
        p = saved + eps;
        const double hi = objective(spec, params, input, probe);
        p = saved - eps;
        const double lo = objective(spec, params, input, probe);
        p = saved;
        const double fd = (hi - lo) / (2 * eps);
        const double an = f.bias ? grads.biases[f.layer][f.index] : grads.weights[f.layer][f.index];
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
        worst = std::max(worst, rel);
    }
    return worst;
}

NetSpec two_layer() {
    NetSpec s;
    s.in_channels = 2;
    s.layers = {{LayerKind::conv3x3, 3}, {LayerKind::maxpool, 0}, {LayerKind::conv1x1, 4}};
    return s;
}

} // namespace

TEST_SUITE_BEGIN("net");

TEST_CASE("forward stride arithmetic") {
    const NetSpec spec = NetSpec::miniature(45);
    CHECK(spec.stride() == 32);
    Params<float> p = init_params<float>(spec, 0);
    const Tensor3<float> out = forward(spec, p, Tensor3<float>(1, 128, 256));
    CHECK(out.c == 45);
    CHECK(out.h == 4);
    CHECK(out.w == 8);
}

TEST_CASE("all-zero parameters give all-zero output") {
    const NetSpec spec = NetSpec::miniature(45);
    Params<float> p = zeros_like<float>(spec);
    Tensor3<float> input(1, 96, 192);
    Rng rng(1);
    for (auto& v : input.v) v = static_cast<float>(rng.uniform());
    const Tensor3<float> out = forward(spec, p, input);
    for (float v : out.v) CHECK(v == 0.0f);
}

TEST_CASE("indivisible input dims are rejected") {
    const NetSpec spec = NetSpec::miniature(45);
    Params<float> p = zeros_like<float>(spec);
    CHECK_THROWS_AS(forward(spec, p, Tensor3<float>(1, 127, 256)), ShapeError);
    CHECK_THROWS_AS(forward(spec, p, Tensor3<float>(2, 128, 256)), ShapeError);
}

TEST_CASE("gradient check: conv3x3 alone") {
    NetSpec spec;
    spec.in_channels = 2;
    spec.layers = {{LayerKind::conv3x3, 3}};
    Rng rng(0);
    const Tensor3<double> input = random_tensor(2, 6, 8, rng);
    CHECK(fd_check(spec, random_params(spec, 0), input, 0, 60) <= 1e-4);
}

TEST_CASE("gradient check: conv1x1 alone") {
    NetSpec spec;
    spec.in_channels = 3;
    spec.layers = {{LayerKind::conv1x1, 5}};
    Rng rng(2);
    const Tensor3<double> input = random_tensor(3, 4, 4, rng);
    CHECK(fd_check(spec, random_params(spec, 2), input, 2, 60) <= 1e-4);
}

TEST_CASE("gradient check: maxpool routes to the argmax only") {
    NetSpec spec;
    spec.in_channels = 1;
    spec.layers = {{LayerKind::maxpool, 0}};
    Params<double> p = zeros_like<double>(spec);
    Tensor3<double> input(1, 2, 2);
    input.v = {3.0, 1.0, 2.0, 0.5};
    ForwardCache<double> cache;
    const Tensor3<double> out = forward(spec, p, input, &cache);
    REQUIRE(out.size() == 1);
    CHECK(out.v[0] == 3.0);
    Tensor3<double> dout(1, 1, 1);
    dout.v[0] = 7.0;
    Params<double> grads = zeros_like<double>(spec);
    Tensor3<double> din;
    backward(spec, p, cache, dout, grads, &din);
    CHECK(din.v == std::vector<double>{7.0, 0.0, 0.0, 0.0});
}

TEST_CASE("maxpool ties go to the lowest linear index") {
    NetSpec spec;
    spec.in_channels = 1;
    spec.layers = {{LayerKind::maxpool, 0}};
    Params<double> p = zeros_like<double>(spec);
    Tensor3<double> input(1, 2, 2, 5.0); // all equal
    ForwardCache<double> cache;
    forward(spec, p, input, &cache);
    Tensor3<double> dout(1, 1, 1, 1.0);
    Params<double> grads = zeros_like<double>(spec);
    Tensor3<double> din;
    backward(spec, p, cache, dout, grads, &din);
    CHECK(din.v == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("gradient check: two-layer composition, 100+ probes") {
    const NetSpec spec = two_layer();
    Rng rng(7);
    const Tensor3<double> input = random_tensor(2, 8, 12, rng);
    CHECK(fd_check(spec, random_params(spec, 7), input, 7, 120) <= 1e-4);
}

TEST_CASE("zero output gradient gives zero parameter gradients") {
    const NetSpec spec = two_layer();
    Params<double> p = random_params(spec, 3);
    Rng rng(3);
    const Tensor3<double> input = random_tensor(2, 8, 12, rng);
    ForwardCache<double> cache;
    forward(spec, p, input, &cache);
    Params<double> grads = zeros_like<double>(spec);
    backward(spec, p, cache, Tensor3<double>(4, 4, 6), grads);
    for (const auto& w : grads.weights)
        for (double v : w) CHECK(v == 0.0);
    for (const auto& b : grads.biases)
        for (double v : b) CHECK(v == 0.0);
}

TEST_CASE("leaky negative side scales upstream by 0.1") {
    // single 3x3 conv, one channel, weight 1 at center: preact = input
    NetSpec spec;
    spec.in_channels = 1;
    spec.layers = {{LayerKind::conv3x3, 1}};
    Params<double> p = zeros_like<double>(spec);
    p.weights[0][4] = 1.0; // center tap
    Tensor3<double> input(1, 1, 1);
    input.v[0] = -2.0;
    ForwardCache<double> cache;
    const Tensor3<double> out = forward(spec, p, input, &cache);
    CHECK(out.v[0] == doctest::Approx(-0.2));
    Tensor3<double> dout(1, 1, 1, 1.0);
    Params<double> grads = zeros_like<double>(spec);
    Tensor3<double> din;
    backward(spec, p, cache, dout, grads, &din);
    CHECK(din.v[0] == doctest::Approx(0.1));
}

TEST_CASE("backward rejects a stale cache") {
    const NetSpec spec = two_layer();
    Params<double> p = random_params(spec, 1);
    ForwardCache<double> cache; // never filled
    Params<double> grads = zeros_like<double>(spec);
    CHECK_THROWS_AS(backward(spec, p, cache, Tensor3<double>(4, 4, 6), grads), ArgumentError);
}

TEST_CASE("sgd_step recurrence") {
    NetSpec spec;
    spec.in_channels = 1;
    spec.layers = {{LayerKind::conv1x1, 1}};
    auto scalar_step = [&](double w0, double grad, double lr, double momentum, double decay,
                           int steps) {
        Params<double> p = zeros_like<double>(spec);
        Params<double> g = zeros_like<double>(spec);
        Params<double> v = zeros_like<double>(spec);
        p.weights[0][0] = w0;
        g.weights[0][0] = grad;
        for (int i = 0; i < steps; ++i) sgd_step(spec, p, g, v, lr, momentum, decay);
        return std::pair{p.weights[0][0], v.weights[0][0]};
    };
    CHECK(scalar_step(1, 1, 0.1, 0, 0, 1).first == doctest::Approx(0.9));
    const auto [w2, v2] = scalar_step(1, 1, 0.1, 0.9, 0, 2);
    CHECK(v2 == doctest::Approx(-0.19));
    CHECK(w2 == doctest::Approx(0.71));
    CHECK(scalar_step(1, 0, 0.1, 0, 5e-4, 1).first == doctest::Approx(0.99995));
}

TEST_CASE("sgd_step aborts on non-finite gradients") {
    NetSpec spec;
    spec.in_channels = 1;
    spec.layers = {{LayerKind::conv1x1, 1}};
    Params<double> p = zeros_like<double>(spec);
    Params<double> g = zeros_like<double>(spec);
    Params<double> v = zeros_like<double>(spec);
    p.weights[0][0] = 1.0;
    g.weights[0][0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(sgd_step(spec, p, g, v, 0.1, 0.9, 0), TrainingError);
    CHECK(p.weights[0][0] == 1.0); // untouched
}

TEST_CASE("parameter count and checkpoint roundtrip") {
    const NetSpec spec = NetSpec::miniature(45);
    Params<float> p = init_params<float>(spec, 123);
    std::size_t total = 0;
    for (const auto& w : p.weights) total += w.size();
    for (const auto& b : p.biases) total += b.size();
    CHECK(total == spec.param_count());

    const auto file = std::filesystem::temp_directory_path() / "numstr_ckpt_test.bin";
    save_params(spec, p, file);
    auto [spec2, p2] = load_params(file);
    CHECK(spec2.in_channels == spec.in_channels);
    REQUIRE(spec2.layers.size() == spec.layers.size());
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        CHECK(spec2.layers[i].kind == spec.layers[i].kind);
        CHECK(p2.weights[i] == p.weights[i]);
        CHECK(p2.biases[i] == p.biases[i]);
    }

    // forward outputs are bit-exact after the roundtrip
    Tensor3<float> input(1, 64, 64);
    Rng rng(4);
    for (auto& v : input.v) v = static_cast<float>(rng.uniform());
    const Tensor3<float> a = forward(spec, p, input);
    const Tensor3<float> b = forward(spec2, p2, input);
    CHECK(a.v == b.v);
}

TEST_CASE("checkpoint rejects garbage") {
    const auto file = std::filesystem::temp_directory_path() / "numstr_ckpt_bad.bin";
    {
        std::ofstream out(file, std::ios::binary);
        out << "not a checkpoint at all";
    }
    CHECK_THROWS_AS(load_params(file), FormatError);
}

TEST_SUITE_END();
