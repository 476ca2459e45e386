#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "uipress/uipress.hpp"

namespace uipress::testing {

// |a - n| / max(|a|, |n|, floor): relative for gradients of ordinary size,
// absolute below `floor` where central differences are dominated by rounding.
inline double rel_error(double a, double n, double floor = 1e-3) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

// Compares one backward pass against central differences (step h) for every
// entry of every tensor in `inputs`. `loss` must rebuild the graph from the
// current input values on each call.
inline GradCheck check_gradients(const std::vector<Tensor>& inputs, const std::function<Tensor()>& loss,
                                 double h = 1e-5, std::size_t max_entries_per_input = 0) {
    for (auto t : inputs) t.zero_grad();
    active_tape().clear();
    backward(loss());
    std::vector<std::vector<double>> analytic;
    for (const auto& t : inputs) analytic.emplace_back(t.grads().begin(), t.grads().end());

    GradCheck out;
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor t = inputs[k];
        auto v = t.values();
        const std::size_t n = max_entries_per_input ? std::min(max_entries_per_input, v.size()) : v.size();
        const std::size_t stride = std::max<std::size_t>(1, v.size() / n);
        for (std::size_t i = 0; i < v.size(); i += stride) {
            const double orig = v[i];
            v[i] = orig + h;
            const double up = loss().item();
            v[i] = orig - h;
            const double down = loss().item();
            v[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            out.max_rel_error = std::max(out.max_rel_error, rel_error(analytic[k][i], numeric));
            ++out.checked;
        }
    }
    return out;
}

// Random fixed projection so that sum(out * R) has informative gradients.
inline Tensor project(const Tensor& out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Tensor r = Tensor::normal(out.shape(), 1.0, rng);
    return sum(mul(out, r));
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double stddev = 1.0) {
    return Tensor::normal(std::move(shape), stddev, rng, requires_grad);
}

struct ToyModel {
    FrozenEncoder encoder;
    Decoder decoder;
};

// Tiny encoder + decoder pair shared by several tests (32x32 pages, patch 2,
// D=32, vocabulary of the markup language).
inline ToyModel toy_model(std::size_t dim = 32, std::uint64_t seed = 3, std::size_t max_seq = 128) {
    DecoderConfig dc;
    dc.dim = dim;
    dc.layers = 2;
    dc.heads = 4;
    dc.vocab_size = vocab::kSize;
    dc.max_seq_len = max_seq;
    return {init_frozen_encoder(seed, 2, dim, {16, 16}), Decoder(dc, seed + 1)};
}

inline PipelineConfig toy_pipeline_config(std::size_t k = 16) {
    PipelineConfig c;
    c.token_budget = k;
    c.compressor.groups = 8;
    c.compressor.heads = 8;
    return c;
}

}  // namespace uipress::testing
