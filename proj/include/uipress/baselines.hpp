#pragma once

// Inference-time token reduction baselines operating on frozen encoder output.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "uipress/encoder.hpp"

namespace uipress {

inline std::vector<double> token_norms(const Tensor& tokens) {
    const std::size_t n = tokens.dim(0), d = tokens.dim(1);
    std::vector<double> norms(n);
    auto tv = tokens.values();
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += tv[i * d + j] * tv[i * d + j];
        norms[i] = std::sqrt(s);
    }
    return norms;
}

// Keeps the K largest-norm tokens in their original order; ties favour the lower index.
inline Tensor baseline_topk_norm(const VisualTokens& v, std::size_t k) {
    const std::size_t n = v.count();
    if (k == 0 || k > n) {
        throw DimensionError("baseline_topk_norm: K=" + std::to_string(k) + " outside [1, N=" + std::to_string(n) + "]");
    }
    const auto norms = token_norms(v.tokens);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return select_rows(v.tokens, order);
}

// Zeroes the floor(fraction * N) lowest-norm tokens; sequence length is unchanged.
inline VisualTokens baseline_feature_zero(const VisualTokens& v, double fraction) {
    if (!(fraction >= 0.0 && fraction < 1.0)) {
        throw ConfigError("baseline_feature_zero: fraction must lie in [0, 1)");
    }
    const std::size_t n = v.count(), d = v.dim();
    const auto zeroed = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
    const auto norms = token_norms(v.tokens);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] < norms[b]; });
    Tensor out = v.tokens.clone();
    auto ov = out.values();
    for (std::size_t i = 0; i < zeroed; ++i) {
        std::fill_n(ov.begin() + static_cast<std::ptrdiff_t>(order[i] * d), d, 0.0);
    }
    return {out, v.grid};
}

}  // namespace uipress
