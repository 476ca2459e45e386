#pragma once

// Optical compressor: N x D visual tokens -> K x D tokens.
//
//   tokens_to_grid -> conv block x2 -> element mask reweighting
//                  -> adaptive average pool to the K grid -> refinement layer
//
// Each conv block is GELU(GroupNorm(pointwise(depthwise_3x3_s2(F)))).

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "uipress/encoder.hpp"
#include "uipress/tensor.hpp"
#include "uipress/types.hpp"

namespace uipress {

// Per-category mask weight; uncovered cells take the background weight.
struct CategoryWeights {
    std::array<double, 5> by_category{1.0, 1.0, 0.5, 0.5, 0.2};

    double operator()(ElementCategory c) const { return by_category.at(static_cast<std::size_t>(c)); }
    double background() const { return (*this)(ElementCategory::background); }

    static CategoryWeights uniform(double w = 1.0) { return {{w, w, w, w, w}}; }

    void validate() const {
        for (double w : by_category) {
            if (!(w >= 0.0 && w <= 1.0)) {
                throw ConfigError("category weights must lie in [0, 1]");
            }
        }
    }
};

enum class ConvKind { depthwise_separable, standard };
enum class Mode { train, eval };

// Maps a token budget to its pooled grid. Square budgets give sqrt(K) x sqrt(K);
// with allow_rectangular, K = 2 s^2 maps to s x 2s.
inline GridDims pool_grid_for_budget(std::size_t k, bool allow_rectangular = false) {
    const auto root = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(k))));
    if (k > 0 && root * root == k) {
        return {root, root};
    }
    if (allow_rectangular && k > 0 && k % 2 == 0) {
        const auto half = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(k / 2))));
        if (half * half * 2 == k) {
            return {half, 2 * half};
        }
    }
    throw ConfigError("K must be a perfect square (got K=" + std::to_string(k) + ")");
}

struct CompressorConfig {
    std::size_t dim = 64;
    std::size_t token_budget = 256;
    GridDims pool_grid{16, 16};
    std::size_t conv_blocks = 2;
    std::size_t groups = 32;
    std::size_t heads = 8;
    std::size_t ffn_ratio = 2;
    double dropout = 0.1;
    CategoryWeights weights;
    ConvKind conv = ConvKind::depthwise_separable;
    bool refine = true;

    // Sets K and derives the pool grid.
    void set_budget(std::size_t k, bool allow_rectangular = false) {
        pool_grid = pool_grid_for_budget(k, allow_rectangular);
        token_budget = k;
    }

    void validate() const {
        if (pool_grid.cells() != token_budget) {
            throw ConfigError("compressor: pool grid " + std::to_string(pool_grid.h) + "x" +
                              std::to_string(pool_grid.w) + " does not hold K=" + std::to_string(token_budget));
        }
        if (dim == 0 || groups == 0 || dim % groups != 0) {
            throw ConfigError("compressor: D=" + std::to_string(dim) + " not divisible by " +
                              std::to_string(groups) + " GroupNorm groups");
        }
        if (heads == 0 || dim % heads != 0) {
            throw ConfigError("compressor: D=" + std::to_string(dim) + " not divisible by " +
                              std::to_string(heads) + " heads");
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ConfigError("compressor: dropout must lie in [0, 1)");
        }
        weights.validate();
    }
};

struct SpatialMask {
    Tensor weights;  // [1 x h x w]

    GridDims grid() const { return {weights.dim(1), weights.dim(2)}; }
};

struct ConvBlockParams {
    Tensor depthwise;  // [D x 3 x 3]   (depthwise-separable)
    Tensor pointwise;  // [D x D]       (depthwise-separable)
    Tensor standard;   // [D x D x 3 x 3] (standard conv ablation)
    Tensor gn_gamma;   // [D]
    Tensor gn_beta;    // [D]
};

// Pre-norm bidirectional encoder layer.
struct RefineLayerParams {
    Tensor ln1_gamma, ln1_beta;
    Tensor wq, wk, wv, wo;  // [D x D]
    Tensor ln2_gamma, ln2_beta;
    Tensor w1;  // [ffn x D]
    Tensor w2;  // [D x ffn]
};

struct CompressorParams {
    std::vector<ConvBlockParams> blocks;
    Tensor pos;  // [K x D], only with refinement
    RefineLayerParams layer;
};

// ---------------------------------------------------------------------------
// Stage ops

// [N x D] tokens -> [D x H' x W'] map; token n lands at (n / W', n % W').
inline Tensor tokens_to_grid(const VisualTokens& v) {
    if (v.grid.cells() != v.count()) {
        throw DimensionError("tokens_to_grid: grid " + std::to_string(v.grid.h) + "x" +
                             std::to_string(v.grid.w) + " does not hold " + std::to_string(v.count()) +
                             " tokens");
    }
    return reshape(transpose(v.tokens), {v.dim(), v.grid.h, v.grid.w});
}

inline Tensor grid_to_tokens(const Tensor& f) {
    detail::require_rank(f, 3, "grid_to_tokens");
    return transpose(reshape(f, {f.dim(0), f.dim(1) * f.dim(2)}));
}

inline Tensor dsconv_block(const Tensor& f, const ConvBlockParams& p, std::size_t groups) {
    return gelu(group_norm(conv2d_pointwise(conv2d_depthwise(f, p.depthwise, 2, 1), p.pointwise), groups,
                           p.gn_gamma, p.gn_beta));
}

inline Tensor std_conv_block(const Tensor& f, const ConvBlockParams& p, std::size_t groups) {
    return gelu(group_norm(conv2d_standard(f, p.standard, 2, 1), groups, p.gn_gamma, p.gn_beta));
}

namespace detail {

inline std::size_t ceil_div_nonneg(long long num, long long den) {
    if (num <= 0) return 0;
    return static_cast<std::size_t>((num + den - 1) / den);
}

// First grid index whose cell centre (2i+1)*extent/(2*cells) is >= coord.
inline std::size_t first_center_at_or_after(std::size_t coord, std::size_t extent, std::size_t cells) {
    const auto num = 2LL * static_cast<long long>(cells) * static_cast<long long>(coord) -
                     static_cast<long long>(extent);
    return std::min(ceil_div_nonneg(num, 2LL * static_cast<long long>(extent)), cells);
}

}  // namespace detail

// Rasterizes boxes onto the grid: a cell belongs to a box when its centre,
// mapped back to pixel coordinates, lies inside the half-open box. Each cell
// takes the max weight of its covering boxes, or the background weight.
inline SpatialMask build_element_mask(const ElementAnnotation& ann, std::size_t height_px,
                                      std::size_t width_px, GridDims grid, const CategoryWeights& weights) {
    if (grid.cells() == 0) {
        throw DimensionError("build_element_mask: empty grid");
    }
    ann.validate(height_px, width_px);
    std::vector<double> cell(grid.cells(), -1.0);
    for (std::size_t i = 0; i < ann.boxes.size(); ++i) {
        const Box& b = ann.boxes[i];
        const double w = weights(ann.categories[i]);
        const std::size_t r0 = detail::first_center_at_or_after(b.y0, height_px, grid.h);
        const std::size_t r1 = detail::first_center_at_or_after(b.y1, height_px, grid.h);
        const std::size_t c0 = detail::first_center_at_or_after(b.x0, width_px, grid.w);
        const std::size_t c1 = detail::first_center_at_or_after(b.x1, width_px, grid.w);
        for (std::size_t r = r0; r < r1; ++r)
            for (std::size_t c = c0; c < c1; ++c) cell[r * grid.w + c] = std::max(cell[r * grid.w + c], w);
    }
    Tensor m({1, grid.h, grid.w});
    auto mv = m.values();
    for (std::size_t i = 0; i < cell.size(); ++i) {
        mv[i] = cell[i] < 0.0 ? weights.background() : cell[i];
    }
    return {m};
}

inline Tensor reweight(const Tensor& f, const SpatialMask& m) {
    return mul_broadcast_channels(f, m.weights);
}

// Adaptive-average-pools to the given grid and flattens row-major to [cells x D].
inline Tensor pool_and_flatten(const Tensor& f, GridDims pool) {
    detail::require_rank(f, 3, "pool_and_flatten");
    if (pool.h > f.dim(1) || pool.w > f.dim(2)) {
        throw DimensionError("pool_and_flatten: pool grid " + std::to_string(pool.h) + "x" +
                             std::to_string(pool.w) + " exceeds the " + std::to_string(f.dim(1)) + "x" +
                             std::to_string(f.dim(2)) + " feature map");
    }
    return grid_to_tokens(adaptive_avg_pool2d(f, pool.h, pool.w));
}

inline Tensor pool_and_flatten(const Tensor& f, std::size_t k) {
    return pool_and_flatten(f, pool_grid_for_budget(k));
}

template <typename Rng = std::mt19937_64>
Tensor refine(const Tensor& z, const Tensor& pos, const RefineLayerParams& p, std::size_t heads,
              double dropout_p = 0.0, Rng* rng = nullptr) {
    detail::require_same_shape(z, pos, "refine");
    auto drop = [&](const Tensor& t) { return (rng && dropout_p > 0.0) ? dropout(t, dropout_p, *rng) : t; };
    Tensor x = add(z, pos);
    Tensor h = layer_norm(x, p.ln1_gamma, p.ln1_beta);
    Tensor attn = multi_head_attention(linear(h, p.wq), linear(h, p.wk), linear(h, p.wv), heads, false);
    x = add(x, drop(linear(attn, p.wo)));
    h = layer_norm(x, p.ln2_gamma, p.ln2_beta);
    return add(x, drop(linear(gelu(linear(h, p.w1)), p.w2)));
}

// ---------------------------------------------------------------------------

inline std::size_t conv_block_param_count(std::size_t d, ConvKind kind) {
    return kind == ConvKind::depthwise_separable ? d * 9 + d * d + 2 * d : d * d * 9 + 2 * d;
}

inline std::size_t count_compressor_params(const CompressorConfig& cfg) {
    const std::size_t d = cfg.dim;
    std::size_t n = cfg.conv_blocks * conv_block_param_count(d, cfg.conv);
    if (cfg.refine) {
        n += cfg.token_budget * d;                 // positional embeddings
        n += 4 * d * d;                            // q, k, v, o
        n += 2 * cfg.ffn_ratio * d * d;            // FFN in/out
        n += 4 * d;                                // two LayerNorms
    }
    return n;
}

class OpticalCompressor {
public:
    OpticalCompressor() = default;

    OpticalCompressor(CompressorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        const std::size_t d = cfg_.dim;
        auto fan_in_uniform = [&](Shape shape, std::size_t fan_in) {
            return Tensor::uniform(std::move(shape), std::sqrt(6.0 / static_cast<double>(fan_in)), rng, true);
        };
        for (std::size_t b = 0; b < cfg_.conv_blocks; ++b) {
            ConvBlockParams blk;
            if (cfg_.conv == ConvKind::depthwise_separable) {
                blk.depthwise = fan_in_uniform({d, 3, 3}, 9);
                blk.pointwise = fan_in_uniform({d, d}, d);
            } else {
                blk.standard = fan_in_uniform({d, d, 3, 3}, 9 * d);
            }
            blk.gn_gamma = Tensor({d}, 1.0, true);
            blk.gn_beta = Tensor({d}, 0.0, true);
            params_.blocks.push_back(std::move(blk));
        }
        if (cfg_.refine) {
            const std::size_t ffn = cfg_.ffn_ratio * d;
            params_.pos = Tensor::normal({cfg_.token_budget, d}, 0.02, rng, true);
            auto& l = params_.layer;
            l.ln1_gamma = Tensor({d}, 1.0, true);
            l.ln1_beta = Tensor({d}, 0.0, true);
            l.wq = fan_in_uniform({d, d}, d);
            l.wk = fan_in_uniform({d, d}, d);
            l.wv = fan_in_uniform({d, d}, d);
            l.wo = fan_in_uniform({d, d}, d);
            l.ln2_gamma = Tensor({d}, 1.0, true);
            l.ln2_beta = Tensor({d}, 0.0, true);
            l.w1 = fan_in_uniform({ffn, d}, d);
            l.w2 = fan_in_uniform({d, ffn}, ffn);
        }
    }

    const CompressorConfig& config() const { return cfg_; }
    CompressorParams& params() { return params_; }
    const CompressorParams& params() const { return params_; }

    std::vector<Parameter> parameters() const {
        std::vector<Parameter> out;
        for (std::size_t b = 0; b < params_.blocks.size(); ++b) {
            const auto& blk = params_.blocks[b];
            const std::string prefix = "compressor.block" + std::to_string(b) + ".";
            if (cfg_.conv == ConvKind::depthwise_separable) {
                out.push_back({prefix + "depthwise", blk.depthwise, true});
                out.push_back({prefix + "pointwise", blk.pointwise, true});
            } else {
                out.push_back({prefix + "standard", blk.standard, true});
            }
            out.push_back({prefix + "gn_gamma", blk.gn_gamma, false});
            out.push_back({prefix + "gn_beta", blk.gn_beta, false});
        }
        if (cfg_.refine) {
            const auto& l = params_.layer;
            out.push_back({"compressor.pos", params_.pos, false});
            out.push_back({"compressor.refine.ln1_gamma", l.ln1_gamma, false});
            out.push_back({"compressor.refine.ln1_beta", l.ln1_beta, false});
            out.push_back({"compressor.refine.wq", l.wq, true});
            out.push_back({"compressor.refine.wk", l.wk, true});
            out.push_back({"compressor.refine.wv", l.wv, true});
            out.push_back({"compressor.refine.wo", l.wo, true});
            out.push_back({"compressor.refine.ln2_gamma", l.ln2_gamma, false});
            out.push_back({"compressor.refine.ln2_beta", l.ln2_beta, false});
            out.push_back({"compressor.refine.w1", l.w1, true});
            out.push_back({"compressor.refine.w2", l.w2, true});
        }
        return out;
    }

    // Spatial dims after the conv stack for an input grid.
    GridDims conv_output_grid(GridDims in) const {
        for (std::size_t b = 0; b < cfg_.conv_blocks; ++b) {
            in = {conv_output_size(in.h, 3, 2, 1), conv_output_size(in.w, 3, 2, 1)};
        }
        return in;
    }

    template <typename Rng = std::mt19937_64>
    Tensor compress(const VisualTokens& v, const ElementAnnotation& ann, std::size_t height_px,
                    std::size_t width_px, Mode mode = Mode::eval, Rng* rng = nullptr) const {
        if (v.dim() != cfg_.dim) {
            throw DimensionError("compress: token width " + std::to_string(v.dim()) +
                                 " does not match compressor D=" + std::to_string(cfg_.dim));
        }
        const GridDims after = conv_output_grid(v.grid);
        if (cfg_.pool_grid.h > after.h || cfg_.pool_grid.w > after.w) {
            throw DimensionError("compress: K=" + std::to_string(cfg_.token_budget) + " needs a " +
                                 std::to_string(cfg_.pool_grid.h) + "x" + std::to_string(cfg_.pool_grid.w) +
                                 " pool grid but the convolved map is " + std::to_string(after.h) + "x" +
                                 std::to_string(after.w));
        }
        Tensor f = tokens_to_grid(v);
        for (const auto& blk : params_.blocks) {
            f = cfg_.conv == ConvKind::depthwise_separable ? dsconv_block(f, blk, cfg_.groups)
                                                           : std_conv_block(f, blk, cfg_.groups);
        }
        const SpatialMask mask = build_element_mask(ann, height_px, width_px, {f.dim(1), f.dim(2)}, cfg_.weights);
        Tensor z = pool_and_flatten(reweight(f, mask), cfg_.pool_grid);
        if (!cfg_.refine) {
            return z;
        }
        const bool train = mode == Mode::train && rng != nullptr;
        return refine(z, params_.pos, params_.layer, cfg_.heads, train ? cfg_.dropout : 0.0,
                      train ? rng : static_cast<Rng*>(nullptr));
    }

private:
    CompressorConfig cfg_;
    CompressorParams params_;
};

}  // namespace uipress
