#pragma once

// Frozen patch embedder standing in for the vision encoder: a seeded random
// linear projection of non-overlapping p x p patches plus fixed positional
// offsets. Nothing here is ever trained.

#include <cmath>
#include <cstdint>
#include <random>

#include "uipress/tensor.hpp"
#include "uipress/types.hpp"

namespace uipress {

struct VisualTokens {
    Tensor tokens;  // [N x D]
    GridDims grid;

    std::size_t count() const { return tokens.dim(0); }
    std::size_t dim() const { return tokens.dim(1); }
};

struct FrozenEncoder {
    std::size_t patch_size = 0;
    std::size_t dim = 0;
    GridDims max_grid;
    Tensor projection;  // [(3 p^2) x D]
    Tensor positions;   // [(max_h * max_w) x D], row-major over the grid
};

inline FrozenEncoder init_frozen_encoder(std::uint64_t seed, std::size_t patch_size, std::size_t dim,
                                         GridDims max_grid) {
    if (patch_size == 0 || dim == 0 || max_grid.cells() == 0) {
        throw ConfigError("init_frozen_encoder: patch size, width and grid must be positive");
    }
    std::mt19937_64 rng(seed);
    const std::size_t fan_in = PageImage::channels * patch_size * patch_size;
    FrozenEncoder enc;
    enc.patch_size = patch_size;
    enc.dim = dim;
    enc.max_grid = max_grid;
    enc.projection = Tensor::normal({fan_in, dim}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
    enc.positions = Tensor::normal({max_grid.cells(), dim}, 0.02, rng);
    return enc;
}

inline VisualTokens patch_encode(const PageImage& img, const FrozenEncoder& enc) {
    const std::size_t p = enc.patch_size;
    if (img.height_px == 0 || img.width_px == 0 || img.height_px % p != 0 || img.width_px % p != 0) {
        throw DataError("patch_encode: image " + std::to_string(img.height_px) + "x" +
                        std::to_string(img.width_px) + " not divisible by patch size " + std::to_string(p));
    }
    const GridDims grid{img.height_px / p, img.width_px / p};
    if (grid.h > enc.max_grid.h || grid.w > enc.max_grid.w) {
        throw DataError("patch_encode: grid " + std::to_string(grid.h) + "x" + std::to_string(grid.w) +
                        " exceeds encoder positional table " + std::to_string(enc.max_grid.h) + "x" +
                        std::to_string(enc.max_grid.w));
    }
    const std::size_t fan_in = PageImage::channels * p * p;
    const std::size_t d = enc.dim;
    NoGradGuard frozen;
    Tensor patches({grid.cells(), fan_in});
    auto pv = patches.values();
    for (std::size_t gr = 0; gr < grid.h; ++gr)
        for (std::size_t gc = 0; gc < grid.w; ++gc) {
            const std::size_t row = gr * grid.w + gc;
            std::size_t col = 0;
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    for (std::size_t ch = 0; ch < PageImage::channels; ++ch)
                        pv[row * fan_in + col++] = img.at(gr * p + py, gc * p + px, ch);
        }
    Tensor tokens = matmul(patches, enc.projection);
    auto tv = tokens.values();
    auto pos = enc.positions.values();
    for (std::size_t gr = 0; gr < grid.h; ++gr)
        for (std::size_t gc = 0; gc < grid.w; ++gc) {
            const std::size_t row = gr * grid.w + gc;
            const std::size_t prow = gr * enc.max_grid.w + gc;
            for (std::size_t j = 0; j < d; ++j) tv[row * d + j] += pos[prow * d + j];
        }
    return {tokens, grid};
}

// Average-pools factor x factor pixel blocks.
inline PageImage resolution_scale(const PageImage& img, std::size_t factor) {
    if (factor == 0 || img.height_px % factor != 0 || img.width_px % factor != 0) {
        throw DataError("resolution_scale: factor " + std::to_string(factor) + " does not divide " +
                        std::to_string(img.height_px) + "x" + std::to_string(img.width_px));
    }
    if (factor == 1) {
        return img;
    }
    PageImage out(img.height_px / factor, img.width_px / factor);
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (std::size_t y = 0; y < out.height_px; ++y)
        for (std::size_t x = 0; x < out.width_px; ++x)
            for (std::size_t c = 0; c < PageImage::channels; ++c) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < factor; ++dy)
                    for (std::size_t dx = 0; dx < factor; ++dx) acc += img.at(y * factor + dy, x * factor + dx, c);
                out.at(y, x, c) = acc * inv;
            }
    return out;
}

}  // namespace uipress
