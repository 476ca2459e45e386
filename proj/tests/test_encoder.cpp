#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace uipress;

namespace {

PageImage random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PageImage img(h, w);
    for (auto& p : img.pixels) p = u(rng);
    return img;
}

}  // namespace

TEST(PatchEncode, GridAndTokenCount) {
    const auto enc = init_frozen_encoder(1, 4, 16, {8, 8});
    const auto v = patch_encode(PageImage(32, 32), enc);
    EXPECT_EQ(v.count(), 64u);
    EXPECT_EQ(v.grid.h, 8u);
    EXPECT_EQ(v.grid.w, 8u);
    EXPECT_EQ(v.dim(), 16u);
}

TEST(PatchEncode, ZeroImageGivesPositionalOffsets) {
    const auto enc = init_frozen_encoder(2, 4, 8, {8, 8});
    const auto v = patch_encode(PageImage(16, 32), enc);
    ASSERT_EQ(v.grid.h, 4u);
    ASSERT_EQ(v.grid.w, 8u);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 8; ++c)
            for (std::size_t j = 0; j < 8; ++j)
                EXPECT_EQ(v.tokens.values()[(r * 8 + c) * 8 + j], enc.positions.values()[(r * 8 + c) * 8 + j]);
}

TEST(PatchEncode, PatchFlatteningOrder) {
    // One-hot projection rows expose the flattened patch vector directly.
    FrozenEncoder enc = init_frozen_encoder(3, 2, 12, {1, 1});
    enc.projection = Tensor({12, 12}, 0.0);
    for (std::size_t i = 0; i < 12; ++i) enc.projection.values()[i * 12 + i] = 1.0;
    enc.positions = Tensor({1, 12}, 0.0);
    PageImage img(2, 2);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<double>(i) / 16.0;
    const auto v = patch_encode(img, enc);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(v.tokens.values()[i], img.pixels[i]);
}

TEST(PatchEncode, DeterministicAndFrozen) {
    const auto enc = init_frozen_encoder(4, 2, 8, {8, 8});
    const auto img = random_image(16, 16, 9);
    const auto a = patch_encode(img, enc), b = patch_encode(img, enc);
    EXPECT_TRUE(std::equal(a.tokens.values().begin(), a.tokens.values().end(), b.tokens.values().begin()));
    EXPECT_FALSE(a.tokens.requires_grad());
}

TEST(PatchEncode, NonDivisibleIsDataError) {
    const auto enc = init_frozen_encoder(5, 4, 8, {8, 8});
    EXPECT_THROW((void)patch_encode(PageImage(30, 32), enc), DataError);
}

TEST(InitFrozenEncoder, SeedBehaviour) {
    const auto a = init_frozen_encoder(7, 2, 8, {4, 4});
    const auto b = init_frozen_encoder(7, 2, 8, {4, 4});
    const auto c = init_frozen_encoder(8, 2, 8, {4, 4});
    EXPECT_TRUE(std::equal(a.projection.values().begin(), a.projection.values().end(), b.projection.values().begin()));
    EXPECT_FALSE(std::equal(a.projection.values().begin(), a.projection.values().end(), c.projection.values().begin()));
    EXPECT_FALSE(a.projection.requires_grad());
    EXPECT_FALSE(a.positions.requires_grad());
}

TEST(InitFrozenEncoder, Scales) {
    const auto enc = init_frozen_encoder(9, 4, 64, {32, 32});
    auto stddev = [](const Tensor& t) {
        double s = 0.0, s2 = 0.0;
        for (double v : t.values()) {
            s += v;
            s2 += v * v;
        }
        const double n = static_cast<double>(t.numel());
        return std::sqrt(s2 / n - (s / n) * (s / n));
    };
    EXPECT_NEAR(stddev(enc.projection), 1.0 / std::sqrt(48.0), 0.01);
    EXPECT_NEAR(stddev(enc.positions), 0.02, 0.001);
}

TEST(ResolutionScale, IdentityHalvingAndConstant) {
    const auto img = random_image(8, 8, 1);
    EXPECT_EQ(resolution_scale(img, 1).pixels, img.pixels);
    const auto half = resolution_scale(PageImage(32, 32, 0.25), 2);
    EXPECT_EQ(half.height_px, 16u);
    EXPECT_EQ(half.width_px, 16u);
    for (double p : half.pixels) EXPECT_EQ(p, 0.25);
    EXPECT_THROW((void)resolution_scale(img, 3), DataError);
}

TEST(ResolutionScale, TokenCountShrinksByFactorSquared) {
    const auto enc = init_frozen_encoder(2, 4, 8, {8, 8});
    const auto img = random_image(32, 32, 2);
    EXPECT_EQ(patch_encode(img, enc).count(), 64u);
    EXPECT_EQ(patch_encode(resolution_scale(img, 2), enc).count(), 16u);
    for (std::size_t f : {1u, 2u, 4u})
        EXPECT_EQ(patch_encode(resolution_scale(img, f), enc).count(), 64u / (f * f));
}

TEST(ResolutionScale, BlockMean) {
    PageImage img(2, 2);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<double>(i % 3);
    const auto out = resolution_scale(img, 2);
    for (std::size_t c = 0; c < 3; ++c) {
        const double m = (img.at(0, 0, c) + img.at(0, 1, c) + img.at(1, 0, c) + img.at(1, 1, c)) / 4.0;
        EXPECT_DOUBLE_EQ(out.at(0, 0, c), m);
    }
}

TEST(Encoder, WeightsReceiveNoGradient) {
    const auto enc = init_frozen_encoder(3, 2, 8, {4, 4});
    const auto v = patch_encode(random_image(8, 8, 3), enc);
    Tensor w = Tensor::normal({8, 8}, 1.0, *std::make_unique<std::mt19937_64>(1), true);
    backward(sum(linear(v.tokens, w)));
    EXPECT_TRUE(enc.projection.grads().empty());
    EXPECT_TRUE(enc.positions.grads().empty());
    EXPECT_GT(w.grad_abs_sum(), 0.0);
}
