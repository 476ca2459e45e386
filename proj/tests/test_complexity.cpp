#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace uipress;

namespace {

PrefillSpec spec(double k, double p, double d, double layers) { return {k, p, d, layers, 0}; }

Decoder decoder_with(std::size_t dim, std::size_t layers, std::size_t heads) {
    DecoderConfig c;
    c.dim = dim;
    c.layers = layers;
    c.heads = heads;
    c.vocab_size = vocab::kSize;
    c.max_seq_len = 128;
    c.lora_rank = 1;
    return Decoder(c, 1);
}

}  // namespace

TEST(FlopsLayer, UnitSubstitution) {
    const auto f = flops_layer(spec(1, 0, 1, 1));
    EXPECT_EQ(f.projections, 4.0);
    EXPECT_EQ(f.attention, 2.0);
    EXPECT_EQ(f.ffn, 16.0);
    EXPECT_EQ(f.total(), 22.0);
}

TEST(FlopsLayer, DegreeInWidth) {
    const auto a = flops_layer(spec(200, 56, 32, 1)), b = flops_layer(spec(200, 56, 64, 1));
    EXPECT_EQ(b.projections, 4.0 * a.projections);
    EXPECT_EQ(b.ffn, 4.0 * a.ffn);
    EXPECT_EQ(b.attention, 2.0 * a.attention);
}

TEST(FlopsLayer, IndependentRecomputation) {
    const double s = 256 + 64, d = 512;
    const auto f = flops_layer(spec(256, 64, 512, 1));
    EXPECT_EQ(f.projections, 4 * s * d * d);
    EXPECT_EQ(f.attention, 2 * s * s * d);
    EXPECT_EQ(f.ffn, 16 * s * d * d);
    EXPECT_EQ(f.total(), 335544320.0 + 104857600.0 + 1342177280.0);
}

TEST(FlopsPrefill, TotalIsLayersTimesPerLayer) {
    const auto r = flops_prefill(spec(100, 10, 64, 7));
    EXPECT_EQ(r.total.total(), 7.0 * r.per_layer.total());
    EXPECT_EQ(r.per_layer.total(), r.per_layer.projections + r.per_layer.attention + r.per_layer.ffn);
}

TEST(FlopsPrefill, StrictlyIncreasingInEachArgument) {
    const PrefillSpec base = spec(64, 8, 32, 2);
    const double t = flops_prefill(base).total.total();
    for (int field = 0; field < 4; ++field) {
        PrefillSpec s = base;
        double* v[] = {&s.visual_tokens, &s.prompt_len, &s.dim, &s.layers};
        *v[field] += 1;
        EXPECT_GT(flops_prefill(s).total.total(), t) << field;
    }
}

TEST(Speedup, PaperConstants) {
    const auto sp = speedup(spec(6517, 64, 4096, 36), spec(256, 64, 4096, 36));
    EXPECT_NEAR(sp.approx, 648.07, 0.1);
    EXPECT_NEAR(sp.compression_ratio, 25.46, 0.005);
    EXPECT_EQ(format_ratio(sp.compression_ratio), "25.5x");
}

TEST(Speedup, EqualLengthsGiveOne) {
    const auto sp = speedup(spec(300, 10, 64, 2), spec(300, 10, 64, 2));
    EXPECT_EQ(sp.exact, 1.0);
    EXPECT_EQ(sp.approx, 1.0);
}

TEST(Speedup, ExactLiesBetweenTermRatios) {
    for (double k : {16.0, 64.0, 256.0}) {
        const PrefillSpec n = spec(4000, 32, 256, 4), c = spec(k, 32, 256, 4);
        const auto fn = flops_layer(n), fc = flops_layer(c);
        const double lin = fn.projections / fc.projections, quad = fn.attention / fc.attention;
        const auto sp = speedup(n, c);
        EXPECT_GE(sp.exact, std::min(lin, quad));
        EXPECT_LE(sp.exact, std::max(lin, quad));
    }
}

TEST(Speedup, ApproxConvergesAsQuadraticTermDominates) {
    // Fixed width, growing sequences: the exact/approx gap shrinks monotonically.
    double prev_gap = 1e300;
    for (double scale : {1.0, 10.0, 100.0, 1000.0, 10000.0}) {
        const auto sp = speedup(spec(64 * scale, 0, 8, 1), spec(32 * scale, 0, 8, 1));
        const double gap = std::abs(sp.exact / sp.approx - 1.0);
        EXPECT_LT(gap, prev_gap);
        prev_gap = gap;
    }
    EXPECT_LT(prev_gap, 0.01);
}

TEST(Speedup, MismatchedSpecsRejected) {
    EXPECT_THROW((void)speedup(spec(10, 1, 8, 1), spec(5, 1, 16, 1)), ConfigError);
    EXPECT_THROW((void)flops_layer(spec(0, 1, 8, 1)), ConfigError);
}

TEST(Instrumented, HandCountOneToken) {
    const Decoder d = decoder_with(4, 1, 1);
    const MacCounts m = instrumented_macs(d, 1, 0);
    EXPECT_EQ(m[MacBucket::projection], 4u * 16u);
    EXPECT_EQ(m[MacBucket::attention], 2u * 4u);
    EXPECT_EQ(m[MacBucket::ffn], 8u * 16u);
    const auto f = formula_flops_from_macs(m);
    const auto a = flops_layer(spec(1, 0, 4, 1));
    EXPECT_EQ(f.projections, a.projections);
    EXPECT_EQ(f.attention, a.attention);
    EXPECT_EQ(f.ffn, a.ffn);
}

TEST(Instrumented, ToyDecoderMatchesFormula) {
    const Decoder d = decoder_with(64, 4, 8);
    const MacCounts m = instrumented_macs(d, 76, 4);  // S = 80
    const auto counted = formula_flops_from_macs(m);
    const auto analytic = flops_prefill(prefill_spec(d, 76, 4)).total;
    EXPECT_EQ(counted.projections, analytic.projections);
    EXPECT_EQ(counted.attention, analytic.attention);
    EXPECT_EQ(counted.ffn, analytic.ffn);
    EXPECT_EQ(counted.total(), analytic.total());
}

TEST(Instrumented, SeveralToyConfigs) {
    for (auto [dim, layers, heads] : {std::tuple{8u, 1u, 2u}, {16u, 2u, 4u}, {32u, 3u, 4u}}) {
        const Decoder d = decoder_with(dim, layers, heads);
        for (std::size_t k : {1u, 9u, 40u}) {
            const auto counted = formula_flops_from_macs(instrumented_macs(d, k, 4));
            EXPECT_EQ(counted.total(), flops_prefill(prefill_spec(d, k, 4)).total.total());
        }
    }
}

TEST(Instrumented, TwoPrefillsCountTwice) {
    const Decoder d = decoder_with(16, 2, 2);
    reset_mac_counts();
    {
        NoGradGuard g;
        (void)d.forward(Tensor({20, 16}), std::vector<int>{3, 4}, {});
    }
    const auto one = mac_counts();
    {
        NoGradGuard g;
        (void)d.forward(Tensor({20, 16}), std::vector<int>{3, 4}, {});
    }
    const auto two = mac_counts();
    for (std::size_t b = 0; b < one.by_bucket.size(); ++b) EXPECT_EQ(two.by_bucket[b], 2 * one.by_bucket[b]);
}

TEST(Instrumented, CountersRestoredAfterMeasurement) {
    reset_mac_counts();
    count_macs(17);
    (void)instrumented_macs(decoder_with(8, 1, 2), 4, 2);
    EXPECT_EQ(mac_counts().total(), 17u);
}

TEST(FlopsOutput, TableAndCsv) {
    std::ostringstream table, csv;
    print_flops_table(table, spec(6517, 64, 4096, 36), spec(256, 64, 4096, 36));
    EXPECT_NE(table.str().find("25.5x"), std::string::npos);
    EXPECT_NE(table.str().find("speedup N2/K2 648.06"), std::string::npos);
    write_flops_csv(csv, spec(6517, 64, 4096, 36), spec(256, 64, 4096, 36));
    EXPECT_EQ(csv.str().rfind("tokens,prompt_len,dim,layers,ffn_width,projections,attention,ffn,total\n", 0), 0u);
}

TEST(FlopsLayer, CustomFfnWidth) {
    PrefillSpec s = spec(10, 0, 8, 1);
    s.ffn_width = 16;
    EXPECT_EQ(flops_layer(s).ffn, 4.0 * 10 * 8 * 16);
}
