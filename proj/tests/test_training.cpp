#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "support.hpp"

using namespace uipress;
using uipress::testing::random_tensor;
using uipress::testing::toy_model;
using uipress::testing::toy_pipeline_config;

namespace {

GenConfig small_pages() {
    GenConfig g;
    g.max_rows = 2;
    g.max_cells = 2;
    return g;
}

std::uint64_t hash_values(const std::vector<Parameter>& params) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params)
        for (double v : p.tensor.values()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            h = (h ^ bits) * 1099511628211ull;
        }
    return h;
}

}  // namespace

TEST(AutoregressiveLoss, UniformLogits) {
    const Tensor logits({6, 7}, 0.0);
    const std::vector<int> targets{1, 2, 3};
    EXPECT_NEAR(autoregressive_loss(logits, targets, 2, 1).item(), std::log(7.0), 1e-12);
}

TEST(AutoregressiveLoss, PerfectModel) {
    const std::vector<int> targets{4, 0, 2};
    const std::size_t prefix = 3;
    Tensor logits({prefix + targets.size(), 5}, 0.0);
    for (std::size_t t = 0; t < targets.size(); ++t)
        logits.values()[(prefix - 1 + t) * 5 + static_cast<std::size_t>(targets[t])] = 30.0;
    EXPECT_LT(autoregressive_loss(logits, targets, 1, 2).item(), 1e-9);
}

TEST(AutoregressiveLoss, HandRolledFiveTokens) {
    std::mt19937_64 rng(1);
    const Tensor logits = random_tensor({9, 6}, rng, false);
    const std::vector<int> targets{1, 5, 0, 3, 2};
    const std::size_t prefix = 4;
    double total = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const std::size_t row = prefix - 1 + t;
        double mx = -1e300, z = 0.0;
        for (std::size_t j = 0; j < 6; ++j) mx = std::max(mx, logits.values()[row * 6 + j]);
        for (std::size_t j = 0; j < 6; ++j) z += std::exp(logits.values()[row * 6 + j] - mx);
        total += -(logits.values()[row * 6 + static_cast<std::size_t>(targets[t])] - mx - std::log(z));
    }
    EXPECT_NEAR(autoregressive_loss(logits, targets, 3, 1).item(), total / 5.0, 1e-12);
}

TEST(AutoregressiveLoss, OnlyTargetPositionsCount) {
    std::mt19937_64 rng(2);
    Tensor logits = random_tensor({8, 5}, rng, false);
    const std::vector<int> targets{1, 2, 3};
    const double before = autoregressive_loss(logits, targets, 2, 3).item();
    for (std::size_t i = 0; i < 4 * 5; ++i) logits.values()[i] = 99.0;  // rows before prefix-1
    EXPECT_EQ(autoregressive_loss(logits, targets, 2, 3).item(), before);
    // The prompt/visual split does not matter, only their sum.
    EXPECT_EQ(autoregressive_loss(logits, targets, 4, 1).item(), before);
}

TEST(AutoregressiveLoss, Errors) {
    EXPECT_THROW((void)autoregressive_loss(Tensor({4, 3}), std::vector<int>{}, 1, 1), DataError);
    try {
        (void)autoregressive_loss(Tensor({4, 3}), std::vector<int>{}, 1, 1);
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("empty target"), std::string::npos);
    }
    EXPECT_THROW((void)autoregressive_loss(Tensor({3, 3}), std::vector<int>{1, 1, 1}, 1, 1), DimensionError);
}

TEST(CosineLr, Endpoints) {
    EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 2e-4, 1e-6), 2e-4);
    EXPECT_DOUBLE_EQ(cosine_lr(100, 100, 2e-4, 1e-6), 1e-6);
    EXPECT_NEAR(cosine_lr(50, 100, 2e-4, 1e-6), (2e-4 + 1e-6) / 2.0, 1e-18);
    for (std::size_t s = 1; s <= 100; ++s) EXPECT_LE(cosine_lr(s, 100, 2e-4), cosine_lr(s - 1, 100, 2e-4));
    EXPECT_THROW((void)cosine_lr(0, 0, 1.0), ConfigError);
}

TEST(ClipGradNorm, Examples) {
    Tensor t = Tensor::from_values({2}, {0.0, 0.0}, true);
    std::vector<Parameter> ps{{"t", t, true}};
    t.grads()[0] = 0.3;
    t.grads()[1] = 0.4;
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 0.5);
    EXPECT_EQ(t.grads()[0], 0.3);
    t.grads()[0] = 3.0;
    t.grads()[1] = 4.0;
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
    EXPECT_DOUBLE_EQ(t.grads()[0], 0.6);
    EXPECT_DOUBLE_EQ(t.grads()[1], 0.8);
}

TEST(ClipGradNorm, RandomSetsEndWithinBound) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 5.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Parameter> ps;
        for (int k = 0; k < 3; ++k) {
            Tensor t({static_cast<std::size_t>(4 + k)}, 0.0, true);
            for (double& g : t.grads()) g = n(rng);
            ps.push_back({"p", t, true});
        }
        clip_grad_norm(ps, 1.0);
        EXPECT_LE(grad_norm(ps), 1.0 + 1e-12);
    }
}

TEST(AdamW, FirstStepIsSignedLr) {
    Tensor p = Tensor::from_values({1}, {1.0}, true);
    p.grads()[0] = 1.0;
    AdamWOptions o;
    o.weight_decay = 0.0;
    AdamW opt({{{{"p", p, true}}, 0.1}}, o);
    opt.step();
    EXPECT_LE(std::abs((1.0 - p.values()[0]) - 0.1), 1e-6);
}

TEST(AdamW, DecoupledDecay) {
    Tensor a = Tensor::from_values({1}, {2.0}, true), b = Tensor::from_values({1}, {2.0}, true);
    a.grads()[0] = b.grads()[0] = 0.5;
    AdamWOptions with, without;
    with.weight_decay = 0.01;
    without.weight_decay = 0.0;
    AdamW(std::vector<ParamGroup>{{{{"a", a, true}}, 0.1}}, with).step();
    AdamW(std::vector<ParamGroup>{{{{"b", b, true}}, 0.1}}, without).step();
    EXPECT_NEAR(a.values()[0] - b.values()[0], -0.1 * 0.01 * 2.0, 1e-15);
}

TEST(AdamW, NoDecayParametersSkipDecay) {
    Tensor a = Tensor::from_values({1}, {2.0}, true), b = Tensor::from_values({1}, {2.0}, true);
    a.grads()[0] = b.grads()[0] = 0.5;
    AdamWOptions o;
    AdamW(std::vector<ParamGroup>{{{{"a", a, false}}, 0.1}}, o).step();
    o.weight_decay = 0.0;
    AdamW(std::vector<ParamGroup>{{{{"b", b, true}}, 0.1}}, o).step();
    EXPECT_EQ(a.values()[0], b.values()[0]);
}

TEST(AdamW, GroupsUseTheirOwnRates) {
    const TrainConfig cfg;
    EXPECT_EQ(cfg.lr_compressor / cfg.lr_lora, 10.0);
    EXPECT_EQ(cosine_lr(0, 10, cfg.lr_compressor, cfg.lr_min) / cosine_lr(0, 10, cfg.lr_lora, cfg.lr_min), 10.0);
    Tensor c = Tensor::from_values({1}, {0.0}, true), l = Tensor::from_values({1}, {0.0}, true);
    c.grads()[0] = l.grads()[0] = 0.7;
    AdamWOptions o;
    o.weight_decay = 0.0;
    AdamW opt({{{{"c", c, true}}, cfg.lr_compressor}, {{{"l", l, true}}, cfg.lr_lora}}, o);
    opt.step();
    EXPECT_NEAR(c.values()[0] / l.values()[0], 10.0, 1e-6);
}

TEST(Accumulation, EightSingleStepsEqualOneBatch) {
    auto m = toy_model(16, 5);
    const auto data = gen_dataset(3, 8, small_pages());
    auto pc = toy_pipeline_config(16);
    pc.compressor.groups = 4;
    pc.compressor.heads = 4;
    pc.compressor.dropout = 0.0;
    Pipeline p(m.encoder, m.decoder, pc);
    const auto prepared = p.prepare_all(data);
    const auto params = p.trainable_parameters();
    const std::size_t prompt_len = vocab::prompt().size();
    auto loss_of = [&](const PreparedSample& s) {
        return autoregressive_loss(p.logits(s), s.targets, prompt_len, p.visual_token_count(s));
    };

    zero_grads(params);
    for (const auto& s : prepared) backward(scale(loss_of(s), 1.0 / 8.0));
    std::vector<std::vector<double>> accumulated;
    for (const auto& q : params) accumulated.emplace_back(q.tensor.grads().begin(), q.tensor.grads().end());

    zero_grads(params);
    std::vector<Tensor> losses;
    for (const auto& s : prepared) losses.push_back(reshape(loss_of(s), {1, 1}));
    backward(mean(concat_rows(losses)));
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < accumulated[i].size(); ++j)
            EXPECT_LE(uipress::testing::rel_error(accumulated[i][j], params[i].tensor.grads()[j], 1e-12), 1e-6);
}

TEST(Fit, OverfitsOneBatch) {
    // The head and final norm stay frozen, so the base needs pretraining
    // before its logits can separate tokens sharply.
    auto m = toy_model(32, 7);
    PretrainConfig pre;
    pre.epochs = 30;
    pretrain_decoder(m.decoder, gen_dataset(9, 200, small_pages()), pre);
    const auto data = gen_dataset(4, 4, small_pages());
    auto pc = toy_pipeline_config(16);
    pc.compressor.dropout = 0.0;
    Pipeline p(m.encoder, m.decoder, pc);
    const auto prepared = p.prepare_all(data);
    TrainConfig tc;
    tc.epochs = 200;
    tc.batch_size = 4;
    tc.lr_compressor = 1e-2;
    tc.lr_lora = 1e-2;
    tc.holdout_eval = 0;
    const auto rep = fit(p, prepared, {}, tc);
    EXPECT_EQ(rep.steps, 200u);
    EXPECT_LT(rep.epochs.back().loss, 0.05);
}

TEST(Fit, DeterministicTraceAndFrozenWeightsUnchanged) {
    auto m = toy_model(16, 8);
    const auto data = gen_dataset(5, 12, small_pages());
    auto pc = toy_pipeline_config(16);
    pc.compressor.groups = 4;
    pc.compressor.heads = 4;
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 4;
    tc.holdout_eval = 2;
    tc.max_new = 20;
    const std::uint64_t frozen_before = hash_values(m.decoder.base_parameters());
    std::vector<std::vector<double>> traces;
    for (int run = 0; run < 2; ++run) {
        Pipeline p(m.encoder, m.decoder, pc);
        const auto prepared = p.prepare_all(data);
        const auto rep = fit(p, prepared, prepared, tc);
        std::vector<double> trace;
        for (const auto& e : rep.epochs) {
            trace.push_back(e.loss);
            trace.push_back(e.holdout_similarity);
            EXPECT_DOUBLE_EQ(e.lr_compressor, cosine_lr(e.step - 1, rep.steps, tc.lr_compressor, tc.lr_min));
            EXPECT_DOUBLE_EQ(e.lr_lora, cosine_lr(e.step - 1, rep.steps, tc.lr_lora, tc.lr_min));
        }
        traces.push_back(trace);
        EXPECT_EQ(hash_values(p.decoder().base_parameters()), frozen_before);
    }
    EXPECT_EQ(traces[0], traces[1]);
}

TEST(Fit, RestoresBestEpoch) {
    auto m = toy_model(16, 9);
    const auto data = gen_dataset(6, 6, small_pages());
    auto pc = toy_pipeline_config(16);
    pc.compressor.groups = 4;
    pc.compressor.heads = 4;
    Pipeline p(m.encoder, m.decoder, pc);
    const auto prepared = p.prepare_all(data);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 2;
    tc.holdout_eval = 3;
    tc.max_new = 20;
    const auto rep = fit(p, prepared, prepared, tc);
    ASSERT_GE(rep.best_epoch, 1u);
    EXPECT_DOUBLE_EQ(mean_render_similarity(p, prepared, 3, 20), rep.best_similarity);
}

TEST(Fit, NanLossIsNumericError) {
    auto m = toy_model(16, 10);
    const auto data = gen_dataset(7, 2, small_pages());
    auto pc = toy_pipeline_config(16);
    pc.compressor.groups = 4;
    pc.compressor.heads = 4;
    Pipeline p(m.encoder, m.decoder, pc);
    Tensor w = p.compressor()->params().layer.w2;
    w.values()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig tc;
    tc.epochs = 1;
    tc.holdout_eval = 0;
    EXPECT_THROW((void)fit(p, p.prepare_all(data), {}, tc), NumericError);
}

TEST(Fit, ConfigAndDataErrors) {
    auto m = toy_model(16, 11);
    auto pc = toy_pipeline_config(16);
    pc.compressor.groups = 4;
    pc.compressor.heads = 4;
    Pipeline p(m.encoder, m.decoder, pc);
    TrainConfig tc;
    EXPECT_THROW((void)fit(p, {}, {}, tc), DataError);
    tc.epochs = 0;
    EXPECT_THROW((void)fit(p, p.prepare_all(gen_dataset(1, 1, small_pages())), {}, tc), ConfigError);
}

TEST(TrainCsv, HeaderAndRows) {
    TrainReport r;
    r.epochs.push_back({1, 4, 0.5, 1e-4, 1e-5, 0.75});
    r.epochs.push_back({2, 8, 0.25, 5e-5, 5e-6, std::numeric_limits<double>::quiet_NaN()});
    std::ostringstream os;
    write_train_csv(os, r);
    EXPECT_EQ(os.str(), "epoch,step,loss,lr_comp,lr_lora,holdout_similarity\n1,4,0.5,0.0001,1e-05,0.75\n"
                        "2,8,0.25,5e-05,5e-06,\n");
}

TEST(Pretrain, LowersLossAndFreezesBase) {
    auto m = toy_model(16, 12);
    const auto data = gen_dataset(8, 16, small_pages());
    PretrainConfig pc;
    pc.epochs = 8;
    pc.batch_size = 4;
    const auto hist = pretrain_decoder(m.decoder, data, pc);
    ASSERT_EQ(hist.size(), 8u);
    EXPECT_LT(hist.back(), hist.front());
    for (const auto& p : m.decoder.base_parameters()) EXPECT_FALSE(p.tensor.requires_grad());
    for (const auto& p : m.decoder.lora_parameters()) EXPECT_TRUE(p.tensor.requires_grad());
}
