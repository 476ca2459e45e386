#pragma once

// Autoregressive training of the compressor and LoRA factors.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "uipress/pipeline.hpp"

namespace uipress {

// Next-token cross entropy over the target span only. `logits` covers
// [visual ; prompt ; targets...]; row visual+prompt-1+t predicts targets[t].
// Visual and prompt positions carry no loss.
inline Tensor autoregressive_loss(const Tensor& logits, std::span<const int> targets, std::size_t prompt_len,
                                  std::size_t visual_len) {
    if (targets.empty()) {
        throw DataError("autoregressive_loss: empty target");
    }
    const std::size_t prefix = visual_len + prompt_len;
    if (prefix == 0) {
        throw DimensionError("autoregressive_loss: no prefix to predict the first target from");
    }
    const std::size_t rows = logits.dim(0);
    if (rows < prefix + targets.size() - 1) {
        throw DimensionError("autoregressive_loss: " + std::to_string(rows) + " logit rows cannot cover prefix " +
                             std::to_string(prefix) + " + " + std::to_string(targets.size()) + " targets");
    }
    std::vector<int> labels(rows, kIgnoreIndex);
    for (std::size_t t = 0; t < targets.size(); ++t) labels[prefix - 1 + t] = targets[t];
    return cross_entropy_from_logits(logits, labels);
}

// Cosine decay from base_lr at step 0 to min_lr at step total.
inline double cosine_lr(std::size_t step, std::size_t total, double base_lr, double min_lr = 1e-6) {
    if (total == 0) {
        throw ConfigError("cosine_lr: total steps must be positive");
    }
    const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double grad_norm(const std::vector<Parameter>& params) {
    double s = 0.0;
    for (const auto& p : params) {
        if (!p.tensor.requires_grad()) continue;
        for (double g : p.tensor.grads()) s += g * g;
    }
    return std::sqrt(s);
}

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(const std::vector<Parameter>& params, double max_norm) {
    const double norm = grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const double c = max_norm / norm;
        for (const auto& p : params) {
            if (!p.tensor.requires_grad()) continue;
            Tensor t = p.tensor;
            for (double& g : t.grads()) g *= c;
        }
    }
    return norm;
}

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct ParamGroup {
    std::vector<Parameter> params;
    double lr = 0.0;
};

class AdamW {
public:
    AdamW(std::vector<ParamGroup> groups, AdamWOptions opts = {}) : groups_(std::move(groups)), opts_(opts) {
        for (const auto& g : groups_) {
            auto& gm = m_.emplace_back();
            auto& gv = v_.emplace_back();
            for (const auto& p : g.params) {
                gm.emplace_back(p.tensor.numel(), 0.0);
                gv.emplace_back(p.tensor.numel(), 0.0);
            }
        }
    }

    std::vector<ParamGroup>& groups() { return groups_; }
    std::size_t steps() const { return t_; }

    void set_lr(std::size_t group, double lr) { groups_.at(group).lr = lr; }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
            const double lr = groups_[gi].lr;
            for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
                const Parameter& p = groups_[gi].params[pi];
                if (!p.tensor.requires_grad()) continue;
                Tensor t = p.tensor;
                auto w = t.values();
                auto g = t.grads();
                auto& m = m_[gi][pi];
                auto& v = v_[gi][pi];
                const double decay = p.decay ? lr * opts_.weight_decay : 0.0;
                for (std::size_t i = 0; i < w.size(); ++i) {
                    m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
                    v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
                    const double mh = m[i] / bc1, vh = v[i] / bc2;
                    w[i] -= decay * w[i];
                    w[i] -= lr * mh / (std::sqrt(vh) + opts_.eps);
                }
            }
        }
    }

    void zero_grad() {
        for (const auto& g : groups_) zero_grads(g.params);
    }

private:
    std::vector<ParamGroup> groups_;
    AdamWOptions opts_;
    std::vector<std::vector<std::vector<double>>> m_, v_;
    std::size_t t_ = 0;
};

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 8;  // samples accumulated per optimizer step
    double lr_compressor = 2e-4;
    double lr_lora = 2e-5;
    double lr_min = 1e-6;
    double clip_norm = 1.0;
    AdamWOptions adamw;
    std::size_t holdout_eval = 16;  // holdout samples scored per epoch; 0 disables
    bool restore_best = true;
    std::size_t max_new = 96;
    std::uint64_t seed = 11;

    void validate() const {
        if (epochs == 0 || batch_size == 0) throw ConfigError("train: epochs and batch size must be positive");
        if (lr_compressor < 0 || lr_lora < 0 || lr_min < 0) throw ConfigError("train: learning rates must be >= 0");
        if (clip_norm <= 0) throw ConfigError("train: clip norm must be positive");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double loss = 0.0;
    double lr_compressor = 0.0;
    double lr_lora = 0.0;
    double holdout_similarity = std::numeric_limits<double>::quiet_NaN();
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_similarity = std::numeric_limits<double>::quiet_NaN();
    std::size_t steps = 0;
};

inline void write_train_csv(std::ostream& os, const TrainReport& r) {
    os.precision(10);
    os << "epoch,step,loss,lr_comp,lr_lora,holdout_similarity\n";
    for (const auto& e : r.epochs) {
        os << e.epoch << ',' << e.step << ',' << e.loss << ',' << e.lr_compressor << ',' << e.lr_lora << ',';
        if (!std::isnan(e.holdout_similarity)) os << e.holdout_similarity;
        os << '\n';
    }
}

inline double mean_render_similarity(const Pipeline& p, const std::vector<PreparedSample>& samples,
                                     std::size_t limit, std::size_t max_new) {
    const std::size_t n = std::min(limit, samples.size());
    if (n == 0) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += p.render_similarity(samples[i], max_new);
    return s / static_cast<double>(n);
}

namespace detail {

inline std::vector<std::vector<double>> snapshot(const std::vector<Parameter>& params) {
    std::vector<std::vector<double>> out;
    for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    return out;
}

inline void restore(const std::vector<Parameter>& params, const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        std::copy(snap[i].begin(), snap[i].end(), t.values().begin());
    }
}

}  // namespace detail

// Trains compressor (lr_compressor) and LoRA factors (lr_lora) jointly with
// AdamW, per-step cosine decay, gradient clipping and accumulation over
// batch_size samples. Holdout render similarity is measured after each epoch;
// with restore_best the best epoch's weights are restored at the end.
inline TrainReport fit(Pipeline& pipe, const std::vector<PreparedSample>& train,
                       const std::vector<PreparedSample>& holdout, const TrainConfig& cfg,
                       const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    if (train.empty()) throw DataError("fit: empty training set");
    const auto comp = pipe.compressor_parameters();
    const auto lora = pipe.lora_parameters();
    const auto all = pipe.trainable_parameters();
    TrainReport report;
    if (all.empty()) {
        // Nothing to optimise (frozen baseline): report the untouched model.
        const double sim = mean_render_similarity(pipe, holdout, cfg.holdout_eval, cfg.max_new);
        report.epochs.push_back({0, 0, std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0, sim});
        report.best_similarity = sim;
        return report;
    }

    AdamW opt({{comp, cfg.lr_compressor}, {lora, cfg.lr_lora}}, cfg.adamw);
    const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = steps_per_epoch * cfg.epochs;
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t prompt_len = vocab::prompt().size();

    std::vector<std::vector<double>> best;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        double lr_c = 0.0, lr_l = 0.0;
        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            const std::size_t lo = b * cfg.batch_size, hi = std::min(train.size(), lo + cfg.batch_size);
            opt.zero_grad();
            for (std::size_t i = lo; i < hi; ++i) {
                const PreparedSample& s = train[order[i]];
                const Tensor logits = pipe.logits(s, Mode::train, &rng);
                const Tensor loss = autoregressive_loss(logits, s.targets, prompt_len, pipe.visual_token_count(s));
                const double lv = loss.item();
                if (!std::isfinite(lv)) {
                    active_tape().clear();
                    throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                       std::to_string(step));
                }
                loss_sum += lv;
                backward(scale(loss, 1.0 / static_cast<double>(hi - lo)));
            }
            clip_grad_norm(all, cfg.clip_norm);
            lr_c = cosine_lr(step, total, cfg.lr_compressor, cfg.lr_min);
            lr_l = cosine_lr(step, total, cfg.lr_lora, cfg.lr_min);
            opt.set_lr(0, lr_c);
            opt.set_lr(1, lr_l);
            opt.step();
            ++step;
        }
        EpochRecord rec{epoch, step, loss_sum / static_cast<double>(train.size()), lr_c, lr_l,
                        mean_render_similarity(pipe, holdout, cfg.holdout_eval, cfg.max_new)};
        if (!std::isnan(rec.holdout_similarity) &&
            (std::isnan(report.best_similarity) || rec.holdout_similarity > report.best_similarity)) {
            report.best_similarity = rec.holdout_similarity;
            report.best_epoch = epoch;
            if (cfg.restore_best) best = detail::snapshot(all);
        }
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    report.steps = step;
    if (cfg.restore_best && !best.empty()) detail::restore(all, best);
    return report;
}

struct PretrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    double lr = 3e-3;
    double lr_min = 1e-5;
    double clip_norm = 1.0;
    std::vector<std::size_t> prefix_lengths{16};  // zero visual prefixes seen in pretraining
    std::uint64_t seed = 5;
};

// Text-only language-model pretraining of the decoder base on target
// sequences behind all-zero visual prefixes. The base is frozen afterwards.
// Returns the mean loss per epoch.
inline std::vector<double> pretrain_decoder(Decoder& dec, const std::vector<SyntheticSample>& samples,
                                            const PretrainConfig& cfg) {
    if (samples.empty()) throw DataError("pretrain_decoder: empty dataset");
    if (cfg.prefix_lengths.empty()) throw ConfigError("pretrain_decoder: no prefix lengths");
    dec.set_base_trainable(true);
    dec.set_lora_trainable(false);
    const auto params = dec.base_parameters();
    AdamW opt({{params, cfg.lr}}, {});
    const std::size_t steps_per_epoch = (samples.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = steps_per_epoch * cfg.epochs;
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<Tensor> prefixes;
    for (auto k : cfg.prefix_lengths) prefixes.emplace_back(Shape{k, dec.config().dim}, 0.0);
    std::vector<std::vector<int>> targets;
    for (const auto& s : samples) targets.push_back(target_sequence(s.markup));
    const auto prompt = vocab::prompt();

    std::vector<double> history;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            const std::size_t lo = b * cfg.batch_size, hi = std::min(samples.size(), lo + cfg.batch_size);
            opt.zero_grad();
            for (std::size_t i = lo; i < hi; ++i) {
                const std::size_t idx = order[i];
                const Tensor& prefix = prefixes[(idx + epoch) % prefixes.size()];
                const Tensor logits = dec.forward(prefix, prompt, targets[idx]);
                const Tensor loss = autoregressive_loss(logits, targets[idx], prompt.size(), prefix.dim(0));
                if (!std::isfinite(loss.item())) {
                    active_tape().clear();
                    throw NumericError("pretrain_decoder: non-finite loss");
                }
                loss_sum += loss.item();
                backward(scale(loss, 1.0 / static_cast<double>(hi - lo)));
            }
            clip_grad_norm(params, cfg.clip_norm);
            opt.set_lr(0, cosine_lr(step, total, cfg.lr, cfg.lr_min));
            opt.step();
            ++step;
        }
        history.push_back(loss_sum / static_cast<double>(samples.size()));
    }
    dec.set_base_trainable(false);
    dec.set_lora_trainable(true);
    return history;
}

}  // namespace uipress
