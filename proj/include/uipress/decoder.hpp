#pragma once

// Small decoder-only transformer that reads [visual ; prompt ; markup] and
// predicts markup tokens. The base weights are frozen after a text-only
// pretraining pass; query and value projections carry LoRA adapters.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "uipress/tensor.hpp"

namespace uipress {

struct DecoderConfig {
    std::size_t layers = 2;
    std::size_t dim = 32;
    std::size_t heads = 4;
    std::size_t vocab_size = 32;
    std::size_t max_seq_len = 128;
    std::size_t ffn_mult = 4;
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;
    int eos_id = 2;

    void validate() const {
        if (layers == 0 || dim == 0 || vocab_size == 0 || max_seq_len == 0 || ffn_mult == 0) {
            throw ConfigError("decoder: layers, dim, vocab, max_seq_len and ffn width must be positive");
        }
        if (heads == 0 || dim % heads != 0) {
            throw ConfigError("decoder: D=" + std::to_string(dim) + " not divisible by " +
                              std::to_string(heads) + " heads");
        }
        if (lora_rank == 0 || lora_rank > dim) {
            throw ConfigError("decoder: LoRA rank " + std::to_string(lora_rank) + " must be in [1, D=" +
                              std::to_string(dim) + "]");
        }
    }
};

// Frozen W plus a low-rank update (alpha/r) B A.
struct LoraLinear {
    Tensor base;  // [D_out x D_in], frozen
    Tensor a;     // [r x D_in]
    Tensor b;     // [D_out x r]
    std::size_t rank = 0;
    double alpha = 0.0;

    double scaling() const { return alpha / static_cast<double>(rank); }

    template <typename Rng>
    static LoraLinear create(Tensor base, std::size_t rank, double alpha, Rng& rng) {
        if (rank == 0 || rank > base.dim(1)) {
            throw ConfigError("LoRA rank " + std::to_string(rank) + " exceeds input width " +
                              std::to_string(base.dim(1)));
        }
        LoraLinear m;
        m.rank = rank;
        m.alpha = alpha;
        m.a = Tensor::normal({rank, base.dim(1)}, 1.0 / static_cast<double>(rank), rng, true);
        m.b = Tensor({base.dim(0), rank}, 0.0, true);
        m.base = std::move(base);
        return m;
    }
};

// x W^T + (alpha/r) (x A^T) B^T, without forming the merged weight.
inline Tensor lora_forward(const Tensor& x, const LoraLinear& m) {
    if (m.rank == 0 || m.rank > m.base.dim(1) || m.a.dim(0) != m.rank || m.b.dim(1) != m.rank) {
        throw ConfigError("lora_forward: inconsistent rank " + std::to_string(m.rank) + " for A " +
                          detail::format_shape(m.a.shape()) + " and B " + detail::format_shape(m.b.shape()));
    }
    Tensor base = linear(x, m.base);
    MacBucketScope adapter(MacBucket::adapter);
    return add(base, scale(linear(linear(x, m.a), m.b), m.scaling()));
}

inline Tensor merge_lora(const LoraLinear& m) {
    const std::size_t out = m.base.dim(0), in = m.base.dim(1);
    Tensor merged = m.base.clone();
    auto wv = merged.values();
    auto av = m.a.values(), bv = m.b.values();
    const double s = m.scaling();
    for (std::size_t i = 0; i < out; ++i)
        for (std::size_t j = 0; j < in; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < m.rank; ++r) acc += bv[i * m.rank + r] * av[r * in + j];
            wv[i * in + j] += s * acc;
        }
    return merged;
}

inline std::size_t count_lora_params(std::size_t layers, std::size_t rank, std::size_t dim,
                                     std::size_t projections_per_layer = 2) {
    return layers * projections_per_layer * 2 * rank * dim;
}

struct DecoderLayer {
    Tensor ln1_gamma, ln1_beta;
    LoraLinear q;
    Tensor wk;
    LoraLinear v;
    Tensor wo;
    Tensor ln2_gamma, ln2_beta;
    Tensor w1;  // [ffn x D]
    Tensor w2;  // [D x ffn]
};

struct GenerationOptions {
    std::size_t max_new = 128;
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    bool use_cache = true;  // false recomputes the whole sequence per token
};

class Decoder {
public:
    Decoder() = default;

    Decoder(DecoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        const std::size_t d = cfg_.dim, ffn = cfg_.ffn_mult * d;
        auto dense = [&](std::size_t out, std::size_t in) {
            return Tensor::normal({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
        };
        tok_emb_ = Tensor::normal({cfg_.vocab_size, d}, 0.02, rng);
        pos_emb_ = Tensor::normal({cfg_.max_seq_len, d}, 0.02, rng);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            DecoderLayer layer;
            layer.ln1_gamma = Tensor({d}, 1.0);
            layer.ln1_beta = Tensor({d}, 0.0);
            Tensor wq = dense(d, d);
            layer.wk = dense(d, d);
            Tensor wv = dense(d, d);
            layer.wo = dense(d, d);
            layer.ln2_gamma = Tensor({d}, 1.0);
            layer.ln2_beta = Tensor({d}, 0.0);
            layer.w1 = dense(ffn, d);
            layer.w2 = dense(d, ffn);
            layer.q = LoraLinear::create(std::move(wq), cfg_.lora_rank, cfg_.lora_alpha, rng);
            layer.v = LoraLinear::create(std::move(wv), cfg_.lora_rank, cfg_.lora_alpha, rng);
            layers_.push_back(std::move(layer));
        }
        lnf_gamma_ = Tensor({d}, 1.0);
        lnf_beta_ = Tensor({d}, 0.0);
        head_ = dense(cfg_.vocab_size, d);
    }

    const DecoderConfig& config() const { return cfg_; }
    std::vector<DecoderLayer>& layers() { return layers_; }
    const std::vector<DecoderLayer>& layers() const { return layers_; }

    // Every non-LoRA weight.
    std::vector<Parameter> base_parameters() const {
        std::vector<Parameter> out{{"decoder.tok_emb", tok_emb_, true}, {"decoder.pos_emb", pos_emb_, false}};
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            const std::string p = "decoder.layer" + std::to_string(l) + ".";
            out.push_back({p + "ln1_gamma", L.ln1_gamma, false});
            out.push_back({p + "ln1_beta", L.ln1_beta, false});
            out.push_back({p + "wq", L.q.base, true});
            out.push_back({p + "wk", L.wk, true});
            out.push_back({p + "wv", L.v.base, true});
            out.push_back({p + "wo", L.wo, true});
            out.push_back({p + "ln2_gamma", L.ln2_gamma, false});
            out.push_back({p + "ln2_beta", L.ln2_beta, false});
            out.push_back({p + "w1", L.w1, true});
            out.push_back({p + "w2", L.w2, true});
        }
        out.push_back({"decoder.lnf_gamma", lnf_gamma_, false});
        out.push_back({"decoder.lnf_beta", lnf_beta_, false});
        out.push_back({"decoder.head", head_, true});
        return out;
    }

    std::vector<Parameter> lora_parameters() const {
        std::vector<Parameter> out;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            const std::string p = "lora.layer" + std::to_string(l) + ".";
            out.push_back({p + "q.a", L.q.a, true});
            out.push_back({p + "q.b", L.q.b, true});
            out.push_back({p + "v.a", L.v.a, true});
            out.push_back({p + "v.b", L.v.b, true});
        }
        return out;
    }

    void set_base_trainable(bool on) {
        for (auto& p : base_parameters()) p.tensor.set_requires_grad(on);
    }

    void set_lora_trainable(bool on) {
        for (auto& p : lora_parameters()) p.tensor.set_requires_grad(on);
    }

    // Copy with independent storage for every array.
    Decoder deep_copy() const {
        Decoder d = *this;
        auto clone_into = [](Tensor& t) { t = t.clone(t.requires_grad()); };
        clone_into(d.tok_emb_);
        clone_into(d.pos_emb_);
        for (auto& L : d.layers_) {
            for (Tensor* t : {&L.ln1_gamma, &L.ln1_beta, &L.q.base, &L.q.a, &L.q.b, &L.wk, &L.v.base, &L.v.a,
                              &L.v.b, &L.wo, &L.ln2_gamma, &L.ln2_beta, &L.w1, &L.w2}) {
                clone_into(*t);
            }
        }
        clone_into(d.lnf_gamma_);
        clone_into(d.lnf_beta_);
        clone_into(d.head_);
        return d;
    }

    // Logits for every position of [visual ; prompt ; targets]. `visual` may be
    // undefined for text-only use.
    Tensor forward(const Tensor& visual, std::span<const int> prompt, std::span<const int> targets) const {
        return forward_impl(visual, prompt, targets, false);
    }

    // Hidden states after the final norm, without the output head.
    Tensor hidden(const Tensor& visual, std::span<const int> prompt, std::span<const int> targets) const {
        const Tensor x = embed(visual, prompt, targets);
        return run_layers(x);
    }

    std::vector<int> generate(const Tensor& visual, std::span<const int> prompt,
                              const GenerationOptions& opts = {}) const {
        NoGradGuard no_grad;
        std::vector<int> out;
        std::mt19937_64 rng(opts.seed);
        const std::size_t prefix = (visual.defined() ? visual.dim(0) : 0) + prompt.size();
        std::vector<KvCache> cache;
        Tensor logits;
        while (out.size() < opts.max_new && prefix + out.size() < cfg_.max_seq_len) {
            if (!opts.use_cache) {
                logits = forward_impl(visual, prompt, out, true);
            } else if (out.empty()) {
                cache.assign(layers_.size(), KvCache{});
                Tensor x = run_layers(embed(visual, prompt, {}), &cache);
                x = slice_rows(x, x.dim(0) - 1, x.dim(0));
                logits = linear(x, head_);
            } else {
                logits = step_cached(out.back(), prefix + out.size() - 1, cache);
            }
            auto row = logits.values();
            int next = 0;
            if (opts.greedy) {
                next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            } else {
                std::vector<double> w(row.size());
                const double mx = *std::max_element(row.begin(), row.end());
                for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp((row[i] - mx) / opts.temperature);
                std::discrete_distribution<int> dist(w.begin(), w.end());
                next = dist(rng);
            }
            if (next == cfg_.eos_id) {
                break;
            }
            out.push_back(next);
        }
        return out;
    }

private:
    Tensor embed(const Tensor& visual, std::span<const int> prompt, std::span<const int> targets) const {
        const std::size_t nv = visual.defined() ? visual.dim(0) : 0;
        const std::size_t s = nv + prompt.size() + targets.size();
        if (s == 0) {
            throw DimensionError("decoder: empty input sequence");
        }
        if (s > cfg_.max_seq_len) {
            throw DimensionError("decoder: sequence length " + std::to_string(s) + " exceeds max_seq_len " +
                                 std::to_string(cfg_.max_seq_len));
        }
        std::vector<Tensor> parts;
        if (nv > 0) {
            if (visual.rank() != 2 || visual.dim(1) != cfg_.dim) {
                throw DimensionError("decoder: visual tokens " + detail::format_shape(visual.shape()) +
                                     " do not have width D=" + std::to_string(cfg_.dim));
            }
            parts.push_back(visual);
        }
        if (!prompt.empty()) parts.push_back(embedding_lookup(tok_emb_, prompt));
        if (!targets.empty()) parts.push_back(embedding_lookup(tok_emb_, targets));
        Tensor x = parts.size() == 1 ? parts.front() : concat_rows(parts);
        return add(x, slice_rows(pos_emb_, 0, s));
    }

    struct KvCache {
        std::vector<double> keys, values;
        std::size_t rows = 0;
    };

    Tensor run_layers(Tensor x, std::vector<KvCache>* cache = nullptr) const {
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            Tensor h = layer_norm(x, L.ln1_gamma, L.ln1_beta);
            Tensor attn_out;
            {
                MacBucketScope proj(MacBucket::projection);
                Tensor q = lora_forward(h, L.q);
                Tensor k = linear(h, L.wk);
                Tensor v = lora_forward(h, L.v);
                if (cache) {
                    auto& c = (*cache)[l];
                    c.keys.assign(k.values().begin(), k.values().end());
                    c.values.assign(v.values().begin(), v.values().end());
                    c.rows = k.dim(0);
                }
                Tensor mixed;
                {
                    MacBucketScope attn(MacBucket::attention);
                    mixed = multi_head_attention(q, k, v, cfg_.heads, true);
                }
                attn_out = linear(mixed, L.wo);
            }
            x = add(x, attn_out);
            h = layer_norm(x, L.ln2_gamma, L.ln2_beta);
            MacBucketScope ffn(MacBucket::ffn);
            x = add(x, linear(gelu(linear(h, L.w1)), L.w2));
        }
        return layer_norm(x, lnf_gamma_, lnf_beta_);
    }

    // Logits for one new token at `position`, extending the cache by one row.
    Tensor step_cached(int token, std::size_t position, std::vector<KvCache>& cache) const {
        const int ids[1] = {token};
        Tensor x = add(embedding_lookup(tok_emb_, ids), slice_rows(pos_emb_, position, position + 1));
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            auto& c = cache[l];
            Tensor h = layer_norm(x, L.ln1_gamma, L.ln1_beta);
            Tensor q = lora_forward(h, L.q);
            Tensor k = linear(h, L.wk);
            Tensor v = lora_forward(h, L.v);
            c.keys.insert(c.keys.end(), k.values().begin(), k.values().end());
            c.values.insert(c.values.end(), v.values().begin(), v.values().end());
            ++c.rows;
            Tensor mixed = attention_cached(q, c.keys, c.values, c.rows, cfg_.heads);
            x = add(x, linear(mixed, L.wo));
            h = layer_norm(x, L.ln2_gamma, L.ln2_beta);
            x = add(x, linear(gelu(linear(h, L.w1)), L.w2));
        }
        return linear(layer_norm(x, lnf_gamma_, lnf_beta_), head_);
    }

    Tensor forward_impl(const Tensor& visual, std::span<const int> prompt, std::span<const int> targets,
                        bool last_only) const {
        Tensor x = run_layers(embed(visual, prompt, targets));
        if (last_only) {
            x = slice_rows(x, x.dim(0) - 1, x.dim(0));
        }
        MacBucketScope head(MacBucket::head);
        return linear(x, head_);
    }

    DecoderConfig cfg_;
    Tensor tok_emb_, pos_emb_;
    std::vector<DecoderLayer> layers_;
    Tensor lnf_gamma_, lnf_beta_;
    Tensor head_;
};

}  // namespace uipress
