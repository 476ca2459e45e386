#pragma once

// Screenshot -> visual tokens -> decoder. One Pipeline per token path
// (learned compressor or a baseline); every pipeline built from the same
// encoder and decoder shares their frozen arrays.

#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "uipress/baselines.hpp"
#include "uipress/compressor.hpp"
#include "uipress/decoder.hpp"
#include "uipress/encoder.hpp"
#include "uipress/serialize.hpp"
#include "uipress/synth.hpp"

namespace uipress {

enum class Method { uipress, topk_norm, feature_zero, resolution, uncompressed };

inline constexpr std::array<std::string_view, 5> kMethodNames = {"uipress", "topk_norm", "feature_zero", "resolution",
                                                                 "uncompressed"};

inline std::string_view method_name(Method m) { return kMethodNames.at(static_cast<std::size_t>(m)); }

inline Method parse_method(std::string_view s) {
    for (std::size_t i = 0; i < kMethodNames.size(); ++i) {
        if (kMethodNames[i] == s) return static_cast<Method>(i);
    }
    throw ConfigError("unknown method '" + std::string(s) + "'");
}

struct PipelineConfig {
    Method method = Method::uipress;
    std::size_t token_budget = 16;  // uipress, topk_norm
    double zero_fraction = 0.75;    // feature_zero
    std::size_t scale_factor = 2;   // resolution
    bool rectangular_pool = false;  // uipress: accept K = 2s^2 as an s x 2s grid
    bool train_lora = true;
    CompressorConfig compressor;    // uipress only
    std::uint64_t seed = 7;         // compressor and LoRA init
};

// Frozen work done once per sample: encoder output (or the whole baseline path).
struct PreparedSample {
    VisualTokens tokens;
    std::size_t source_tokens = 0;  // N before any reduction
    ElementAnnotation annotation;
    PageImage image;
    std::vector<int> targets;
    PageType page_type = PageType::complex;
};

// Same base arrays, independent LoRA factors (A random, B zero).
inline Decoder with_fresh_lora(const Decoder& base, std::uint64_t seed) {
    Decoder d = base;
    std::mt19937_64 rng(seed);
    for (auto& L : d.layers()) {
        L.q = LoraLinear::create(L.q.base, L.q.rank, L.q.alpha, rng);
        L.v = LoraLinear::create(L.v.base, L.v.rank, L.v.alpha, rng);
    }
    return d;
}

class Pipeline {
public:
    Pipeline(FrozenEncoder encoder, const Decoder& decoder, PipelineConfig cfg)
        : encoder_(std::move(encoder)), decoder_(with_fresh_lora(decoder, cfg.seed)), cfg_(std::move(cfg)) {
        if (cfg_.method == Method::uipress) {
            cfg_.compressor.dim = encoder_.dim;
            if (cfg_.compressor.token_budget != cfg_.token_budget ||
                cfg_.compressor.pool_grid.cells() != cfg_.token_budget) {
                cfg_.compressor.set_budget(cfg_.token_budget, cfg_.rectangular_pool);
            }
            compressor_.emplace(cfg_.compressor, cfg_.seed + 1);
        }
        if (encoder_.dim != decoder_.config().dim) {
            throw ConfigError("pipeline: encoder width " + std::to_string(encoder_.dim) + " != decoder width " +
                              std::to_string(decoder_.config().dim));
        }
        decoder_.set_lora_trainable(cfg_.train_lora);
    }

    const PipelineConfig& config() const { return cfg_; }
    const FrozenEncoder& encoder() const { return encoder_; }
    const Decoder& decoder() const { return decoder_; }
    Decoder& decoder() { return decoder_; }
    const std::optional<OpticalCompressor>& compressor() const { return compressor_; }
    std::optional<OpticalCompressor>& compressor() { return compressor_; }

    PreparedSample prepare(const SyntheticSample& s) const {
        PreparedSample p;
        p.annotation = s.annotation;
        p.image = s.image;
        p.targets = target_sequence(s.markup);
        p.page_type = s.page_type;
        if (cfg_.method == Method::resolution) {
            p.tokens = patch_encode(resolution_scale(s.image, cfg_.scale_factor), encoder_);
            p.source_tokens = (s.image.height_px / encoder_.patch_size) * (s.image.width_px / encoder_.patch_size);
            return p;
        }
        VisualTokens enc = patch_encode(s.image, encoder_);
        p.source_tokens = enc.count();
        switch (cfg_.method) {
            case Method::topk_norm:
                p.tokens = {baseline_topk_norm(enc, cfg_.token_budget), GridDims{1, cfg_.token_budget}};
                break;
            case Method::feature_zero:
                p.tokens = baseline_feature_zero(enc, cfg_.zero_fraction);
                break;
            default:
                p.tokens = std::move(enc);
                break;
        }
        return p;
    }

    std::vector<PreparedSample> prepare_all(const std::vector<SyntheticSample>& samples) const {
        std::vector<PreparedSample> out;
        out.reserve(samples.size());
        for (const auto& s : samples) out.push_back(prepare(s));
        return out;
    }

    template <typename Rng = std::mt19937_64>
    Tensor visual(const PreparedSample& p, Mode mode = Mode::eval, Rng* rng = nullptr) const {
        if (compressor_) {
            return compressor_->compress(p.tokens, p.annotation, p.image.height_px, p.image.width_px, mode, rng);
        }
        return p.tokens.tokens;
    }

    // Visual tokens the decoder sees for a sample.
    std::size_t visual_token_count(const PreparedSample& p) const {
        return compressor_ ? cfg_.token_budget : p.tokens.count();
    }

    template <typename Rng = std::mt19937_64>
    Tensor logits(const PreparedSample& p, Mode mode = Mode::eval, Rng* rng = nullptr) const {
        return decoder_.forward(visual(p, mode, rng), vocab::prompt(), p.targets);
    }

    std::vector<int> generate(const PreparedSample& p, std::size_t max_new = 96) const {
        NoGradGuard no_grad;
        GenerationOptions opts;
        opts.max_new = max_new;
        return decoder_.generate(visual(p), vocab::prompt(), opts);
    }

    // generate -> parse_lenient -> render -> similarity against the ground-truth page.
    double render_similarity(const PreparedSample& p, std::size_t max_new = 96) const {
        const auto out = generate(p, max_new);
        const auto parsed = parse_lenient(out);
        return similarity(render(parsed.program, p.image.height_px, p.image.width_px), p.image);
    }

    std::vector<Parameter> compressor_parameters() const {
        return compressor_ ? compressor_->parameters() : std::vector<Parameter>{};
    }

    std::vector<Parameter> lora_parameters() const {
        return cfg_.train_lora ? decoder_.lora_parameters() : std::vector<Parameter>{};
    }

    std::vector<Parameter> trainable_parameters() const {
        auto out = compressor_parameters();
        for (auto& p : lora_parameters()) out.push_back(p);
        return out;
    }

private:
    FrozenEncoder encoder_;
    Decoder decoder_;
    PipelineConfig cfg_;
    std::optional<OpticalCompressor> compressor_;
};

// ---------------------------------------------------------------------------
// Checkpoints: one named-array container. "cfg.*" entries carry the
// configuration as length-1 (or length-5 for category weights) arrays.

namespace detail {

inline void put_cfg(std::vector<NamedArray>& out, const std::string& key, double v) {
    out.push_back({"cfg." + key, Tensor::scalar(v)});
}

inline std::map<std::string, Tensor> index_arrays(const std::vector<NamedArray>& arrays) {
    std::map<std::string, Tensor> m;
    for (const auto& a : arrays) m[a.name] = a.array;
    return m;
}

inline double get_cfg(const std::map<std::string, Tensor>& m, const std::string& key) {
    auto it = m.find("cfg." + key);
    if (it == m.end()) throw DataError("checkpoint: missing config entry '" + key + "'");
    return it->second.values()[0];
}

inline void load_into(const std::map<std::string, Tensor>& m, const std::vector<Parameter>& params) {
    for (const auto& p : params) {
        auto it = m.find(p.name);
        if (it == m.end()) throw DataError("checkpoint: missing array '" + p.name + "'");
        if (it->second.shape() != p.tensor.shape()) {
            throw DataError("checkpoint: array '" + p.name + "' has shape " + format_shape(it->second.shape()) +
                            ", expected " + format_shape(p.tensor.shape()));
        }
        Tensor dst = p.tensor;
        std::copy(it->second.values().begin(), it->second.values().end(), dst.values().begin());
    }
}

inline void put_decoder_cfg(std::vector<NamedArray>& out, const DecoderConfig& c) {
    put_cfg(out, "dec.layers", static_cast<double>(c.layers));
    put_cfg(out, "dec.dim", static_cast<double>(c.dim));
    put_cfg(out, "dec.heads", static_cast<double>(c.heads));
    put_cfg(out, "dec.vocab", static_cast<double>(c.vocab_size));
    put_cfg(out, "dec.max_seq", static_cast<double>(c.max_seq_len));
    put_cfg(out, "dec.ffn_mult", static_cast<double>(c.ffn_mult));
    put_cfg(out, "dec.lora_rank", static_cast<double>(c.lora_rank));
    put_cfg(out, "dec.lora_alpha", c.lora_alpha);
    put_cfg(out, "dec.eos", static_cast<double>(c.eos_id));
}

inline DecoderConfig get_decoder_cfg(const std::map<std::string, Tensor>& m) {
    DecoderConfig c;
    c.layers = static_cast<std::size_t>(get_cfg(m, "dec.layers"));
    c.dim = static_cast<std::size_t>(get_cfg(m, "dec.dim"));
    c.heads = static_cast<std::size_t>(get_cfg(m, "dec.heads"));
    c.vocab_size = static_cast<std::size_t>(get_cfg(m, "dec.vocab"));
    c.max_seq_len = static_cast<std::size_t>(get_cfg(m, "dec.max_seq"));
    c.ffn_mult = static_cast<std::size_t>(get_cfg(m, "dec.ffn_mult"));
    c.lora_rank = static_cast<std::size_t>(get_cfg(m, "dec.lora_rank"));
    c.lora_alpha = get_cfg(m, "dec.lora_alpha");
    c.eos_id = static_cast<int>(get_cfg(m, "dec.eos"));
    c.validate();
    return c;
}

}  // namespace detail

inline std::vector<NamedArray> decoder_arrays(const Decoder& d) {
    std::vector<NamedArray> out;
    detail::put_decoder_cfg(out, d.config());
    for (const auto& p : d.base_parameters()) out.push_back({p.name, p.tensor});
    for (const auto& p : d.lora_parameters()) out.push_back({p.name, p.tensor});
    return out;
}

inline Decoder decoder_from_arrays(const std::vector<NamedArray>& arrays) {
    const auto m = detail::index_arrays(arrays);
    Decoder d(detail::get_decoder_cfg(m), 0);
    detail::load_into(m, d.base_parameters());
    detail::load_into(m, d.lora_parameters());
    return d;
}

inline std::vector<NamedArray> pipeline_arrays(const Pipeline& p) {
    std::vector<NamedArray> out = decoder_arrays(p.decoder());
    const auto& cfg = p.config();
    const auto& enc = p.encoder();
    detail::put_cfg(out, "method", static_cast<double>(cfg.method));
    detail::put_cfg(out, "k", static_cast<double>(cfg.token_budget));
    detail::put_cfg(out, "zero_fraction", cfg.zero_fraction);
    detail::put_cfg(out, "scale_factor", static_cast<double>(cfg.scale_factor));
    detail::put_cfg(out, "train_lora", cfg.train_lora ? 1.0 : 0.0);
    detail::put_cfg(out, "seed", static_cast<double>(cfg.seed));
    detail::put_cfg(out, "enc.patch", static_cast<double>(enc.patch_size));
    detail::put_cfg(out, "enc.dim", static_cast<double>(enc.dim));
    detail::put_cfg(out, "enc.grid_h", static_cast<double>(enc.max_grid.h));
    detail::put_cfg(out, "enc.grid_w", static_cast<double>(enc.max_grid.w));
    const auto& cc = cfg.compressor;
    detail::put_cfg(out, "comp.pool_h", static_cast<double>(cc.pool_grid.h));
    detail::put_cfg(out, "comp.pool_w", static_cast<double>(cc.pool_grid.w));
    detail::put_cfg(out, "comp.blocks", static_cast<double>(cc.conv_blocks));
    detail::put_cfg(out, "comp.groups", static_cast<double>(cc.groups));
    detail::put_cfg(out, "comp.heads", static_cast<double>(cc.heads));
    detail::put_cfg(out, "comp.ffn_ratio", static_cast<double>(cc.ffn_ratio));
    detail::put_cfg(out, "comp.dropout", cc.dropout);
    detail::put_cfg(out, "comp.conv", static_cast<double>(cc.conv));
    detail::put_cfg(out, "comp.refine", cc.refine ? 1.0 : 0.0);
    out.push_back({"cfg.comp.weights",
                   Tensor::from_values({5}, std::vector<double>(cc.weights.by_category.begin(), cc.weights.by_category.end()))});
    out.push_back({"encoder.projection", enc.projection});
    out.push_back({"encoder.positions", enc.positions});
    for (const auto& prm : p.compressor_parameters()) out.push_back({prm.name, prm.tensor});
    return out;
}

inline Pipeline pipeline_from_arrays(const std::vector<NamedArray>& arrays) {
    const auto m = detail::index_arrays(arrays);
    const Decoder dec = decoder_from_arrays(arrays);
    FrozenEncoder enc;
    enc.patch_size = static_cast<std::size_t>(detail::get_cfg(m, "enc.patch"));
    enc.dim = static_cast<std::size_t>(detail::get_cfg(m, "enc.dim"));
    enc.max_grid = {static_cast<std::size_t>(detail::get_cfg(m, "enc.grid_h")),
                    static_cast<std::size_t>(detail::get_cfg(m, "enc.grid_w"))};
    auto fetch = [&](const std::string& name) {
        auto it = m.find(name);
        if (it == m.end()) throw DataError("checkpoint: missing array '" + name + "'");
        return it->second;
    };
    enc.projection = fetch("encoder.projection");
    enc.positions = fetch("encoder.positions");

    PipelineConfig cfg;
    const auto method_code = static_cast<std::size_t>(detail::get_cfg(m, "method"));
    if (method_code >= kMethodNames.size()) throw DataError("checkpoint: invalid method code");
    cfg.method = static_cast<Method>(method_code);
    cfg.token_budget = static_cast<std::size_t>(detail::get_cfg(m, "k"));
    cfg.zero_fraction = detail::get_cfg(m, "zero_fraction");
    cfg.scale_factor = static_cast<std::size_t>(detail::get_cfg(m, "scale_factor"));
    cfg.train_lora = detail::get_cfg(m, "train_lora") != 0.0;
    cfg.seed = static_cast<std::uint64_t>(detail::get_cfg(m, "seed"));
    auto& cc = cfg.compressor;
    cc.dim = enc.dim;
    cc.token_budget = cfg.token_budget;
    cc.pool_grid = {static_cast<std::size_t>(detail::get_cfg(m, "comp.pool_h")),
                    static_cast<std::size_t>(detail::get_cfg(m, "comp.pool_w"))};
    cfg.rectangular_pool = cc.pool_grid.h != cc.pool_grid.w;
    cc.conv_blocks = static_cast<std::size_t>(detail::get_cfg(m, "comp.blocks"));
    cc.groups = static_cast<std::size_t>(detail::get_cfg(m, "comp.groups"));
    cc.heads = static_cast<std::size_t>(detail::get_cfg(m, "comp.heads"));
    cc.ffn_ratio = static_cast<std::size_t>(detail::get_cfg(m, "comp.ffn_ratio"));
    cc.dropout = detail::get_cfg(m, "comp.dropout");
    cc.conv = static_cast<ConvKind>(static_cast<int>(detail::get_cfg(m, "comp.conv")));
    cc.refine = detail::get_cfg(m, "comp.refine") != 0.0;
    const Tensor w = fetch("cfg.comp.weights");
    if (w.numel() != 5) throw DataError("checkpoint: category weights must have 5 entries");
    std::copy(w.values().begin(), w.values().end(), cc.weights.by_category.begin());

    Pipeline p(std::move(enc), dec, cfg);
    // LoRA factors come from the file, not the fresh init.
    detail::load_into(m, p.decoder().lora_parameters());
    detail::load_into(m, p.compressor_parameters());
    return p;
}

inline void save_pipeline(const std::string& path, const Pipeline& p) { save_arrays(path, pipeline_arrays(p)); }
inline Pipeline load_pipeline(const std::string& path) { return pipeline_from_arrays(load_arrays(path)); }
inline void save_decoder(const std::string& path, const Decoder& d) { save_arrays(path, decoder_arrays(d)); }
inline Decoder load_decoder(const std::string& path) { return decoder_from_arrays(load_arrays(path)); }

}  // namespace uipress
