#pragma once

// Counted multiply-accumulates of real forward passes, for cross-checking the
// analytic prefill model.

#include <vector>

#include "uipress/complexity.hpp"
#include "uipress/decoder.hpp"
#include "uipress/pipeline.hpp"

namespace uipress {

// One prefill forward over `visual_len` zero visual tokens followed by
// `prompt_len` prompt ids. Buckets: projection (q/k/v/o), attention
// (score + mix), ffn, adapter (LoRA path), head (vocabulary projection).
inline MacCounts instrumented_macs(const Decoder& dec, std::size_t visual_len, std::size_t prompt_len) {
    NoGradGuard no_grad;
    const Tensor visual = visual_len > 0 ? Tensor(Shape{visual_len, dec.config().dim}, 0.0) : Tensor{};
    std::vector<int> prompt(prompt_len, vocab::kPromptFirst);
    const MacCounts saved = mac_counts();
    reset_mac_counts();
    (void)dec.forward(visual, prompt, {});
    const MacCounts out = mac_counts();
    mac_counts() = saved;
    return out;
}

inline PrefillSpec prefill_spec(const Decoder& dec, std::size_t visual_len, std::size_t prompt_len) {
    const auto& c = dec.config();
    return {static_cast<double>(visual_len), static_cast<double>(prompt_len), static_cast<double>(c.dim),
            static_cast<double>(c.layers), static_cast<double>(c.ffn_mult * c.dim)};
}

// All MACs spent inside the compressor for one sample (eval mode).
inline std::uint64_t compressor_macs(const Pipeline& p, const PreparedSample& s) {
    NoGradGuard no_grad;
    const MacCounts saved = mac_counts();
    reset_mac_counts();
    (void)p.visual(s);
    const std::uint64_t total = mac_counts().total();
    mac_counts() = saved;
    return total;
}

}  // namespace uipress
