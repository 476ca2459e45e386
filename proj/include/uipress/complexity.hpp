#pragma once

// Analytic prefill cost of a decoder-only transformer.
//
// Per layer, with S = K + P visual+prompt tokens, width D and FFN width F:
//   projections  4 S D^2
//   attention    2 S^2 D
//   FFN          4 S D F      (= 16 S D^2 at F = 4D)
// Summed over `layers`. The projection and attention terms equal the MAC
// count of q/k/v/o and of the score+mix products; the FFN term is twice the
// MAC count of its two matmuls (2 S D F).

#include <cstdint>
#include <ostream>
#include <sstream>
#include <string>

#include "uipress/errors.hpp"
#include "uipress/tensor.hpp"

namespace uipress {

struct PrefillSpec {
    double visual_tokens = 0;  // K (or N when uncompressed)
    double prompt_len = 0;     // P: prompt token count
    double dim = 0;            // D
    double layers = 0;         // l
    double ffn_width = 0;      // F; 0 means 4D

    double seq() const { return visual_tokens + prompt_len; }
    double ffn() const { return ffn_width > 0 ? ffn_width : 4.0 * dim; }

    void validate() const {
        if (visual_tokens <= 0 || prompt_len < 0 || dim <= 0 || layers <= 0) {
            throw ConfigError("prefill spec: token count, width and layers must be positive");
        }
    }
};

struct FlopsBreakdown {
    double projections = 0;
    double attention = 0;
    double ffn = 0;

    double total() const { return projections + attention + ffn; }
};

struct FlopsReport {
    FlopsBreakdown per_layer;
    FlopsBreakdown total;
};

inline FlopsBreakdown flops_layer(const PrefillSpec& s) {
    s.validate();
    const double n = s.seq(), d = s.dim;
    return {4.0 * n * d * d, 2.0 * n * n * d, 4.0 * n * d * s.ffn()};
}

inline FlopsReport flops_prefill(const PrefillSpec& s) {
    const FlopsBreakdown l = flops_layer(s);
    return {l, {l.projections * s.layers, l.attention * s.layers, l.ffn * s.layers}};
}

// MAC-level counterpart of flops_layer, in the units the decoder's counter uses.
inline FlopsBreakdown macs_layer(const PrefillSpec& s) {
    s.validate();
    const double n = s.seq(), d = s.dim;
    return {4.0 * n * d * d, 2.0 * n * n * d, 2.0 * n * d * s.ffn()};
}

// Converts counted MACs per bucket to the flops_layer convention.
inline FlopsBreakdown formula_flops_from_macs(const MacCounts& macs) {
    return {static_cast<double>(macs[MacBucket::projection]), static_cast<double>(macs[MacBucket::attention]),
            2.0 * static_cast<double>(macs[MacBucket::ffn])};
}

struct Speedup {
    double exact = 0;
    double approx = 0;
    double compression_ratio = 0;
};

// uncompressed and compressed must share D, layers and P.
inline Speedup speedup(const PrefillSpec& uncompressed, const PrefillSpec& compressed) {
    if (uncompressed.dim != compressed.dim || uncompressed.layers != compressed.layers ||
        uncompressed.prompt_len != compressed.prompt_len || uncompressed.ffn() != compressed.ffn()) {
        throw ConfigError("speedup: specs must share D, layers, prompt length and FFN width");
    }
    const double n = uncompressed.visual_tokens, k = compressed.visual_tokens;
    return {flops_prefill(uncompressed).total.total() / flops_prefill(compressed).total.total(), (n * n) / (k * k),
            n / k};
}

// One decimal place, as compression ratios are usually quoted ("25.5x").
inline std::string format_ratio(double r) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << r << 'x';
    return os.str();
}

inline void print_flops_table(std::ostream& os, const PrefillSpec& n_spec, const PrefillSpec& k_spec) {
    const auto fn = flops_prefill(n_spec), fk = flops_prefill(k_spec);
    const auto sp = speedup(n_spec, k_spec);
    os.setf(std::ios::scientific);
    os.precision(4);
    os << "term          uncompressed    compressed\n";
    os << "projections   " << fn.total.projections << "    " << fk.total.projections << '\n';
    os << "attention     " << fn.total.attention << "    " << fk.total.attention << '\n';
    os << "ffn           " << fn.total.ffn << "    " << fk.total.ffn << '\n';
    os << "total         " << fn.total.total() << "    " << fk.total.total() << '\n';
    os.unsetf(std::ios::scientific);
    os.precision(6);
    os << "compression   " << format_ratio(sp.compression_ratio) << " (" << sp.compression_ratio << ")\n";
    os << "speedup exact " << sp.exact << '\n';
    os << "speedup N2/K2 " << sp.approx << '\n';
}

inline void write_flops_csv(std::ostream& os, const PrefillSpec& n_spec, const PrefillSpec& k_spec) {
    const auto fn = flops_prefill(n_spec), fk = flops_prefill(k_spec);
    const auto sp = speedup(n_spec, k_spec);
    os.precision(17);
    os << "tokens,prompt_len,dim,layers,ffn_width,projections,attention,ffn,total\n";
    for (const auto& [spec, rep] : {std::pair{n_spec, fn}, std::pair{k_spec, fk}}) {
        os << spec.visual_tokens << ',' << spec.prompt_len << ',' << spec.dim << ',' << spec.layers << ','
           << spec.ffn() << ',' << rep.total.projections << ',' << rep.total.attention << ',' << rep.total.ffn
           << ',' << rep.total.total() << '\n';
    }
    os << "# compression_ratio," << sp.compression_ratio << ",speedup_exact," << sp.exact << ",speedup_approx,"
       << sp.approx << '\n';
}

}  // namespace uipress
