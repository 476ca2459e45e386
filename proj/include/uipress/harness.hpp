#pragma once

// Experiment runner: evaluation with bootstrap intervals, K sweeps,
// component ablations and CSV / SVG reporting.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "uipress/complexity.hpp"
#include "uipress/instrument.hpp"
#include "uipress/pipeline.hpp"
#include "uipress/training.hpp"

namespace uipress {

inline constexpr std::size_t kPageTypes = kPageTypeNames.size();

struct ExperimentConfig {
    std::size_t bootstrap_resamples = 1000;
    std::uint64_t bootstrap_seed = 1234;
    double ci_level = 0.95;
    std::size_t timing_runs = 5;  // after one warmup
    std::size_t max_new = 96;
};

struct Interval {
    double low = 0.0;
    double high = 0.0;
};

struct ResultRow {
    std::string label;
    std::string method;
    std::size_t tokens = 0;
    std::size_t source_tokens = 0;
    double compression_ratio = 1.0;
    double similarity = 0.0;
    Interval ci;
    double prefill_flops = 0.0;
    double compressor_macs = 0.0;
    double prefill_ms = 0.0;
    double generate_ms = 0.0;  // mean per sample
    std::array<double, kPageTypes> page_type_means{};
    std::size_t trainable_params = 0;
    std::uint64_t bootstrap_seed = 0;
    std::size_t bootstrap_resamples = 0;
    std::vector<double> scores;
    std::vector<PageType> page_types;
};

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// Percentile bootstrap of the mean; each resample has the size of `scores`.
inline Interval bootstrap_ci(const std::vector<double>& scores, std::size_t resamples, std::uint64_t seed,
                             double level = 0.95) {
    if (scores.empty()) throw DataError("bootstrap_ci: no scores");
    if (resamples == 0) throw ConfigError("bootstrap_ci: resamples must be positive");
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap_ci: level must lie in (0, 1)");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, scores.size() - 1);
    std::vector<double> means(resamples);
    for (auto& m : means) {
        double s = 0.0;
        for (std::size_t i = 0; i < scores.size(); ++i) s += scores[pick(rng)];
        m = s / static_cast<double>(scores.size());
    }
    std::sort(means.begin(), means.end());
    const double tail = 0.5 * (1.0 - level);
    const auto lo = static_cast<std::size_t>(std::floor(tail * static_cast<double>(resamples)));
    const auto hi = static_cast<std::size_t>(std::ceil((1.0 - tail) * static_cast<double>(resamples))) - 1;
    return {means[std::min(lo, resamples - 1)], means[std::min(hi, resamples - 1)]};
}

inline std::array<double, kPageTypes> page_type_means(const std::vector<double>& scores,
                                                      const std::vector<PageType>& types) {
    std::array<double, kPageTypes> sum{}, count{};
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto t = static_cast<std::size_t>(types.at(i));
        sum[t] += scores[i];
        count[t] += 1.0;
    }
    std::array<double, kPageTypes> out{};
    for (std::size_t t = 0; t < kPageTypes; ++t) {
        out[t] = count[t] > 0 ? sum[t] / count[t] : std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

using Generator = std::function<std::vector<int>(const PreparedSample&)>;

// generate -> parse_lenient -> render -> similarity, in sample order.
inline std::vector<double> score_samples(const std::vector<PreparedSample>& samples, const Generator& gen) {
    std::vector<double> scores;
    scores.reserve(samples.size());
    for (const auto& s : samples) {
        const auto parsed = parse_lenient(gen(s));
        scores.push_back(similarity(render(parsed.program, s.image.height_px, s.image.width_px), s.image));
    }
    return scores;
}

inline void fill_statistics(ResultRow& row, const std::vector<PreparedSample>& samples,
                            const ExperimentConfig& cfg) {
    row.page_types.clear();
    for (const auto& s : samples) row.page_types.push_back(s.page_type);
    row.similarity = mean_of(row.scores);
    row.ci = bootstrap_ci(row.scores, cfg.bootstrap_resamples, cfg.bootstrap_seed, cfg.ci_level);
    row.page_type_means = page_type_means(row.scores, row.page_types);
    row.bootstrap_seed = cfg.bootstrap_seed;
    row.bootstrap_resamples = cfg.bootstrap_resamples;
}

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Median wall time of one prefill forward (visual path + decoder over
// visual + prompt, no generation), after one warmup run.
inline double time_prefill_ms(const Pipeline& p, const PreparedSample& s, std::size_t runs) {
    NoGradGuard no_grad;
    auto once = [&] {
        const auto t0 = std::chrono::steady_clock::now();
        const Tensor v = p.visual(s);
        (void)p.decoder().forward(v, vocab::prompt(), {});
        return detail::elapsed_ms(t0);
    };
    once();
    std::vector<double> times;
    for (std::size_t i = 0; i < std::max<std::size_t>(runs, 1); ++i) times.push_back(once());
    return detail::median(times);
}

inline ResultRow run_experiment(const Pipeline& p, const std::vector<PreparedSample>& eval,
                                const ExperimentConfig& cfg, std::string label = {}) {
    if (eval.empty()) throw DataError("run_experiment: empty evaluation set");
    ResultRow row;
    row.method = std::string(method_name(p.config().method));
    row.label = label.empty() ? row.method : std::move(label);
    row.tokens = p.visual_token_count(eval.front());
    row.source_tokens = eval.front().source_tokens;
    row.compression_ratio = static_cast<double>(row.source_tokens) / static_cast<double>(row.tokens);
    row.trainable_params = count_scalars(p.trainable_parameters());

    double gen_ms = 0.0;
    row.scores = score_samples(eval, [&](const PreparedSample& s) {
        const auto t0 = std::chrono::steady_clock::now();
        auto out = p.generate(s, cfg.max_new);
        gen_ms += detail::elapsed_ms(t0);
        return out;
    });
    row.generate_ms = gen_ms / static_cast<double>(eval.size());
    fill_statistics(row, eval, cfg);

    row.prefill_flops = flops_prefill(prefill_spec(p.decoder(), row.tokens, vocab::prompt().size())).total.total();
    row.compressor_macs = static_cast<double>(p.compressor() ? compressor_macs(p, eval.front()) : 0);
    row.prefill_ms = time_prefill_ms(p, eval.front(), cfg.timing_runs);
    return row;
}

struct Split {
    std::vector<SyntheticSample> train;
    std::vector<SyntheticSample> holdout;  // model selection during training
    std::vector<SyntheticSample> eval;
};

struct TrainedResult {
    ResultRow row;
    TrainReport training;
};

inline TrainedResult train_and_evaluate(const FrozenEncoder& enc, const Decoder& dec, const PipelineConfig& pcfg,
                                        const Split& data, const TrainConfig& tcfg, const ExperimentConfig& ecfg,
                                        const std::string& label = {}) {
    Pipeline p(enc, dec, pcfg);
    const auto train = p.prepare_all(data.train);
    const auto holdout = p.prepare_all(data.holdout);
    const auto eval = p.prepare_all(data.eval);
    TrainedResult out;
    out.training = fit(p, train, holdout, tcfg);
    out.row = run_experiment(p, eval, ecfg, label);
    return out;
}

// One uipress pipeline per K (pool grid s x s, or s x 2s for K = 2s^2),
// trained under the same budget; rows ascend in K.
inline std::vector<TrainedResult> run_sweep_k(const FrozenEncoder& enc, const Decoder& dec, std::vector<std::size_t> ks,
                                              PipelineConfig base, const Split& data, const TrainConfig& tcfg,
                                              const ExperimentConfig& ecfg) {
    if (ks.empty()) throw ConfigError("sweep: no K values");
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    base.method = Method::uipress;
    base.rectangular_pool = true;
    for (auto k : ks) (void)pool_grid_for_budget(k, true);
    std::vector<TrainedResult> rows;
    for (auto k : ks) {
        PipelineConfig c = base;
        c.token_budget = k;
        rows.push_back(train_and_evaluate(enc, dec, c, data, tcfg, ecfg, "uipress_k" + std::to_string(k)));
    }
    return rows;
}

enum class Toggle { no_lora, no_refine, std_conv, lora_only, compressor_only };

inline constexpr std::array<std::string_view, 5> kToggleNames = {"no_lora", "no_refine", "std_conv", "lora_only",
                                                                 "compressor_only"};

inline std::string_view toggle_name(Toggle t) { return kToggleNames.at(static_cast<std::size_t>(t)); }

inline Toggle parse_toggle(std::string_view s) {
    for (std::size_t i = 0; i < kToggleNames.size(); ++i) {
        if (kToggleNames[i] == s) return static_cast<Toggle>(i);
    }
    throw ConfigError("unknown ablation toggle '" + std::string(s) + "'");
}

using ToggleSet = std::vector<Toggle>;

inline std::string toggle_label(const ToggleSet& set) {
    if (set.empty()) return "full";
    std::string s;
    for (auto t : set) s += (s.empty() ? "" : "+") + std::string(toggle_name(t));
    return s;
}

// Applies a toggle set to a uipress configuration. compressor_only and
// no_lora both keep the LoRA factors frozen at init.
inline PipelineConfig ablation_config(PipelineConfig base, const ToggleSet& set) {
    auto has = [&](Toggle t) { return std::find(set.begin(), set.end(), t) != set.end(); };
    const bool lora_only = has(Toggle::lora_only);
    if (lora_only && (has(Toggle::no_lora) || has(Toggle::compressor_only))) {
        throw ConfigError("ablation: lora_only contradicts " + toggle_label(set));
    }
    if (lora_only && (has(Toggle::no_refine) || has(Toggle::std_conv))) {
        throw ConfigError("ablation: lora_only bypasses the compressor, so " + toggle_label(set) +
                          " is contradictory");
    }
    base.method = lora_only ? Method::uncompressed : Method::uipress;
    base.train_lora = !(has(Toggle::no_lora) || has(Toggle::compressor_only));
    if (has(Toggle::no_refine)) base.compressor.refine = false;
    if (has(Toggle::std_conv)) base.compressor.conv = ConvKind::standard;
    return base;
}

// The unmodified configuration first, then one row per toggle set.
inline std::vector<TrainedResult> run_ablation(const FrozenEncoder& enc, const Decoder& dec,
                                               const std::vector<ToggleSet>& variants, const PipelineConfig& base,
                                               const Split& data, const TrainConfig& tcfg,
                                               const ExperimentConfig& ecfg) {
    std::vector<PipelineConfig> configs{ablation_config(base, {})};
    for (const auto& v : variants) configs.push_back(ablation_config(base, v));
    std::vector<TrainedResult> rows;
    rows.push_back(train_and_evaluate(enc, dec, configs[0], data, tcfg, ecfg, "full"));
    for (std::size_t i = 0; i < variants.size(); ++i) {
        rows.push_back(train_and_evaluate(enc, dec, configs[i + 1], data, tcfg, ecfg, toggle_label(variants[i])));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Reporting

inline constexpr std::string_view kResultsHeader =
    "label,method,tokens,source_tokens,compression_ratio,similarity,ci_low,ci_high,prefill_flops,compressor_macs,"
    "prefill_ms,generate_ms,text_heavy,layout_rich,image_heavy,complex,samples,bootstrap_seed,bootstrap_resamples,"
    "trainable_params";

inline constexpr std::string_view kScoresHeader = "label,sample,page_type,score";

inline constexpr std::string_view kPageTypeHeader = "label,page_type,samples,similarity";

namespace detail {

inline void put_number(std::ostream& os, double v) {
    if (!std::isnan(v)) os << v;
}

}  // namespace detail

inline void write_results_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
    os << std::setprecision(17) << kResultsHeader << '\n';
    for (const auto& r : rows) {
        os << r.label << ',' << r.method << ',' << r.tokens << ',' << r.source_tokens << ',' << r.compression_ratio
           << ',' << r.similarity << ',' << r.ci.low << ',' << r.ci.high << ',' << r.prefill_flops << ','
           << r.compressor_macs << ',' << r.prefill_ms << ',' << r.generate_ms;
        for (double m : r.page_type_means) {
            os << ',';
            detail::put_number(os, m);
        }
        os << ',' << r.scores.size() << ',' << r.bootstrap_seed << ',' << r.bootstrap_resamples << ','
           << r.trainable_params << '\n';
    }
}

inline void write_scores_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
    os << std::setprecision(17) << kScoresHeader << '\n';
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.scores.size(); ++i) {
            os << r.label << ',' << i << ',' << page_type_name(r.page_types.at(i)) << ',' << r.scores[i] << '\n';
        }
    }
}

inline void write_page_type_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
    os << std::setprecision(17) << kPageTypeHeader << '\n';
    for (const auto& r : rows) {
        for (std::size_t t = 0; t < kPageTypes; ++t) {
            const auto n = static_cast<std::size_t>(
                std::count(r.page_types.begin(), r.page_types.end(), static_cast<PageType>(t)));
            if (n == 0) continue;
            os << r.label << ',' << kPageTypeNames[t] << ',' << n << ',' << r.page_type_means[t] << '\n';
        }
    }
}

inline PageType parse_page_type(std::string_view s) {
    for (std::size_t i = 0; i < kPageTypeNames.size(); ++i) {
        if (kPageTypeNames[i] == s) return static_cast<PageType>(i);
    }
    throw DataError("unknown page type '" + std::string(s) + "'");
}

struct ScoreRecord {
    std::string label;
    std::size_t sample = 0;
    PageType page_type = PageType::complex;
    double score = 0.0;
};

inline std::vector<ScoreRecord> read_scores_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kScoresHeader) throw DataError("scores file: bad header");
    std::vector<ScoreRecord> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 4) throw DataError("scores file: expected 4 fields in '" + line + "'");
        try {
            out.push_back({f[0], std::stoul(f[1]), parse_page_type(f[2]), std::stod(f[3])});
        } catch (const std::logic_error&) {
            throw DataError("scores file: malformed number in '" + line + "'");
        }
    }
    return out;
}

// Rebuilds per-label rows (scores, page types, mean, CI, page-type means)
// from persisted per-sample scores.
inline std::vector<ResultRow> rows_from_scores(const std::vector<ScoreRecord>& records, const ExperimentConfig& cfg) {
    std::vector<ResultRow> rows;
    std::map<std::string, std::size_t> index;
    for (const auto& r : records) {
        auto [it, fresh] = index.try_emplace(r.label, rows.size());
        if (fresh) {
            rows.emplace_back();
            rows.back().label = r.label;
        }
        ResultRow& row = rows[it->second];
        row.scores.push_back(r.score);
        row.page_types.push_back(r.page_type);
    }
    for (auto& row : rows) {
        row.similarity = mean_of(row.scores);
        row.ci = bootstrap_ci(row.scores, cfg.bootstrap_resamples, cfg.bootstrap_seed, cfg.ci_level);
        row.page_type_means = page_type_means(row.scores, row.page_types);
        row.bootstrap_seed = cfg.bootstrap_seed;
        row.bootstrap_resamples = cfg.bootstrap_resamples;
    }
    return rows;
}

namespace detail {

struct PlotFrame {
    double width = 480, height = 320, margin = 48;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

    double px(double x) const { return margin + (x - x0) / (x1 - x0) * (width - 2 * margin); }
    double py(double y) const { return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin); }
};

inline void svg_open(std::ostream& os, const PlotFrame& f, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << f.width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
       << "</text>\n";
    os << "<line x1=\"" << f.margin << "\" y1=\"" << f.height - f.margin << "\" x2=\"" << f.width - f.margin
       << "\" y2=\"" << f.height - f.margin << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << f.margin << "\" y1=\"" << f.margin << "\" x2=\"" << f.margin << "\" y2=\""
       << f.height - f.margin << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << f.width / 2 << "\" y=\"" << f.height - 10 << "\" text-anchor=\"middle\" font-size=\"12\">"
       << xlabel << "</text>\n";
    os << "<text x=\"14\" y=\"" << f.height / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
       << f.height / 2 << ")\">" << ylabel << "</text>\n";
}

inline PlotFrame frame_for(const std::vector<double>& xs, const std::vector<double>& ylo,
                           const std::vector<double>& yhi) {
    PlotFrame f;
    f.x0 = *std::min_element(xs.begin(), xs.end());
    f.x1 = *std::max_element(xs.begin(), xs.end());
    if (f.x1 == f.x0) {
        f.x0 -= 0.5;
        f.x1 += 0.5;
    }
    f.y0 = *std::min_element(ylo.begin(), ylo.end());
    f.y1 = *std::max_element(yhi.begin(), yhi.end());
    const double pad = std::max(1e-3, 0.05 * (f.y1 - f.y0));
    f.y0 -= pad;
    f.y1 += pad;
    return f;
}

}  // namespace detail

// Similarity against token count (linear x), with CI whiskers.
inline void write_similarity_vs_k_svg(std::ostream& os, const std::vector<ResultRow>& rows) {
    if (rows.empty()) throw DataError("plot: no rows");
    std::vector<ResultRow> sorted = rows;
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.tokens < b.tokens; });
    std::vector<double> xs, lo, hi;
    for (const auto& r : sorted) {
        xs.push_back(static_cast<double>(r.tokens));
        lo.push_back(std::min(r.ci.low, r.similarity));
        hi.push_back(std::max(r.ci.high, r.similarity));
    }
    const auto f = detail::frame_for(xs, lo, hi);
    detail::svg_open(os, f, "similarity vs K", "visual tokens K", "render similarity");
    os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (const auto& r : sorted) os << f.px(static_cast<double>(r.tokens)) << ',' << f.py(r.similarity) << ' ';
    os << "\"/>\n";
    for (const auto& r : sorted) {
        const double x = f.px(static_cast<double>(r.tokens));
        os << "<line x1=\"" << x << "\" y1=\"" << f.py(r.ci.low) << "\" x2=\"" << x << "\" y2=\"" << f.py(r.ci.high)
           << "\" stroke=\"gray\"/>\n";
        os << "<circle cx=\"" << x << "\" cy=\"" << f.py(r.similarity) << "\" r=\"3\" fill=\"steelblue\"/>\n";
        os << "<text x=\"" << x << "\" y=\"" << f.height - f.margin + 14 << "\" text-anchor=\"middle\" font-size=\"10\">"
           << r.tokens << "</text>\n";
    }
    os << "</svg>\n";
}

// Similarity against token count on a log10 x axis; the best row is drawn
// in red with class "best".
inline void write_pareto_svg(std::ostream& os, const std::vector<ResultRow>& rows) {
    if (rows.empty()) throw DataError("plot: no rows");
    std::vector<double> xs, ys;
    for (const auto& r : rows) {
        xs.push_back(std::log10(static_cast<double>(std::max<std::size_t>(r.tokens, 1))));
        ys.push_back(r.similarity);
    }
    const auto best = static_cast<std::size_t>(std::max_element(ys.begin(), ys.end()) - ys.begin());
    const auto f = detail::frame_for(xs, ys, ys);
    detail::svg_open(os, f, "similarity vs tokens", "visual tokens (log scale)", "render similarity");
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const bool b = i == best;
        os << "<circle" << (b ? " class=\"best\"" : "") << " cx=\"" << f.px(xs[i]) << "\" cy=\"" << f.py(ys[i])
           << "\" r=\"" << (b ? 6 : 4) << "\" fill=\"" << (b ? "crimson" : "steelblue") << "\"/>\n";
        os << "<text x=\"" << f.px(xs[i]) + 6 << "\" y=\"" << f.py(ys[i]) - 6 << "\" font-size=\"10\">"
           << rows[i].label << "</text>\n";
    }
    os << "</svg>\n";
}

struct ReportPaths {
    std::string results, scores, page_types, similarity_plot, pareto_plot;
};

// Writes every report artifact into `dir` (which must exist).
inline ReportPaths report(const std::vector<ResultRow>& rows, const std::string& dir, bool plots = true) {
    if (rows.empty()) throw DataError("report: no rows");
    ReportPaths p{dir + "/results.csv", dir + "/scores.csv", dir + "/page_types.csv", "", ""};
    auto open = [](const std::string& path) {
        std::ofstream os(path);
        if (!os) throw DataError("cannot open '" + path + "' for writing");
        return os;
    };
    {
        auto os = open(p.results);
        write_results_csv(os, rows);
    }
    {
        auto os = open(p.scores);
        write_scores_csv(os, rows);
    }
    {
        auto os = open(p.page_types);
        write_page_type_csv(os, rows);
    }
    if (plots) {
        p.similarity_plot = dir + "/similarity_vs_k.svg";
        p.pareto_plot = dir + "/pareto.svg";
        auto a = open(p.similarity_plot);
        write_similarity_vs_k_svg(a, rows);
        auto b = open(p.pareto_plot);
        write_pareto_svg(b, rows);
    }
    return p;
}

inline std::vector<ResultRow> rows_of(const std::vector<TrainedResult>& results) {
    std::vector<ResultRow> out;
    for (const auto& r : results) out.push_back(r.row);
    return out;
}

}  // namespace uipress
