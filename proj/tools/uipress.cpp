// uipress command-line tool: data generation, training, evaluation, sweeps,
// ablations, FLOPs tables, mask dumps and report regeneration.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "uipress/uipress.hpp"

namespace fs = std::filesystem;
using namespace uipress;

namespace {

constexpr int kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3;

// key=value settings; '#' starts a comment.
class Settings {
public:
    void load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw DataError("cannot open config '" + path + "'");
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            set(line, path + ":" + std::to_string(lineno));
        }
    }

    void set(const std::string& assignment, const std::string& where = "--set") {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + assignment + "'");
        values_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
    }

    std::string str(const std::string& key, const std::string& fallback) const {
        used_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double num(const std::string& key, double fallback) const {
        const auto s = str(key, "");
        if (s.empty()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::logic_error&) {
            throw ConfigError("config key '" + key + "': '" + s + "' is not a number");
        }
    }

    std::size_t count(const std::string& key, std::size_t fallback) const {
        const double v = num(key, static_cast<double>(fallback));
        if (v < 0 || v != std::floor(v)) throw ConfigError("config key '" + key + "' must be a non-negative integer");
        return static_cast<std::size_t>(v);
    }

    bool flag(const std::string& key, bool fallback) const {
        const auto s = str(key, fallback ? "1" : "0");
        if (s == "1" || s == "true" || s == "yes") return true;
        if (s == "0" || s == "false" || s == "no") return false;
        throw ConfigError("config key '" + key + "': expected a boolean, got '" + s + "'");
    }

    // One config file serves every command, so only keys no command reads
    // are rejected.
    void reject_unknown() const {
        static const std::set<std::string> known{
            "dim", "layers", "heads", "lora_rank", "lora_alpha", "max_seq_len", "patch",
            "method", "k", "zero_fraction", "scale_factor", "rectangular_pool", "train_lora",
            "groups", "compressor_heads", "dropout", "refine", "conv", "weights",
            "epochs", "batch_size", "lr_comp", "lr_lora", "lr_min", "clip_norm", "weight_decay",
            "holdout", "holdout_eval", "restore_best", "max_new", "pretrain_epochs",
            "pretrain_batch_size", "pretrain_lr", "pretrain_prefix",
            "eval_count", "bootstrap_resamples", "bootstrap_seed", "ci_level", "timing_runs",
            "min_rows", "max_rows", "max_cells"};
        for (const auto& [k, v] : values_) {
            if (!known.count(k) && !used_.count(k)) throw ConfigError("unknown config key '" + k + "'");
        }
    }

private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? "" : s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
};

struct Common {
    std::uint64_t seed = 1;
    std::string config;
    std::vector<std::string> overrides;
    std::string out = ".";
    bool deterministic = false;
    Settings settings;

    void resolve() {
        if (!config.empty()) settings.load(config);
        for (const auto& o : overrides) settings.set(o);
    }
};

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string part; std::getline(ss, part, sep);) {
        if (!part.empty()) out.push_back(part);
    }
    return out;
}

std::pair<std::size_t, std::size_t> parse_dims(const std::string& s) {
    const auto x = s.find('x');
    try {
        if (x == std::string::npos) throw std::invalid_argument(s);
        return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
    } catch (const std::logic_error&) {
        throw ConfigError("expected HxW dimensions, got '" + s + "'");
    }
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
}

DecoderConfig decoder_config(const Settings& s) {
    DecoderConfig c;
    c.dim = s.count("dim", 64);
    c.layers = s.count("layers", 2);
    c.heads = s.count("heads", 4);
    c.vocab_size = vocab::kSize;
    c.max_seq_len = s.count("max_seq_len", 128);
    c.lora_rank = s.count("lora_rank", 8);
    c.lora_alpha = s.num("lora_alpha", 16.0);
    c.validate();
    return c;
}

FrozenEncoder encoder_for(const Dataset& ds, const Settings& s, std::size_t dim, std::uint64_t seed) {
    const std::size_t patch = s.count("patch", 2);
    if (patch == 0 || ds.height_px % patch || ds.width_px % patch) {
        throw ConfigError("patch size " + std::to_string(patch) + " does not divide the page dimensions");
    }
    return init_frozen_encoder(seed, patch, dim, {ds.height_px / patch, ds.width_px / patch});
}

PipelineConfig pipeline_config(const Settings& s, std::uint64_t seed) {
    PipelineConfig c;
    c.method = parse_method(s.str("method", "uipress"));
    c.token_budget = s.count("k", 16);
    c.zero_fraction = s.num("zero_fraction", 0.75);
    c.scale_factor = s.count("scale_factor", 2);
    c.rectangular_pool = s.flag("rectangular_pool", false);
    c.train_lora = s.flag("train_lora", true);
    c.compressor.groups = s.count("groups", 8);
    c.compressor.heads = s.count("compressor_heads", 8);
    c.compressor.dropout = s.num("dropout", 0.1);
    c.compressor.refine = s.flag("refine", true);
    const auto conv = s.str("conv", "dsconv");
    if (conv == "dsconv") {
        c.compressor.conv = ConvKind::depthwise_separable;
    } else if (conv == "standard") {
        c.compressor.conv = ConvKind::standard;
    } else {
        throw ConfigError("conv must be 'dsconv' or 'standard', got '" + conv + "'");
    }
    const auto w = split(s.str("weights", "1,1,0.5,0.5,0.2"), ',');
    if (w.size() != 5) throw ConfigError("weights needs 5 values (text,button,icon,input,background)");
    for (std::size_t i = 0; i < 5; ++i) c.compressor.weights.by_category[i] = std::stod(w[i]);
    c.compressor.weights.validate();
    c.seed = seed + 6;
    return c;
}

TrainConfig train_config(const Settings& s, std::uint64_t seed) {
    TrainConfig t;
    t.epochs = s.count("epochs", 20);
    t.batch_size = s.count("batch_size", 1);
    t.lr_compressor = s.num("lr_comp", 3e-3);
    t.lr_lora = s.num("lr_lora", 3e-4);
    t.lr_min = s.num("lr_min", 1e-6);
    t.clip_norm = s.num("clip_norm", 1.0);
    t.adamw.weight_decay = s.num("weight_decay", t.adamw.weight_decay);
    t.holdout_eval = s.count("holdout_eval", 16);
    t.restore_best = s.flag("restore_best", true);
    t.max_new = s.count("max_new", 96);
    t.seed = seed + 10;
    t.validate();
    return t;
}

ExperimentConfig experiment_config(const Settings& s, bool deterministic) {
    ExperimentConfig e;
    e.bootstrap_resamples = s.count("bootstrap_resamples", 1000);
    e.bootstrap_seed = s.count("bootstrap_seed", 1234);
    e.ci_level = s.num("ci_level", 0.95);
    e.timing_runs = deterministic ? 1 : s.count("timing_runs", 5);
    e.max_new = s.count("max_new", 96);
    return e;
}

// Wall-clock fields are the only non-reproducible outputs.
void scrub_timing(std::vector<ResultRow>& rows) {
    for (auto& r : rows) {
        r.prefill_ms = 0.0;
        r.generate_ms = 0.0;
    }
}

// Holdout and eval samples come off the end of the file unless given separately.
Split split_data(const Dataset& ds, const Settings& s, const std::string& eval_path) {
    const std::size_t holdout = s.count("holdout", 16);
    std::size_t eval = eval_path.empty() ? s.count("eval_count", 50) : 0;
    if (holdout + eval >= ds.samples.size()) {
        throw DataError("dataset of " + std::to_string(ds.samples.size()) + " samples is too small for " +
                        std::to_string(holdout) + " holdout + " + std::to_string(eval) + " eval samples");
    }
    const auto& v = ds.samples;
    const std::size_t n_train = v.size() - holdout - eval;
    Split out{{v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n_train)},
              {v.begin() + static_cast<std::ptrdiff_t>(n_train),
               v.begin() + static_cast<std::ptrdiff_t>(n_train + holdout)},
              {v.begin() + static_cast<std::ptrdiff_t>(n_train + holdout), v.end()}};
    if (!eval_path.empty()) {
        const auto e = load_dataset(eval_path);
        if (e.height_px != ds.height_px || e.width_px != ds.width_px) {
            throw DataError("evaluation data has different page dimensions from the training data");
        }
        out.eval = e.samples;
    }
    return out;
}

// Frozen base decoder: loaded from --base or pretrained on the training split.
Decoder base_decoder(const Common& c, const std::string& base_path, const std::vector<SyntheticSample>& train,
                     const std::string& save_to) {
    if (!base_path.empty()) {
        Decoder d = load_decoder(base_path);
        d.set_base_trainable(false);
        return d;
    }
    Decoder d(decoder_config(c.settings), c.seed + 4);
    PretrainConfig pc;
    pc.epochs = c.settings.count("pretrain_epochs", 3);
    pc.batch_size = c.settings.count("pretrain_batch_size", 8);
    pc.lr = c.settings.num("pretrain_lr", 3e-3);
    pc.prefix_lengths = {c.settings.count("pretrain_prefix", 16)};
    pc.seed = c.seed + 5;
    if (pc.epochs > 0) {
        const auto history = pretrain_decoder(d, train, pc);
        std::cerr << "pretrain: loss " << history.front() << " -> " << history.back() << '\n';
    }
    d.set_base_trainable(false);
    if (!save_to.empty()) save_decoder(save_to, d);
    return d;
}

void print_epoch(const EpochRecord& e) {
    std::cerr << "epoch " << e.epoch << " loss " << e.loss;
    if (!std::isnan(e.holdout_similarity)) std::cerr << " holdout " << e.holdout_similarity;
    std::cerr << '\n';
}

void print_rows(const std::vector<ResultRow>& rows) {
    for (const auto& r : rows) {
        std::cout << r.label << ": tokens " << r.tokens << " (" << format_ratio(r.compression_ratio)
                  << ") similarity " << r.similarity << " [" << r.ci.low << ", " << r.ci.high << "] prefill FLOPs "
                  << r.prefill_flops << '\n';
    }
}

// ---------------------------------------------------------------------------

int cmd_gen_data(Common& c, std::size_t count, const std::string& dims) {
    GenConfig g;
    std::tie(g.height_px, g.width_px) = parse_dims(dims);
    g.patch_size = c.settings.count("patch", 2);
    g.min_rows = c.settings.count("min_rows", g.min_rows);
    g.max_rows = c.settings.count("max_rows", g.max_rows);
    g.max_cells = c.settings.count("max_cells", g.max_cells);
    c.settings.reject_unknown();
    if (count == 0) throw ConfigError("--count must be positive");
    ensure_dir(c.out);
    const Dataset ds{g.height_px, g.width_px, gen_dataset(c.seed, count, g)};
    save_dataset(c.out + "/data.bin", ds);
    vocab::write_sidecar(c.out + "/vocab.txt");
    std::cout << "wrote " << count << " samples to " << c.out << "/data.bin\n";
    return kExitOk;
}

int cmd_train(Common& c, const std::string& data, const std::string& base) {
    const auto ds = load_dataset(data);
    const Split split = split_data(ds, c.settings, "");
    const auto dcfg = decoder_config(c.settings);
    const auto enc = encoder_for(ds, c.settings, dcfg.dim, c.seed + 2);
    const auto pcfg = pipeline_config(c.settings, c.seed);
    const auto tcfg = train_config(c.settings, c.seed);
    ensure_dir(c.out);
    (void)c.settings.count("eval_count", 50);
    c.settings.reject_unknown();
    const Decoder dec = base_decoder(c, base, split.train, c.out + "/base.uipa");
    Pipeline p(enc, dec, pcfg);
    const auto report = fit(p, p.prepare_all(split.train), p.prepare_all(split.holdout), tcfg, print_epoch);
    save_pipeline(c.out + "/model.uipa", p);
    std::ofstream csv(c.out + "/train.csv");
    write_train_csv(csv, report);
    std::cout << "trained " << report.epochs.size() << " epochs; final loss " << report.epochs.back().loss;
    if (report.best_epoch > 0) std::cout << "; best holdout " << report.best_similarity << " at epoch " << report.best_epoch;
    std::cout << "\nwrote " << c.out << "/model.uipa, " << c.out << "/train.csv\n";
    return kExitOk;
}

int cmd_eval(Common& c, const std::string& checkpoint, const std::string& data, const std::string& label) {
    const auto ecfg = experiment_config(c.settings, c.deterministic);
    c.settings.reject_unknown();
    const Pipeline p = load_pipeline(checkpoint);
    const auto ds = load_dataset(data);
    std::vector<ResultRow> rows{run_experiment(p, p.prepare_all(ds.samples), ecfg, label)};
    if (c.deterministic) scrub_timing(rows);
    ensure_dir(c.out);
    report(rows, c.out, false);
    print_rows(rows);
    return kExitOk;
}

struct ExperimentInputs {
    Split split;
    FrozenEncoder encoder;
    Decoder decoder;
    PipelineConfig pipeline;
    TrainConfig train;
    ExperimentConfig experiment;
};

ExperimentInputs experiment_inputs(Common& c, const std::string& data, const std::string& eval,
                                   const std::string& base) {
    const auto ds = load_dataset(data);
    Split split = split_data(ds, c.settings, eval);
    const auto dcfg = decoder_config(c.settings);
    auto enc = encoder_for(ds, c.settings, dcfg.dim, c.seed + 2);
    auto pcfg = pipeline_config(c.settings, c.seed);
    auto tcfg = train_config(c.settings, c.seed);
    auto ecfg = experiment_config(c.settings, c.deterministic);
    ensure_dir(c.out);
    c.settings.reject_unknown();
    Decoder dec = base_decoder(c, base, split.train, c.out + "/base.uipa");
    return {std::move(split), std::move(enc), std::move(dec), pcfg, tcfg, ecfg};
}

int finish_experiment(const Common& c, const std::vector<TrainedResult>& results) {
    auto rows = rows_of(results);
    if (c.deterministic) scrub_timing(rows);
    report(rows, c.out, true);
    print_rows(rows);
    return kExitOk;
}

int cmd_sweep(Common& c, const std::string& data, const std::string& eval, const std::string& base,
              const std::string& ks_text) {
    std::vector<std::size_t> ks;
    for (const auto& k : split(ks_text, ',')) ks.push_back(std::stoul(k));
    auto in = experiment_inputs(c, data, eval, base);
    return finish_experiment(
        c, run_sweep_k(in.encoder, in.decoder, ks, in.pipeline, in.split, in.train, in.experiment));
}

int cmd_ablate(Common& c, const std::string& data, const std::string& eval, const std::string& base,
               const std::string& variants_text) {
    std::vector<ToggleSet> variants;
    for (const auto& v : split(variants_text, ';')) {
        ToggleSet set;
        for (const auto& t : split(v, '+')) set.push_back(parse_toggle(t));
        variants.push_back(set);
    }
    auto in = experiment_inputs(c, data, eval, base);
    return finish_experiment(
        c, run_ablation(in.encoder, in.decoder, variants, in.pipeline, in.split, in.train, in.experiment));
}

int cmd_flops(Common& c, double n, double k, double p, double d, double layers, double ffn, bool csv) {
    c.settings.reject_unknown();
    const PrefillSpec ns{n, p, d, layers, ffn}, ks{k, p, d, layers, ffn};
    print_flops_table(std::cout, ns, ks);
    if (csv) {
        ensure_dir(c.out);
        std::ofstream os(c.out + "/flops.csv");
        write_flops_csv(os, ns, ks);
        std::cout << "wrote " << c.out << "/flops.csv\n";
    }
    return kExitOk;
}

int cmd_mask(Common& c, const std::string& data, std::size_t index, const std::string& grid_text) {
    const auto pcfg = pipeline_config(c.settings, c.seed);
    const std::size_t patch = c.settings.count("patch", 2);
    c.settings.reject_unknown();
    const auto ds = load_dataset(data);
    if (index >= ds.samples.size()) {
        throw DataError("sample index " + std::to_string(index) + " out of range (" +
                        std::to_string(ds.samples.size()) + " samples)");
    }
    GridDims grid;
    if (grid_text.empty()) {
        // Post-convolution grid of the compressor: two stride-2 blocks.
        grid = {ds.height_px / patch, ds.width_px / patch};
        for (int b = 0; b < 2; ++b) grid = {conv_output_size(grid.h, 3, 2, 1), conv_output_size(grid.w, 3, 2, 1)};
    } else {
        const auto [h, w] = parse_dims(grid_text);
        grid = {h, w};
    }
    const auto m = build_element_mask(ds.samples[index].annotation, ds.height_px, ds.width_px, grid,
                                      pcfg.compressor.weights);
    std::ostringstream os;
    os << "row,col,weight\n";
    for (std::size_t r = 0; r < grid.h; ++r)
        for (std::size_t col = 0; col < grid.w; ++col) os << r << ',' << col << ',' << m.weights.values()[r * grid.w + col] << '\n';
    if (c.out == "-") {
        std::cout << os.str();
    } else {
        ensure_dir(c.out);
        std::ofstream(c.out + "/mask.csv") << os.str();
        std::cout << "wrote " << grid.h << "x" << grid.w << " mask to " << c.out << "/mask.csv\n";
    }
    return kExitOk;
}

// Restores token counts, method and FLOPs columns from a results file by label.
void merge_results(std::vector<ResultRow>& rows, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open results file '" + path + "'");
    std::string line;
    if (!std::getline(is, line) || line != kResultsHeader) throw DataError("results file: bad header");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() < 20) f.resize(20);
        for (auto& r : rows) {
            if (r.label != f[0]) continue;
            try {
                r.method = f[1];
                r.tokens = std::stoul(f[2]);
                r.source_tokens = std::stoul(f[3]);
                r.compression_ratio = std::stod(f[4]);
                r.prefill_flops = std::stod(f[8]);
                r.compressor_macs = std::stod(f[9]);
                r.prefill_ms = std::stod(f[10]);
                r.generate_ms = std::stod(f[11]);
                r.trainable_params = std::stoul(f[19]);
            } catch (const std::logic_error&) {
                throw DataError("results file: malformed row '" + line + "'");
            }
        }
    }
}

int cmd_report(Common& c, const std::vector<std::string>& scores, const std::string& results, bool plots) {
    const auto ecfg = experiment_config(c.settings, true);
    c.settings.reject_unknown();
    std::vector<ScoreRecord> records;
    for (const auto& path : scores) {
        std::ifstream is(path);
        if (!is) throw DataError("cannot open scores file '" + path + "'");
        auto part = read_scores_csv(is);
        records.insert(records.end(), part.begin(), part.end());
    }
    auto rows = rows_from_scores(records, ecfg);
    if (!results.empty()) merge_results(rows, results);
    ensure_dir(c.out);
    report(rows, c.out, plots);
    print_rows(rows);
    return kExitOk;
}

const char* kSchemas = R"(
Output files
  data.bin         binary dataset ("UIDS" v1): header then per-sample pixels,
                   boxes, categories, page type and markup ids
  vocab.txt        one token name per line, id = line number
  model.uipa       pipeline checkpoint (named arrays, cfg.* entries)
  base.uipa        pretrained frozen decoder
  train.csv        epoch,step,loss,lr_comp,lr_lora,holdout_similarity
  results.csv      label,method,tokens,source_tokens,compression_ratio,similarity,
                   ci_low,ci_high,prefill_flops,compressor_macs,prefill_ms,
                   generate_ms,text_heavy,layout_rich,image_heavy,complex,samples,
                   bootstrap_seed,bootstrap_resamples,trainable_params
  scores.csv       label,sample,page_type,score
  page_types.csv   label,page_type,samples,similarity
  flops.csv        tokens,prompt_len,dim,layers,ffn_width,projections,attention,ffn,total
  mask.csv         row,col,weight

Config keys (key=value, '#' comments; --set overrides)
  model       dim layers heads lora_rank lora_alpha max_seq_len patch
  pipeline    method k zero_fraction scale_factor rectangular_pool train_lora
              groups compressor_heads dropout refine conv weights
  training    epochs batch_size lr_comp lr_lora lr_min clip_norm weight_decay
              holdout holdout_eval restore_best max_new pretrain_epochs
              pretrain_batch_size pretrain_lr pretrain_prefix
  evaluation  eval_count bootstrap_resamples bootstrap_seed ci_level timing_runs
  data        min_rows max_rows max_cells

Exit codes: 0 success, 1 usage, 2 data or config error, 3 numeric failure)";

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"uipress: optical token compression for screenshot-to-markup decoding"};
    app.footer(kSchemas);
    app.require_subcommand(1);
    Common c;
    app.add_option("--seed", c.seed, "Random seed")->capture_default_str();
    app.add_option("--config", c.config, "key=value configuration file")->check(CLI::ExistingFile);
    app.add_option("--set", c.overrides, "Override a config key (key=value), repeatable");
    app.add_option("--out", c.out, "Output directory")->capture_default_str();
    app.add_flag("--deterministic", c.deterministic, "Omit wall-clock timings so outputs are byte-reproducible");

    std::function<int()> run;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset and vocabulary sidecar");
    std::size_t count = 100;
    std::string dims = "32x32";
    gen->add_option("--count", count, "Number of samples")->capture_default_str();
    gen->add_option("--dims", dims, "Page size HxW in pixels")->capture_default_str();
    gen->callback([&] { run = [&] { return cmd_gen_data(c, count, dims); }; });

    std::string data, eval_data, base, checkpoint, label;
    auto* train = app.add_subcommand("train", "Pretrain (or load) a base decoder and train one pipeline");
    train->add_option("--data", data, "Dataset file")->required();
    train->add_option("--base", base, "Pretrained base decoder checkpoint");
    train->callback([&] { run = [&] { return cmd_train(c, data, base); }; });

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    eval->add_option("--checkpoint", checkpoint, "Pipeline checkpoint")->required();
    eval->add_option("--data", data, "Dataset file")->required();
    eval->add_option("--label", label, "Row label (defaults to the method name)");
    eval->callback([&] { run = [&] { return cmd_eval(c, checkpoint, data, label); }; });

    std::string ks = "4,8,16";
    auto* sweep = app.add_subcommand("sweep-k", "Train and evaluate one pipeline per token budget");
    sweep->add_option("--data", data, "Training dataset file")->required();
    sweep->add_option("--eval-data", eval_data, "Evaluation dataset file");
    sweep->add_option("--base", base, "Pretrained base decoder checkpoint");
    sweep->add_option("--ks", ks, "Comma-separated token budgets")->capture_default_str();
    sweep->callback([&] { run = [&] { return cmd_sweep(c, data, eval_data, base, ks); }; });

    std::string variants = "no_lora;no_refine;std_conv;lora_only";
    auto* ablate = app.add_subcommand("ablate", "Component ablations against the full configuration");
    ablate->add_option("--data", data, "Training dataset file")->required();
    ablate->add_option("--eval-data", eval_data, "Evaluation dataset file");
    ablate->add_option("--base", base, "Pretrained base decoder checkpoint");
    ablate->add_option("--variants", variants, "Toggle sets separated by ';', toggles within a set by '+'")
        ->capture_default_str();
    ablate->callback([&] { run = [&] { return cmd_ablate(c, data, eval_data, base, variants); }; });

    double n = 6517, k = 256, p = 64, d = 4096, layers = 36, ffn = 0;
    bool csv = false;
    auto* flops = app.add_subcommand("flops", "Analytic prefill FLOPs and speedup");
    flops->add_option("--n", n, "Uncompressed visual tokens")->capture_default_str();
    flops->add_option("--k", k, "Compressed visual tokens")->capture_default_str();
    flops->add_option("--p", p, "Prompt length")->capture_default_str();
    flops->add_option("--d", d, "Hidden width")->capture_default_str();
    flops->add_option("--layers", layers, "Decoder layers")->capture_default_str();
    flops->add_option("--ffn", ffn, "FFN width (0 means 4D)")->capture_default_str();
    flops->add_flag("--csv", csv, "Also write flops.csv into --out");
    flops->callback([&] { run = [&] { return cmd_flops(c, n, k, p, d, layers, ffn, csv); }; });

    std::size_t index = 0;
    std::string grid;
    auto* mask = app.add_subcommand("mask", "Dump the element mask of one sample as CSV (--out - for stdout)");
    mask->add_option("--data", data, "Dataset file")->required();
    mask->add_option("--index", index, "Sample index")->capture_default_str();
    mask->add_option("--grid", grid, "Mask grid HxW (default: compressor post-conv grid)");
    mask->callback([&] { run = [&] { return cmd_mask(c, data, index, grid); }; });

    std::vector<std::string> score_files;
    std::string results;
    bool no_plots = false;
    auto* rep = app.add_subcommand("report", "Recompute summaries, intervals and plots from per-sample scores");
    rep->add_option("--scores", score_files, "scores.csv files")->required();
    rep->add_option("--results", results, "results.csv supplying token counts and FLOPs");
    rep->add_flag("--no-plots", no_plots, "Skip SVG plots");
    rep->callback([&] { run = [&] { return cmd_report(c, score_files, results, !no_plots); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        (void)app.exit(e);
        return kExitUsage;
    }

    try {
        c.resolve();
        return run();
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    }
}
