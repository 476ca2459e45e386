// Generates a few pages, compresses their visual tokens to K=16 and compares
// prefill cost against the uncompressed sequence.

#include <iostream>

#include "uipress/uipress.hpp"

using namespace uipress;

int main() {
    GenConfig g;
    g.max_rows = 2;
    g.max_cells = 2;
    const auto train = gen_dataset(1, 200, g);
    const auto eval = gen_dataset(3, 20, g);

    DecoderConfig dc;
    dc.dim = 32;
    dc.vocab_size = vocab::kSize;
    Decoder base(dc, 4);
    PretrainConfig pc;
    pc.epochs = 3;
    const auto history = pretrain_decoder(base, train, pc);
    std::cout << "pretrained decoder: loss " << history.front() << " -> " << history.back() << '\n';

    const auto enc = init_frozen_encoder(3, 2, dc.dim, {16, 16});
    PipelineConfig cfg;
    cfg.token_budget = 16;
    cfg.compressor.groups = 8;
    Pipeline p(enc, base, cfg);

    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 1;
    tc.lr_compressor = 3e-3;
    tc.lr_lora = 3e-4;
    tc.holdout_eval = 0;
    fit(p, p.prepare_all(train), {}, tc, [](const EpochRecord& e) {
        std::cout << "epoch " << e.epoch << " loss " << e.loss << '\n';
    });

    ExperimentConfig ec;
    ec.timing_runs = 1;
    const auto row = run_experiment(p, p.prepare_all(eval), ec);
    std::cout << "uipress: " << row.source_tokens << " -> " << row.tokens << " tokens ("
              << format_ratio(row.compression_ratio) << "), render similarity " << row.similarity << " ["
              << row.ci.low << ", " << row.ci.high << "]\n";

    const auto n = prefill_spec(p.decoder(), row.source_tokens, vocab::prompt().size());
    const auto k = prefill_spec(p.decoder(), row.tokens, vocab::prompt().size());
    print_flops_table(std::cout, n, k);
    return 0;
}
