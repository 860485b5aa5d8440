#include <benchmark/benchmark.h>

#include "mhgpt/corpus.hpp"
#include "mhgpt/model.hpp"
#include "mhgpt/quantize.hpp"
#include "mhgpt/synth.hpp"
#include "mhgpt/tokenizer.hpp"

namespace {

std::vector<std::string> corpus_texts(std::size_t per_stratum) {
  mhgpt::SynthCorpusOptions o;
  o.documents = {per_stratum, per_stratum, per_stratum};
  std::vector<std::string> out;
  for (const auto& d : mhgpt::synth_corpus(o)) out.push_back(mhgpt::clean_text(d.text));
  return out;
}

void BM_CleanText(benchmark::State& state) {
  mhgpt::SynthCorpusOptions o;
  o.documents = {50, 50, 50};
  o.noise_rate = 1.0;
  const auto docs = mhgpt::synth_corpus(o);
  std::size_t bytes = 0;
  for (auto _ : state) {
    for (const auto& d : docs) {
      auto s = mhgpt::clean_text(d.text);
      bytes += d.text.size();
      benchmark::DoNotOptimize(s);
    }
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(BM_CleanText);

void BM_TrainBpe(benchmark::State& state) {
  const auto texts = corpus_texts(100);
  mhgpt::BpeTrainOptions opt;
  opt.vocab_size = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(mhgpt::train_bpe(texts, opt));
}
BENCHMARK(BM_TrainBpe)->Arg(600)->Arg(1200)->Unit(benchmark::kMillisecond);

void BM_Encode(benchmark::State& state) {
  const auto texts = corpus_texts(100);
  mhgpt::BpeTrainOptions opt;
  opt.vocab_size = 1000;
  const auto vocab = mhgpt::train_bpe(texts, opt).vocabulary;
  std::size_t bytes = 0;
  for (auto _ : state) {
    for (const auto& t : texts) {
      benchmark::DoNotOptimize(vocab.encode(t));
      bytes += t.size();
    }
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(BM_Encode)->Unit(benchmark::kMillisecond);

void BM_ForwardBackward(benchmark::State& state) {
  mhgpt::ModelConfig cfg;
  cfg.vocab_size = 1000;
  const auto params = mhgpt::init_parameters(cfg, 1);
  const int seq = static_cast<int>(state.range(0));
  std::vector<mhgpt::TokenSequence> rows(8, mhgpt::TokenSequence(static_cast<std::size_t>(seq)));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (int t = 0; t < seq; ++t) rows[r][static_cast<std::size_t>(t)] = static_cast<mhgpt::TokenId>((r * 31 + t * 7) % 1000);
  }
  const auto batch = mhgpt::TokenBatch::from_sequences(rows, 0);
  const auto targets = mhgpt::next_token_targets(batch);
  for (auto _ : state) {
    auto trace = mhgpt::forward(params, cfg, batch);
    auto loss = mhgpt::lm_loss(trace.logits, std::span<const mhgpt::TokenId>(targets.ids),
                               std::span<const std::uint8_t>(targets.mask), true);
    auto grads = mhgpt::Parameters<float>::zeros(cfg);
    const auto d_hidden = mhgpt::backward_logits(params, trace.cache.hidden, loss.d_logits, &grads);
    mhgpt::backward_hidden(params, cfg, batch, trace.cache, d_hidden, &grads);
    benchmark::DoNotOptimize(grads.embed.data());
  }
  state.SetItemsProcessed(state.iterations() * batch.rows());
}
BENCHMARK(BM_ForwardBackward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Quantize(benchmark::State& state) {
  mhgpt::Matrix<float> w = mhgpt::Matrix<float>::Random(512, 512);
  for (auto _ : state) benchmark::DoNotOptimize(mhgpt::quantize_blockwise(w, 64));
  state.SetItemsProcessed(state.iterations() * w.size());
}
BENCHMARK(BM_Quantize)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
