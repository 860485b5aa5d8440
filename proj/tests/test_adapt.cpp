#include <cmath>
#include <cstring>
#include <numbers>

#include "doctest.h"
#include "mhgpt/error.hpp"
#include "mhgpt/finetune.hpp"
#include "mhgpt/synth.hpp"
#include "test_util.hpp"

using namespace mhgpt;

namespace {

ModelConfig small_config(int vocab = 40) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.d_ff = 64;
  cfg.n_heads = 4;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = 64;
  cfg.init_std = 0.1;
  return cfg;
}

LoraConfig small_lora(int rank = 4) {
  LoraConfig l;
  l.rank = rank;
  l.alpha = 8;
  return l;
}

void randomize(AdapterSet<float>& set, std::uint64_t seed, double std = 0.1) {
  Rng rng(seed);
  set.for_each([&](const std::string&, Matrix<float>& m, TensorKind) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal(0.0, std));
  });
}

TokenBatch random_batch(Rng& rng, int rows, int max_len, int vocab) {
  std::vector<TokenSequence> seqs;
  for (int r = 0; r < rows; ++r) {
    TokenSequence s;
    const int n = 1 + static_cast<int>(rng.below(max_len));
    for (int t = 0; t < n; ++t) s.push_back(static_cast<TokenId>(3 + rng.below(vocab - 3)));
    seqs.push_back(s);
  }
  return TokenBatch::from_sequences(seqs, 0);
}

bool same_parameters(const Parameters<float>& a, const Parameters<float>& b) {
  std::vector<const Matrix<float>*> x, y;
  a.for_each([&](const std::string&, const Matrix<float>& m, TensorKind) { x.push_back(&m); });
  b.for_each([&](const std::string&, const Matrix<float>& m, TensorKind) { y.push_back(&m); });
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i]->rows() != y[i]->rows() || x[i]->cols() != y[i]->cols()) return false;
    if (std::memcmp(x[i]->data(), y[i]->data(), sizeof(float) * x[i]->size()) != 0) return false;
  }
  return true;
}

}  // namespace

// --- LoRA ------------------------------------------------------------------

TEST_CASE("fresh adapters leave the forward pass unchanged") {
  const auto cfg = small_config();
  const auto base = init_parameters(cfg, 1);
  const auto adapters = attach_lora(cfg, small_lora(), 2);
  Rng rng(3);
  const auto batch = random_batch(rng, 3, 10, cfg.vocab_size);
  ForwardOptions<float> opts;
  opts.adapters = &adapters;
  const auto plain = forward(base, cfg, batch);
  const auto adapted = forward(base, cfg, batch, opts);
  CHECK(plain.logits == adapted.logits);
}

TEST_CASE("attach_lora shapes, init and determinism") {
  const auto cfg = small_config();
  const auto lora = small_lora();
  const auto a = attach_lora(cfg, lora, 7);
  const auto b = attach_lora(cfg, lora, 7);
  const auto c = attach_lora(cfg, lora, 8);
  CHECK(a.layers[1][0].a == b.layers[1][0].a);
  CHECK(a.layers[1][0].a != c.layers[1][0].a);
  CHECK(a.scaling == doctest::Approx(2.0));
  const auto& qkv = a.layers[0][static_cast<std::size_t>(LoraTarget::QueryKeyValue)];
  CHECK(qkv.a.rows() == 4);
  CHECK(qkv.a.cols() == 32);
  CHECK(qkv.b.rows() == 96);
  CHECK(qkv.b.isZero());
  // A ~ N(0, (1/r)^2): sample std over all A entries.
  LoraConfig wide = lora;
  wide.rank = 16;
  const auto w = attach_lora(cfg, wide, 1);
  double sq = 0;
  std::int64_t n = 0;
  w.for_each([&](const std::string&, const Matrix<float>& m, TensorKind k) {
    if (k != TensorKind::LoraA) return;
    sq += m.cast<double>().squaredNorm();
    n += m.size();
  });
  CHECK(std::sqrt(sq / n) == doctest::Approx(1.0 / 16).epsilon(0.05));
  LoraConfig too_big = lora;
  too_big.rank = 33;
  CHECK_THROWS_AS(attach_lora(cfg, too_big, 1), ConfigError);
  LoraConfig dropout = lora;
  dropout.dropout = 0.1;
  CHECK_THROWS_AS(attach_lora(cfg, dropout, 1), ConfigError);
}

TEST_CASE("trainable count formula matches enumeration") {
  for (int rank : {1, 4, 16}) {
    auto cfg = small_config();
    auto lora = small_lora(rank);
    const auto set = attach_lora(cfg, lora, 1);
    std::int64_t oracle = 0;
    for (LoraTarget t : kAllLoraTargets) {
      const auto [out, in] = lora_target_shape(cfg, t);
      oracle += rank * (in + out);
    }
    oracle *= cfg.n_layers;
    CHECK(set.parameter_count() == oracle);
    CHECK(lora_parameter_count(cfg, lora) == oracle);
    lora.targets = {true, false, false, true};
    CHECK(attach_lora(cfg, lora, 1).parameter_count() == lora_parameter_count(cfg, lora));
  }
  // Desk configuration used for fine-tuning.
  ModelConfig desk;
  desk.vocab_size = 2000;
  const std::int64_t expected = 2 * 64 * ((128 + 384) + (128 + 128) + (128 + 512) + (512 + 128));
  CHECK(lora_parameter_count(desk, LoraConfig{}) == expected);
}

TEST_CASE("lora_forward follows y = Wx + scaling * B(Ax)") {
  Rng rng(4);
  Matrix<double> w(5, 3), x(2, 3);
  LowRankFactors<double> f{Matrix<double>(2, 3), Matrix<double>(5, 2)};
  for (auto* m : {&w, &x, &f.a, &f.b}) {
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = rng.normal();
  }
  const auto y = lora_forward(x, w, f, 0.5);
  for (int r = 0; r < 2; ++r) {
    for (int o = 0; o < 5; ++o) {
      double ref = 0;
      for (int i = 0; i < 3; ++i) ref += w(o, i) * x(r, i);
      for (int k = 0; k < 2; ++k) {
        double ax = 0;
        for (int i = 0; i < 3; ++i) ax += f.a(k, i) * x(r, i);
        ref += 0.5 * f.b(o, k) * ax;
      }
      CHECK(y(r, o) == doctest::Approx(ref).epsilon(1e-12));
    }
  }
  f.b.setZero();
  CHECK(lora_forward(x, w, f, 0.5) == x * w.transpose());
  const auto merged = merge_lora(w, f, 0.5);
  CHECK(merged == w);
}

TEST_CASE("merged weights reproduce the adapted forward") {
  const auto cfg = small_config();
  const auto base = init_parameters(cfg, 1);
  auto adapters = attach_lora(cfg, small_lora(), 2);
  randomize(adapters, 5);
  const auto merged = merge_adapters(base, adapters);
  Rng rng(6);
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    const auto batch = random_batch(rng, 2, 12, cfg.vocab_size);
    ForwardOptions<float> opts;
    opts.adapters = &adapters;
    const auto a = forward(base, cfg, batch, opts).logits;
    const auto m = forward(merged, cfg, batch).logits;
    worst = std::max(worst, static_cast<double>((a - m).cwiseAbs().maxCoeff() / a.cwiseAbs().maxCoeff()));
  }
  CHECK(worst < 1e-5);
}

// --- quantization ------------------------------------------------------------

TEST_CASE("4-bit quantization golden block") {
  Matrix<float> w(1, 4);
  w << 0.7f, -0.3f, 0.2f, 0.0f;
  const auto q = quantize_blockwise(w, 4);
  REQUIRE(q.blocks() == 1);
  CHECK(q.scales[0] == 0.7f);
  CHECK(q.packed.size() == 2);
  CHECK(q.code(0) == 7);
  CHECK(q.code(1) == -3);
  CHECK(q.code(2) == 2);
  CHECK(q.code(3) == 0);
  CHECK(q.value(1) == doctest::Approx(-0.3));
  Matrix<float> zero = Matrix<float>::Zero(2, 3);
  const auto z = quantize_blockwise(zero, 4);
  CHECK(z.blocks() == 2);
  CHECK(z.dequantize() == zero);
  w(0, 2) = std::nanf("");
  CHECK_THROWS_AS(quantize_blockwise(w, 4), DataError);
}

TEST_CASE("dequantization error is bounded by absmax / 7 per block") {
  Rng rng(8);
  Matrix<float> w(64, 100);  // 6400 elements, 100 blocks
  for (int trial = 0; trial < 20; ++trial) {
    const double scale = std::exp(rng.uniform(-5, 3));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(rng.normal(0.0, scale));
    const auto q = quantize_blockwise(w, 64);
    const auto d = q.dequantize();
    for (std::size_t b = 0; b < q.blocks(); ++b) {
      float absmax = 0;
      for (int i = 0; i < 64; ++i) absmax = std::max(absmax, std::abs(w.data()[b * 64 + i]));
      CHECK(q.scales[b] == absmax);
      for (int i = 0; i < 64; ++i) {
        REQUIRE(std::abs(w.data()[b * 64 + i] - d.data()[b * 64 + i]) <= absmax / 7);
      }
    }
  }
}

TEST_CASE("quantize_base covers exactly the linear weights") {
  const auto cfg = small_config();
  const auto base = init_parameters(cfg, 1);
  const auto qb = quantize_base(base, 64);
  CHECK(qb.weights.size() == 4u * cfg.n_layers);
  const auto deq = dequantized_parameters(base, qb);
  CHECK(deq.embed == base.embed);
  CHECK(deq.layers[0].qkv_bias == base.layers[0].qkv_bias);
  CHECK(deq.layers[0].qkv_weight != base.layers[0].qkv_weight);
  CHECK(deq.layers[0].qkv_weight == qb.weights.at("layers.0.attention.query_key_value.weight").dequantize());
}

// --- NEFTune -----------------------------------------------------------------

TEST_CASE("NEFTune noise norm bound and second moment") {
  Rng rng(10);
  const int d = 32;
  const double alpha = 5.0;
  double sum_sq = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const int len = 1 + static_cast<int>(rng.below(20));
    const auto batch = TokenBatch::from_sequences(std::vector<TokenSequence>{TokenSequence(len, 4)}, 0, 24);
    Matrix<double> e = Matrix<double>::Zero(batch.rows(), d);
    neftune_noise(e, batch, alpha, rng, true);
    const double sq = e.squaredNorm();
    REQUIRE(std::sqrt(sq) <= alpha);
    REQUIRE(e.bottomRows(24 - len).isZero());
    sum_sq += sq;
  }
  CHECK(std::abs(sum_sq / draws - alpha * alpha / 3) <= 0.03 * alpha * alpha / 3);
}

TEST_CASE("NEFTune is the identity in eval mode or with alpha 0") {
  Rng rng(1);
  const auto batch = TokenBatch::from_sequences(std::vector<TokenSequence>{{3, 4, 5}}, 0);
  Matrix<float> e = Matrix<float>::Random(3, 8);
  const Matrix<float> orig = e;
  Rng probe = rng;
  neftune_noise(e, batch, 10.0, rng, false);
  neftune_noise(e, batch, 0.0, rng, true);
  CHECK(e == orig);
  CHECK(rng.next_u64() == probe.next_u64());
  CHECK_THROWS_AS(neftune_noise(e, batch, -1.0, rng, true), ConfigError);
}

// --- heads -------------------------------------------------------------------

TEST_CASE("zero heads give the uniform-prediction losses") {
  Rng rng(3);
  const auto batch = random_batch(rng, 4, 6, 30);
  const Matrix<double> hidden = Matrix<double>::Random(batch.rows(), 8);
  auto check_loss = [&](const TaskSpec& spec, const TaskLabels& labels, double expected) {
    TaskHead<double> head{Matrix<double>::Zero(spec.outputs(), 8), Matrix<double>::Zero(1, spec.outputs())};
    const auto out = head_forward(hidden, batch, spec, head, &labels);
    CHECK(out.loss == doctest::Approx(expected).epsilon(1e-12));
  };
  TaskLabels bin;
  bin.classes = {0, 1, 1, 0};
  check_loss(TaskSpec::binary(), bin, std::numbers::ln2);
  TaskLabels mc;
  mc.classes = {0, 8, 3, 2};
  check_loss(TaskSpec::multiclass(9), mc, std::log(9.0));
  TaskLabels ml;
  ml.multilabel.assign(4 * 6, 0);
  ml.multilabel[3] = 1;
  check_loss(TaskSpec::multilabel(6), ml, 6 * std::numbers::ln2);
  const std::vector<std::string> types = {"A", "B"};
  TaskLabels ner;
  ner.tokens.assign(batch.rows(), -1);
  for (int r = 0; r < batch.rows(); ++r) {
    if (batch.mask[r]) ner.tokens[r] = r % 5;
  }
  check_loss(TaskSpec::ner(types), ner, std::log(5.0));
}

TEST_CASE("head losses match direct formulas") {
  Rng rng(4);
  const auto batch = random_batch(rng, 3, 5, 30);
  const int d = 6;
  Matrix<double> hidden(batch.rows(), d);
  for (Eigen::Index i = 0; i < hidden.size(); ++i) hidden.data()[i] = rng.normal();
  const auto pooled = pooled_positions(batch);
  const auto spec = TaskSpec::multilabel(3);
  TaskHead<double> head{Matrix<double>(3, d), Matrix<double>(1, 3)};
  for (Eigen::Index i = 0; i < head.weight.size(); ++i) head.weight.data()[i] = rng.normal();
  head.bias << 0.1, -0.2, 0.3;
  TaskLabels labels;
  labels.multilabel = {1, 0, 1, 0, 0, 1, 1, 1, 0};
  const auto out = head_forward(hidden, batch, spec, head, &labels);
  double ref = 0;
  for (int b = 0; b < 3; ++b) {
    const auto row = hidden.row(static_cast<Eigen::Index>(b) * batch.seq + pooled[b]);
    for (int k = 0; k < 3; ++k) {
      const double z = row.dot(head.weight.row(k)) + head.bias(0, k);
      const double p = 1 / (1 + std::exp(-z));
      ref -= labels.multilabel[b * 3 + k] ? std::log(p) : std::log(1 - p);
    }
  }
  CHECK(out.loss == doctest::Approx(ref / 3).epsilon(1e-12));
  TaskLabels bad;
  bad.multilabel = {1, 0, 2, 0, 0, 1, 1, 1, 0};
  CHECK_THROWS_AS(head_forward(hidden, batch, spec, head, &bad), DataError);
}

TEST_CASE("pooling picks the last real token") {
  const auto batch = TokenBatch::from_sequences(std::vector<TokenSequence>{{5, 6, 7}, {8}}, 0, 4);
  CHECK(pooled_positions(batch) == std::vector<int>{2, 0});
}

TEST_CASE("task gradient check covers LoRA and every head kind") {
  const auto cfg = small_config();
  auto base = init_parameters(cfg, 1).cast<double>();
  auto adapters32 = attach_lora(cfg, small_lora(), 2);
  randomize(adapters32, 3);
  auto adapters = adapters32.cast<double>();
  Rng rng(5);
  const auto batch = random_batch(rng, 3, 7, cfg.vocab_size);
  const std::vector<std::string> types = {"X", "Y"};
  for (const auto& spec : {TaskSpec::binary(), TaskSpec::multiclass(4), TaskSpec::multilabel(3), TaskSpec::ner(types)}) {
    auto head = init_head(spec, cfg.d_model, 4, 0.5).cast<double>();
    TaskLabels labels;
    for (int b = 0; b < batch.batch; ++b) labels.classes.push_back(b % spec.num_labels());
    for (int i = 0; i < batch.batch * spec.num_labels(); ++i) labels.multilabel.push_back(i % 2);
    for (int r = 0; r < batch.rows(); ++r) labels.tokens.push_back(batch.mask[r] ? r % spec.num_labels() : -1);
    const auto report = grad_check_task(base, cfg, adapters, head, spec, batch, labels, 1e-5, 60, 7);
    CHECK(report.max_rel_error < 1e-4);
    CHECK(report.kinds().count(TensorKind::LoraA) == 1);
    CHECK(report.kinds().count(TensorKind::LoraB) == 1);
    CHECK(report.kinds().count(TensorKind::HeadWeight) == 1);
  }
}

TEST_CASE("task specs serialize and validate") {
  const std::vector<std::string> types = {"DRUG"};
  const auto spec = TaskSpec::ner(types);
  CHECK(spec.labels == std::vector<std::string>{"O", "B-DRUG", "I-DRUG"});
  CHECK(TaskSpec::from_json(spec.to_json()) == spec);
  CHECK(TaskSpec::binary().outputs() == 1);
  CHECK_THROWS_AS(TaskSpec::multiclass(1).validate(), ConfigError);
  CHECK_THROWS_AS(parse_task_kind("regression"), ConfigError);
}

// --- task data ---------------------------------------------------------------

TEST_CASE("task records round-trip and NER spans align to tokens") {
  TaskRecord r{"n1", "caf\xC3\xA9 aspirin dose", 0, {}, {{5, 12, "DRUG"}}};
  const auto back = task_record_from_json(task_record_to_json(r, TaskKind::Ner), TaskKind::Ner);
  CHECK(back == r);
  const auto vocab = BpeVocabulary::byte_level();
  const std::vector<std::string> types = {"DRUG"};
  const auto spec = TaskSpec::ner(types);
  const auto ex = encode_task(std::span<const TaskRecord>(&r, 1), spec, vocab, 64);
  REQUIRE(ex.size() == 1);
  // Code points 5..12 are bytes 6..13 after the two-byte e-acute; one token per byte.
  const auto& tags = ex[0].token_labels;
  REQUIRE(tags.size() == ex[0].tokens.size());
  CHECK(tags[6] == 1);
  for (int i = 7; i < 13; ++i) CHECK(tags[i] == 2);
  CHECK(tags[5] == 0);
  CHECK(tags[13] == 0);
  TaskRecord wrong = r;
  wrong.spans[0].label = "GENE";
  CHECK_THROWS_AS(encode_task(std::span<const TaskRecord>(&wrong, 1), spec, vocab, 64), DataError);
  CHECK_THROWS_AS(task_record_from_json("{\"id\":\"x\"}", TaskKind::Binary), DataError);
}

TEST_CASE("split_indices partitions with round-half-up validation size") {
  const auto [train, val] = split_indices(25, 0.1, 3);
  CHECK(val.size() == 3);
  CHECK(train.size() == 22);
  std::vector<std::size_t> all(train);
  all.insert(all.end(), val.begin(), val.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  CHECK(split_indices(3, 0.01, 1).second.size() == 1);
  CHECK(split_indices(25, 0.1, 3).second == val);
}

TEST_CASE("synthetic tasks are deterministic and label-faithful") {
  for (auto kind : {TaskKind::Binary, TaskKind::Multiclass, TaskKind::Multilabel, TaskKind::Ner}) {
    SynthTaskOptions opt;
    opt.kind = kind;
    opt.size = 200;
    opt.imbalance = kind == TaskKind::Multilabel ? 0.1 : 0.5;
    const auto a = synth_task(opt);
    CHECK(a == synth_task(opt));
    CHECK(a.size() == 200);
    const auto spec = infer_task_spec(kind, a);
    if (kind == TaskKind::Multiclass) CHECK(spec.num_labels() == 9);
    if (kind == TaskKind::Multilabel) CHECK(spec.num_labels() == 6);
    if (kind == TaskKind::Ner) {
      for (const auto& r : a) {
        for (const auto& s : r.spans) {
          const auto term = r.text.substr(s.begin, s.end - s.begin);
          bool found = false;
          for (const auto& t : ner_dictionary()) found = found || (t.text == term && t.type == s.label);
          CHECK(found);
        }
      }
    }
  }
  SynthTaskOptions bin;
  bin.size = 100;
  bin.imbalance = 0.3;
  int pos = 0;
  for (const auto& r : synth_task(bin)) pos += r.label;
  CHECK(pos == 30);
  bin.size = 5;
  CHECK_THROWS_AS(synth_task(bin), ConfigError);
}

// --- fine-tuning -------------------------------------------------------------

TEST_CASE("fine-tuning learns a separable task and never touches the base") {
  const auto vocab = BpeVocabulary::byte_level();
  auto cfg = small_config(static_cast<int>(vocab.size()));
  const auto base = init_parameters(cfg, 1);
  const auto snapshot = base;
  // The label is carried by the final word, which last-token pooling sees.
  std::vector<TaskRecord> records;
  Rng rng(5);
  const char* words[] = {"day", "night", "work", "home", "talk", "sleep"};
  for (int i = 0; i < 240; ++i) {
    TaskRecord r;
    r.id = "r" + std::to_string(i);
    for (int w = 0; w < 6; ++w) r.text += std::string(words[rng.below(6)]) + " ";
    r.label = i % 2;
    r.text += r.label ? "bad" : "fine";
    records.push_back(r);
  }
  const auto spec = infer_task_spec(TaskKind::Binary, records);
  const auto examples = encode_task(records, spec, vocab, 48);
  const auto [tr, va] = split_indices(examples.size(), 0.2, 1);
  std::vector<TaskExample> train, val;
  for (auto i : tr) train.push_back(examples[i]);
  for (auto i : va) val.push_back(examples[i]);
  FinetuneConfig fc;
  fc.lora = small_lora(8);
  fc.neftune.noise_alpha = 1.0;
  fc.lr = 5e-3;
  fc.epochs = 3;
  fc.max_len = 48;
  for (bool quantized : {false, true}) {
    fc.quantize = quantized;
    const auto res = finetune(base, cfg, spec, train, val, fc, 0);
    CHECK(same_parameters(base, snapshot));
    CHECK(res.epochs.size() >= 1);
    CHECK(res.trainable_parameters == lora_parameter_count(cfg, fc.lora) + spec.outputs() * (cfg.d_model + 1));
    const auto eff = effective_base(base, fc);
    const auto report = evaluate_task(eff, cfg, res.adapters, res.head, spec, val, 8, 0);
    CHECK(report.weighted_f1 == doctest::Approx(res.best_report.weighted_f1));
    CHECK(report.weighted_f1 > 0.8);
    const auto again = finetune(base, cfg, spec, train, val, fc, 0);
    CHECK(again.head.weight == res.head.weight);

    testing::TempDir dir("adapter");
    AdapterCheckpoint ck{cfg, fc.lora, spec, quantized, 64, res.adapters, res.head};
    save_adapter_checkpoint(dir / "a", ck);
    const auto loaded = load_adapter_checkpoint(dir / "a");
    CHECK(loaded.spec == spec);
    CHECK(loaded.quantized == quantized);
    CHECK(loaded.head.weight == res.head.weight);
    CHECK(loaded.adapters.layers[1][2].b == res.adapters.layers[1][2].b);
  }
}
