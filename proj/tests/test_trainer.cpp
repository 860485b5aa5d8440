#include <cmath>

#include "doctest.h"
#include "mhgpt/error.hpp"
#include "mhgpt/rng.hpp"
#include "mhgpt/trainer.hpp"

using namespace mhgpt;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.n_heads = 2;
  cfg.vocab_size = 30;
  cfg.max_seq_len = 16;
  return cfg;
}

std::vector<TokenSequence> toy_sequences(int n, int len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) {
    TokenSequence s;
    const int l = 2 + static_cast<int>(rng.below(len - 1));
    for (int t = 0; t < l; ++t) s.push_back(static_cast<TokenId>(3 + rng.below(27)));
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("warmup is linear and reaches max_lr exactly on its last step") {
  TrainConfig cfg;
  cfg.warmup_steps = 100;
  for (double max_lr : {0.97e-5, 2e-3, 0.1, 1.0 / 3.0}) {
    cfg.max_lr = max_lr;
    CHECK(lr_schedule(99, cfg, 1000) == max_lr);
    CHECK(lr_schedule(0, cfg, 1000) == doctest::Approx(max_lr / 100));
    CHECK(lr_schedule(49, cfg, 1000) == doctest::Approx(max_lr / 2));
    CHECK(lr_schedule(100, cfg, 1000) == max_lr);
    CHECK(lr_schedule(5000, cfg, 1000) == max_lr);
  }
  for (std::int64_t s = 1; s < 100; ++s) CHECK(lr_schedule(s, cfg, 1000) > lr_schedule(s - 1, cfg, 1000));
}

TEST_CASE("cosine decay runs from max_lr to the floor") {
  TrainConfig cfg;
  cfg.warmup_steps = 10;
  cfg.max_lr = 1.0;
  cfg.decay = LrDecay::Cosine;
  cfg.min_lr_ratio = 0.1;
  CHECK(lr_schedule(9, cfg, 110) == 1.0);
  CHECK(lr_schedule(109, cfg, 110) == doctest::Approx(0.1));
  CHECK(lr_schedule(59, cfg, 110) == doctest::Approx(0.55));
}

TEST_CASE("AdamW matches a scalar reference over several steps") {
  Matrix<float> w(1, 3), b(1, 2);
  w << 0.5f, -1.0f, 2.0f;
  b << 0.1f, -0.2f;
  Matrix<float> gw(1, 3), gb(1, 2);
  std::vector<ParamSlot<float>> slots = {{"w", &w, &gw, TensorKind::Weight}, {"b", &b, &gb, TensorKind::Bias}};
  AdamW::Hyper hyper;
  hyper.weight_decay = 0.1;
  AdamW opt(hyper);
  std::vector<double> p = {0.5, -1.0, 2.0, 0.1, -0.2}, m(5, 0.0), v(5, 0.0);
  const double lr = 0.01;
  for (int t = 1; t <= 5; ++t) {
    std::vector<double> g = {0.3 * t, -0.1, 0.02 * t * t, 1.0 / t, -0.5};
    gw << float(g[0]), float(g[1]), float(g[2]);
    gb << float(g[3]), float(g[4]);
    opt.step(slots, lr);
    for (int i = 0; i < 5; ++i) {
      const bool decays = i < 3;
      if (decays) p[i] *= 1.0 - lr * hyper.weight_decay;
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.95 * v[i] + 0.05 * g[i] * g[i];
      const double mhat = m[i] / (1 - std::pow(0.9, t));
      const double vhat = v[i] / (1 - std::pow(0.95, t));
      p[i] -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    }
    for (int i = 0; i < 3; ++i) CHECK(w(0, i) == doctest::Approx(p[i]).epsilon(1e-5));
    for (int i = 0; i < 2; ++i) CHECK(b(0, i) == doctest::Approx(p[3 + i]).epsilon(1e-5));
  }
  CHECK(opt.steps() == 5);
}

TEST_CASE("global-norm clipping") {
  Matrix<float> a(1, 2), ga(1, 2), b(1, 1), gb(1, 1);
  ga << 3.0f, 0.0f;
  gb << 4.0f;
  std::vector<ParamSlot<float>> slots = {{"a", &a, &ga, TensorKind::Weight}, {"b", &b, &gb, TensorKind::Weight}};
  CHECK(clip_global_norm(slots, 10.0) == doctest::Approx(5.0));
  CHECK(ga(0, 0) == 3.0f);
  CHECK(clip_global_norm(slots, 1.0) == doctest::Approx(5.0));
  CHECK(std::sqrt(ga.squaredNorm() + gb.squaredNorm()) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("LM gradient check passes in 64-bit mode") {
  auto cfg = small_config();
  cfg.init_std = 0.1;
  auto params = init_parameters(cfg, 3).cast<double>();
  const auto batch = TokenBatch::from_sequences(toy_sequences(3, 8, 1), 0);
  const auto report = grad_check_lm(params, cfg, batch, 1e-5, 120, 9);
  CHECK(report.samples.size() == 120);
  CHECK(report.max_rel_error < 1e-4);
  CHECK(report.kinds().count(TensorKind::Embedding) == 1);
  CHECK(report.kinds().count(TensorKind::NormScale) == 1);
  CHECK(report.kinds().count(TensorKind::Unembedding) == 1);
}

TEST_CASE("relative error uses a floor") {
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(1e-4));
  CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
}

TEST_CASE("pretraining lowers loss and is deterministic") {
  const auto cfg = small_config();
  const auto train = toy_sequences(24, 10, 2);
  const auto val = toy_sequences(6, 10, 3);
  TrainConfig tc;
  tc.max_lr = 3e-3;
  tc.warmup_steps = 5;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.early_stop_patience = 0;
  auto p1 = init_parameters(cfg, 1);
  const double before = evaluate(p1, cfg, train, 4, 0);
  const auto log1 = pretrain(p1, cfg, train, val, tc, 0);
  CHECK(log1.steps.size() == 18);
  CHECK(log1.epochs.size() == 3);
  CHECK(evaluate(p1, cfg, train, 4, 0) < before);
  auto p2 = init_parameters(cfg, 1);
  const auto log2 = pretrain(p2, cfg, train, val, tc, 0);
  CHECK(p1.embed == p2.embed);
  CHECK(log1.steps_csv() == log2.steps_csv());
  CHECK(log1.steps_csv().starts_with("step,lr,train_loss\n"));
  // Threaded evaluation reduces in batch order.
  CHECK(evaluate(p1, cfg, val, 2, 0, 3) == evaluate(p1, cfg, val, 2, 0, 1));
}

TEST_CASE("max_steps caps training and invalid configs are rejected") {
  const auto cfg = small_config();
  const auto train = toy_sequences(24, 10, 2);
  TrainConfig tc;
  tc.max_steps = 4;
  tc.batch_size = 4;
  auto p = init_parameters(cfg, 1);
  CHECK(pretrain(p, cfg, train, {}, tc, 0).steps.size() == 4);
  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(evaluate(p, cfg, {}, 4, 0), DataError);
}

TEST_CASE("a diverging run raises NumericalError") {
  const auto cfg = small_config();
  auto p = init_parameters(cfg, 1);
  p.embed(5, 0) = std::numeric_limits<float>::infinity();
  AdamW opt({});
  const auto batch = TokenBatch::from_sequences(std::vector<TokenSequence>{{5, 6, 7}}, 0);
  CHECK_THROWS_AS(train_step(p, cfg, batch, opt, TrainConfig{}, 1e-3), NumericalError);
}
