#include <cmath>
#include <complex>

#include "doctest.h"
#include "mhgpt/checkpoint.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/model.hpp"
#include "mhgpt/rng.hpp"
#include "test_util.hpp"

using namespace mhgpt;

namespace {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.d_ff = 24;
  cfg.n_heads = 2;
  cfg.vocab_size = 23;
  cfg.max_seq_len = 12;
  cfg.rotary_pct = 0.5;
  cfg.init_std = 0.3;
  return cfg;
}

Parameters<double> random_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_parameters(cfg, seed).cast<double>();
  Rng rng(seed + 1);
  // Non-trivial norms and biases so every term of the block matters.
  p.for_each([&](const std::string&, Matrix<double>& m, TensorKind kind) {
    if (kind == TensorKind::Bias || kind == TensorKind::NormBias) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, 0.1);
    } else if (kind == TensorKind::NormScale) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 1.0 + rng.normal(0.0, 0.1);
    }
  });
  return p;
}

Vec row_of(const Matrix<double>& m, Eigen::Index r) {
  Vec v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) v[c] = m(r, c);
  return v;
}

Vec affine(const Matrix<double>& w, const Matrix<double>& b, const Vec& x) {
  Vec y(static_cast<std::size_t>(w.rows()));
  for (Eigen::Index o = 0; o < w.rows(); ++o) {
    double s = b(0, o);
    for (Eigen::Index i = 0; i < w.cols(); ++i) s += w(o, i) * x[i];
    y[o] = s;
  }
  return y;
}

Vec layer_norm(const Vec& x, const Matrix<double>& g, const Matrix<double>& b, double eps) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + eps) * g(0, i) + b(0, i);
  return y;
}

// Rotary embedding as complex multiplication of (v[i], v[i + half]).
void rotate(double* v, int rot, int pos, double base) {
  const int half = rot / 2;
  for (int i = 0; i < half; ++i) {
    const std::complex<double> z(v[i], v[i + half]);
    const auto r = z * std::polar(1.0, pos * std::pow(base, -2.0 * i / rot));
    v[i] = r.real();
    v[i + half] = r.imag();
  }
}

// Single unpadded sequence, scalar loops only.
Mat naive_logits(const Parameters<double>& p, const ModelConfig& cfg, const TokenSequence& ids) {
  const int S = static_cast<int>(ids.size()), d = cfg.d_model, H = cfg.n_heads, hd = d / H;
  Mat x(S);
  for (int t = 0; t < S; ++t) x[t] = row_of(p.embed, ids[t]);
  for (const auto& w : p.layers) {
    Mat q(S), k(S), v(S), attn(S);
    for (int t = 0; t < S; ++t) {
      const auto qkv = affine(w.qkv_weight, w.qkv_bias, layer_norm(x[t], w.ln1_scale, w.ln1_bias, cfg.layer_norm_eps));
      q[t].assign(qkv.begin(), qkv.begin() + d);
      k[t].assign(qkv.begin() + d, qkv.begin() + 2 * d);
      v[t].assign(qkv.begin() + 2 * d, qkv.end());
      for (int h = 0; h < H; ++h) {
        rotate(&q[t][h * hd], cfg.rotary_dims(), t, cfg.rope_base);
        rotate(&k[t][h * hd], cfg.rotary_dims(), t, cfg.rope_base);
      }
    }
    for (int t = 0; t < S; ++t) {
      Vec ctx(d, 0.0);
      for (int h = 0; h < H; ++h) {
        Vec sc(t + 1);
        double mx = -1e300;
        for (int j = 0; j <= t; ++j) {
          double s = 0;
          for (int c = 0; c < hd; ++c) s += q[t][h * hd + c] * k[j][h * hd + c];
          sc[j] = s / std::sqrt(double(hd));
          mx = std::max(mx, sc[j]);
        }
        double z = 0;
        for (auto& s : sc) z += (s = std::exp(s - mx));
        for (int j = 0; j <= t; ++j) {
          for (int c = 0; c < hd; ++c) ctx[h * hd + c] += sc[j] / z * v[j][h * hd + c];
        }
      }
      attn[t] = affine(w.attn_out_weight, w.attn_out_bias, ctx);
    }
    for (int t = 0; t < S; ++t) {
      Vec mid = x[t];
      if (!cfg.parallel_residual) {
        for (int c = 0; c < d; ++c) mid[c] += attn[t][c];
      }
      auto f = affine(w.ff_in_weight, w.ff_in_bias, layer_norm(mid, w.ln2_scale, w.ln2_bias, cfg.layer_norm_eps));
      for (auto& u : f) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
      const auto out = affine(w.ff_out_weight, w.ff_out_bias, f);
      for (int c = 0; c < d; ++c) {
        x[t][c] = mid[c] + out[c] + (cfg.parallel_residual ? attn[t][c] : 0.0);
      }
    }
  }
  const auto& unembed = p.output_weight();
  Mat logits(S);
  for (int t = 0; t < S; ++t) {
    const auto h = layer_norm(x[t], p.final_norm_scale, p.final_norm_bias, cfg.layer_norm_eps);
    logits[t] = affine(unembed, Matrix<double>::Zero(1, unembed.rows()), h);
  }
  return logits;
}

void check_against_oracle(const ModelConfig& cfg) {
  const auto p = random_params(cfg, 9);
  const std::vector<TokenSequence> rows = {{3, 7, 1, 22, 5, 5, 0}, {4, 9}};
  const auto batch = TokenBatch::from_sequences(rows, 0);
  const auto trace = forward(p, cfg, batch);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const auto ref = naive_logits(p, cfg, rows[b]);
    for (std::size_t t = 0; t < rows[b].size(); ++t) {
      for (int v = 0; v < cfg.vocab_size; ++v) {
        REQUIRE(trace.logits(static_cast<Eigen::Index>(b * batch.seq + t), v) ==
                doctest::Approx(ref[t][v]).epsilon(1e-10));
      }
    }
  }
}

std::int64_t hand_count(std::int64_t L, std::int64_t d, std::int64_t f, std::int64_t V, bool tied) {
  const std::int64_t per_layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (f * d + f) + (d * f + d);
  return V * d * (tied ? 1 : 2) + L * per_layer + 2 * d;
}

}  // namespace

TEST_CASE("parameter count matches enumeration and hand formula") {
  for (bool tied : {false, true}) {
    auto cfg = tiny_config();
    cfg.tie_embeddings = tied;
    std::int64_t enumerated = 0;
    for (const auto& s : parameter_specs(cfg)) enumerated += s.rows * s.cols;
    CHECK(enumerated == count_parameters(cfg));
    CHECK(init_parameters(cfg, 1).size() == count_parameters(cfg));
    CHECK(count_parameters(cfg) == hand_count(2, 16, 24, 23, tied));
  }
  ModelConfig big;
  big.n_layers = 22;
  big.d_model = 3072;
  big.d_ff = 12288;
  big.n_heads = 32;
  big.vocab_size = 50257;
  CHECK(count_parameters(big) == hand_count(22, 3072, 12288, 50257, false));
  const double big_count = static_cast<double>(count_parameters(big));
  CHECK(big_count >= 2.66e9);
  CHECK(big_count <= 2.94e9);
  big.d_ff = 6144;
  big.n_heads = 64;
  big.vocab_size = 52000;
  const double small_count = static_cast<double>(count_parameters(big));
  CHECK(small_count >= 1.88e9);
  CHECK(small_count <= 2.08e9);
}

TEST_CASE("config validation and rotary dims") {
  ModelConfig cfg = tiny_config();
  CHECK(cfg.rotary_dims() == 4);
  cfg.rotary_pct = 0.25;
  cfg.d_model = 256;
  cfg.n_heads = 4;
  CHECK(cfg.rotary_dims() == 16);
  cfg.d_model = 96;
  cfg.n_heads = 32;  // head_dim 3: 0.75 rounds to the minimum of 2
  CHECK(cfg.rotary_dims() == 2);
  ModelConfig bad = tiny_config();
  bad.n_heads = 3;
  bad.max_seq_len = 0;
  try {
    bad.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("n_heads") != std::string::npos);
    CHECK(msg.find("max_seq_len") != std::string::npos);
  }
}

TEST_CASE("forward matches a scalar reference implementation") {
  auto cfg = tiny_config();
  check_against_oracle(cfg);
  cfg.parallel_residual = true;
  check_against_oracle(cfg);
  cfg.parallel_residual = false;
  cfg.tie_embeddings = true;
  check_against_oracle(cfg);
}

TEST_CASE("padding and batch neighbours do not change real-token logits") {
  const auto cfg = tiny_config();
  const auto p = init_parameters(cfg, 4);
  const TokenSequence row = {5, 6, 7, 8};
  const auto alone = forward(p, cfg, TokenBatch::from_sequences(std::vector<TokenSequence>{row}, 0));
  const auto padded =
      forward(p, cfg, TokenBatch::from_sequences(std::vector<TokenSequence>{{1, 2, 3, 4, 5, 6, 7, 8, 9}, row}, 0));
  for (int t = 0; t < 4; ++t) {
    for (int v = 0; v < cfg.vocab_size; ++v) {
      CHECK(padded.logits(9 + t, v) == doctest::Approx(alone.logits(t, v)).epsilon(1e-5));
    }
  }
}

TEST_CASE("forward rejects over-long batches and bad ids") {
  const auto cfg = tiny_config();
  const auto p = init_parameters(cfg, 4);
  CHECK_THROWS_AS(forward(p, cfg, TokenBatch::from_sequences(std::vector<TokenSequence>{TokenSequence(13, 1)}, 0)),
                  DataError);
  CHECK_THROWS_AS(forward(p, cfg, TokenBatch::from_sequences(std::vector<TokenSequence>{{1, 23}}, 0)), DataError);
}

TEST_CASE("RoPE: position 0 identity, norm preservation, relative-position law") {
  ModelConfig cfg;
  cfg.d_model = 64;
  cfg.n_heads = 2;
  cfg.rotary_pct = 0.25;
  cfg.max_seq_len = 512;
  const int hd = cfg.head_dim(), rot = cfg.rotary_dims();
  Rng rng(21);
  auto random_vec = [&] {
    std::vector<double> v(hd);
    for (auto& x : v) x = rng.normal();
    return v;
  };
  auto rotated = [&](std::vector<double> v, int pos) {
    const int p[1] = {pos};
    apply_rope<double>(v, 1, 1, 1, hd, p, cfg);
    return v;
  };
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  for (int trial = 0; trial < 200; ++trial) {
    const auto q = random_vec();
    const auto k = random_vec();
    CHECK(rotated(q, 0) == q);
    const int m = static_cast<int>(rng.below(512));
    const int n = static_cast<int>(rng.below(512));
    const auto qm = rotated(q, m);
    // Each rotated pair keeps its norm; the unrotated tail is untouched.
    for (int i = 0; i < rot / 2; ++i) {
      const double before = std::hypot(q[i], q[i + rot / 2]);
      const double after = std::hypot(qm[i], qm[i + rot / 2]);
      CHECK(std::abs(before - after) <= 1e-6 * std::max(1.0, before));
    }
    for (int i = rot; i < hd; ++i) CHECK(qm[i] == q[i]);
    // <R(m) q, R(n) k> depends only on m - n.
    const double lhs = dot(qm, rotated(k, n));
    const int lo = std::min(m, n);
    const double rhs = dot(rotated(q, m - lo), rotated(k, n - lo));
    CHECK(std::abs(lhs - rhs) <= 1e-5 * std::max(1.0, std::abs(lhs)));
    // Inverse undoes the rotation.
    auto back = qm;
    const int p[1] = {m};
    apply_rope<double>(back, 1, 1, 1, hd, p, cfg, true);
    for (int i = 0; i < hd; ++i) CHECK(back[i] == doctest::Approx(q[i]).epsilon(1e-12));
  }
}

TEST_CASE("LM loss matches a log-softmax reference and its gradient") {
  Rng rng(2);
  const int rows = 5, vocab = 7;
  Matrix<double> logits(rows, vocab);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.normal(0.0, 3.0);
  const std::vector<TokenId> targets = {1, 6, 0, 3, 2};
  const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1};
  const auto res = lm_loss(logits, std::span<const TokenId>(targets), std::span<const std::uint8_t>(mask), true);
  double ref = 0;
  for (int r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    double z = 0;
    for (int v = 0; v < vocab; ++v) z += std::exp(logits(r, v));
    ref += std::log(z) - logits(r, targets[r]);
  }
  CHECK(res.count == 4);
  CHECK(res.sum == doctest::Approx(ref).epsilon(1e-12));
  CHECK(res.loss == doctest::Approx(ref / 4).epsilon(1e-12));
  const double h = 1e-6;
  for (int r = 0; r < rows; ++r) {
    for (int v = 0; v < vocab; ++v) {
      auto up = logits, down = logits;
      up(r, v) += h;
      down(r, v) -= h;
      const double num =
          (lm_loss(up, std::span<const TokenId>(targets), std::span<const std::uint8_t>(mask), false).loss -
           lm_loss(down, std::span<const TokenId>(targets), std::span<const std::uint8_t>(mask), false).loss) /
          (2 * h);
      CHECK(res.d_logits(r, v) == doctest::Approx(num).epsilon(1e-6).scale(1e-3));
    }
  }
  const std::vector<std::uint8_t> none(rows, 0);
  CHECK_THROWS_AS(lm_loss(logits, std::span<const TokenId>(targets), std::span<const std::uint8_t>(none), false),
                  DataError);
}

TEST_CASE("next-token targets count only real successors") {
  const auto batch = TokenBatch::from_sequences(std::vector<TokenSequence>{{4, 5, 6}, {7}}, 0, 3);
  const auto t = next_token_targets(batch);
  CHECK(t.ids[0] == 5);
  CHECK(t.ids[1] == 6);
  CHECK(t.mask == std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0});
}

TEST_CASE("initialisation is deterministic and uses unit norms") {
  const auto cfg = tiny_config();
  const auto a = init_parameters(cfg, 5);
  const auto b = init_parameters(cfg, 5);
  const auto c = init_parameters(cfg, 6);
  CHECK(a.embed == b.embed);
  CHECK(a.embed != c.embed);
  CHECK(a.layers[0].ln1_scale.isOnes());
  CHECK(a.layers[1].ff_out_bias.isZero());
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const auto cfg = tiny_config();
  const auto p = init_parameters(cfg, 8);
  testing::TempDir dir("ckpt");
  save_checkpoint(dir / "c", cfg, p);
  const auto back = load_checkpoint(dir / "c");
  CHECK(back.config == cfg);
  bool same = true;
  std::vector<const Matrix<float>*> lhs, rhs;
  p.for_each([&](const std::string&, const Matrix<float>& m, TensorKind) { lhs.push_back(&m); });
  back.params.for_each([&](const std::string&, const Matrix<float>& m, TensorKind) { rhs.push_back(&m); });
  REQUIRE(lhs.size() == rhs.size());
  for (std::size_t i = 0; i < lhs.size(); ++i) same = same && *lhs[i] == *rhs[i];
  CHECK(same);
  CHECK_THROWS_AS(model_config_from_json("{\"n_layer\": 2}"), ConfigError);
}

TEST_CASE("greedy generation is deterministic") {
  const auto cfg = tiny_config();
  const auto p = init_parameters(cfg, 3);
  const auto a = generate(p, cfg, {1, 2}, 5, 1);
  CHECK(a == generate(p, cfg, {1, 2}, 5, 1));
  CHECK(a.size() <= 7);
  CHECK(a[0] == 1);
}
