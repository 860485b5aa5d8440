#include "mhgpt/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mhgpt/error.hpp"
#include "mhgpt/rng.hpp"

namespace mhgpt {

std::string_view tensor_kind_name(TensorKind kind) {
  switch (kind) {
    case TensorKind::Embedding: return "embedding";
    case TensorKind::Unembedding: return "unembedding";
    case TensorKind::Weight: return "weight";
    case TensorKind::Bias: return "bias";
    case TensorKind::NormScale: return "norm_scale";
    case TensorKind::NormBias: return "norm_bias";
    case TensorKind::LoraA: return "lora_a";
    case TensorKind::LoraB: return "lora_b";
    case TensorKind::HeadWeight: return "head_weight";
    case TensorKind::HeadBias: return "head_bias";
  }
  return "unknown";
}

std::string_view lora_target_name(LoraTarget t) {
  switch (t) {
    case LoraTarget::QueryKeyValue: return "attention.query_key_value";
    case LoraTarget::AttentionOutput: return "attention.dense";
    case LoraTarget::FeedForwardIn: return "mlp.dense_h_to_4h";
    case LoraTarget::FeedForwardOut: return "mlp.dense_4h_to_h";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (n_layers < 1) problems.push_back("n_layers must be >= 1");
  if (d_model < 1) problems.push_back("d_model must be >= 1");
  if (d_ff < 1) problems.push_back("d_ff must be >= 1");
  if (n_heads < 1) problems.push_back("n_heads must be >= 1");
  if (n_heads >= 1 && d_model % n_heads != 0) problems.push_back("d_model must be divisible by n_heads");
  if (n_heads >= 1 && d_model >= n_heads && d_model / n_heads < 2) problems.push_back("head_dim must be >= 2");
  if (vocab_size < 1) problems.push_back("vocab_size must be >= 1");
  if (max_seq_len < 1) problems.push_back("max_seq_len must be >= 1");
  if (!(rotary_pct > 0.0 && rotary_pct <= 1.0)) problems.push_back("rotary_pct must lie in (0, 1]");
  if (!(rope_base > 1.0)) problems.push_back("rope_base must be > 1");
  if (!(layer_norm_eps > 0.0)) problems.push_back("layer_norm_eps must be > 0");
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

int ModelConfig::rotary_dims() const {
  const int hd = head_dim();
  int r = 2 * static_cast<int>(std::lround(rotary_pct * hd / 2.0));
  r = std::max(r, 2);
  return std::min(r, hd - hd % 2);
}

std::vector<TensorSpec> parameter_specs(const ModelConfig& cfg) {
  const Eigen::Index d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;
  std::vector<TensorSpec> specs;
  specs.push_back({"embed_in.weight", v, d, TensorKind::Embedding, false});
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    specs.push_back({p + "input_layernorm.weight", 1, d, TensorKind::NormScale, true});
    specs.push_back({p + "input_layernorm.bias", 1, d, TensorKind::NormBias, true});
    specs.push_back({p + "attention.query_key_value.weight", 3 * d, d, TensorKind::Weight, false});
    specs.push_back({p + "attention.query_key_value.bias", 1, 3 * d, TensorKind::Bias, true});
    specs.push_back({p + "attention.dense.weight", d, d, TensorKind::Weight, false});
    specs.push_back({p + "attention.dense.bias", 1, d, TensorKind::Bias, true});
    specs.push_back({p + "post_attention_layernorm.weight", 1, d, TensorKind::NormScale, true});
    specs.push_back({p + "post_attention_layernorm.bias", 1, d, TensorKind::NormBias, true});
    specs.push_back({p + "mlp.dense_h_to_4h.weight", f, d, TensorKind::Weight, false});
    specs.push_back({p + "mlp.dense_h_to_4h.bias", 1, f, TensorKind::Bias, true});
    specs.push_back({p + "mlp.dense_4h_to_h.weight", d, f, TensorKind::Weight, false});
    specs.push_back({p + "mlp.dense_4h_to_h.bias", 1, d, TensorKind::Bias, true});
  }
  specs.push_back({"final_layer_norm.weight", 1, d, TensorKind::NormScale, true});
  specs.push_back({"final_layer_norm.bias", 1, d, TensorKind::NormBias, true});
  if (!cfg.tie_embeddings) specs.push_back({"embed_out.weight", v, d, TensorKind::Unembedding, false});
  return specs;
}

std::int64_t count_parameters(const ModelConfig& cfg) {
  const std::int64_t d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size, layers = cfg.n_layers;
  const std::int64_t norms = 2 * (2 * d);
  const std::int64_t attention = (3 * d * d + 3 * d) + (d * d + d);
  const std::int64_t mlp = (f * d + f) + (d * f + d);
  const std::int64_t per_layer = norms + attention + mlp;
  const std::int64_t embeddings = v * d * (cfg.tie_embeddings ? 1 : 2);
  return embeddings + layers * per_layer + 2 * d;
}

template <class T>
Parameters<T> Parameters<T>::zeros(const ModelConfig& cfg) {
  const Eigen::Index d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;
  Parameters<T> p;
  p.embed = Matrix<T>::Zero(v, d);
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : p.layers) {
    l.ln1_scale = Matrix<T>::Zero(1, d);
    l.ln1_bias = Matrix<T>::Zero(1, d);
    l.qkv_weight = Matrix<T>::Zero(3 * d, d);
    l.qkv_bias = Matrix<T>::Zero(1, 3 * d);
    l.attn_out_weight = Matrix<T>::Zero(d, d);
    l.attn_out_bias = Matrix<T>::Zero(1, d);
    l.ln2_scale = Matrix<T>::Zero(1, d);
    l.ln2_bias = Matrix<T>::Zero(1, d);
    l.ff_in_weight = Matrix<T>::Zero(f, d);
    l.ff_in_bias = Matrix<T>::Zero(1, f);
    l.ff_out_weight = Matrix<T>::Zero(d, f);
    l.ff_out_bias = Matrix<T>::Zero(1, d);
  }
  p.final_norm_scale = Matrix<T>::Zero(1, d);
  p.final_norm_bias = Matrix<T>::Zero(1, d);
  if (!cfg.tie_embeddings) p.unembed = Matrix<T>::Zero(v, d);
  return p;
}

Parameters<float> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto p = Parameters<float>::zeros(cfg);
  Rng rng(seed);
  const double out_std = cfg.init_std / std::sqrt(2.0 * cfg.n_layers);
  p.for_each([&](const std::string& name, Matrix<float>& m, TensorKind kind) {
    switch (kind) {
      case TensorKind::NormScale:
        m.setOnes();
        break;
      case TensorKind::Embedding:
      case TensorKind::Unembedding:
      case TensorKind::Weight: {
        const bool output_proj = name.ends_with("attention.dense.weight") || name.ends_with("dense_4h_to_h.weight");
        const double std = output_proj ? out_std : cfg.init_std;
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal(0.0, std));
        break;
      }
      default:
        m.setZero();
        break;
    }
  });
  return p;
}

TokenBatch TokenBatch::from_sequences(std::span<const TokenSequence> rows, TokenId pad_id, int seq_len) {
  TokenBatch b;
  b.batch = static_cast<int>(rows.size());
  if (seq_len <= 0) {
    std::size_t longest = 0;
    for (const auto& r : rows) longest = std::max(longest, r.size());
    seq_len = static_cast<int>(longest);
  }
  b.seq = seq_len;
  b.ids.assign(static_cast<std::size_t>(b.batch) * b.seq, pad_id);
  b.mask.assign(b.ids.size(), 0);
  for (int i = 0; i < b.batch; ++i) {
    const auto& r = rows[i];
    const int n = std::min<int>(static_cast<int>(r.size()), b.seq);
    for (int t = 0; t < n; ++t) {
      b.ids[static_cast<std::size_t>(i) * b.seq + t] = r[t];
      b.mask[static_cast<std::size_t>(i) * b.seq + t] = 1;
    }
  }
  return b;
}

namespace {

template <class T>
struct RopeTable {
  int half = 0;
  Matrix<T> cos, sin;  // [seq x half]

  RopeTable(const ModelConfig& cfg, int seq) {
    const int rot = cfg.rotary_dims();
    half = rot / 2;
    cos.resize(seq, half);
    sin.resize(seq, half);
    for (int i = 0; i < half; ++i) {
      const double inv_freq = std::pow(cfg.rope_base, -2.0 * i / rot);
      for (int t = 0; t < seq; ++t) {
        const double angle = t * inv_freq;
        cos(t, i) = static_cast<T>(std::cos(angle));
        sin(t, i) = static_cast<T>(std::sin(angle));
      }
    }
  }

  void rotate(T* v, int pos, bool inverse) const {
    for (int i = 0; i < half; ++i) {
      const T c = cos(pos, i);
      const T s = inverse ? -sin(pos, i) : sin(pos, i);
      const T a = v[i];
      const T b = v[i + half];
      v[i] = a * c - b * s;
      v[i + half] = a * s + b * c;
    }
  }
};

template <class T>
void layer_norm_forward(const Matrix<T>& x, const Matrix<T>& scale, const Matrix<T>& bias, double eps,
                        Matrix<T>& xhat, Matrix<T>& rstd, Matrix<T>& y) {
  const Eigen::Index n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n, 1);
  y.resize(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.row(r).mean();
    T var = T(0);
    for (Eigen::Index c = 0; c < d; ++c) {
      const T z = x(r, c) - mean;
      var += z * z;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    rstd(r, 0) = inv;
    for (Eigen::Index c = 0; c < d; ++c) {
      const T h = (x(r, c) - mean) * inv;
      xhat(r, c) = h;
      y(r, c) = h * scale(0, c) + bias(0, c);
    }
  }
}

template <class T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& xhat, const Matrix<T>& rstd,
                              const Matrix<T>& scale, Matrix<T>* d_scale, Matrix<T>* d_bias) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  Matrix<T> dx(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    T mean_g = T(0);
    T mean_gx = T(0);
    for (Eigen::Index c = 0; c < d; ++c) {
      const T g = dy(r, c) * scale(0, c);
      mean_g += g;
      mean_gx += g * xhat(r, c);
    }
    mean_g /= static_cast<T>(d);
    mean_gx /= static_cast<T>(d);
    for (Eigen::Index c = 0; c < d; ++c) {
      const T g = dy(r, c) * scale(0, c);
      dx(r, c) = rstd(r, 0) * (g - mean_g - xhat(r, c) * mean_gx);
    }
  }
  if (d_scale) d_scale->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (d_bias) d_bias->row(0) += dy.colwise().sum();
  return dx;
}

template <class T>
void linear_forward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b, const LowRankFactors<T>* lora,
                    T scaling, Matrix<T>& y, Matrix<T>* lora_hidden) {
  y.noalias() = x * w.transpose();
  y.rowwise() += b.row(0);
  if (lora) {
    Matrix<T> u = x * lora->a.transpose();
    y.noalias() += scaling * (u * lora->b.transpose());
    if (lora_hidden) *lora_hidden = std::move(u);
  }
}

template <class T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& dy, const LowRankFactors<T>* lora,
                          T scaling, const Matrix<T>& lora_hidden, Matrix<T>* dw, Matrix<T>* db,
                          LowRankFactors<T>* d_lora) {
  Matrix<T> dx = dy * w;
  if (dw) dw->noalias() += dy.transpose() * x;
  if (db) db->row(0) += dy.colwise().sum();
  if (lora) {
    Matrix<T> du = scaling * (dy * lora->b);
    if (d_lora) {
      d_lora->b.noalias() += scaling * (dy.transpose() * lora_hidden);
      d_lora->a.noalias() += du.transpose() * x;
    }
    dx.noalias() += du * lora->a;
  }
  return dx;
}

template <class T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

struct Dims {
  int batch, seq, d, heads, head_dim;
};

template <class T>
void rotate_qk(Matrix<T>& qkv, const Dims& dims, const RopeTable<T>& rope, bool inverse) {
  for (int b = 0; b < dims.batch; ++b) {
    for (int t = 0; t < dims.seq; ++t) {
      T* row = qkv.row(static_cast<Eigen::Index>(b) * dims.seq + t).data();
      for (int h = 0; h < dims.heads; ++h) {
        rope.rotate(row + h * dims.head_dim, t, inverse);
        rope.rotate(row + dims.d + h * dims.head_dim, t, inverse);
      }
    }
  }
}

template <class T>
void attention_forward(const Matrix<T>& qkv, const TokenBatch& batch, const Dims& dims, Matrix<T>& context,
                       std::vector<Matrix<T>>* probs_out) {
  const int S = dims.seq, hd = dims.head_dim, d = dims.d;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  context.setZero(static_cast<Eigen::Index>(dims.batch) * S, d);
  if (probs_out) probs_out->resize(static_cast<std::size_t>(dims.batch) * dims.heads);
  Matrix<T> scores(S, S);
  for (int b = 0; b < dims.batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * S;
    for (int h = 0; h < dims.heads; ++h) {
      const auto q = qkv.block(r0, h * hd, S, hd);
      const auto k = qkv.block(r0, d + h * hd, S, hd);
      const auto v = qkv.block(r0, 2 * d + h * hd, S, hd);
      scores.noalias() = (q * k.transpose()) * scale;
      for (int i = 0; i < S; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          if (batch.valid(b, j)) mx = std::max(mx, scores(i, j));
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
          scores.row(i).setZero();
          continue;
        }
        T sum = T(0);
        for (int j = 0; j < S; ++j) {
          if (j <= i && batch.valid(b, j)) {
            const T e = std::exp(scores(i, j) - mx);
            scores(i, j) = e;
            sum += e;
          } else {
            scores(i, j) = T(0);
          }
        }
        scores.row(i) /= sum;
      }
      context.block(r0, h * hd, S, hd).noalias() = scores * v;
      if (probs_out) (*probs_out)[static_cast<std::size_t>(b) * dims.heads + h] = scores;
    }
  }
}

template <class T>
Matrix<T> attention_backward(const Matrix<T>& qkv, const std::vector<Matrix<T>>& probs, const Matrix<T>& d_context,
                             const Dims& dims) {
  const int S = dims.seq, hd = dims.head_dim, d = dims.d;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  Matrix<T> d_qkv = Matrix<T>::Zero(qkv.rows(), qkv.cols());
  Matrix<T> d_p(S, S);
  for (int b = 0; b < dims.batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * S;
    for (int h = 0; h < dims.heads; ++h) {
      const Matrix<T>& p = probs[static_cast<std::size_t>(b) * dims.heads + h];
      const auto q = qkv.block(r0, h * hd, S, hd);
      const auto k = qkv.block(r0, d + h * hd, S, hd);
      const auto v = qkv.block(r0, 2 * d + h * hd, S, hd);
      const auto dc = d_context.block(r0, h * hd, S, hd);
      d_qkv.block(r0, 2 * d + h * hd, S, hd).noalias() = p.transpose() * dc;
      d_p.noalias() = dc * v.transpose();
      for (int i = 0; i < S; ++i) {
        const T dot = p.row(i).dot(d_p.row(i));
        for (int j = 0; j < S; ++j) d_p(i, j) = p(i, j) * (d_p(i, j) - dot) * scale;
      }
      d_qkv.block(r0, h * hd, S, hd).noalias() = d_p * k;
      d_qkv.block(r0, d + h * hd, S, hd).noalias() = d_p.transpose() * q;
    }
  }
  return d_qkv;
}

template <class T>
Matrix<T> layer_forward(const LayerWeights<T>& w, const ModelConfig& cfg, const TokenBatch& batch, const Dims& dims,
                        const RopeTable<T>& rope, const AdapterSet<T>* adapters, std::size_t layer,
                        const Matrix<T>& x, LayerCache<T>& c, bool keep) {
  auto lora = [&](LoraTarget t) { return adapters ? adapters->factors(layer, t) : nullptr; };
  auto slot = [&](LoraTarget t) { return &c.lora_hidden[static_cast<std::size_t>(t)]; };
  const T scaling = adapters ? adapters->scaling : T(0);

  layer_norm_forward(x, w.ln1_scale, w.ln1_bias, cfg.layer_norm_eps, c.ln1_xhat, c.ln1_rstd, c.ln1_out);
  linear_forward(c.ln1_out, w.qkv_weight, w.qkv_bias, lora(LoraTarget::QueryKeyValue), scaling, c.qkv,
                 slot(LoraTarget::QueryKeyValue));
  rotate_qk(c.qkv, dims, rope, false);
  attention_forward(c.qkv, batch, dims, c.context, keep ? &c.probs : nullptr);
  Matrix<T> attn;
  linear_forward(c.context, w.attn_out_weight, w.attn_out_bias, lora(LoraTarget::AttentionOutput), scaling, attn,
                 slot(LoraTarget::AttentionOutput));

  const Matrix<T>* ln2_in = &x;
  if (!cfg.parallel_residual) {
    c.residual = x + attn;
    ln2_in = &c.residual;
  }
  layer_norm_forward(*ln2_in, w.ln2_scale, w.ln2_bias, cfg.layer_norm_eps, c.ln2_xhat, c.ln2_rstd, c.ln2_out);
  linear_forward(c.ln2_out, w.ff_in_weight, w.ff_in_bias, lora(LoraTarget::FeedForwardIn), scaling, c.ff_pre,
                 slot(LoraTarget::FeedForwardIn));
  c.ff_act = c.ff_pre.unaryExpr([](T v) { return gelu(v); });
  Matrix<T> ff;
  linear_forward(c.ff_act, w.ff_out_weight, w.ff_out_bias, lora(LoraTarget::FeedForwardOut), scaling, ff,
                 slot(LoraTarget::FeedForwardOut));
  if (cfg.parallel_residual) return x + attn + ff;
  return c.residual + ff;
}

template <class T>
Matrix<T> layer_backward(const LayerWeights<T>& w, const ModelConfig& cfg, const Dims& dims, const RopeTable<T>& rope,
                         const LayerCache<T>& c, const Matrix<T>& dy, LayerWeights<T>* g,
                         const AdapterSet<T>* adapters, AdapterSet<T>* adapter_grads, std::size_t layer) {
  auto lora = [&](LoraTarget t) { return adapters ? adapters->factors(layer, t) : nullptr; };
  auto d_lora = [&](LoraTarget t) { return adapter_grads ? adapter_grads->factors(layer, t) : nullptr; };
  auto hidden = [&](LoraTarget t) -> const Matrix<T>& { return c.lora_hidden[static_cast<std::size_t>(t)]; };
  const T scaling = adapters ? adapters->scaling : T(0);

  Matrix<T> d_act = linear_backward(c.ff_act, w.ff_out_weight, dy, lora(LoraTarget::FeedForwardOut), scaling,
                                    hidden(LoraTarget::FeedForwardOut), g ? &g->ff_out_weight : nullptr,
                                    g ? &g->ff_out_bias : nullptr, d_lora(LoraTarget::FeedForwardOut));
  Matrix<T> d_pre = d_act.binaryExpr(c.ff_pre, [](T da, T z) { return da * gelu_grad(z); });
  Matrix<T> d_ln2_out = linear_backward(c.ln2_out, w.ff_in_weight, d_pre, lora(LoraTarget::FeedForwardIn), scaling,
                                        hidden(LoraTarget::FeedForwardIn), g ? &g->ff_in_weight : nullptr,
                                        g ? &g->ff_in_bias : nullptr, d_lora(LoraTarget::FeedForwardIn));
  Matrix<T> d_ln2_in = layer_norm_backward(d_ln2_out, c.ln2_xhat, c.ln2_rstd, w.ln2_scale,
                                           g ? &g->ln2_scale : nullptr, g ? &g->ln2_bias : nullptr);

  Matrix<T> dx;
  Matrix<T> d_attn;
  if (cfg.parallel_residual) {
    d_attn = dy;
    dx = dy + d_ln2_in;
  } else {
    d_attn = dy + d_ln2_in;
    dx = d_attn;
  }

  Matrix<T> d_context = linear_backward(c.context, w.attn_out_weight, d_attn, lora(LoraTarget::AttentionOutput),
                                        scaling, hidden(LoraTarget::AttentionOutput),
                                        g ? &g->attn_out_weight : nullptr, g ? &g->attn_out_bias : nullptr,
                                        d_lora(LoraTarget::AttentionOutput));
  Matrix<T> d_qkv = attention_backward(c.qkv, c.probs, d_context, dims);
  rotate_qk(d_qkv, dims, rope, true);
  Matrix<T> d_ln1_out = linear_backward(c.ln1_out, w.qkv_weight, d_qkv, lora(LoraTarget::QueryKeyValue), scaling,
                                        hidden(LoraTarget::QueryKeyValue), g ? &g->qkv_weight : nullptr,
                                        g ? &g->qkv_bias : nullptr, d_lora(LoraTarget::QueryKeyValue));
  dx += layer_norm_backward(d_ln1_out, c.ln1_xhat, c.ln1_rstd, w.ln1_scale, g ? &g->ln1_scale : nullptr,
                            g ? &g->ln1_bias : nullptr);
  return dx;
}

void check_batch(const ModelConfig& cfg, const TokenBatch& batch) {
  if (batch.seq > cfg.max_seq_len) {
    throw DataError("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
  }
  if (batch.ids.size() != static_cast<std::size_t>(batch.batch) * batch.seq || batch.mask.size() != batch.ids.size()) {
    throw DataError("token batch buffers do not match batch x seq");
  }
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    if (batch.mask[i] && (batch.ids[i] < 0 || batch.ids[i] >= cfg.vocab_size)) {
      throw DataError("token id " + std::to_string(batch.ids[i]) + " outside vocabulary of size " +
                      std::to_string(cfg.vocab_size));
    }
  }
}

}  // namespace

template <class T>
void apply_rope(std::span<T> data, int batch, int heads, int seq, int head_dim, std::span<const int> positions,
                const ModelConfig& cfg, bool inverse) {
  if (head_dim != cfg.head_dim()) throw ConfigError("apply_rope: head_dim does not match the model config");
  if (static_cast<int>(positions.size()) != seq) throw ConfigError("apply_rope: need one position per sequence slot");
  if (data.size() != static_cast<std::size_t>(batch) * heads * seq * head_dim) {
    throw ConfigError("apply_rope: buffer size does not match [batch x heads x seq x head_dim]");
  }
  int max_pos = 0;
  for (int p : positions) {
    if (p < 0 || p >= cfg.max_seq_len) throw DataError("apply_rope: position outside [0, max_seq_len)");
    max_pos = std::max(max_pos, p);
  }
  const RopeTable<T> rope(cfg, max_pos + 1);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      for (int t = 0; t < seq; ++t) {
        const std::size_t off = ((static_cast<std::size_t>(b) * heads + h) * seq + t) * head_dim;
        rope.rotate(data.data() + off, positions[t], inverse);
      }
    }
  }
}

template <class T>
ForwardCache<T> forward_hidden(const Parameters<T>& params, const ModelConfig& cfg, const TokenBatch& batch,
                               const ForwardOptions<T>& options) {
  check_batch(cfg, batch);
  const Dims dims{batch.batch, batch.seq, cfg.d_model, cfg.n_heads, cfg.head_dim()};
  const Eigen::Index n = batch.rows();
  Matrix<T> x = Matrix<T>::Zero(n, cfg.d_model);
  for (Eigen::Index r = 0; r < n; ++r) {
    if (batch.mask[r]) x.row(r) = params.embed.row(batch.ids[r]);
  }
  if (options.embedding_hook) options.embedding_hook(x);

  const RopeTable<T> rope(cfg, std::max(batch.seq, 1));
  ForwardCache<T> cache;
  cache.layers.resize(params.layers.size());
  LayerCache<T> scratch;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    LayerCache<T>& c = options.keep_activations ? cache.layers[l] : scratch;
    x = layer_forward(params.layers[l], cfg, batch, dims, rope, options.adapters, l, x, c, options.keep_activations);
  }
  if (!options.keep_activations) cache.layers.clear();
  layer_norm_forward(x, params.final_norm_scale, params.final_norm_bias, cfg.layer_norm_eps, cache.final_xhat,
                     cache.final_rstd, cache.hidden);
  return cache;
}

template <class T>
ForwardTrace<T> forward(const Parameters<T>& params, const ModelConfig& cfg, const TokenBatch& batch,
                        const ForwardOptions<T>& options) {
  ForwardTrace<T> trace;
  trace.cache = forward_hidden(params, cfg, batch, options);
  trace.logits.noalias() = trace.cache.hidden * params.output_weight().transpose();
  return trace;
}

template <class T>
void backward_hidden(const Parameters<T>& params, const ModelConfig& cfg, const TokenBatch& batch,
                     const ForwardCache<T>& cache, const Matrix<T>& d_hidden, Parameters<T>* grads,
                     const AdapterSet<T>* adapters, AdapterSet<T>* adapter_grads) {
  if (cache.layers.size() != params.layers.size()) {
    throw ConfigError("backward_hidden needs a forward pass run with keep_activations");
  }
  const Dims dims{batch.batch, batch.seq, cfg.d_model, cfg.n_heads, cfg.head_dim()};
  const RopeTable<T> rope(cfg, std::max(batch.seq, 1));
  Matrix<T> dx = layer_norm_backward(d_hidden, cache.final_xhat, cache.final_rstd, params.final_norm_scale,
                                     grads ? &grads->final_norm_scale : nullptr,
                                     grads ? &grads->final_norm_bias : nullptr);
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    dx = layer_backward(params.layers[l], cfg, dims, rope, cache.layers[l], dx, grads ? &grads->layers[l] : nullptr,
                        adapters, adapter_grads, l);
  }
  if (grads) {
    for (Eigen::Index r = 0; r < dx.rows(); ++r) {
      if (batch.mask[r]) grads->embed.row(batch.ids[r]) += dx.row(r);
    }
  }
}

template <class T>
Matrix<T> backward_logits(const Parameters<T>& params, const Matrix<T>& hidden, const Matrix<T>& d_logits,
                          Parameters<T>* grads) {
  if (grads) grads->output_weight().noalias() += d_logits.transpose() * hidden;
  return d_logits * params.output_weight();
}

LmTargets next_token_targets(const TokenBatch& batch) {
  LmTargets t;
  t.ids.assign(batch.ids.size(), 0);
  t.mask.assign(batch.ids.size(), 0);
  for (int b = 0; b < batch.batch; ++b) {
    for (int s = 0; s + 1 < batch.seq; ++s) {
      const std::size_t i = static_cast<std::size_t>(b) * batch.seq + s;
      if (batch.mask[i] && batch.mask[i + 1]) {
        t.ids[i] = batch.ids[i + 1];
        t.mask[i] = 1;
      }
    }
  }
  return t;
}

template <class T>
LossResult<T> lm_loss(const Matrix<T>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask,
                      bool with_grad) {
  const Eigen::Index n = logits.rows(), v = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != n || static_cast<Eigen::Index>(mask.size()) != n) {
    throw DataError("lm_loss: targets and mask must have one entry per logits row");
  }
  LossResult<T> out;
  for (Eigen::Index r = 0; r < n; ++r) out.count += mask[r] ? 1 : 0;
  if (out.count == 0) throw DataError("lm_loss: batch has no non-pad target positions");
  if (with_grad) out.d_logits = Matrix<T>::Zero(n, v);
  const T inv_count = T(1) / static_cast<T>(out.count);
  for (Eigen::Index r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    const TokenId target = targets[r];
    if (target < 0 || target >= v) throw DataError("lm_loss: target id out of range");
    const T mx = logits.row(r).maxCoeff();
    T sum = T(0);
    for (Eigen::Index c = 0; c < v; ++c) sum += std::exp(logits(r, c) - mx);
    const T log_z = mx + std::log(sum);
    out.sum += static_cast<double>(log_z - logits(r, target));
    if (with_grad) {
      for (Eigen::Index c = 0; c < v; ++c) out.d_logits(r, c) = std::exp(logits(r, c) - log_z) * inv_count;
      out.d_logits(r, target) -= inv_count;
    }
  }
  out.loss = static_cast<T>(out.sum / static_cast<double>(out.count));
  return out;
}

TokenSequence generate(const Parameters<float>& params, const ModelConfig& cfg, TokenSequence prompt,
                       int max_new_tokens, TokenId eos_id) {
  for (int step = 0; step < max_new_tokens && static_cast<int>(prompt.size()) < cfg.max_seq_len; ++step) {
    const std::vector<TokenSequence> rows{prompt};
    const auto batch = TokenBatch::from_sequences(rows, 0);
    ForwardOptions<float> opts;
    opts.keep_activations = false;
    const auto trace = forward(params, cfg, batch, opts);
    Eigen::Index best = 0;
    trace.logits.row(trace.logits.rows() - 1).maxCoeff(&best);
    prompt.push_back(static_cast<TokenId>(best));
    if (best == eos_id) break;
  }
  return prompt;
}

#define MHGPT_INSTANTIATE(T)                                                                                       \
  template struct Parameters<T>;                                                                                   \
  template void apply_rope<T>(std::span<T>, int, int, int, int, std::span<const int>, const ModelConfig&, bool); \
  template ForwardCache<T> forward_hidden<T>(const Parameters<T>&, const ModelConfig&, const TokenBatch&,         \
                                             const ForwardOptions<T>&);                                            \
  template ForwardTrace<T> forward<T>(const Parameters<T>&, const ModelConfig&, const TokenBatch&,                \
                                      const ForwardOptions<T>&);                                                   \
  template void backward_hidden<T>(const Parameters<T>&, const ModelConfig&, const TokenBatch&,                   \
                                   const ForwardCache<T>&, const Matrix<T>&, Parameters<T>*, const AdapterSet<T>*, \
                                   AdapterSet<T>*);                                                                \
  template Matrix<T> backward_logits<T>(const Parameters<T>&, const Matrix<T>&, const Matrix<T>&, Parameters<T>*); \
  template LossResult<T> lm_loss<T>(const Matrix<T>&, std::span<const TokenId>, std::span<const std::uint8_t>, bool);

MHGPT_INSTANTIATE(float)
MHGPT_INSTANTIATE(double)

}  // namespace mhgpt
