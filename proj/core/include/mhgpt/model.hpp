#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mhgpt/adapter_set.hpp"
#include "mhgpt/chunker.hpp"
#include "mhgpt/tensor.hpp"

namespace mhgpt {

/// Decoder-only transformer hyperparameters (GPT-NeoX layout).
struct ModelConfig {
  int n_layers = 2;
  int d_model = 128;
  int d_ff = 512;
  int n_heads = 4;
  int vocab_size = 1000;
  int max_seq_len = 512;
  /// Fraction of each head's dimensions that receive rotary embeddings.
  double rotary_pct = 0.25;
  double rope_base = 10000.0;
  bool tie_embeddings = false;
  /// x + attn(ln1(x)) + mlp(ln2(x)) instead of the sequential block.
  bool parallel_residual = false;
  double layer_norm_eps = 1e-5;
  double init_std = 0.02;

  /// Throws ConfigError listing every violated constraint.
  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  /// rotary_pct * head_dim rounded to the nearest even integer, clamped to
  /// [2, head_dim].
  int rotary_dims() const;

  bool operator==(const ModelConfig&) const = default;
};

struct TensorSpec {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  TensorKind kind = TensorKind::Weight;
  /// Stored as 1 x cols but logically one-dimensional.
  bool vector = false;
};

/// Every tensor of the model, in storage order; shapes depend on the config only.
std::vector<TensorSpec> parameter_specs(const ModelConfig& cfg);

/// Closed-form parameter total.
std::int64_t count_parameters(const ModelConfig& cfg);

template <class T>
struct LayerWeights {
  Matrix<T> ln1_scale, ln1_bias;
  Matrix<T> qkv_weight, qkv_bias;            // [3d x d]: q | k | v, heads contiguous
  Matrix<T> attn_out_weight, attn_out_bias;  // [d x d]
  Matrix<T> ln2_scale, ln2_bias;
  Matrix<T> ff_in_weight, ff_in_bias;        // [d_ff x d]
  Matrix<T> ff_out_weight, ff_out_bias;      // [d x d_ff]
};

template <class T>
struct Parameters {
  Matrix<T> embed;  // [vocab x d]
  std::vector<LayerWeights<T>> layers;
  Matrix<T> final_norm_scale, final_norm_bias;
  Matrix<T> unembed;  // [vocab x d]; empty when embeddings are tied

  static Parameters zeros(const ModelConfig& cfg);

  const Matrix<T>& output_weight() const { return unembed.size() > 0 ? unembed : embed; }
  Matrix<T>& output_weight() { return unembed.size() > 0 ? unembed : embed; }

  /// f(name, tensor, kind) over every tensor in parameter_specs() order.
  template <class F>
  void for_each(F&& f);
  template <class F>
  void for_each(F&& f) const {
    const_cast<Parameters*>(this)->for_each(
        [&](const std::string& name, Matrix<T>& m, TensorKind kind) { f(name, static_cast<const Matrix<T>&>(m), kind); });
  }

  template <class U>
  Parameters<U> cast() const;

  std::int64_t size() const {
    std::int64_t n = 0;
    for_each([&](const std::string&, const Matrix<T>& m, TensorKind) { n += m.size(); });
    return n;
  }
};

/// Scaled-normal initialisation (std init_std; attention and FFN output
/// projections additionally scaled by 1/sqrt(2 n_layers)); norms at 1/0.
Parameters<float> init_parameters(const ModelConfig& cfg, std::uint64_t seed);

/// Right-padded batch of token rows; mask is 1 on real tokens.
struct TokenBatch {
  int batch = 0;
  int seq = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;

  /// Pads (or truncates) every row to `seq_len`; seq_len <= 0 means the longest row.
  static TokenBatch from_sequences(std::span<const TokenSequence> rows, TokenId pad_id, int seq_len = 0);

  TokenId id(int b, int t) const { return ids[static_cast<std::size_t>(b) * seq + t]; }
  bool valid(int b, int t) const { return mask[static_cast<std::size_t>(b) * seq + t] != 0; }
  int rows() const { return batch * seq; }
};

/// Rotates the first rotary_dims components of every head vector in place.
/// Layout is [batch x heads x seq x head_dim]; component i < rotary_dims/2 is
/// paired with i + rotary_dims/2 and turned by position * base^(-2i/rotary_dims).
/// `inverse` applies the transposed rotation.
template <class T>
void apply_rope(std::span<T> data, int batch, int heads, int seq, int head_dim,
                std::span<const int> positions, const ModelConfig& cfg, bool inverse = false);

template <class T>
struct LayerCache {
  Matrix<T> input;
  Matrix<T> ln1_xhat, ln1_rstd, ln1_out;
  Matrix<T> qkv;  // q and k already rotated
  std::vector<Matrix<T>> probs;  // batch * heads matrices of seq x seq
  Matrix<T> context;
  Matrix<T> residual;  // input to the second norm (sequential blocks only)
  Matrix<T> ln2_xhat, ln2_rstd, ln2_out;
  Matrix<T> ff_pre, ff_act;
  std::array<Matrix<T>, 4> lora_hidden;  // x A^T per adapted target
};

template <class T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  Matrix<T> final_xhat, final_rstd;
  Matrix<T> hidden;  // [batch*seq x d] after the final norm
};

template <class T>
struct ForwardOptions {
  const AdapterSet<T>* adapters = nullptr;
  /// Applied to the token embeddings in place. Must be additive (a
  /// translation) for backward_hidden to stay exact.
  std::function<void(Matrix<T>&)> embedding_hook;
  /// Drop per-layer activations (evaluation only).
  bool keep_activations = true;
};

template <class T>
ForwardCache<T> forward_hidden(const Parameters<T>& params, const ModelConfig& cfg, const TokenBatch& batch,
                               const ForwardOptions<T>& options = {});

template <class T>
struct ForwardTrace {
  Matrix<T> logits;  // [batch*seq x vocab]
  ForwardCache<T> cache;
};

/// Throws DataError when seq exceeds max_seq_len or an id is out of range.
template <class T>
ForwardTrace<T> forward(const Parameters<T>& params, const ModelConfig& cfg, const TokenBatch& batch,
                        const ForwardOptions<T>& options = {});

/// Back-propagates dL/dhidden. `grads` may be null (frozen base); adapter
/// gradients accumulate into `adapter_grads` when given.
template <class T>
void backward_hidden(const Parameters<T>& params, const ModelConfig& cfg, const TokenBatch& batch,
                     const ForwardCache<T>& cache, const Matrix<T>& d_hidden, Parameters<T>* grads,
                     const AdapterSet<T>* adapters = nullptr, AdapterSet<T>* adapter_grads = nullptr);

/// Gradient of the output projection; returns dL/dhidden and accumulates
/// the projection gradient when `grads` is given.
template <class T>
Matrix<T> backward_logits(const Parameters<T>& params, const Matrix<T>& hidden, const Matrix<T>& d_logits,
                          Parameters<T>* grads);

struct LmTargets {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;
};

/// Position t predicts token t+1; counted only when both are real tokens.
LmTargets next_token_targets(const TokenBatch& batch);

template <class T>
struct LossResult {
  T loss = T(0);     // mean over counted positions
  double sum = 0.0;  // summed per-token loss
  std::int64_t count = 0;
  Matrix<T> d_logits;  // filled when requested
};

/// Mean cross-entropy; throws DataError when no position is counted.
template <class T>
LossResult<T> lm_loss(const Matrix<T>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask,
                      bool with_grad);

/// Greedy decoding (unoptimised; recomputes the full prefix every step).
TokenSequence generate(const Parameters<float>& params, const ModelConfig& cfg, TokenSequence prompt,
                       int max_new_tokens, TokenId eos_id);

// ---------------------------------------------------------------------------

template <class T>
template <class F>
void Parameters<T>::for_each(F&& f) {
  f(std::string("embed_in.weight"), embed, TensorKind::Embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    f(p + "input_layernorm.weight", l.ln1_scale, TensorKind::NormScale);
    f(p + "input_layernorm.bias", l.ln1_bias, TensorKind::NormBias);
    f(p + "attention.query_key_value.weight", l.qkv_weight, TensorKind::Weight);
    f(p + "attention.query_key_value.bias", l.qkv_bias, TensorKind::Bias);
    f(p + "attention.dense.weight", l.attn_out_weight, TensorKind::Weight);
    f(p + "attention.dense.bias", l.attn_out_bias, TensorKind::Bias);
    f(p + "post_attention_layernorm.weight", l.ln2_scale, TensorKind::NormScale);
    f(p + "post_attention_layernorm.bias", l.ln2_bias, TensorKind::NormBias);
    f(p + "mlp.dense_h_to_4h.weight", l.ff_in_weight, TensorKind::Weight);
    f(p + "mlp.dense_h_to_4h.bias", l.ff_in_bias, TensorKind::Bias);
    f(p + "mlp.dense_4h_to_h.weight", l.ff_out_weight, TensorKind::Weight);
    f(p + "mlp.dense_4h_to_h.bias", l.ff_out_bias, TensorKind::Bias);
  }
  f(std::string("final_layer_norm.weight"), final_norm_scale, TensorKind::NormScale);
  f(std::string("final_layer_norm.bias"), final_norm_bias, TensorKind::NormBias);
  if (unembed.size() > 0) f(std::string("embed_out.weight"), unembed, TensorKind::Unembedding);
}

template <class T>
template <class U>
Parameters<U> Parameters<T>::cast() const {
  Parameters<U> out;
  out.embed = embed.template cast<U>();
  out.layers.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    auto& d = out.layers[i];
    d.ln1_scale = s.ln1_scale.template cast<U>();
    d.ln1_bias = s.ln1_bias.template cast<U>();
    d.qkv_weight = s.qkv_weight.template cast<U>();
    d.qkv_bias = s.qkv_bias.template cast<U>();
    d.attn_out_weight = s.attn_out_weight.template cast<U>();
    d.attn_out_bias = s.attn_out_bias.template cast<U>();
    d.ln2_scale = s.ln2_scale.template cast<U>();
    d.ln2_bias = s.ln2_bias.template cast<U>();
    d.ff_in_weight = s.ff_in_weight.template cast<U>();
    d.ff_in_bias = s.ff_in_bias.template cast<U>();
    d.ff_out_weight = s.ff_out_weight.template cast<U>();
    d.ff_out_bias = s.ff_out_bias.template cast<U>();
  }
  out.final_norm_scale = final_norm_scale.template cast<U>();
  out.final_norm_bias = final_norm_bias.template cast<U>();
  out.unembed = unembed.template cast<U>();
  return out;
}

}  // namespace mhgpt
