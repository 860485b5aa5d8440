#include "mhgpt/lora.hpp"

#include "mhgpt/error.hpp"
#include "mhgpt/rng.hpp"

namespace mhgpt {

void LoraConfig::validate() const {
  if (rank < 1) throw ConfigError("lora.rank must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("lora.alpha must be > 0");
  if (dropout != 0.0) throw ConfigError("lora.dropout other than 0 is not supported");
}

std::pair<Eigen::Index, Eigen::Index> lora_target_shape(const ModelConfig& cfg, LoraTarget t) {
  const Eigen::Index d = cfg.d_model, f = cfg.d_ff;
  switch (t) {
    case LoraTarget::QueryKeyValue: return {3 * d, d};
    case LoraTarget::AttentionOutput: return {d, d};
    case LoraTarget::FeedForwardIn: return {f, d};
    case LoraTarget::FeedForwardOut: return {d, f};
  }
  return {0, 0};
}

AdapterSet<float> attach_lora(const ModelConfig& cfg, const LoraConfig& lora, std::uint64_t seed) {
  lora.validate();
  AdapterSet<float> set;
  set.rank = lora.rank;
  set.scaling = static_cast<float>(lora.scaling());
  set.enabled = lora.targets;
  set.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  Rng rng(seed);
  const double std = 1.0 / lora.rank;
  for (auto& layer : set.layers) {
    for (LoraTarget t : kAllLoraTargets) {
      if (!lora.targets[static_cast<std::size_t>(t)]) continue;
      const auto [out, in] = lora_target_shape(cfg, t);
      if (lora.rank > std::min(out, in)) {
        throw ConfigError("lora rank " + std::to_string(lora.rank) + " exceeds min(out, in) = " +
                          std::to_string(std::min(out, in)) + " of " + std::string(lora_target_name(t)));
      }
      auto& f = layer[static_cast<std::size_t>(t)];
      f.a.resize(lora.rank, in);
      for (Eigen::Index i = 0; i < f.a.size(); ++i) f.a.data()[i] = static_cast<float>(rng.normal(0.0, std));
      f.b = Matrix<float>::Zero(out, lora.rank);
    }
  }
  return set;
}

std::int64_t lora_parameter_count(const ModelConfig& cfg, const LoraConfig& lora) {
  std::int64_t per_layer = 0;
  for (LoraTarget t : kAllLoraTargets) {
    if (!lora.targets[static_cast<std::size_t>(t)]) continue;
    const auto [out, in] = lora_target_shape(cfg, t);
    per_layer += static_cast<std::int64_t>(lora.rank) * (in + out);
  }
  return per_layer * cfg.n_layers;
}

template <class T>
Matrix<T> lora_forward(const Matrix<T>& x, const Matrix<T>& weight, const LowRankFactors<T>& factors, T scaling) {
  Matrix<T> y = x * weight.transpose();
  y.noalias() += scaling * ((x * factors.a.transpose()) * factors.b.transpose());
  return y;
}

template <class T>
Matrix<T> merge_lora(const Matrix<T>& weight, const LowRankFactors<T>& factors, T scaling) {
  Matrix<T> merged = weight;
  merged.noalias() += scaling * (factors.b * factors.a);
  return merged;
}

template Matrix<float> lora_forward(const Matrix<float>&, const Matrix<float>&, const LowRankFactors<float>&, float);
template Matrix<double> lora_forward(const Matrix<double>&, const Matrix<double>&, const LowRankFactors<double>&, double);
template Matrix<float> merge_lora(const Matrix<float>&, const LowRankFactors<float>&, float);
template Matrix<double> merge_lora(const Matrix<double>&, const LowRankFactors<double>&, double);

Parameters<float> merge_adapters(const Parameters<float>& base, const AdapterSet<float>& adapters) {
  if (adapters.layers.size() != base.layers.size()) throw ConfigError("adapter set does not match the model depth");
  Parameters<float> out = base;
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    auto& w = out.layers[l];
    auto fold = [&](LoraTarget t, Matrix<float>& weight) {
      if (const auto* f = adapters.factors(l, t)) weight = merge_lora(weight, *f, adapters.scaling);
    };
    fold(LoraTarget::QueryKeyValue, w.qkv_weight);
    fold(LoraTarget::AttentionOutput, w.attn_out_weight);
    fold(LoraTarget::FeedForwardIn, w.ff_in_weight);
    fold(LoraTarget::FeedForwardOut, w.ff_out_weight);
  }
  return out;
}

}  // namespace mhgpt
