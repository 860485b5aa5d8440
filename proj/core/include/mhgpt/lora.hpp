#pragma once

#include <array>
#include <cstdint>

#include "mhgpt/adapter_set.hpp"
#include "mhgpt/model.hpp"

namespace mhgpt {

struct LoraConfig {
  int rank = 64;
  double alpha = 32.0;
  /// Only 0 is supported; kept so configs can state it explicitly.
  double dropout = 0.0;
  /// Indexed by LoraTarget; all linear layers by default.
  std::array<bool, 4> targets{true, true, true, true};

  double scaling() const { return alpha / rank; }
  void validate() const;
};

/// Rows/cols (out, in) of a target's base weight.
std::pair<Eigen::Index, Eigen::Index> lora_target_shape(const ModelConfig& cfg, LoraTarget t);

/// A ~ N(0, (1/r)^2) and B = 0 for every targeted weight, so the adapted
/// model starts out identical to the base. Throws ConfigError when the rank
/// exceeds min(out, in) of any target.
AdapterSet<float> attach_lora(const ModelConfig& cfg, const LoraConfig& lora, std::uint64_t seed);

/// Closed-form sum of r * (in + out) over the targeted weights.
std::int64_t lora_parameter_count(const ModelConfig& cfg, const LoraConfig& lora);

/// y = x W^T + scaling * (x A^T) B^T for a batch of row vectors x.
template <class T>
Matrix<T> lora_forward(const Matrix<T>& x, const Matrix<T>& weight, const LowRankFactors<T>& factors, T scaling);

/// W + scaling * B A.
template <class T>
Matrix<T> merge_lora(const Matrix<T>& weight, const LowRankFactors<T>& factors, T scaling);

/// Base parameters with every adapter folded into its weight.
Parameters<float> merge_adapters(const Parameters<float>& base, const AdapterSet<float>& adapters);

}  // namespace mhgpt
