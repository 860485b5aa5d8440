#pragma once

#include <array>
#include <string>
#include <vector>

#include "mhgpt/tensor.hpp"

namespace mhgpt {

/// Linear layers a LoRA adapter may wrap, in per-layer storage order.
enum class LoraTarget : int {
  QueryKeyValue = 0,
  AttentionOutput = 1,
  FeedForwardIn = 2,
  FeedForwardOut = 3,
};

inline constexpr std::array<LoraTarget, 4> kAllLoraTargets = {
    LoraTarget::QueryKeyValue, LoraTarget::AttentionOutput, LoraTarget::FeedForwardIn,
    LoraTarget::FeedForwardOut};

std::string_view lora_target_name(LoraTarget t);

/// W [out x in] is adapted as W + scaling * B A with A [r x in], B [out x r].
template <class T>
struct LowRankFactors {
  Matrix<T> a;
  Matrix<T> b;
};

template <class T>
struct AdapterSet {
  int rank = 0;
  T scaling = T(0);
  std::array<bool, 4> enabled{};
  std::vector<std::array<LowRankFactors<T>, 4>> layers;

  const LowRankFactors<T>* factors(std::size_t layer, LoraTarget t) const {
    const auto k = static_cast<std::size_t>(t);
    return enabled[k] ? &layers[layer][k] : nullptr;
  }
  LowRankFactors<T>* factors(std::size_t layer, LoraTarget t) {
    const auto k = static_cast<std::size_t>(t);
    return enabled[k] ? &layers[layer][k] : nullptr;
  }

  template <class F>
  void for_each(F&& f) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (LoraTarget t : kAllLoraTargets) {
        if (!enabled[static_cast<std::size_t>(t)]) continue;
        auto& fac = layers[l][static_cast<std::size_t>(t)];
        const std::string prefix = "layers." + std::to_string(l) + "." + std::string(lora_target_name(t));
        f(prefix + ".lora_A", fac.a, TensorKind::LoraA);
        f(prefix + ".lora_B", fac.b, TensorKind::LoraB);
      }
    }
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<AdapterSet*>(this)->for_each(
        [&](const std::string& name, Matrix<T>& m, TensorKind kind) { f(name, static_cast<const Matrix<T>&>(m), kind); });
  }

  AdapterSet zeros_like() const {
    AdapterSet out = *this;
    out.for_each([](const std::string&, Matrix<T>& m, TensorKind) { m.setZero(); });
    return out;
  }

  template <class U>
  AdapterSet<U> cast() const {
    AdapterSet<U> out;
    out.rank = rank;
    out.scaling = static_cast<U>(scaling);
    out.enabled = enabled;
    out.layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (std::size_t k = 0; k < 4; ++k) {
        out.layers[l][k].a = layers[l][k].a.template cast<U>();
        out.layers[l][k].b = layers[l][k].b.template cast<U>();
      }
    }
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for_each([&](const std::string&, const Matrix<T>& m, TensorKind) { n += m.size(); });
    return n;
  }
};

}  // namespace mhgpt
