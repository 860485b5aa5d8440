#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace mhgpt {

/// Seedable generator with a portable output sequence.
///
/// The raw stream is std::mt19937_64, whose output is fixed by the C++
/// standard. The standard distributions are implementation-defined, so every
/// derived draw is computed here:
///   - below(n): rejection sampling on the raw 64-bit word (no modulo bias);
///   - uniform01(): top 53 bits scaled by 2^-53, in [0, 1);
///   - normal(): Box-Muller on two uniform01() draws, cosine branch only.
/// Two implementations that follow these rules select identical samples.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  double uniform01();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
  double normal(double mean = 0.0, double stddev = 1.0);

  /// Fisher-Yates shuffle, walking from the back.
  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// Derive an independent child seed (for per-component streams).
  std::uint64_t fork_seed() { return next_u64() ^ 0x9E3779B97F4A7C15ULL; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mhgpt
