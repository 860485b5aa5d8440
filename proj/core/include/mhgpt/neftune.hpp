#pragma once

#include "mhgpt/model.hpp"
#include "mhgpt/rng.hpp"

namespace mhgpt {

struct NeftuneConfig {
  /// 0 disables the noise.
  double noise_alpha = 10.0;
};

/// Adds Uniform(-1, 1) * alpha / sqrt(L * d) to every real-token embedding,
/// L being that sequence's non-pad length and d the embedding width. Pads are
/// untouched; outside training, or with alpha = 0, this is the identity and
/// draws nothing from `rng`. Embeddings are [batch*seq x d], rows in batch order.
template <class T>
void neftune_noise(Matrix<T>& embeddings, const TokenBatch& batch, double alpha, Rng& rng, bool training);

}  // namespace mhgpt
