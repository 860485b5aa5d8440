#include "mhgpt/neftune.hpp"

#include <cmath>

#include "mhgpt/error.hpp"

namespace mhgpt {

template <class T>
void neftune_noise(Matrix<T>& embeddings, const TokenBatch& batch, double alpha, Rng& rng, bool training) {
  if (alpha < 0.0) throw ConfigError("NEFTune noise alpha must be >= 0");
  if (!training || alpha == 0.0) return;
  if (embeddings.rows() != batch.rows()) throw ConfigError("neftune_noise: embeddings do not match the batch");
  const auto d = static_cast<double>(embeddings.cols());
  for (int b = 0; b < batch.batch; ++b) {
    int length = 0;
    for (int t = 0; t < batch.seq; ++t) length += batch.valid(b, t) ? 1 : 0;
    if (length == 0) continue;
    const double scale = alpha / std::sqrt(length * d);
    for (int t = 0; t < batch.seq; ++t) {
      if (!batch.valid(b, t)) continue;
      auto row = embeddings.row(static_cast<Eigen::Index>(b) * batch.seq + t);
      for (Eigen::Index c = 0; c < row.size(); ++c) row(c) += static_cast<T>(rng.uniform(-1.0, 1.0) * scale);
    }
  }
}

template void neftune_noise<float>(Matrix<float>&, const TokenBatch&, double, Rng&, bool);
template void neftune_noise<double>(Matrix<double>&, const TokenBatch&, double, Rng&, bool);

}  // namespace mhgpt
