#pragma once

#include <Eigen/Core>
#include <string_view>

namespace mhgpt {

/// Dense row-major matrix; vectors are stored as 1 x n.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class TensorKind {
  Embedding,
  Unembedding,
  Weight,
  Bias,
  NormScale,
  NormBias,
  LoraA,
  LoraB,
  HeadWeight,
  HeadBias,
};

std::string_view tensor_kind_name(TensorKind kind);

/// Matrices take weight decay; biases and norm parameters do not.
constexpr bool takes_weight_decay(TensorKind kind) {
  switch (kind) {
    case TensorKind::Bias:
    case TensorKind::NormScale:
    case TensorKind::NormBias:
    case TensorKind::HeadBias:
      return false;
    default:
      return true;
  }
}

}  // namespace mhgpt
