#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mhgpt/model.hpp"

namespace mhgpt {

/// Symmetric absmax 4-bit codes: each block of `block_size` consecutive
/// (row-major) elements stores scale = max|w| and codes q in [-7, 7] with
/// w ~ scale * q / 7. Codes are packed two per byte as q + 8.
struct QuantizedWeight {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  int block_size = 64;
  std::vector<std::uint8_t> packed;
  std::vector<float> scales;

  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
  std::size_t blocks() const { return scales.size(); }
  int code(std::size_t i) const;
  float value(std::size_t i) const;
  Matrix<float> dequantize() const;
};

/// Throws DataError on non-finite input.
QuantizedWeight quantize_blockwise(const Matrix<float>& w, int block_size = 64);

/// 4-bit copies of every linear-layer weight (the LoRA-targetable matrices).
struct QuantizedBase {
  int block_size = 64;
  std::map<std::string, QuantizedWeight> weights;
};

QuantizedBase quantize_base(const Parameters<float>& params, int block_size = 64);

/// `base` with each quantized tensor replaced by its dequantized values.
Parameters<float> dequantized_parameters(const Parameters<float>& base, const QuantizedBase& quantized);

}  // namespace mhgpt
