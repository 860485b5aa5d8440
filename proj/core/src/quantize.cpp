#include "mhgpt/quantize.hpp"

#include <cmath>

#include "mhgpt/error.hpp"

namespace mhgpt {

int QuantizedWeight::code(std::size_t i) const {
  const std::uint8_t byte = packed[i / 2];
  const int nibble = (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
  return nibble - 8;
}

float QuantizedWeight::value(std::size_t i) const {
  return scales[i / static_cast<std::size_t>(block_size)] * (static_cast<float>(code(i)) / 7.0f);
}

Matrix<float> QuantizedWeight::dequantize() const {
  Matrix<float> out(rows, cols);
  for (std::size_t i = 0; i < size(); ++i) out.data()[i] = value(i);
  return out;
}

QuantizedWeight quantize_blockwise(const Matrix<float>& w, int block_size) {
  if (block_size < 1) throw ConfigError("quantization block size must be >= 1");
  QuantizedWeight q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.block_size = block_size;
  const std::size_t n = q.size();
  q.packed.assign((n + 1) / 2, 0);
  const std::size_t bs = static_cast<std::size_t>(block_size);
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t end = std::min(n, start + bs);
    float absmax = 0.0f;
    for (std::size_t i = start; i < end; ++i) {
      const float v = w.data()[i];
      if (!std::isfinite(v)) throw DataError("cannot quantize non-finite weight");
      absmax = std::max(absmax, std::abs(v));
    }
    q.scales.push_back(absmax);
    for (std::size_t i = start; i < end; ++i) {
      int code = 0;
      if (absmax > 0.0f) {
        code = static_cast<int>(std::lround(w.data()[i] / absmax * 7.0f));
        code = std::clamp(code, -7, 7);
      }
      const auto nibble = static_cast<std::uint8_t>(code + 8);
      q.packed[i / 2] |= (i % 2 == 0) ? nibble : static_cast<std::uint8_t>(nibble << 4);
    }
  }
  return q;
}

QuantizedBase quantize_base(const Parameters<float>& params, int block_size) {
  QuantizedBase out;
  out.block_size = block_size;
  params.for_each([&](const std::string& name, const Matrix<float>& m, TensorKind kind) {
    if (kind == TensorKind::Weight) out.weights.emplace(name, quantize_blockwise(m, block_size));
  });
  return out;
}

Parameters<float> dequantized_parameters(const Parameters<float>& base, const QuantizedBase& quantized) {
  Parameters<float> out = base;
  out.for_each([&](const std::string& name, Matrix<float>& m, TensorKind) {
    if (const auto it = quantized.weights.find(name); it != quantized.weights.end()) m = it->second.dequantize();
  });
  return out;
}

}  // namespace mhgpt
