#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mhgpt/model.hpp"

namespace mhgpt {

/// A directory holding manifest.json plus one raw little-endian float32 file
/// per tensor, named after the tensor path. Round trips are bit-exact.
///
/// manifest.json:
///   {"format": "mhgpt-tensors-v1", "kind": ..., "metadata": {...},
///    "tensors": [{"name", "shape", "dtype": "float32-le", "file", "sha256"}]}
struct TensorDirectory {
  std::string kind;
  std::string metadata_json = "{}";
  std::vector<std::string> order;
  std::map<std::string, Matrix<float>> tensors;
  std::map<std::string, bool> vector_shaped;
};

void write_tensor_directory(const std::filesystem::path& dir, const TensorDirectory& contents);
/// Verifies every tensor file against its recorded size and digest.
TensorDirectory read_tensor_directory(const std::filesystem::path& dir);

std::string model_config_to_json(const ModelConfig& cfg);
/// Rejects unknown keys; missing keys keep their defaults.
ModelConfig model_config_from_json(std::string_view json);

struct Checkpoint {
  ModelConfig config;
  Parameters<float> params;
};

void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, const Parameters<float>& params);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace mhgpt
