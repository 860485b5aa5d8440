#include "mhgpt/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "json_util.hpp"
#include "mhgpt/io.hpp"

namespace mhgpt {

using detail::ojson;

namespace {

constexpr const char* kFormat = "mhgpt-tensors-v1";

std::string encode_le(const Matrix<float>& m) {
  std::string bytes(static_cast<std::size_t>(m.size()) * sizeof(float), '\0');
  std::memcpy(bytes.data(), m.data(), bytes.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) {
      std::swap(bytes[i], bytes[i + 3]);
      std::swap(bytes[i + 1], bytes[i + 2]);
    }
  }
  return bytes;
}

void decode_le(std::string bytes, Matrix<float>& m) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) {
      std::swap(bytes[i], bytes[i + 3]);
      std::swap(bytes[i + 1], bytes[i + 2]);
    }
  }
  std::memcpy(m.data(), bytes.data(), bytes.size());
}

}  // namespace

void write_tensor_directory(const std::filesystem::path& dir, const TensorDirectory& contents) {
  std::filesystem::create_directories(dir);
  ojson manifest;
  manifest["format"] = kFormat;
  manifest["kind"] = contents.kind;
  manifest["metadata"] = ojson::parse(contents.metadata_json);
  ojson list = ojson::array();
  for (const auto& name : contents.order) {
    const auto& m = contents.tensors.at(name);
    const bool vec = contents.vector_shaped.contains(name) && contents.vector_shaped.at(name);
    const std::string bytes = encode_le(m);
    const std::string file = name + ".bin";
    write_text(dir / file, bytes);
    ojson t;
    t["name"] = name;
    t["shape"] = vec ? ojson::array({m.cols()}) : ojson::array({m.rows(), m.cols()});
    t["dtype"] = "float32-le";
    t["file"] = file;
    t["sha256"] = sha256_hex(bytes);
    list.push_back(std::move(t));
  }
  manifest["tensors"] = std::move(list);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

TensorDirectory read_tensor_directory(const std::filesystem::path& dir) {
  const auto text = read_text(dir / "manifest.json");
  ojson manifest = ojson::parse(text, nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object()) {
    throw DataError("tensor manifest is not valid JSON: " + (dir / "manifest.json").string());
  }
  if (manifest.value("format", std::string()) != kFormat) {
    throw DataError("unsupported tensor directory format in " + dir.string());
  }
  TensorDirectory out;
  out.kind = manifest.value("kind", std::string());
  out.metadata_json = manifest.value("metadata", ojson::object()).dump();
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.empty() || shape.size() > 2) throw DataError("tensor " + name + " has unsupported rank");
    const Eigen::Index rows = shape.size() == 1 ? 1 : shape[0];
    const Eigen::Index cols = shape.back();
    std::string bytes = read_text(dir / t.at("file").get<std::string>());
    if (bytes.size() != static_cast<std::size_t>(rows * cols) * sizeof(float)) {
      throw DataError("tensor " + name + ": file size does not match its shape");
    }
    if (t.contains("sha256") && t["sha256"].get<std::string>() != sha256_hex(bytes)) {
      throw DataError("tensor " + name + ": checksum mismatch");
    }
    Matrix<float> m(rows, cols);
    decode_le(std::move(bytes), m);
    out.order.push_back(name);
    out.vector_shaped[name] = shape.size() == 1;
    out.tensors.emplace(name, std::move(m));
  }
  return out;
}

std::string model_config_to_json(const ModelConfig& cfg) {
  ojson j;
  j["n_layers"] = cfg.n_layers;
  j["d_model"] = cfg.d_model;
  j["d_ff"] = cfg.d_ff;
  j["n_heads"] = cfg.n_heads;
  j["vocab_size"] = cfg.vocab_size;
  j["max_seq_len"] = cfg.max_seq_len;
  j["rotary_pct"] = cfg.rotary_pct;
  j["rope_base"] = cfg.rope_base;
  j["tie_embeddings"] = cfg.tie_embeddings;
  j["parallel_residual"] = cfg.parallel_residual;
  j["layer_norm_eps"] = cfg.layer_norm_eps;
  j["init_std"] = cfg.init_std;
  return j.dump();
}

ModelConfig model_config_from_json(std::string_view json) {
  ojson j = ojson::parse(json, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig cfg;
  std::vector<std::string> problems;
  detail::collect_unknown_keys(j,
                               {"n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "max_seq_len", "rotary_pct",
                                "rope_base", "tie_embeddings", "parallel_residual", "layer_norm_eps", "init_std"},
                               "model", problems);
  for (auto& p : problems) p += ": unknown key";
  detail::read_field(j, "n_layers", cfg.n_layers, "model", problems);
  detail::read_field(j, "d_model", cfg.d_model, "model", problems);
  detail::read_field(j, "d_ff", cfg.d_ff, "model", problems);
  detail::read_field(j, "n_heads", cfg.n_heads, "model", problems);
  detail::read_field(j, "vocab_size", cfg.vocab_size, "model", problems);
  detail::read_field(j, "max_seq_len", cfg.max_seq_len, "model", problems);
  detail::read_field(j, "rotary_pct", cfg.rotary_pct, "model", problems);
  detail::read_field(j, "rope_base", cfg.rope_base, "model", problems);
  detail::read_field(j, "tie_embeddings", cfg.tie_embeddings, "model", problems);
  detail::read_field(j, "parallel_residual", cfg.parallel_residual, "model", problems);
  detail::read_field(j, "layer_norm_eps", cfg.layer_norm_eps, "model", problems);
  detail::read_field(j, "init_std", cfg.init_std, "model", problems);
  detail::throw_if_problems("invalid model config:", problems);
  return cfg;
}

void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, const Parameters<float>& params) {
  TensorDirectory td;
  td.kind = "model";
  ojson meta;
  meta["config"] = ojson::parse(model_config_to_json(cfg));
  td.metadata_json = meta.dump();
  const auto specs = parameter_specs(cfg);
  std::size_t i = 0;
  params.for_each([&](const std::string& name, const Matrix<float>& m, TensorKind) {
    if (i >= specs.size() || specs[i].name != name || specs[i].rows != m.rows() || specs[i].cols != m.cols()) {
      throw ConfigError("parameters do not match the model config at tensor " + name);
    }
    td.order.push_back(name);
    td.tensors.emplace(name, m);
    td.vector_shaped[name] = specs[i].vector;
    ++i;
  });
  write_tensor_directory(dir, td);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  auto td = read_tensor_directory(dir);
  if (td.kind != "model") throw DataError(dir.string() + " is not a model checkpoint");
  const ojson meta = ojson::parse(td.metadata_json);
  Checkpoint ck;
  ck.config = model_config_from_json(meta.at("config").dump());
  ck.config.validate();
  ck.params = Parameters<float>::zeros(ck.config);
  ck.params.for_each([&](const std::string& name, Matrix<float>& m, TensorKind) {
    const auto it = td.tensors.find(name);
    if (it == td.tensors.end()) throw DataError("checkpoint is missing tensor " + name);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols()) {
      throw DataError("checkpoint tensor " + name + " has the wrong shape");
    }
    m = std::move(it->second);
  });
  return ck;
}

}  // namespace mhgpt
