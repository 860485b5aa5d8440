#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mhgpt/corpus.hpp"
#include "mhgpt/finetune.hpp"
#include "mhgpt/model.hpp"
#include "mhgpt/tokenizer.hpp"
#include "mhgpt/trainer.hpp"

namespace mhgpt {

inline constexpr std::string_view kVersion = "0.1.0";

struct CorpusSection {
  CleanOptions clean;
};

struct ChunkerSection {
  /// Row length of the truncated dataset.
  int truncate_len = 512;
  int window = 512;
  int step = 512;
  double sample_fraction = 0.05;
  std::uint64_t seed = 0;
};

struct TokenizerSection {
  BpeTrainOptions bpe;
};

struct TrainSection {
  TrainConfig train;
  double val_fraction = 0.1;
};

struct AdaptSection {
  FinetuneConfig finetune;
  double val_fraction = 0.1;
};

struct EvalSection {
  int batch_size = 8;
  int grad_check_samples = 240;
  double grad_check_eps = 1e-5;
  double grad_check_tolerance = 1e-4;
};

/// Sections {corpus, chunker, tokenizer, model, train, adapt, eval}.
struct PipelineConfig {
  CorpusSection corpus;
  ChunkerSection chunker;
  TokenizerSection tokenizer;
  ModelConfig model;
  TrainSection train;
  AdaptSection adapt;
  EvalSection eval;

  /// Effective config as a JSON document (every key, defaults included).
  std::string to_json() const;
  /// Layers `json` and then `overrides` ("section.key=value"; value parsed as
  /// JSON, else taken as a string) over the defaults. Throws ConfigError
  /// listing every unknown key and type problem at once.
  static PipelineConfig parse(std::string_view json, const std::vector<std::string>& overrides = {});
  static PipelineConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
  void validate() const;
};

/// Every key with its default, one "section.key = value" per line.
std::string config_reference();

inline constexpr std::string_view kSubcommands[] = {"clean",    "chunk",  "train-tokenizer", "pretrain",  "finetune",
                                                    "evaluate", "report", "grad-check",      "synth-data"};

struct RunRequest {
  std::string command;
  /// Command arguments by long option name (paths, task kind, sizes, ...).
  std::map<std::string, std::string> args;
  PipelineConfig config;
  std::filesystem::path out_dir;
  int threads = 1;
};

struct RunResult {
  std::filesystem::path out_dir;
  /// Artifact name -> path.
  std::map<std::string, std::filesystem::path> artifacts;
  /// Nonzero when the command ran but its check failed (grad-check).
  int status = 0;

  std::string artifacts_json() const;
};

/// Runs one subcommand into out_dir and writes out_dir/manifest.json holding
/// the command, arguments, effective config, input and output digests and
/// the tool version. Wall-clock figures go to timing.json, which is not
/// hashed.
RunResult run_command(const RunRequest& request);

struct ReplayResult {
  bool identical = true;
  std::vector<std::string> mismatches;
  std::filesystem::path replay_dir;
};

/// Gradient check of a 2-layer, d_model 32 model in 64-bit mode: the causal
/// LM loss over every model tensor, then each of the four task heads with
/// LoRA on every target. Samples are split evenly across the five checks.
GradCheckReport grad_check_suite(int samples, double eps, std::uint64_t seed);

/// Re-executes a run from its manifest into `scratch_dir` and compares
/// every recorded output digest. Throws DataError when an input changed.
ReplayResult replay_run(const std::filesystem::path& run_dir, const std::filesystem::path& scratch_dir);

}  // namespace mhgpt
