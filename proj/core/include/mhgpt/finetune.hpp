#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mhgpt/heads.hpp"
#include "mhgpt/lora.hpp"
#include "mhgpt/metrics.hpp"
#include "mhgpt/neftune.hpp"
#include "mhgpt/quantize.hpp"
#include "mhgpt/task_data.hpp"
#include "mhgpt/trainer.hpp"

namespace mhgpt {

struct FinetuneConfig {
  LoraConfig lora;
  NeftuneConfig neftune;
  /// Run the frozen base through 4-bit block quantization first.
  bool quantize = false;
  int quant_block = 64;
  double lr = 0.9e-5;
  int warmup_steps = 10;
  int epochs = 3;
  int batch_size = 8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  /// Stop after validation F1 falls this many epochs in a row; 0 disables.
  int early_stop_patience = 2;
  std::uint64_t seed = 0;
  int max_len = 512;

  void validate() const;
};

struct FinetuneEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_f1 = 0.0;
};

struct FinetuneResult {
  /// Adapters and head from the best validation epoch.
  AdapterSet<float> adapters;
  TaskHead<float> head;
  std::vector<FinetuneEpoch> epochs;
  int best_epoch = 0;
  EvalReport best_report;
  bool early_stopped = false;
  std::int64_t trainable_parameters = 0;
  double wall_seconds = 0.0;

  std::string log_json() const;
};

/// The weights the adapters were trained against: `base` itself, or its
/// quantize-dequantize image when cfg.quantize is set.
Parameters<float> effective_base(const Parameters<float>& base, const FinetuneConfig& cfg);

/// Trains LoRA factors and the task head; `base` is never modified. NEFTune
/// noise is added to the embedding output on every training step. After each
/// epoch the validation split is scored by weighted F1 and the best epoch is
/// kept. Throws DataError on empty splits.
FinetuneResult finetune(const Parameters<float>& base, const ModelConfig& model_cfg, const TaskSpec& spec,
                        std::span<const TaskExample> train, std::span<const TaskExample> validation,
                        const FinetuneConfig& cfg, TokenId pad_id,
                        const std::function<void(const FinetuneEpoch&)>& on_epoch = {});

/// Inference with adapters applied (no noise).
Predictions predict(const Parameters<float>& base, const ModelConfig& model_cfg, const AdapterSet<float>& adapters,
                    const TaskHead<float>& head, const TaskSpec& spec, std::span<const TaskExample> examples,
                    int batch_size, TokenId pad_id);

EvalReport score_predictions(const TaskSpec& spec, std::span<const TaskExample> examples, const Predictions& pred);

EvalReport evaluate_task(const Parameters<float>& base, const ModelConfig& model_cfg, const AdapterSet<float>& adapters,
                         const TaskHead<float>& head, const TaskSpec& spec, std::span<const TaskExample> examples,
                         int batch_size, TokenId pad_id);

/// Adapter checkpoint: LoRA factors and head in the model tensor format,
/// with the configs needed to rebuild the adapted model from its base.
struct AdapterCheckpoint {
  ModelConfig model;
  LoraConfig lora;
  TaskSpec spec;
  bool quantized = false;
  int quant_block = 64;
  AdapterSet<float> adapters;
  TaskHead<float> head;
};

void save_adapter_checkpoint(const std::filesystem::path& dir, const AdapterCheckpoint& ck);
AdapterCheckpoint load_adapter_checkpoint(const std::filesystem::path& dir);

/// Batch and labels for examples [rows]; NER labels follow the padding.
TokenBatch make_task_batch(std::span<const TaskExample> rows, TokenId pad_id);
TaskLabels make_task_labels(std::span<const TaskExample> rows, const TaskSpec& spec, const TokenBatch& batch);

/// 64-bit gradient check of a task loss over base tensors, LoRA factors and
/// head (NEFTune off: it is a translation of the input, not a parameter).
GradCheckReport grad_check_task(Parameters<double>& base, const ModelConfig& model_cfg, AdapterSet<double>& adapters,
                                TaskHead<double>& head, const TaskSpec& spec, const TokenBatch& batch,
                                const TaskLabels& labels, double eps, int samples, std::uint64_t seed);

}  // namespace mhgpt
