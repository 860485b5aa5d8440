#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mhgpt/model.hpp"

namespace mhgpt {

enum class LrDecay { Constant, Cosine };

struct TrainConfig {
  int warmup_steps = 100;
  double max_lr = 0.97e-5;
  double weight_decay = 0.01;
  int epochs = 5;
  int batch_size = 8;
  std::uint64_t seed = 0;
  LrDecay decay = LrDecay::Constant;
  /// Cosine decay floor as a fraction of max_lr.
  double min_lr_ratio = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 1.0;
  /// Stop after validation loss rises this many epochs in a row; 0 disables.
  int early_stop_patience = 2;
  /// Optional hard cap on optimizer steps (0 = epochs decide).
  std::int64_t max_steps = 0;

  void validate() const;
};

/// Linear warmup lr = max_lr * (step + 1) / warmup_steps, then constant or a
/// cosine from max_lr (at step warmup-1) down to min_lr_ratio * max_lr (at
/// step total_steps-1).
double lr_schedule(std::int64_t step, const TrainConfig& cfg, std::int64_t total_steps);

template <class T>
struct ParamSlot {
  std::string name;
  Matrix<T>* value = nullptr;
  Matrix<T>* grad = nullptr;
  TensorKind kind = TensorKind::Weight;
};

/// Pairs every tensor of `params` with the same-named tensor of `grads`.
template <class T>
std::vector<ParamSlot<T>> param_slots(Parameters<T>& params, Parameters<T>& grads);
template <class T>
std::vector<ParamSlot<T>> param_slots(AdapterSet<T>& params, AdapterSet<T>& grads);

/// Adam with decoupled weight decay (decay skips biases and norm parameters).
class AdamW {
 public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  explicit AdamW(Hyper hyper) : hyper_(hyper) {}

  void step(std::span<const ParamSlot<float>> slots, double lr);
  std::int64_t steps() const { return t_; }

 private:
  Hyper hyper_;
  std::int64_t t_ = 0;
  std::vector<Matrix<float>> m_, v_;
};

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// norm before clipping.
double clip_global_norm(std::span<const ParamSlot<float>> slots, double max_norm);

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool early_stopped = false;
  double wall_seconds = 0.0;

  /// "step,lr,train_loss" rows.
  std::string steps_csv() const;
  std::string epochs_json() const;
};

/// One optimizer step on a causal-LM batch at learning rate `lr`. Returns the
/// batch loss before the update; throws NumericalError if it is not finite.
double train_step(Parameters<float>& params, const ModelConfig& cfg, const TokenBatch& batch, AdamW& optimizer,
                  const TrainConfig& train, double lr);

/// Mean per-token next-token loss over the sequences. Batches may be spread
/// across threads; per-batch sums are reduced in batch order.
double evaluate(const Parameters<float>& params, const ModelConfig& cfg, std::span<const TokenSequence> sequences,
                int batch_size, TokenId pad_id, int threads = 1);

struct PretrainHooks {
  std::function<void(const StepRecord&)> on_step;
  /// Called after each epoch's validation pass with the current weights.
  std::function<void(const EpochRecord&, const Parameters<float>&)> on_epoch;
};

TrainLog pretrain(Parameters<float>& params, const ModelConfig& cfg, std::span<const TokenSequence> train,
                  std::span<const TokenSequence> validation, const TrainConfig& train_cfg, TokenId pad_id,
                  const PretrainHooks& hooks = {}, int threads = 1);

// --- gradient checking ------------------------------------------------------

struct GradCheckTensor {
  std::string name;
  TensorKind kind = TensorKind::Weight;
  Matrix<double>* value = nullptr;
  const Matrix<double>* grad = nullptr;
};

struct GradCheckSample {
  std::string tensor;
  TensorKind kind = TensorKind::Weight;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckSample> samples;

  std::set<TensorKind> kinds() const;
  const GradCheckSample* worst() const;
  std::string to_json() const;
};

/// |a - n| / max(|a|, |n|, 1e-5). The floor keeps coordinates whose true
/// gradient is ~0 from reporting finite-difference noise as relative error.
double relative_error(double analytic, double numeric);

/// Central differences (f(x+eps) - f(x-eps)) / 2eps on `samples` coordinates,
/// drawn round-robin over the tensors so every tensor is visited.
GradCheckReport grad_check(std::span<const GradCheckTensor> tensors, const std::function<double()>& loss, double eps,
                           int samples, std::uint64_t seed);

/// Causal-LM loss gradient check over every model tensor (64-bit).
GradCheckReport grad_check_lm(Parameters<double>& params, const ModelConfig& cfg, const TokenBatch& batch, double eps,
                              int samples, std::uint64_t seed);

}  // namespace mhgpt
