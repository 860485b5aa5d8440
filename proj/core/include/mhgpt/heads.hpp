#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mhgpt/model.hpp"

namespace mhgpt {

enum class TaskKind { Binary, Multiclass, Multilabel, Ner };

/// "binary", "multiclass", "multilabel", "ner".
std::string_view task_kind_name(TaskKind kind);
/// Throws ConfigError on an unknown name.
TaskKind parse_task_kind(std::string_view name);

struct TaskSpec {
  TaskKind kind = TaskKind::Binary;
  /// Class or label names. Binary: {"0", "1"}; NER: BIO tags with "O" first.
  std::vector<std::string> labels;
  /// Multilabel decision threshold.
  double threshold = 0.5;

  static TaskSpec binary();
  static TaskSpec multiclass(int k);
  static TaskSpec multilabel(int k);
  /// Builds "O", then B-x / I-x for each entity type in the given order.
  static TaskSpec ner(std::span<const std::string> entity_types);

  int num_labels() const { return static_cast<int>(labels.size()); }
  /// Width of the head's output layer (1 for binary).
  int outputs() const;
  void validate() const;

  std::string to_json() const;
  static TaskSpec from_json(std::string_view json);

  bool operator==(const TaskSpec&) const = default;
};

template <class T>
struct TaskHead {
  Matrix<T> weight;  // [outputs x d]
  Matrix<T> bias;    // [1 x outputs]

  template <class F>
  void for_each(F&& f) {
    f(std::string("head.weight"), weight, TensorKind::HeadWeight);
    f(std::string("head.bias"), bias, TensorKind::HeadBias);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<TaskHead*>(this)->for_each(
        [&](const std::string& name, Matrix<T>& m, TensorKind kind) { f(name, static_cast<const Matrix<T>&>(m), kind); });
  }
  TaskHead zeros_like() const { return {Matrix<T>::Zero(weight.rows(), weight.cols()), Matrix<T>::Zero(1, bias.cols())}; }
  template <class U>
  TaskHead<U> cast() const { return {weight.template cast<U>(), bias.template cast<U>()}; }
  std::int64_t parameter_count() const { return weight.size() + bias.size(); }
};

/// Normal(0, std) weights, zero bias.
TaskHead<float> init_head(const TaskSpec& spec, int d_model, std::uint64_t seed, double std = 0.02);

/// Gold labels for one batch; only the field matching the task kind is used.
struct TaskLabels {
  std::vector<int> classes;                // binary / multiclass: one per row
  std::vector<std::uint8_t> multilabel;    // rows x k, row-major
  std::vector<int> tokens;                 // ner: batch*seq, -1 = ignored
};

/// Position of the last real token in each row. Throws DataError on an
/// all-pad row.
std::vector<int> pooled_positions(const TokenBatch& batch);

template <class T>
struct HeadOutput {
  /// Sequence tasks: [batch x outputs]. NER: [batch*seq x labels].
  Matrix<T> logits;
  T loss = T(0);
  /// dL/dhidden, [batch*seq x d]; filled when gradients are requested.
  Matrix<T> d_hidden;
};

/// Binary: sigmoid + BCE, mean over rows. Multiclass: softmax cross-entropy,
/// mean over rows. Multilabel: per-row sum of k BCE terms, mean over rows.
/// NER: per-token cross-entropy, mean over real tokens with a label >= 0.
/// With `labels` null only logits are produced. When `grads` is given the
/// head gradient accumulates into it and d_hidden is filled. Throws
/// DataError when a label is out of range.
template <class T>
HeadOutput<T> head_forward(const Matrix<T>& hidden, const TokenBatch& batch, const TaskSpec& spec,
                           const TaskHead<T>& head, const TaskLabels* labels = nullptr, TaskHead<T>* grads = nullptr);

struct Predictions {
  std::vector<int> classes;
  std::vector<std::uint8_t> multilabel;
  /// NER: one vector of label ids per row, real tokens only.
  std::vector<std::vector<int>> tokens;
};

template <class T>
Predictions head_predict(const Matrix<T>& logits, const TokenBatch& batch, const TaskSpec& spec);

}  // namespace mhgpt
