#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mhgpt/heads.hpp"
#include "mhgpt/metrics.hpp"
#include "mhgpt/tokenizer.hpp"

namespace mhgpt {

/// One line of a task file. Classification: {"id", "text", "label"} with
/// label 0/1, a class index, or a k-length 0/1 array. NER: {"id", "text",
/// "spans": [{"start", "end", "label"}]} with code-point offsets.
struct TaskRecord {
  std::string id;
  std::string text;
  int label = 0;
  std::vector<std::uint8_t> labels;
  std::vector<LabeledSpan> spans;

  bool operator==(const TaskRecord&) const = default;
};

std::string task_record_to_json(const TaskRecord& r, TaskKind kind);
/// Throws DataError describing the problem.
TaskRecord task_record_from_json(std::string_view line, TaskKind kind);

std::vector<TaskRecord> load_task_records(const std::filesystem::path& path, TaskKind kind);
void save_task_records(const std::filesystem::path& path, std::span<const TaskRecord> records, TaskKind kind);

/// Label set implied by the records: binary {0,1}; multiclass max label + 1
/// (at least `min_classes`); multilabel the vector width; NER the entity
/// types sorted by name.
TaskSpec infer_task_spec(TaskKind kind, std::span<const TaskRecord> records, int min_classes = 2);

/// Model-ready example.
struct TaskExample {
  std::string id;
  TokenSequence tokens;
  int label = 0;
  std::vector<std::uint8_t> labels;
  /// NER: label id per token.
  std::vector<int> token_labels;
};

/// Tokenizes and truncates to `max_len`; NER spans are aligned to tokens.
/// Throws DataError on empty texts, out-of-range labels, or span labels
/// absent from the spec (label-set mismatch).
std::vector<TaskExample> encode_task(std::span<const TaskRecord> records, const TaskSpec& spec,
                                     const BpeVocabulary& vocab, int max_len);

/// Seeded shuffle of [0, n) split into (train, validation) index lists; the
/// validation part holds round(fraction * n) items, at least one when
/// fraction > 0 and n >= 2. Both lists are returned in ascending order.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                            std::uint64_t seed);

}  // namespace mhgpt
