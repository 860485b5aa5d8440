#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mhgpt/corpus.hpp"
#include "mhgpt/heads.hpp"
#include "mhgpt/task_data.hpp"

namespace mhgpt {

struct SynthCorpusOptions {
  /// Documents per stratum, in Stratum order.
  std::array<std::size_t, 3> documents{200, 200, 200};
  std::uint64_t seed = 0;
  /// Fraction of records carrying URLs, character references or non-ASCII
  /// text for the cleaner to remove.
  double noise_rate = 0.3;
  /// Fraction of records too short to survive the word filter.
  double short_rate = 0.05;
  /// Fraction of lines written as broken JSON.
  double malformed_rate = 0.01;
};

/// Raw documents in Stratum order; ids are "<stratum>-<n>".
std::vector<RawDocument> synth_corpus(const SynthCorpusOptions& options);

/// Writes one JSONL file per stratum plus manifest.json; returns the manifest path.
std::filesystem::path write_synth_corpus(const std::filesystem::path& dir, const SynthCorpusOptions& options);

struct SynthTaskOptions {
  TaskKind kind = TaskKind::Binary;
  std::size_t size = 500;
  /// Binary: positive-class fraction. Multilabel: rate of labels 1..k-1
  /// (label 0 stays at 0.5).
  double imbalance = 0.5;
  /// Multiclass: share of class 0, the rest split evenly; <= 0 is uniform.
  double first_class_share = 0.0;
  int classes = 0;  // 0 = kind default: 2, 9, 6, or the NER dictionary
  std::uint64_t seed = 0;
};

/// Label-faithful synthetic task records: classification labels follow from
/// the keywords placed in the text; NER spans cover dictionary terms.
/// Throws ConfigError when size < 10.
std::vector<TaskRecord> synth_task(const SynthTaskOptions& options);

struct DictionaryTerm {
  std::string text;
  std::string type;
};

/// Terms the NER generator tags.
const std::vector<DictionaryTerm>& ner_dictionary();

/// Keyword lists per class used by the classification generators.
const std::vector<std::vector<std::string>>& class_keywords(TaskKind kind);

}  // namespace mhgpt
