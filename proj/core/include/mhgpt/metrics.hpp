#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mhgpt/tokenizer.hpp"

namespace mhgpt {

struct ClassCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t support = 0;

  ClassCounts& operator+=(const ClassCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    support += o.support;
    return *this;
  }
  bool operator==(const ClassCounts&) const = default;
};

struct ConfusionCounts {
  std::vector<std::string> labels;
  std::vector<ClassCounts> counts;

  /// Element-wise sum; label lists must match.
  ConfusionCounts& operator+=(const ConfusionCounts& other);
};

struct PrF1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Zero denominators give 0.
PrF1 prf1(const ClassCounts& c);
/// 2PR / (P + R), 0 when P + R = 0.
double harmonic_f1(double precision, double recall);
/// Support-weighted mean; 0 when every support is 0.
double weighted_f1(std::span<const double> f1, std::span<const std::int64_t> support);

struct ClassScore {
  std::string label;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;
};

struct EvalReport {
  std::string task;
  std::vector<ClassScore> classes;
  double weighted_f1 = 0.0;
  double macro_f1 = 0.0;
  /// Rows (or tokens, for NER) evaluated.
  std::int64_t instances = 0;
  /// Binary tasks: F1 of the positive class.
  std::optional<double> positive_f1;
  /// NER: entity-level exact-match scores.
  std::optional<PrF1> span_scores;

  /// Scores in [0, 1].
  std::string to_json() const;
  /// Aligned table with scores x100, two decimals.
  std::string to_table() const;
  static EvalReport from_json(std::string_view json);
};

EvalReport report_from_counts(std::string task, const ConfusionCounts& counts, std::int64_t instances);

/// Single-label classification over classes [0, labels.size()). Throws
/// DataError on length mismatch or out-of-range ids. With two labels the
/// positive-class F1 (label 1) is also filled in.
EvalReport classification_report(std::span<const int> gold, std::span<const int> pred,
                                  const std::vector<std::string>& labels);

/// gold/pred are n x k row-major 0/1 matrices; each label is scored as its
/// own binary problem (tp/fp/fn on the positive side, support = gold ones).
EvalReport multilabel_f1(std::span<const std::uint8_t> gold, std::span<const std::uint8_t> pred, std::size_t n,
                         const std::vector<std::string>& labels);

/// Half-open [begin, end) span in the offset units of the text it annotates.
struct LabeledSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::string label;

  bool operator==(const LabeledSpan&) const = default;
};

/// Drops spans overlapping a kept one; longer spans win, ties go to the
/// earlier start. Output sorted by begin.
std::vector<LabeledSpan> resolve_overlaps(std::vector<LabeledSpan> spans);

/// Tokens whose range intersects a span get B-label (first such token) or
/// I-label; all others O. Overlaps are resolved first. Spans and offsets use
/// the same units (bytes for tokenizer offsets); `text_length` bounds them.
/// Throws DataError naming a span that is empty-ordered or past the text.
std::vector<std::string> align_spans(std::size_t text_length, std::span<const LabeledSpan> spans,
                                     std::span<const TokenOffsets> token_offsets);

/// Maximal B/I runs as token-index spans. An I- tag that does not continue
/// a run of the same type starts a new one.
std::vector<LabeledSpan> extract_spans(std::span<const std::string> tags);

/// Token-level per-type scores (type = tag without its B-/I- prefix, O
/// excluded) weighted by support, plus entity exact-match P/R/F1.
EvalReport ner_f1(const std::vector<std::vector<std::string>>& gold, const std::vector<std::vector<std::string>>& pred);

/// Code-point offsets to byte offsets for UTF-8 `text`; an offset equal to
/// the code-point length maps to text.size(). Throws DataError when beyond.
std::size_t char_to_byte_offset(std::string_view text, std::size_t char_offset);
std::size_t utf8_length(std::string_view text);

}  // namespace mhgpt
