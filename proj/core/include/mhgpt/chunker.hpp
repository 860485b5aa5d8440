#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mhgpt/corpus.hpp"

namespace mhgpt {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

struct TokenChunk {
  TokenSequence tokens;
  Stratum source = Stratum::PubMedParagraph;
  std::string doc_id;
  std::int64_t chunk_index = 0;

  bool operator==(const TokenChunk&) const = default;
};

/// First min(len, max_len) tokens; the overflow is discarded.
TokenSequence truncate_row(std::span<const TokenId> tokens, std::size_t max_len);
std::vector<TokenSequence> truncate_rows(std::span<const TokenSequence> rows, std::size_t max_len);

/// Full windows [i*step, i*step + window) of one document. A trailing
/// partial window is dropped, so every chunk is exactly `window` long.
std::vector<TokenChunk> sliding_chunks(std::span<const TokenId> tokens, std::size_t window,
                                       std::size_t step, Stratum source,
                                       const std::string& doc_id);

struct SamplePlan {
  double fraction = 0.05;
  std::array<std::int64_t, 3> strata_targets{};
  std::uint64_t seed = 0;

  std::int64_t target(Stratum s) const { return strata_targets[static_cast<std::size_t>(s)]; }
};

/// Per-stratum counts of a chunk stream.
std::array<std::int64_t, 3> count_strata(std::span<const TokenChunk> chunks);

/// target[s] = floor(fraction * available[s] + 0.5) (round half up, no
/// redistribution of the residual).
SamplePlan make_sample_plan(const std::array<std::int64_t, 3>& available, double fraction,
                            std::uint64_t seed);

/// Draws exactly plan.target(s) chunks per stratum, uniformly without
/// replacement, then shuffles the union. Both steps consume one Rng seeded
/// with plan.seed: strata in enum order (partial Fisher-Yates over the
/// stratum's input-order index list), then a full Fisher-Yates of the result.
std::vector<TokenChunk> stratified_sample(std::span<const TokenChunk> chunks, const SamplePlan& plan);

std::string to_jsonl(const TokenChunk& chunk);
TokenChunk chunk_from_jsonl(std::string_view line);
std::vector<TokenChunk> load_chunks(const std::filesystem::path& path);
void save_chunks(const std::filesystem::path& path, std::span<const TokenChunk> chunks);

}  // namespace mhgpt
