#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mhgpt/chunker.hpp"

namespace mhgpt {

inline constexpr std::string_view kPadToken = "<|padding|>";
inline constexpr std::string_view kEosToken = "<|endoftext|>";
inline constexpr std::string_view kUnkToken = "<|unk|>";

/// Reserved low IDs; these three come first in a freshly trained vocabulary.
struct SpecialTokens {
  TokenId pad = 0;
  TokenId eos = 1;
  TokenId unk = 2;
};

/// Number of IDs before the first learned merge: the three specials and the
/// 256 byte symbols.
inline constexpr std::size_t kBaseVocabularySize = 3 + 256;

/// Printable remapping of raw bytes used in vocab.json / merges.txt (the
/// GPT-2 byte-level convention: space is rendered as U+0120 'Ġ', etc).
std::string bytes_to_symbols(std::string_view bytes);
std::string symbols_to_bytes(std::string_view symbols);

/// Splits text into pre-tokens whose concatenation is the input. Mirrors
///   's|'t|'re|'ve|'m|'ll|'d| ?L+| ?N+| ?[^\sLN]+|\s+(?!\S)|\s+
/// with L = ASCII letters plus every byte >= 0x80, N = ASCII digits and
/// \s = ASCII whitespace.
std::vector<std::string_view> pretokenize(std::string_view text);

struct TokenOffsets {
  std::size_t begin = 0;  ///< byte offset, inclusive
  std::size_t end = 0;    ///< byte offset, exclusive
};

struct Encoding {
  TokenSequence ids;
  std::vector<TokenOffsets> offsets;
};

class BpeVocabulary {
 public:
  /// Specials plus the 256 byte symbols, no merges.
  static BpeVocabulary byte_level();

  /// Parses the vocab.json / merges.txt pair. Throws DataError when the files
  /// are inconsistent (non-dense IDs, merges referencing unknown tokens).
  static BpeVocabulary from_strings(std::string_view vocab_json, std::string_view merges_txt);
  static BpeVocabulary load(const std::filesystem::path& dir);

  std::string vocab_json() const;
  std::string merges_txt() const;
  void save(const std::filesystem::path& dir) const;

  std::size_t size() const { return tokens_.size(); }
  const SpecialTokens& specials() const { return specials_; }
  const std::string& token(TokenId id) const;
  /// Returns -1 when the token is not in the vocabulary.
  TokenId find(std::string_view token) const;
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  TokenSequence encode(std::string_view text) const;
  Encoding encode_with_offsets(std::string_view text) const;
  /// Throws DataError naming the first out-of-range id. Specials decode to
  /// their literal strings.
  std::string decode(std::span<const TokenId> ids) const;

  /// Appends a merge rule (both sides must already exist); returns the new id.
  TokenId add_merge(TokenId left, TokenId right);

 private:
  TokenId add_token(std::string symbols, std::string bytes);
  void encode_pretoken(std::string_view piece, TokenSequence& out) const;
  static std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  struct MergeRule {
    std::int32_t rank;
    TokenId merged;
  };

  SpecialTokens specials_;
  std::vector<std::string> tokens_;  // symbol form, as serialized
  std::vector<std::string> bytes_;   // decoded bytes per id
  std::unordered_map<std::string, TokenId> ids_;
  std::array<TokenId, 256> byte_ids_{};
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::uint64_t, MergeRule> merge_rules_;
};

struct BpeTrainOptions {
  std::size_t vocab_size = 52000;
  /// Pairs seen fewer times than this are never merged.
  std::int64_t min_frequency = 2;
};

struct BpeTrainResult {
  BpeVocabulary vocabulary;
  /// Set when the corpus ran out of mergeable pairs before vocab_size.
  bool reached_target = true;
  std::string warning;
};

/// Greedy BPE. Ties on pair frequency go to the lexicographically smaller
/// (left, right) pair of symbol strings.
BpeTrainResult train_bpe(std::span<const std::string> texts, const BpeTrainOptions& options);
BpeTrainResult train_bpe(std::span<const CleanDocument> docs, const BpeTrainOptions& options);

inline TokenSequence encode(std::string_view text, const BpeVocabulary& vocab) { return vocab.encode(text); }
inline std::string decode(std::span<const TokenId> ids, const BpeVocabulary& vocab) { return vocab.decode(ids); }

}  // namespace mhgpt
