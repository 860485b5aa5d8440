#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mhgpt {

/// Source strata of the pretraining corpus.
enum class Stratum : std::uint8_t {
  PubMedParagraph = 0,
  RedditSubmission = 1,
  RedditComment = 2,
};

inline constexpr std::array<Stratum, 3> kAllStrata = {
    Stratum::PubMedParagraph, Stratum::RedditSubmission, Stratum::RedditComment};

/// Canonical names: "pubmed", "reddit_submission", "reddit_comment".
std::string_view stratum_name(Stratum s);
/// Accepts the canonical names; throws DataError otherwise.
Stratum parse_stratum(std::string_view name);

struct RawDocument {
  std::string id;
  Stratum source = Stratum::PubMedParagraph;
  std::string text;
};

struct CleanDocument {
  std::string id;
  Stratum source = Stratum::PubMedParagraph;
  std::string text;
  std::int64_t word_count = 0;
};

/// How "removed Unicode" is read.
enum class UnicodePolicy {
  /// Drop every code point outside printable ASCII plus line feed.
  StripNonAscii,
  /// Drop only literal escape sequences such as \u00e9 or \U0001F600.
  StripEscapes,
};

struct CleanOptions {
  UnicodePolicy unicode = UnicodePolicy::StripNonAscii;
  std::int64_t min_words = 5;
};

/// Normalizes one record: URLs, character references, unicode, line-feed
/// runs, then trim. The pass is repeated until the text stops changing, so
/// the result is a fixed point. Throws DataError on invalid UTF-8.
std::string clean_text(std::string_view raw, const CleanOptions& options = {});

/// Whitespace-separated word count.
std::int64_t count_words(std::string_view text);

/// Returns the kept document (word_count filled in) or nullopt if dropped.
std::optional<CleanDocument> filter_document(RawDocument doc, const CleanOptions& options = {});

struct StratumStats {
  std::int64_t records_in = 0;
  std::int64_t malformed = 0;
  std::int64_t dropped = 0;
  std::int64_t records_out = 0;

  StratumStats& operator+=(const StratumStats& other);
};

struct IngestStats {
  std::array<StratumStats, 3> per_stratum{};

  StratumStats totals() const;
  StratumStats& operator[](Stratum s) { return per_stratum[static_cast<std::size_t>(s)]; }
  const StratumStats& operator[](Stratum s) const { return per_stratum[static_cast<std::size_t>(s)]; }
  IngestStats& operator+=(const IngestStats& other);

  std::string to_json() const;
};

struct ManifestEntry {
  std::filesystem::path path;
  Stratum stratum = Stratum::PubMedParagraph;
};

/// Manifest files are JSON: either an object {"path": "stratum", ...} (file
/// order as written) or an array of {"path": ..., "stratum": ...}. Relative
/// paths resolve against the manifest's directory.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& manifest_path);

struct IngestResult {
  std::vector<CleanDocument> documents;
  IngestStats stats;
};

/// Reads JSON-lines records {"id", "text"} from each file in manifest order.
/// Lines that are not valid JSON objects with string id/text, or that repeat
/// an id, are counted as malformed and skipped. Unreadable files throw.
IngestResult ingest(const std::vector<ManifestEntry>& files, const CleanOptions& options = {});

std::string to_jsonl(const CleanDocument& doc);
CleanDocument clean_document_from_jsonl(std::string_view line);

std::vector<CleanDocument> load_documents(const std::filesystem::path& path);
void save_documents(const std::filesystem::path& path, const std::vector<CleanDocument>& docs);

}  // namespace mhgpt
