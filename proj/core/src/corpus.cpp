#include "mhgpt/corpus.hpp"

#include <set>
#include <sstream>

#include "json.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/io.hpp"

namespace mhgpt {
namespace {

using ojson = nlohmann::ordered_json;

bool is_space(char c) {
  return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
}
bool is_alpha(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }
bool is_digit(char c) { return c >= '0' && c <= '9'; }
bool is_alnum(char c) { return is_alpha(c) || is_digit(c); }
bool is_hex(char c) { return is_digit(c) || (c >= 'a' && c <= 'f') || (c >= 'A' && c <= 'F'); }
bool is_scheme_char(char c) { return is_alnum(c) || c == '+' || c == '.' || c == '-'; }

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  const auto n = s.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) {
      ++i;
      continue;
    }
    int extra = 0;
    std::uint32_t cp = 0;
    if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= n) return false;
    for (int k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    static constexpr std::uint32_t min_cp[] = {0, 0x80, 0x800, 0x10000};
    if (cp < min_cp[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += extra + 1;
  }
  return true;
}

std::size_t skip_to_space(std::string_view s, std::size_t i) {
  while (i < s.size() && !is_space(s[i])) ++i;
  return i;
}

bool starts_with_www(std::string_view s, std::size_t i) {
  if (i + 4 > s.size()) return false;
  for (int k = 0; k < 3; ++k) {
    if (s[i + k] != 'w' && s[i + k] != 'W') return false;
  }
  return s[i + 3] == '.';
}

std::string remove_urls(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const bool boundary_scheme = i == 0 || !is_scheme_char(s[i - 1]);
    if (boundary_scheme && is_alpha(s[i])) {
      std::size_t j = i;
      while (j < s.size() && is_scheme_char(s[j])) ++j;
      if (s.substr(j, 3) == "://") {
        i = skip_to_space(s, j);
        continue;
      }
    }
    if ((i == 0 || !is_alnum(s[i - 1])) && starts_with_www(s, i)) {
      i = skip_to_space(s, i);
      continue;
    }
    out.push_back(s[i]);
    ++i;
  }
  return out;
}

// Length of the character reference starting at s[i] == '&', or 0.
std::size_t char_reference_length(std::string_view s, std::size_t i) {
  std::size_t j = i + 1;
  if (j < s.size() && s[j] == '#') {
    ++j;
    if (j < s.size() && (s[j] == 'x' || s[j] == 'X')) {
      const std::size_t start = ++j;
      while (j < s.size() && is_hex(s[j])) ++j;
      if (j == start) return 0;
    } else {
      const std::size_t start = j;
      while (j < s.size() && is_digit(s[j])) ++j;
      if (j == start) return 0;
    }
  } else {
    if (j >= s.size() || !is_alpha(s[j])) return 0;
    while (j < s.size() && is_alnum(s[j])) ++j;
  }
  if (j < s.size() && s[j] == ';') return j + 1 - i;
  return 0;
}

std::string remove_char_references(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] == '&') {
      if (const auto len = char_reference_length(s, i); len > 0) {
        i += len;
        continue;
      }
    }
    out.push_back(s[i]);
    ++i;
  }
  return out;
}

std::string strip_non_ascii(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (c == '\n' || (u >= 0x20 && u < 0x7F)) out.push_back(c);
  }
  return out;
}

std::string strip_unicode_escapes(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] == '\\' && i + 1 < s.size() && (s[i + 1] == 'u' || s[i + 1] == 'U')) {
      const std::size_t digits = s[i + 1] == 'u' ? 4 : 8;
      bool ok = i + 2 + digits <= s.size();
      for (std::size_t k = 0; ok && k < digits; ++k) ok = is_hex(s[i + 2 + k]);
      if (ok) {
        i += 2 + digits;
        continue;
      }
    }
    out.push_back(s[i]);
    ++i;
  }
  return out;
}

std::string collapse_line_feeds(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == '\n' && !out.empty() && out.back() == '\n') continue;
    out.push_back(c);
  }
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

std::string clean_once(std::string_view s, const CleanOptions& options) {
  std::string t = remove_urls(s);
  t = remove_char_references(t);
  t = options.unicode == UnicodePolicy::StripNonAscii ? strip_non_ascii(t) : strip_unicode_escapes(t);
  t = collapse_line_feeds(t);
  return trim(t);
}

}  // namespace

std::string_view stratum_name(Stratum s) {
  switch (s) {
    case Stratum::PubMedParagraph:
      return "pubmed";
    case Stratum::RedditSubmission:
      return "reddit_submission";
    case Stratum::RedditComment:
      return "reddit_comment";
  }
  return "unknown";
}

Stratum parse_stratum(std::string_view name) {
  for (Stratum s : kAllStrata) {
    if (stratum_name(s) == name) return s;
  }
  throw DataError("unknown stratum '" + std::string(name) +
                  "' (expected pubmed, reddit_submission or reddit_comment)");
}

std::string clean_text(std::string_view raw, const CleanOptions& options) {
  if (!valid_utf8(raw)) throw DataError("invalid UTF-8 in input text");
  std::string current = clean_once(raw, options);
  // Each removal only shortens the text, so this terminates.
  for (;;) {
    std::string next = clean_once(current, options);
    if (next == current) return current;
    current = std::move(next);
  }
}

std::int64_t count_words(std::string_view text) {
  std::int64_t words = 0;
  bool in_word = false;
  for (char c : text) {
    if (is_space(c)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++words;
    }
  }
  return words;
}

std::optional<CleanDocument> filter_document(RawDocument doc, const CleanOptions& options) {
  const std::int64_t words = count_words(doc.text);
  if (doc.text.empty() || words < options.min_words) return std::nullopt;
  return CleanDocument{std::move(doc.id), doc.source, std::move(doc.text), words};
}

StratumStats& StratumStats::operator+=(const StratumStats& other) {
  records_in += other.records_in;
  malformed += other.malformed;
  dropped += other.dropped;
  records_out += other.records_out;
  return *this;
}

StratumStats IngestStats::totals() const {
  StratumStats t;
  for (const auto& s : per_stratum) t += s;
  return t;
}

IngestStats& IngestStats::operator+=(const IngestStats& other) {
  for (std::size_t i = 0; i < per_stratum.size(); ++i) per_stratum[i] += other.per_stratum[i];
  return *this;
}

std::string IngestStats::to_json() const {
  auto counts = [](const StratumStats& s) {
    ojson j;
    j["in"] = s.records_in;
    j["malformed"] = s.malformed;
    j["dropped"] = s.dropped;
    j["out"] = s.records_out;
    return j;
  };
  ojson j;
  ojson strata = ojson::object();
  for (Stratum s : kAllStrata) strata[std::string(stratum_name(s))] = counts((*this)[s]);
  j["strata"] = strata;
  j["total"] = counts(totals());
  return j.dump(2) + "\n";
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& manifest_path) {
  ojson j;
  try {
    j = ojson::parse(read_text(manifest_path));
  } catch (const ojson::parse_error& e) {
    throw DataError("manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  const auto base = manifest_path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() ? base / path : path;
  };
  std::vector<ManifestEntry> entries;
  if (j.is_object()) {
    for (const auto& [path, stratum] : j.items()) {
      if (!stratum.is_string()) throw DataError("manifest entry '" + path + "' must map to a stratum name");
      entries.push_back({resolve(path), parse_stratum(stratum.get<std::string>())});
    }
  } else if (j.is_array()) {
    for (const auto& e : j) {
      if (!e.is_object() || !e.contains("path") || !e.contains("stratum")) {
        throw DataError("manifest array entries need \"path\" and \"stratum\"");
      }
      entries.push_back({resolve(e["path"].get<std::string>()),
                         parse_stratum(e["stratum"].get<std::string>())});
    }
  } else {
    throw DataError("manifest must be a JSON object or array: " + manifest_path.string());
  }
  return entries;
}

IngestResult ingest(const std::vector<ManifestEntry>& files, const CleanOptions& options) {
  IngestResult result;
  std::set<std::string> seen_ids;
  for (const auto& entry : files) {
    const auto lines = read_lines(entry.path);
    auto& stats = result.stats[entry.stratum];
    for (std::size_t lineno = 0; lineno < lines.size(); ++lineno) {
      const std::string& line = lines[lineno];
      if (trim(line).empty()) continue;
      ++stats.records_in;
      ojson j = ojson::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j.contains("text") ||
          !j["id"].is_string() || !j["text"].is_string()) {
        ++stats.malformed;
        continue;
      }
      RawDocument raw{j["id"].get<std::string>(), entry.stratum, j["text"].get<std::string>()};
      if (!seen_ids.insert(raw.id).second) {
        ++stats.malformed;
        continue;
      }
      try {
        raw.text = clean_text(raw.text, options);
      } catch (const DataError& e) {
        throw DataError("record '" + raw.id + "' (" + entry.path.string() + ":" +
                        std::to_string(lineno + 1) + "): " + e.what());
      }
      if (auto doc = filter_document(std::move(raw), options)) {
        ++stats.records_out;
        result.documents.push_back(std::move(*doc));
      } else {
        ++stats.dropped;
      }
    }
  }
  return result;
}

std::string to_jsonl(const CleanDocument& doc) {
  ojson j;
  j["id"] = doc.id;
  j["source"] = stratum_name(doc.source);
  j["text"] = doc.text;
  j["word_count"] = doc.word_count;
  return j.dump();
}

CleanDocument clean_document_from_jsonl(std::string_view line) {
  ojson j = ojson::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw DataError("document line is not a JSON object");
  try {
    CleanDocument doc;
    doc.id = j.at("id").get<std::string>();
    doc.source = parse_stratum(j.at("source").get<std::string>());
    doc.text = j.at("text").get<std::string>();
    doc.word_count = j.value("word_count", count_words(doc.text));
    return doc;
  } catch (const ojson::exception& e) {
    throw DataError(std::string("bad document record: ") + e.what());
  }
}

std::vector<CleanDocument> load_documents(const std::filesystem::path& path) {
  std::vector<CleanDocument> docs;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    try {
      docs.push_back(clean_document_from_jsonl(lines[i]));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return docs;
}

void save_documents(const std::filesystem::path& path, const std::vector<CleanDocument>& docs) {
  std::string out;
  for (const auto& d : docs) {
    out += to_jsonl(d);
    out += '\n';
  }
  write_text(path, out);
}

}  // namespace mhgpt
