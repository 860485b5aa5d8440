#include "mhgpt/chunker.hpp"

#include <cmath>

#include "json.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/io.hpp"
#include "mhgpt/rng.hpp"

namespace mhgpt {

using ojson = nlohmann::ordered_json;

TokenSequence truncate_row(std::span<const TokenId> tokens, std::size_t max_len) {
  if (max_len == 0) throw ConfigError("truncate: max_len must be at least 1");
  const auto n = std::min(tokens.size(), max_len);
  return TokenSequence(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n));
}

std::vector<TokenSequence> truncate_rows(std::span<const TokenSequence> rows, std::size_t max_len) {
  std::vector<TokenSequence> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(truncate_row(r, max_len));
  return out;
}

std::vector<TokenChunk> sliding_chunks(std::span<const TokenId> tokens, std::size_t window,
                                       std::size_t step, Stratum source,
                                       const std::string& doc_id) {
  if (window == 0 || step == 0) throw ConfigError("sliding_chunks: window and step must be >= 1");
  std::vector<TokenChunk> out;
  std::int64_t index = 0;
  for (std::size_t start = 0; start + window <= tokens.size(); start += step) {
    TokenChunk c;
    c.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                    tokens.begin() + static_cast<std::ptrdiff_t>(start + window));
    c.source = source;
    c.doc_id = doc_id;
    c.chunk_index = index++;
    out.push_back(std::move(c));
  }
  return out;
}

std::array<std::int64_t, 3> count_strata(std::span<const TokenChunk> chunks) {
  std::array<std::int64_t, 3> counts{};
  for (const auto& c : chunks) ++counts[static_cast<std::size_t>(c.source)];
  return counts;
}

SamplePlan make_sample_plan(const std::array<std::int64_t, 3>& available, double fraction,
                            std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("sample fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  SamplePlan plan;
  plan.fraction = fraction;
  plan.seed = seed;
  for (std::size_t s = 0; s < available.size(); ++s) {
    plan.strata_targets[s] =
        static_cast<std::int64_t>(std::floor(fraction * static_cast<double>(available[s]) + 0.5));
  }
  return plan;
}

std::vector<TokenChunk> stratified_sample(std::span<const TokenChunk> chunks, const SamplePlan& plan) {
  std::array<std::vector<std::size_t>, 3> by_stratum;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    by_stratum[static_cast<std::size_t>(chunks[i].source)].push_back(i);
  }
  Rng rng(plan.seed);
  std::vector<TokenChunk> out;
  for (Stratum s : kAllStrata) {
    auto& pool = by_stratum[static_cast<std::size_t>(s)];
    const std::int64_t target = plan.target(s);
    if (target < 0 || static_cast<std::size_t>(target) > pool.size()) {
      throw DataError("stratified_sample: stratum " + std::string(stratum_name(s)) + " needs " +
                      std::to_string(target) + " chunks but only " + std::to_string(pool.size()) +
                      " are available");
    }
    for (std::size_t k = 0; k < static_cast<std::size_t>(target); ++k) {
      const auto j = k + static_cast<std::size_t>(rng.below(pool.size() - k));
      std::swap(pool[k], pool[j]);
      out.push_back(chunks[pool[k]]);
    }
  }
  rng.shuffle(std::span<TokenChunk>(out));
  return out;
}

std::string to_jsonl(const TokenChunk& chunk) {
  ojson j;
  j["doc_id"] = chunk.doc_id;
  j["source"] = stratum_name(chunk.source);
  j["chunk_index"] = chunk.chunk_index;
  j["tokens"] = chunk.tokens;
  return j.dump();
}

TokenChunk chunk_from_jsonl(std::string_view line) {
  ojson j = ojson::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw DataError("chunk line is not a JSON object");
  try {
    TokenChunk c;
    c.doc_id = j.at("doc_id").get<std::string>();
    c.source = parse_stratum(j.at("source").get<std::string>());
    c.chunk_index = j.at("chunk_index").get<std::int64_t>();
    c.tokens = j.at("tokens").get<TokenSequence>();
    return c;
  } catch (const ojson::exception& e) {
    throw DataError(std::string("bad chunk record: ") + e.what());
  }
}

std::vector<TokenChunk> load_chunks(const std::filesystem::path& path) {
  std::vector<TokenChunk> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    try {
      out.push_back(chunk_from_jsonl(lines[i]));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

void save_chunks(const std::filesystem::path& path, std::span<const TokenChunk> chunks) {
  std::string out;
  for (const auto& c : chunks) {
    out += to_jsonl(c);
    out += '\n';
  }
  write_text(path, out);
}

}  // namespace mhgpt
