#include <algorithm>
#include <map>
#include <set>

#include "doctest.h"
#include "mhgpt/chunker.hpp"
#include "mhgpt/rng.hpp"
#include "test_util.hpp"

using namespace mhgpt;

namespace {

TokenSequence iota_tokens(std::size_t n, TokenId start = 0) {
  TokenSequence t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = start + static_cast<TokenId>(i);
  return t;
}

std::vector<TokenChunk> synthetic_chunks(const std::array<int, 3>& per_stratum) {
  std::vector<TokenChunk> out;
  for (std::size_t s = 0; s < 3; ++s) {
    for (int i = 0; i < per_stratum[s]; ++i) {
      out.push_back({iota_tokens(4, static_cast<TokenId>(s * 100000 + i)), kAllStrata[s],
                     "d" + std::to_string(s) + "-" + std::to_string(i), 0});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("truncate keeps the first max_len tokens") {
  const auto t = iota_tokens(10);
  CHECK(truncate_row(t, 4) == TokenSequence{0, 1, 2, 3});
  CHECK(truncate_row(t, 20) == t);
  CHECK(truncate_row({}, 3).empty());
}

TEST_CASE("sliding windows of 512/512 on 1300 tokens give two chunks") {
  const auto t = iota_tokens(1300);
  const auto chunks = sliding_chunks(t, 512, 512, Stratum::PubMedParagraph, "doc");
  REQUIRE(chunks.size() == 2);
  CHECK(chunks[0].tokens.front() == 0);
  CHECK(chunks[1].tokens.front() == 512);
  CHECK(chunks[1].tokens.back() == 1023);
  CHECK(chunks[1].chunk_index == 1);
  CHECK(sliding_chunks(iota_tokens(511), 512, 512, Stratum::PubMedParagraph, "d").empty());
}

TEST_CASE("tiling coverage property over 1000 random documents") {
  Rng rng(11);
  for (int doc = 0; doc < 1000; ++doc) {
    const auto n = static_cast<std::size_t>(rng.below(3000));
    const auto window = static_cast<std::size_t>(1 + rng.below(600));
    const auto step = static_cast<std::size_t>(1 + rng.below(window));
    const auto tokens = iota_tokens(n);
    const auto chunks = sliding_chunks(tokens, window, step, Stratum::RedditComment, "d");
    // Oracle: windows start at multiples of step while they fit.
    const std::size_t expected = n >= window ? (n - window) / step + 1 : 0;
    REQUIRE(chunks.size() == expected);
    for (std::size_t i = 0; i < chunks.size(); ++i) {
      REQUIRE(chunks[i].tokens.size() == window);
      REQUIRE(chunks[i].tokens.front() == static_cast<TokenId>(i * step));
      REQUIRE(std::equal(chunks[i].tokens.begin(), chunks[i].tokens.end(), tokens.begin() + i * step));
    }
    if (step == window && expected > 0) {
      // Non-overlapping tiling covers exactly the prefix, dropping < window tokens.
      REQUIRE(n - expected * window < window);
    }
  }
}

TEST_CASE("sample plan uses round half up per stratum") {
  const auto plan = make_sample_plan({10, 30, 50}, 0.05, 1);
  // 0.5 -> 1, 1.5 -> 2, 2.5 -> 3
  CHECK(plan.target(Stratum::PubMedParagraph) == 1);
  CHECK(plan.target(Stratum::RedditSubmission) == 2);
  CHECK(plan.target(Stratum::RedditComment) == 3);
  const auto zero = make_sample_plan({9, 0, 29}, 0.05, 1);
  CHECK(zero.strata_targets == std::array<std::int64_t, 3>{0, 0, 1});
}

TEST_CASE("stratified sample draws exact targets without replacement") {
  const auto chunks = synthetic_chunks({400, 1237, 2210});
  const auto plan = make_sample_plan(count_strata(chunks), 0.05, 42);
  const auto sample = stratified_sample(chunks, plan);
  const auto counts = count_strata(sample);
  for (std::size_t s = 0; s < 3; ++s) {
    const double avail = static_cast<double>(count_strata(chunks)[s]);
    CHECK(counts[s] == plan.strata_targets[s]);
    CHECK(std::abs(static_cast<double>(counts[s]) - 0.05 * avail) <= 0.5);
  }
  std::set<std::string> ids;
  for (const auto& c : sample) ids.insert(c.doc_id);
  CHECK(ids.size() == sample.size());
  CHECK(stratified_sample(chunks, plan) == sample);
  auto other = plan;
  other.seed = 43;
  CHECK_FALSE(stratified_sample(chunks, other) == sample);
}

TEST_CASE("stratified sample is uniform within a stratum") {
  const auto chunks = synthetic_chunks({20, 0, 0});
  std::map<std::string, int> hits;
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    auto plan = make_sample_plan(count_strata(chunks), 0.25, static_cast<std::uint64_t>(t));
    for (const auto& c : stratified_sample(chunks, plan)) ++hits[c.doc_id];
  }
  // Each of 20 items is chosen with probability 5/20.
  for (const auto& [id, n] : hits) CHECK(std::abs(n / double(trials) - 0.25) < 0.04);
  CHECK(hits.size() == 20);
}

TEST_CASE("chunks round-trip through JSONL") {
  testing::TempDir dir("chunks");
  const auto chunks = synthetic_chunks({2, 1, 3});
  save_chunks(dir / "c.jsonl", chunks);
  CHECK(load_chunks(dir / "c.jsonl") == chunks);
  CHECK(chunk_from_jsonl(to_jsonl(chunks[3])) == chunks[3]);
}
