#include "doctest.h"
#include "metrics_oracle.hpp"
#include "mhgpt/error.hpp"

using namespace mhgpt;

TEST_CASE("prf1 arithmetic and zero-division convention") {
  const auto s = prf1({8, 2, 2, 10});
  CHECK(s.precision == doctest::Approx(0.8));
  CHECK(s.recall == doctest::Approx(0.8));
  CHECK(s.f1 == doctest::Approx(0.8));
  const auto z = prf1({0, 0, 0, 0});
  CHECK(z.precision == 0.0);
  CHECK(z.recall == 0.0);
  CHECK(z.f1 == 0.0);
  CHECK(prf1({0, 3, 0, 0}).f1 == 0.0);
}

TEST_CASE("harmonic-mean F1 hand values") {
  CHECK(std::abs(harmonic_f1(0.8, 0.9) - 0.8471) <= 5e-5);
  CHECK(harmonic_f1(0.5, 0.5) == doctest::Approx(0.5));
  CHECK(harmonic_f1(1.0, 0.0) == 0.0);
  CHECK(harmonic_f1(0.0, 0.0) == 0.0);
  CHECK(std::abs(harmonic_f1(0.6, 0.3) - 0.4) <= 1e-12);
}

TEST_CASE("weighted F1 by support") {
  const std::vector<double> f1 = {1.0, 0.5};
  const std::vector<std::int64_t> support = {1, 3};
  CHECK(weighted_f1(f1, support) == doctest::Approx(0.625));
  const std::vector<std::int64_t> none = {0, 0};
  CHECK(weighted_f1(f1, none) == 0.0);
}

TEST_CASE("classification matches the brute-force oracle") {
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    const auto k = static_cast<std::size_t>(2 + rng.below(8));
    const auto c = oracle::random_classes(rng, k);
    const auto r = classification_report(c.gold, c.pred, oracle::class_names(k));
    REQUIRE(oracle::same(oracle::classification(c.gold, c.pred, k), r));
    REQUIRE(r.instances == static_cast<std::int64_t>(c.gold.size()));
    if (k == 2) REQUIRE(*r.positive_f1 == r.classes[1].f1);
  }
  const std::vector<int> g = {0, 1}, p = {0, 2};
  CHECK_THROWS_AS(classification_report(g, p, oracle::class_names(2)), DataError);
}

TEST_CASE("multilabel matches the brute-force oracle") {
  Rng rng(2);
  for (int i = 0; i < 300; ++i) {
    const auto c = oracle::random_multilabel(rng);
    const auto r = multilabel_f1(c.gold, c.pred, c.n, oracle::class_names(c.k));
    REQUIRE(oracle::same(oracle::multilabel(c.gold, c.pred, c.n, c.k), r));
  }
}

TEST_CASE("NER matches the brute-force oracle") {
  Rng rng(3);
  for (int i = 0; i < 300; ++i) {
    const auto c = oracle::random_ner(rng);
    REQUIRE(oracle::same(oracle::ner(c.gold, c.pred), ner_f1(c.gold, c.pred)));
  }
}

TEST_CASE("NER hand example") {
  const std::vector<std::vector<std::string>> gold = {{"B-DRUG", "I-DRUG", "O", "B-SYMPTOM"}};
  const std::vector<std::vector<std::string>> pred = {{"B-DRUG", "O", "O", "B-SYMPTOM"}};
  const auto r = ner_f1(gold, pred);
  REQUIRE(r.classes.size() == 2);
  CHECK(r.classes[0].label == "DRUG");
  CHECK(r.classes[0].recall == doctest::Approx(0.5));
  CHECK(r.classes[0].precision == doctest::Approx(1.0));
  CHECK(r.span_scores->precision == doctest::Approx(0.5));
  CHECK(r.span_scores->recall == doctest::Approx(0.5));
  CHECK(r.instances == 4);
}

TEST_CASE("extract_spans handles stray I- tags") {
  const std::vector<std::string> tags = {"I-A", "I-A", "B-A", "I-B", "O", "I-B"};
  const std::vector<LabeledSpan> expected = {{0, 2, "A"}, {2, 3, "A"}, {3, 4, "B"}, {5, 6, "B"}};
  CHECK(extract_spans(tags) == expected);
}

TEST_CASE("span alignment: intersection, overlaps and claimed tokens") {
  // Tokens: [0,3) [3,6) [6,9) [9,12)
  const std::vector<TokenOffsets> offs = {{0, 3}, {3, 6}, {6, 9}, {9, 12}};
  const std::vector<LabeledSpan> spans = {{4, 8, "A"}};
  CHECK(align_spans(12, spans, offs) == std::vector<std::string>{"O", "B-A", "I-A", "O"});
  // Overlap: longer span wins.
  const std::vector<LabeledSpan> overlap = {{0, 2, "S"}, {1, 7, "L"}};
  CHECK(align_spans(12, overlap, offs) == std::vector<std::string>{"B-L", "I-L", "I-L", "O"});
  // Equal length: earlier start wins.
  const std::vector<LabeledSpan> tie = {{5, 9, "Y"}, {2, 6, "X"}};
  CHECK(resolve_overlaps(tie) == std::vector<LabeledSpan>{{2, 6, "X"}});
  // Disjoint spans sharing a token: the first claims it.
  const std::vector<LabeledSpan> shared = {{0, 4, "P"}, {5, 12, "Q"}};
  CHECK(align_spans(12, shared, offs) == std::vector<std::string>{"B-P", "I-P", "B-Q", "I-Q"});
  const std::vector<LabeledSpan> empty_span = {{4, 4, "E"}};
  CHECK(align_spans(12, empty_span, offs) == std::vector<std::string>{"O", "O", "O", "O"});
  const std::vector<LabeledSpan> past = {{10, 13, "A"}};
  CHECK_THROWS_AS(align_spans(12, past, offs), DataError);
  const std::vector<LabeledSpan> reversed = {{5, 4, "A"}};
  CHECK_THROWS_AS(align_spans(12, reversed, offs), DataError);
  const std::vector<LabeledSpan> unlabeled = {{1, 4, ""}};
  CHECK_THROWS_AS(align_spans(12, unlabeled, offs), DataError);
}

TEST_CASE("code-point to byte offsets") {
  const std::string s = "a\xC3\xA9" "b\xF0\x9F\x98\x80";
  CHECK(utf8_length(s) == 4);
  CHECK(char_to_byte_offset(s, 0) == 0);
  CHECK(char_to_byte_offset(s, 2) == 3);
  CHECK(char_to_byte_offset(s, 4) == s.size());
  CHECK_THROWS_AS(char_to_byte_offset(s, 5), DataError);
}

TEST_CASE("reports round-trip through JSON and render x100 tables") {
  const std::vector<int> g = {0, 1, 1, 0}, p = {0, 1, 0, 0};
  const auto r = classification_report(g, p, oracle::class_names(2));
  const auto back = EvalReport::from_json(r.to_json());
  CHECK(back.weighted_f1 == r.weighted_f1);
  CHECK(back.classes.size() == 2);
  CHECK(back.positive_f1.has_value());
  const auto table = r.to_table();
  CHECK(table.find("73.33") != std::string::npos);
}
