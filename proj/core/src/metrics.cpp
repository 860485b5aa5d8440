#include "mhgpt/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <tuple>

#include "json_util.hpp"
#include "mhgpt/error.hpp"

namespace mhgpt {

using detail::ojson;

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
  if (labels != other.labels) throw ConfigError("cannot merge confusion counts over different label sets");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

double harmonic_f1(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

PrF1 prf1(const ClassCounts& c) {
  PrF1 r;
  r.precision = (c.tp + c.fp) > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  r.recall = (c.tp + c.fn) > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  r.f1 = harmonic_f1(r.precision, r.recall);
  return r;
}

double weighted_f1(std::span<const double> f1, std::span<const std::int64_t> support) {
  if (f1.size() != support.size()) throw DataError("weighted_f1: score and support lengths differ");
  double num = 0.0;
  std::int64_t den = 0;
  for (std::size_t i = 0; i < f1.size(); ++i) {
    num += f1[i] * static_cast<double>(support[i]);
    den += support[i];
  }
  return den > 0 ? num / static_cast<double>(den) : 0.0;
}

EvalReport report_from_counts(std::string task, const ConfusionCounts& counts, std::int64_t instances) {
  EvalReport r;
  r.task = std::move(task);
  r.instances = instances;
  std::vector<double> f1;
  std::vector<std::int64_t> support;
  for (std::size_t i = 0; i < counts.counts.size(); ++i) {
    const auto s = prf1(counts.counts[i]);
    r.classes.push_back({counts.labels[i], s.precision, s.recall, s.f1, counts.counts[i].support});
    f1.push_back(s.f1);
    support.push_back(counts.counts[i].support);
  }
  r.weighted_f1 = weighted_f1(f1, support);
  double sum = 0.0;
  for (double v : f1) sum += v;
  r.macro_f1 = f1.empty() ? 0.0 : sum / static_cast<double>(f1.size());
  return r;
}

EvalReport classification_report(std::span<const int> gold, std::span<const int> pred,
                                  const std::vector<std::string>& labels) {
  if (gold.size() != pred.size()) {
    throw DataError("gold and predicted lengths differ (" + std::to_string(gold.size()) + " vs " +
                    std::to_string(pred.size()) + ")");
  }
  const int k = static_cast<int>(labels.size());
  ConfusionCounts cc{labels, std::vector<ClassCounts>(labels.size())};
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const int g = gold[i], p = pred[i];
    if (g < 0 || g >= k || p < 0 || p >= k) throw DataError("class id out of range at row " + std::to_string(i));
    cc.counts[static_cast<std::size_t>(g)].support += 1;
    if (g == p) {
      cc.counts[static_cast<std::size_t>(g)].tp += 1;
    } else {
      cc.counts[static_cast<std::size_t>(p)].fp += 1;
      cc.counts[static_cast<std::size_t>(g)].fn += 1;
    }
  }
  auto r = report_from_counts(k == 2 ? "binary" : "multiclass", cc, static_cast<std::int64_t>(gold.size()));
  if (k == 2) r.positive_f1 = r.classes[1].f1;
  return r;
}

EvalReport multilabel_f1(std::span<const std::uint8_t> gold, std::span<const std::uint8_t> pred, std::size_t n,
                         const std::vector<std::string>& labels) {
  const std::size_t k = labels.size();
  if (gold.size() != n * k || pred.size() != n * k) {
    throw DataError("multilabel matrices must both be " + std::to_string(n) + " x " + std::to_string(k));
  }
  ConfusionCounts cc{labels, std::vector<ClassCounts>(k)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      const bool g = gold[i * k + c] != 0, p = pred[i * k + c] != 0;
      auto& cnt = cc.counts[c];
      cnt.support += g ? 1 : 0;
      cnt.tp += (g && p) ? 1 : 0;
      cnt.fp += (!g && p) ? 1 : 0;
      cnt.fn += (g && !p) ? 1 : 0;
    }
  }
  return report_from_counts("multilabel", cc, static_cast<std::int64_t>(n));
}

std::vector<LabeledSpan> resolve_overlaps(std::vector<LabeledSpan> spans) {
  std::stable_sort(spans.begin(), spans.end(), [](const LabeledSpan& a, const LabeledSpan& b) {
    const auto la = a.end - a.begin, lb = b.end - b.begin;
    if (la != lb) return la > lb;
    return a.begin < b.begin;
  });
  std::vector<LabeledSpan> kept;
  for (auto& s : spans) {
    const bool clash = std::any_of(kept.begin(), kept.end(),
                                   [&](const LabeledSpan& k) { return s.begin < k.end && k.begin < s.end; });
    if (!clash) kept.push_back(std::move(s));
  }
  std::sort(kept.begin(), kept.end(), [](const LabeledSpan& a, const LabeledSpan& b) { return a.begin < b.begin; });
  return kept;
}

namespace {

std::string describe(const LabeledSpan& s) {
  return "[" + std::to_string(s.begin) + ", " + std::to_string(s.end) + ") '" + s.label + "'";
}

std::string_view tag_type(std::string_view tag) {
  return (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') ? tag.substr(2) : tag;
}

}  // namespace

std::vector<std::string> align_spans(std::size_t text_length, std::span<const LabeledSpan> spans,
                                     std::span<const TokenOffsets> token_offsets) {
  for (const auto& s : spans) {
    if (s.begin > s.end) throw DataError("span " + describe(s) + " has begin after end");
    if (s.end > text_length) {
      throw DataError("span " + describe(s) + " extends past the text length " + std::to_string(text_length));
    }
    if (s.label.empty()) throw DataError("span " + describe(s) + " has an empty label");
  }
  const auto resolved = resolve_overlaps({spans.begin(), spans.end()});
  std::vector<std::string> tags(token_offsets.size(), "O");
  std::vector<bool> claimed(token_offsets.size(), false);
  for (const auto& s : resolved) {
    if (s.begin == s.end) continue;  // an empty span covers no token
    bool first = true;
    for (std::size_t t = 0; t < token_offsets.size(); ++t) {
      const auto& o = token_offsets[t];
      if (!(o.begin < s.end && s.begin < o.end) || claimed[t]) continue;
      tags[t] = (first ? "B-" : "I-") + s.label;
      claimed[t] = true;
      first = false;
    }
  }
  return tags;
}

std::vector<LabeledSpan> extract_spans(std::span<const std::string> tags) {
  std::vector<LabeledSpan> out;
  bool open = false;
  for (std::size_t t = 0; t < tags.size(); ++t) {
    const std::string_view tag = tags[t];
    if (tag == "O" || tag.size() < 3 || tag[1] != '-') {
      open = false;
      continue;
    }
    const std::string_view type = tag.substr(2);
    if (tag[0] == 'I' && open && out.back().label == type) {
      out.back().end = t + 1;
      continue;
    }
    out.push_back({t, t + 1, std::string(type)});
    open = true;
  }
  return out;
}

EvalReport ner_f1(const std::vector<std::vector<std::string>>& gold, const std::vector<std::vector<std::string>>& pred) {
  if (gold.size() != pred.size()) throw DataError("ner_f1: sequence counts differ");
  std::set<std::string> types;
  for (const auto* side : {&gold, &pred}) {
    for (const auto& seq : *side) {
      for (const auto& tag : seq) {
        if (tag != "O") types.emplace(tag_type(tag));
      }
    }
  }
  std::vector<std::string> labels(types.begin(), types.end());
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < labels.size(); ++i) index[labels[i]] = i;
  ConfusionCounts cc{labels, std::vector<ClassCounts>(labels.size())};
  ClassCounts span_counts;
  std::int64_t tokens = 0;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    const auto& g = gold[s];
    const auto& p = pred[s];
    if (g.size() != p.size()) {
      throw DataError("ner_f1: sequence " + std::to_string(s) + " has " + std::to_string(g.size()) +
                      " gold and " + std::to_string(p.size()) + " predicted tags");
    }
    for (std::size_t t = 0; t < g.size(); ++t) {
      ++tokens;
      const bool g_ent = g[t] != "O", p_ent = p[t] != "O";
      const std::string gt(tag_type(g[t])), pt(tag_type(p[t]));
      if (g_ent) cc.counts[index[gt]].support += 1;
      if (g_ent && p_ent && gt == pt) {
        cc.counts[index[gt]].tp += 1;
        continue;
      }
      if (p_ent) cc.counts[index[pt]].fp += 1;
      if (g_ent) cc.counts[index[gt]].fn += 1;
    }
    auto gs = extract_spans(g);
    auto ps = extract_spans(p);
    auto key = [](const LabeledSpan& x) { return std::tie(x.begin, x.end, x.label); };
    auto less = [&](const LabeledSpan& a, const LabeledSpan& b) { return key(a) < key(b); };
    std::sort(gs.begin(), gs.end(), less);
    std::sort(ps.begin(), ps.end(), less);
    std::vector<LabeledSpan> both;
    std::set_intersection(gs.begin(), gs.end(), ps.begin(), ps.end(), std::back_inserter(both), less);
    const auto tp = static_cast<std::int64_t>(both.size());
    span_counts.tp += tp;
    span_counts.fp += static_cast<std::int64_t>(ps.size()) - tp;
    span_counts.fn += static_cast<std::int64_t>(gs.size()) - tp;
    span_counts.support += static_cast<std::int64_t>(gs.size());
  }
  auto r = report_from_counts("ner", cc, tokens);
  r.span_scores = prf1(span_counts);
  return r;
}

std::string EvalReport::to_json() const {
  ojson j;
  j["task"] = task;
  j["instances"] = instances;
  j["weighted_f1"] = weighted_f1;
  j["macro_f1"] = macro_f1;
  if (positive_f1) j["positive_f1"] = *positive_f1;
  if (span_scores) {
    j["span"] = {{"precision", span_scores->precision}, {"recall", span_scores->recall}, {"f1", span_scores->f1}};
  }
  ojson cls = ojson::array();
  for (const auto& c : classes) {
    cls.push_back({{"label", c.label}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1},
                   {"support", c.support}});
  }
  j["classes"] = std::move(cls);
  return j.dump(2);
}

EvalReport EvalReport::from_json(std::string_view json) {
  const ojson j = ojson::parse(json, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw DataError("evaluation report must be a JSON object");
  EvalReport r;
  try {
    r.task = j.at("task").get<std::string>();
    r.instances = j.at("instances").get<std::int64_t>();
    r.weighted_f1 = j.at("weighted_f1").get<double>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    if (j.contains("positive_f1")) r.positive_f1 = j["positive_f1"].get<double>();
    if (j.contains("span")) {
      const auto& s = j["span"];
      r.span_scores = PrF1{s.at("precision").get<double>(), s.at("recall").get<double>(), s.at("f1").get<double>()};
    }
    for (const auto& c : j.at("classes")) {
      r.classes.push_back({c.at("label").get<std::string>(), c.at("precision").get<double>(),
                           c.at("recall").get<double>(), c.at("f1").get<double>(), c.at("support").get<std::int64_t>()});
    }
  } catch (const ojson::exception& e) {
    throw DataError(std::string("malformed evaluation report: ") + e.what());
  }
  return r;
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
  return buf;
}

std::string pad_left(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }
std::string pad_right(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace

std::string EvalReport::to_table() const {
  std::size_t w = 12;
  for (const auto& c : classes) w = std::max(w, c.label.size() + 2);
  std::string out = "task: " + task + "  instances: " + std::to_string(instances) + "\n";
  out += pad_right("label", w) + pad_left("precision", 10) + pad_left("recall", 10) + pad_left("f1", 10) +
         pad_left("support", 10) + "\n";
  for (const auto& c : classes) {
    out += pad_right(c.label, w) + pad_left(pct(c.precision), 10) + pad_left(pct(c.recall), 10) +
           pad_left(pct(c.f1), 10) + pad_left(std::to_string(c.support), 10) + "\n";
  }
  out += pad_right("weighted", w) + pad_left("", 20) + pad_left(pct(weighted_f1), 10) + "\n";
  out += pad_right("macro", w) + pad_left("", 20) + pad_left(pct(macro_f1), 10) + "\n";
  if (positive_f1) out += pad_right("positive", w) + pad_left("", 20) + pad_left(pct(*positive_f1), 10) + "\n";
  if (span_scores) {
    out += pad_right("spans", w) + pad_left(pct(span_scores->precision), 10) + pad_left(pct(span_scores->recall), 10) +
           pad_left(pct(span_scores->f1), 10) + "\n";
  }
  return out;
}

std::size_t utf8_length(std::string_view text) {
  std::size_t n = 0;
  for (unsigned char c : text) n += (c & 0xC0) != 0x80 ? 1 : 0;
  return n;
}

std::size_t char_to_byte_offset(std::string_view text, std::size_t char_offset) {
  std::size_t chars = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if ((static_cast<unsigned char>(text[i]) & 0xC0) == 0x80) continue;
    if (chars == char_offset) return i;
    ++chars;
  }
  if (chars == char_offset) return text.size();
  throw DataError("character offset " + std::to_string(char_offset) + " is past the text length " +
                  std::to_string(chars));
}

}  // namespace mhgpt
