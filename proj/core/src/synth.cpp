#include "mhgpt/synth.hpp"

#include <algorithm>
#include <cmath>

#include "json_util.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/io.hpp"
#include "mhgpt/rng.hpp"

namespace mhgpt {

using detail::ojson;

namespace {

const std::vector<std::string> kFiller = {
    "i", "feel", "today", "the", "a", "and", "my", "was", "it", "to", "of", "in", "that", "have", "been", "about",
    "really", "just", "so", "not", "with", "for", "this", "what", "when", "day", "week", "night", "time", "people",
    "think", "know", "help", "because", "still", "again", "after", "before", "much", "more", "very", "like", "some",
    "other", "things", "life", "going", "thought", "trying", "talk", "sleep", "home", "morning", "better", "worse",
    "always", "never", "sometimes", "maybe", "would", "could", "should", "there", "they", "we", "you", "he", "she",
    "them", "our", "their", "at", "on", "from", "out", "up", "down", "over", "lately", "since", "month", "year",
    "work", "made", "got", "said", "told", "asked", "wanted", "need", "want", "seems", "started", "stopped", "keep",
    "every", "each", "any", "all", "nothing", "something", "everything", "anyone", "someone", "nobody", "long",
    "little", "big", "new", "old", "good", "bad", "hard", "easy", "right", "wrong", "last", "next", "first"};

const std::vector<std::string> kPubmedWords = {
    "patients", "study", "results", "significant", "treatment", "clinical", "trial", "participants", "symptoms",
    "associated", "outcomes", "cohort", "analysis", "randomized", "intervention", "prevalence", "baseline",
    "measured", "scores", "reported", "compared", "group", "effect", "risk", "factors", "adults", "sample"};

const std::vector<std::string> kRedditWords = {
    "lol", "honestly", "anyone", "tbh", "advice", "thanks", "guys", "post", "reddit", "update", "edit", "vent",
    "throwaway", "literally", "idk", "seriously", "ok", "yeah", "sorry", "hug", "rant", "kinda", "gonna"};

const std::vector<std::vector<std::string>> kBinaryKeywords = {
    {},
    {"hopeless", "worthless", "suicidal", "despair", "crying", "numb", "exhausted", "trapped"}};

const std::vector<std::vector<std::string>> kStressorKeywords = {
    {"boss", "deadline", "office"},         {"exam", "homework", "teacher"},    {"mother", "father", "sister"},
    {"rent", "debt", "bills"},              {"illness", "doctor", "surgery"},   {"girlfriend", "boyfriend", "breakup"},
    {"party", "lonely", "strangers"},       {"traffic", "chores", "commute"},   {"weather", "noise", "neighbors"}};

const std::vector<std::vector<std::string>> kWellnessKeywords = {
    {"gym", "running", "diet"},           {"reading", "learning", "puzzles"}, {"career", "job", "promotion"},
    {"friends", "community", "gathering"}, {"prayer", "meditation", "faith"}, {"feelings", "mood", "anxious"}};

const std::vector<DictionaryTerm> kDictionary = {
    {"sertraline", "DRUG"},       {"fluoxetine", "DRUG"},      {"lithium", "DRUG"},
    {"xanax", "DRUG"},            {"zoloft", "DRUG"},          {"panic attack", "SYMPTOM"},
    {"insomnia", "SYMPTOM"},      {"nausea", "SYMPTOM"},       {"fatigue", "SYMPTOM"},
    {"racing thoughts", "SYMPTOM"}, {"depression", "CONDITION"}, {"bipolar disorder", "CONDITION"},
    {"ptsd", "CONDITION"},        {"adhd", "CONDITION"}};

const std::string& pick(const std::vector<std::string>& words, Rng& rng) { return words[rng.below(words.size())]; }

std::vector<std::string> filler_words(Rng& rng, std::size_t lo, std::size_t hi) {
  const std::size_t n = lo + rng.below(hi - lo + 1);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(pick(kFiller, rng));
  return out;
}

void insert_at_random(std::vector<std::string>& words, std::string w, Rng& rng) {
  const auto pos = rng.below(words.size() + 1);
  words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), std::move(w));
}

std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

std::string corpus_sentence(Stratum s, Rng& rng) {
  const auto& flavor = s == Stratum::PubMedParagraph ? kPubmedWords : kRedditWords;
  const std::size_t n = 6 + rng.below(10);
  std::vector<std::string> words;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform01();
    if (u < 0.65) {
      words.push_back(pick(kFiller, rng));
    } else if (u < 0.85) {
      words.push_back(pick(flavor, rng));
    } else if (u < 0.90) {
      words.push_back(kDictionary[rng.below(kDictionary.size())].text);
    } else {
      const auto& groups = u < 0.93 ? kBinaryKeywords[1] : u < 0.965 ? kStressorKeywords[rng.below(9)]
                                                                      : kWellnessKeywords[rng.below(6)];
      words.push_back(pick(groups, rng));
    }
  }
  return join(words) + ".";
}

std::string noise_fragment(Rng& rng) {
  switch (rng.below(5)) {
    case 0: return "https://example.org/thread/" + std::to_string(rng.below(100000));
    case 1: return "&amp;";
    case 2: return "&#39;";
    case 3: return "caf\xC3\xA9";
    default: return "\xF0\x9F\x98\x8A";
  }
}

std::string corpus_text(Stratum s, Rng& rng, const SynthCorpusOptions& o) {
  if (rng.uniform01() < o.short_rate) return join(filler_words(rng, 1, 3));
  std::string text;
  const std::size_t paragraphs = 1 + rng.below(s == Stratum::RedditComment ? 2 : 3);
  for (std::size_t p = 0; p < paragraphs; ++p) {
    if (p > 0) text += rng.below(2) == 0 ? "\n" : "\n\n\n";
    const std::size_t sentences = 1 + rng.below(4);
    for (std::size_t k = 0; k < sentences; ++k) {
      if (k > 0) text += ' ';
      text += corpus_sentence(s, rng);
    }
  }
  if (rng.uniform01() < o.noise_rate) {
    const auto frag = noise_fragment(rng);
    const auto pos = text.find(' ', rng.below(text.size()));
    if (pos == std::string::npos) {
      text += " " + frag;
    } else {
      text.insert(pos, " " + frag);
    }
  }
  return text;
}

void check_size(std::size_t n) {
  if (n < 10) throw ConfigError("synthetic task size must be >= 10 (got " + std::to_string(n) + ")");
}

std::vector<int> class_plan(std::size_t n, int k, double first_share, Rng& rng) {
  std::vector<int> labels;
  const bool uniform = first_share <= 0.0 || std::abs(first_share - 1.0 / k) < 1e-12;
  if (uniform) {
    for (std::size_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(i % static_cast<std::size_t>(k)));
  } else {
    const auto first = static_cast<std::size_t>(std::floor(first_share * static_cast<double>(n) + 0.5));
    for (std::size_t i = 0; i < n; ++i) {
      labels.push_back(i < first ? 0 : 1 + static_cast<int>((i - first) % static_cast<std::size_t>(k - 1)));
    }
  }
  rng.shuffle(std::span<int>(labels));
  return labels;
}

}  // namespace

const std::vector<DictionaryTerm>& ner_dictionary() { return kDictionary; }

const std::vector<std::vector<std::string>>& class_keywords(TaskKind kind) {
  switch (kind) {
    case TaskKind::Binary: return kBinaryKeywords;
    case TaskKind::Multiclass: return kStressorKeywords;
    case TaskKind::Multilabel: return kWellnessKeywords;
    case TaskKind::Ner: break;
  }
  throw ConfigError("ner tasks have no class keywords");
}

std::vector<RawDocument> synth_corpus(const SynthCorpusOptions& options) {
  Rng rng(options.seed);
  std::vector<RawDocument> docs;
  for (Stratum s : kAllStrata) {
    for (std::size_t i = 0; i < options.documents[static_cast<std::size_t>(s)]; ++i) {
      docs.push_back({std::string(stratum_name(s)) + "-" + std::to_string(i), s, corpus_text(s, rng, options)});
    }
  }
  return docs;
}

std::filesystem::path write_synth_corpus(const std::filesystem::path& dir, const SynthCorpusOptions& options) {
  std::filesystem::create_directories(dir);
  const auto docs = synth_corpus(options);
  Rng rng(options.seed ^ 0x5bd1e995ULL);
  ojson manifest = ojson::object();
  for (Stratum s : kAllStrata) {
    const std::string file = std::string(stratum_name(s)) + ".jsonl";
    std::string text;
    for (const auto& d : docs) {
      if (d.source != s) continue;
      if (rng.uniform01() < options.malformed_rate) {
        text += "{\"id\": \"" + d.id + "\", \"text\": \n";
        continue;
      }
      text += ojson{{"id", d.id}, {"text", d.text}}.dump() + "\n";
    }
    write_text(dir / file, text);
    manifest[file] = std::string(stratum_name(s));
  }
  const auto path = dir / "manifest.json";
  write_text(path, manifest.dump(2) + "\n");
  return path;
}

std::vector<TaskRecord> synth_task(const SynthTaskOptions& options) {
  check_size(options.size);
  Rng rng(options.seed);
  const std::size_t n = options.size;
  std::vector<TaskRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].id = std::string(task_kind_name(options.kind)) + "-" + std::to_string(i);

  switch (options.kind) {
    case TaskKind::Binary: {
      if (!(options.imbalance > 0.0 && options.imbalance < 1.0)) throw ConfigError("binary imbalance must lie in (0, 1)");
      const auto pos = static_cast<std::size_t>(std::floor(options.imbalance * static_cast<double>(n) + 0.5));
      std::vector<int> labels(n, 0);
      std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(pos), 1);
      rng.shuffle(std::span<int>(labels));
      for (std::size_t i = 0; i < n; ++i) {
        auto words = filler_words(rng, 8, 20);
        if (labels[i] == 1) {
          const std::size_t hits = 1 + rng.below(2);
          for (std::size_t h = 0; h < hits; ++h) insert_at_random(words, pick(kBinaryKeywords[1], rng), rng);
        }
        out[i].text = join(words);
        out[i].label = labels[i];
      }
      break;
    }
    case TaskKind::Multiclass: {
      const int k = options.classes > 0 ? options.classes : 9;
      if (k < 2 || k > static_cast<int>(kStressorKeywords.size())) {
        throw ConfigError("multiclass synthetic tasks support 2.." + std::to_string(kStressorKeywords.size()) + " classes");
      }
      const auto labels = class_plan(n, k, options.first_class_share, rng);
      for (std::size_t i = 0; i < n; ++i) {
        auto words = filler_words(rng, 8, 20);
        const std::size_t hits = 1 + rng.below(2);
        for (std::size_t h = 0; h < hits; ++h) {
          insert_at_random(words, pick(kStressorKeywords[static_cast<std::size_t>(labels[i])], rng), rng);
        }
        out[i].text = join(words);
        out[i].label = labels[i];
      }
      break;
    }
    case TaskKind::Multilabel: {
      const int k = options.classes > 0 ? options.classes : 6;
      if (k < 1 || k > static_cast<int>(kWellnessKeywords.size())) {
        throw ConfigError("multilabel synthetic tasks support 1.." + std::to_string(kWellnessKeywords.size()) + " labels");
      }
      if (!(options.imbalance > 0.0 && options.imbalance < 1.0)) throw ConfigError("multilabel imbalance must lie in (0, 1)");
      for (std::size_t i = 0; i < n; ++i) {
        auto words = filler_words(rng, 8, 20);
        out[i].labels.assign(static_cast<std::size_t>(k), 0);
        for (int c = 0; c < k; ++c) {
          const double p = c == 0 ? 0.5 : options.imbalance;
          if (rng.uniform01() < p) {
            out[i].labels[static_cast<std::size_t>(c)] = 1;
            insert_at_random(words, pick(kWellnessKeywords[static_cast<std::size_t>(c)], rng), rng);
          }
        }
        out[i].text = join(words);
      }
      break;
    }
    case TaskKind::Ner: {
      for (std::size_t i = 0; i < n; ++i) {
        auto words = filler_words(rng, 6, 16);
        const std::size_t terms = rng.below(4);
        for (std::size_t t = 0; t < terms; ++t) {
          const auto term = rng.below(kDictionary.size());
          const auto pos = rng.below(words.size() + 1);
          words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), "\x01" + std::to_string(term));
        }
        std::string text;
        for (const auto& w : words) {
          if (!text.empty()) text += ' ';
          if (!w.empty() && w[0] == '\x01') {
            const auto& term = kDictionary[std::stoul(w.substr(1))];
            out[i].spans.push_back({text.size(), text.size() + term.text.size(), term.type});
            text += term.text;
          } else {
            text += w;
          }
        }
        out[i].text = std::move(text);
      }
      break;
    }
  }
  return out;
}

}  // namespace mhgpt
