#include "mhgpt/task_data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "json_util.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/io.hpp"
#include "mhgpt/rng.hpp"

namespace mhgpt {

using detail::ojson;

std::string task_record_to_json(const TaskRecord& r, TaskKind kind) {
  ojson j;
  j["id"] = r.id;
  j["text"] = r.text;
  switch (kind) {
    case TaskKind::Binary:
    case TaskKind::Multiclass:
      j["label"] = r.label;
      break;
    case TaskKind::Multilabel: {
      ojson arr = ojson::array();
      for (auto v : r.labels) arr.push_back(static_cast<int>(v));
      j["label"] = std::move(arr);
      break;
    }
    case TaskKind::Ner: {
      ojson arr = ojson::array();
      for (const auto& s : r.spans) arr.push_back({{"start", s.begin}, {"end", s.end}, {"label", s.label}});
      j["spans"] = std::move(arr);
      break;
    }
  }
  return j.dump();
}

TaskRecord task_record_from_json(std::string_view line, TaskKind kind) {
  const ojson j = ojson::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw DataError("not a JSON object");
  TaskRecord r;
  try {
    r.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
    r.text = j.at("text").get<std::string>();
    switch (kind) {
      case TaskKind::Binary:
      case TaskKind::Multiclass:
        r.label = j.at("label").get<int>();
        break;
      case TaskKind::Multilabel:
        for (const auto& v : j.at("label")) {
          const int x = v.get<int>();
          if (x != 0 && x != 1) throw DataError("record " + r.id + ": multilabel entries must be 0 or 1");
          r.labels.push_back(static_cast<std::uint8_t>(x));
        }
        break;
      case TaskKind::Ner:
        for (const auto& s : j.at("spans")) {
          r.spans.push_back({s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>(),
                             s.at("label").get<std::string>()});
        }
        break;
    }
  } catch (const ojson::exception& e) {
    throw DataError("record " + r.id + ": " + e.what());
  }
  return r;
}

std::vector<TaskRecord> load_task_records(const std::filesystem::path& path, TaskKind kind) {
  std::vector<TaskRecord> out;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(task_record_from_json(line, kind));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_task_records(const std::filesystem::path& path, std::span<const TaskRecord> records, TaskKind kind) {
  std::string text;
  for (const auto& r : records) text += task_record_to_json(r, kind) + "\n";
  write_text(path, text);
}

TaskSpec infer_task_spec(TaskKind kind, std::span<const TaskRecord> records, int min_classes) {
  if (records.empty()) throw DataError("task dataset is empty");
  switch (kind) {
    case TaskKind::Binary:
      return TaskSpec::binary();
    case TaskKind::Multiclass: {
      int k = min_classes;
      for (const auto& r : records) k = std::max(k, r.label + 1);
      return TaskSpec::multiclass(k);
    }
    case TaskKind::Multilabel: {
      const auto k = records.front().labels.size();
      for (const auto& r : records) {
        if (r.labels.size() != k) throw DataError("record " + r.id + " has a different number of labels");
      }
      return TaskSpec::multilabel(static_cast<int>(k));
    }
    case TaskKind::Ner: {
      std::set<std::string> types;
      for (const auto& r : records) {
        for (const auto& s : r.spans) types.insert(s.label);
      }
      const std::vector<std::string> sorted(types.begin(), types.end());
      return TaskSpec::ner(sorted);
    }
  }
  return TaskSpec::binary();
}

std::vector<TaskExample> encode_task(std::span<const TaskRecord> records, const TaskSpec& spec,
                                     const BpeVocabulary& vocab, int max_len) {
  spec.validate();
  if (records.empty()) throw DataError("task dataset is empty");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  std::map<std::string, int> tag_ids;
  for (std::size_t i = 0; i < spec.labels.size(); ++i) tag_ids[spec.labels[i]] = static_cast<int>(i);
  const int k = spec.num_labels();
  std::vector<TaskExample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    TaskExample ex;
    ex.id = r.id;
    auto enc = vocab.encode_with_offsets(r.text);
    if (enc.ids.empty()) throw DataError("record " + r.id + " has no tokens");
    if (static_cast<int>(enc.ids.size()) > max_len) {
      enc.ids.resize(static_cast<std::size_t>(max_len));
      enc.offsets.resize(static_cast<std::size_t>(max_len));
    }
    ex.tokens = std::move(enc.ids);
    switch (spec.kind) {
      case TaskKind::Binary:
      case TaskKind::Multiclass:
        if (r.label < 0 || r.label >= k) {
          throw DataError("record " + r.id + ": label " + std::to_string(r.label) + " outside [0, " +
                          std::to_string(k) + ")");
        }
        ex.label = r.label;
        break;
      case TaskKind::Multilabel:
        if (static_cast<int>(r.labels.size()) != k) {
          throw DataError("record " + r.id + ": expected " + std::to_string(k) + " labels, got " +
                          std::to_string(r.labels.size()));
        }
        ex.labels = r.labels;
        break;
      case TaskKind::Ner: {
        std::vector<LabeledSpan> spans;
        for (const auto& s : r.spans) {
          try {
            spans.push_back({char_to_byte_offset(r.text, s.begin), char_to_byte_offset(r.text, s.end), s.label});
          } catch (const DataError&) {
            throw DataError("record " + r.id + ": span [" + std::to_string(s.begin) + ", " + std::to_string(s.end) +
                            ") '" + s.label + "' extends past the text length " +
                            std::to_string(utf8_length(r.text)));
          }
        }
        std::vector<std::string> tags;
        try {
          tags = align_spans(r.text.size(), spans, enc.offsets);
        } catch (const DataError& e) {
          throw DataError("record " + r.id + ": " + e.what());
        }
        for (const auto& t : tags) {
          const auto it = tag_ids.find(t);
          if (it == tag_ids.end()) throw DataError("record " + r.id + ": tag " + t + " is not in the task label set");
          ex.token_labels.push_back(it->second);
        }
        break;
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                            std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("validation fraction must lie in [0, 1)");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
  if (fraction > 0.0 && n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {std::move(train), std::move(val)};
}

}  // namespace mhgpt
