#include "mhgpt/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <set>

#include "json_util.hpp"
#include "mhgpt/checkpoint.hpp"
#include "mhgpt/chunker.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/io.hpp"
#include "mhgpt/rng.hpp"
#include "mhgpt/synth.hpp"

namespace mhgpt {

using detail::ojson;
namespace fs = std::filesystem;

// --- config -----------------------------------------------------------------

namespace {

struct Field {
  const char* key;
  std::function<ojson(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const ojson&)> set;
};

struct Section {
  const char* name;
  std::vector<Field> fields;
};

#define MHGPT_FIELD(key, member)                                                     \
  Field {                                                                            \
    key, [](const PipelineConfig& c) { return ojson(c.member); },                     \
        [](PipelineConfig& c, const ojson& v) { v.get_to(c.member); }                \
  }

std::string unicode_policy_name(UnicodePolicy p) {
  return p == UnicodePolicy::StripNonAscii ? "strip_non_ascii" : "strip_escapes";
}

const std::vector<Section>& schema() {
  static const std::vector<Section> s = {
      {"corpus",
       {Field{"unicode_policy", [](const PipelineConfig& c) { return ojson(unicode_policy_name(c.corpus.clean.unicode)); },
              [](PipelineConfig& c, const ojson& v) {
                const auto name = v.get<std::string>();
                if (name == "strip_non_ascii") {
                  c.corpus.clean.unicode = UnicodePolicy::StripNonAscii;
                } else if (name == "strip_escapes") {
                  c.corpus.clean.unicode = UnicodePolicy::StripEscapes;
                } else {
                  throw ConfigError("expected strip_non_ascii or strip_escapes");
                }
              }},
        MHGPT_FIELD("min_words", corpus.clean.min_words)}},
      {"chunker",
       {MHGPT_FIELD("truncate_len", chunker.truncate_len), MHGPT_FIELD("window", chunker.window),
        MHGPT_FIELD("step", chunker.step), MHGPT_FIELD("sample_fraction", chunker.sample_fraction),
        MHGPT_FIELD("seed", chunker.seed)}},
      {"tokenizer",
       {MHGPT_FIELD("vocab_size", tokenizer.bpe.vocab_size), MHGPT_FIELD("min_frequency", tokenizer.bpe.min_frequency)}},
      {"model",
       {MHGPT_FIELD("n_layers", model.n_layers), MHGPT_FIELD("d_model", model.d_model), MHGPT_FIELD("d_ff", model.d_ff),
        MHGPT_FIELD("n_heads", model.n_heads), MHGPT_FIELD("vocab_size", model.vocab_size),
        MHGPT_FIELD("max_seq_len", model.max_seq_len), MHGPT_FIELD("rotary_pct", model.rotary_pct),
        MHGPT_FIELD("rope_base", model.rope_base), MHGPT_FIELD("tie_embeddings", model.tie_embeddings),
        MHGPT_FIELD("parallel_residual", model.parallel_residual), MHGPT_FIELD("layer_norm_eps", model.layer_norm_eps),
        MHGPT_FIELD("init_std", model.init_std)}},
      {"train",
       {MHGPT_FIELD("warmup_steps", train.train.warmup_steps), MHGPT_FIELD("max_lr", train.train.max_lr),
        MHGPT_FIELD("weight_decay", train.train.weight_decay), MHGPT_FIELD("epochs", train.train.epochs),
        MHGPT_FIELD("batch_size", train.train.batch_size), MHGPT_FIELD("seed", train.train.seed),
        Field{"decay",
              [](const PipelineConfig& c) { return ojson(c.train.train.decay == LrDecay::Cosine ? "cosine" : "constant"); },
              [](PipelineConfig& c, const ojson& v) {
                const auto name = v.get<std::string>();
                if (name == "constant") {
                  c.train.train.decay = LrDecay::Constant;
                } else if (name == "cosine") {
                  c.train.train.decay = LrDecay::Cosine;
                } else {
                  throw ConfigError("expected constant or cosine");
                }
              }},
        MHGPT_FIELD("min_lr_ratio", train.train.min_lr_ratio), MHGPT_FIELD("beta1", train.train.beta1),
        MHGPT_FIELD("beta2", train.train.beta2), MHGPT_FIELD("eps", train.train.eps),
        MHGPT_FIELD("clip_norm", train.train.clip_norm), MHGPT_FIELD("early_stop_patience", train.train.early_stop_patience),
        MHGPT_FIELD("max_steps", train.train.max_steps), MHGPT_FIELD("val_fraction", train.val_fraction)}},
      {"adapt",
       {MHGPT_FIELD("lora_rank", adapt.finetune.lora.rank), MHGPT_FIELD("lora_alpha", adapt.finetune.lora.alpha),
        MHGPT_FIELD("lora_dropout", adapt.finetune.lora.dropout),
        Field{"lora_targets",
              [](const PipelineConfig& c) {
                ojson arr = ojson::array();
                for (LoraTarget t : kAllLoraTargets) {
                  if (c.adapt.finetune.lora.targets[static_cast<std::size_t>(t)]) arr.push_back(std::string(lora_target_name(t)));
                }
                return arr;
              },
              [](PipelineConfig& c, const ojson& v) {
                std::array<bool, 4> on{};
                for (const auto& name : v) {
                  bool found = false;
                  for (LoraTarget t : kAllLoraTargets) {
                    if (lora_target_name(t) == name.get<std::string>()) on[static_cast<std::size_t>(t)] = found = true;
                  }
                  if (!found) throw ConfigError("unknown target " + name.dump());
                }
                c.adapt.finetune.lora.targets = on;
              }},
        MHGPT_FIELD("neftune_alpha", adapt.finetune.neftune.noise_alpha),
        MHGPT_FIELD("quantize", adapt.finetune.quantize), MHGPT_FIELD("quant_block", adapt.finetune.quant_block),
        MHGPT_FIELD("lr", adapt.finetune.lr), MHGPT_FIELD("warmup_steps", adapt.finetune.warmup_steps),
        MHGPT_FIELD("epochs", adapt.finetune.epochs), MHGPT_FIELD("batch_size", adapt.finetune.batch_size),
        MHGPT_FIELD("weight_decay", adapt.finetune.weight_decay), MHGPT_FIELD("clip_norm", adapt.finetune.clip_norm),
        MHGPT_FIELD("early_stop_patience", adapt.finetune.early_stop_patience),
        MHGPT_FIELD("seed", adapt.finetune.seed), MHGPT_FIELD("max_len", adapt.finetune.max_len),
        MHGPT_FIELD("val_fraction", adapt.val_fraction)}},
      {"eval",
       {MHGPT_FIELD("batch_size", eval.batch_size), MHGPT_FIELD("grad_check_samples", eval.grad_check_samples),
        MHGPT_FIELD("grad_check_eps", eval.grad_check_eps),
        MHGPT_FIELD("grad_check_tolerance", eval.grad_check_tolerance)}},
  };
  return s;
}

#undef MHGPT_FIELD

ojson config_object(const PipelineConfig& cfg) {
  ojson j = ojson::object();
  for (const auto& sec : schema()) {
    ojson s = ojson::object();
    for (const auto& f : sec.fields) s[f.key] = f.get(cfg);
    j[sec.name] = std::move(s);
  }
  return j;
}

}  // namespace

std::string PipelineConfig::to_json() const { return config_object(*this).dump(2) + "\n"; }

std::string config_reference() {
  const PipelineConfig defaults;
  std::string out;
  for (const auto& sec : schema()) {
    for (const auto& f : sec.fields) out += std::string(sec.name) + "." + f.key + " = " + f.get(defaults).dump() + "\n";
  }
  return out;
}

PipelineConfig PipelineConfig::parse(std::string_view json, const std::vector<std::string>& overrides) {
  ojson doc = ojson::object();
  if (json.find_first_not_of(" \t\r\n") != std::string_view::npos) {
    doc = ojson::parse(json, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) throw ConfigError("config file must be a JSON object");
  }
  std::vector<std::string> problems;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      problems.push_back("override '" + o + "' is not of the form section.key=value");
      continue;
    }
    const std::string section = o.substr(0, dot), key = o.substr(dot + 1, eq - dot - 1), raw = o.substr(eq + 1);
    ojson value = ojson::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    if (!doc.contains(section) || !doc[section].is_object()) doc[section] = ojson::object();
    doc[section][key] = std::move(value);
  }

  PipelineConfig cfg;
  for (const auto& [name, body] : doc.items()) {
    const auto sec = std::find_if(schema().begin(), schema().end(), [&](const Section& s) { return name == s.name; });
    if (sec == schema().end()) {
      problems.push_back(name + ": unknown section");
      continue;
    }
    if (!body.is_object()) {
      problems.push_back(name + ": must be an object");
      continue;
    }
    for (const auto& [key, value] : body.items()) {
      const auto f = std::find_if(sec->fields.begin(), sec->fields.end(), [&](const Field& x) { return key == x.key; });
      if (f == sec->fields.end()) {
        problems.push_back(name + "." + key + ": unknown key");
        continue;
      }
      try {
        f->set(cfg, value);
      } catch (const ojson::exception&) {
        problems.push_back(name + "." + key + ": wrong type (default is " + f->get(PipelineConfig{}).dump() + ")");
      } catch (const ConfigError& e) {
        problems.push_back(name + "." + key + ": " + e.what());
      }
    }
  }
  detail::throw_if_problems("invalid configuration:", problems);
  cfg.validate();
  return cfg;
}

PipelineConfig PipelineConfig::load(const fs::path& path, const std::vector<std::string>& overrides) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse(text, overrides);
}

void PipelineConfig::validate() const {
  std::vector<std::string> problems;
  auto collect = [&](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      problems.push_back(e.what());
    }
  };
  collect([&] { model.validate(); });
  collect([&] { train.train.validate(); });
  collect([&] { adapt.finetune.validate(); });
  if (corpus.clean.min_words < 0) problems.push_back("corpus.min_words must be >= 0");
  if (chunker.truncate_len < 1) problems.push_back("chunker.truncate_len must be >= 1");
  if (chunker.window < 1) problems.push_back("chunker.window must be >= 1");
  if (chunker.step < 1) problems.push_back("chunker.step must be >= 1");
  if (!(chunker.sample_fraction > 0.0 && chunker.sample_fraction <= 1.0)) {
    problems.push_back("chunker.sample_fraction must lie in (0, 1]");
  }
  if (tokenizer.bpe.vocab_size < kBaseVocabularySize) {
    problems.push_back("tokenizer.vocab_size must be >= " + std::to_string(kBaseVocabularySize));
  }
  if (tokenizer.bpe.min_frequency < 1) problems.push_back("tokenizer.min_frequency must be >= 1");
  if (!(train.val_fraction >= 0.0 && train.val_fraction < 1.0)) problems.push_back("train.val_fraction must lie in [0, 1)");
  if (!(adapt.val_fraction > 0.0 && adapt.val_fraction < 1.0)) problems.push_back("adapt.val_fraction must lie in (0, 1)");
  if (eval.batch_size < 1) problems.push_back("eval.batch_size must be >= 1");
  if (eval.grad_check_samples < 1) problems.push_back("eval.grad_check_samples must be >= 1");
  if (!(eval.grad_check_eps > 0.0)) problems.push_back("eval.grad_check_eps must be > 0");
  if (!(eval.grad_check_tolerance > 0.0)) problems.push_back("eval.grad_check_tolerance must be > 0");
  detail::throw_if_problems("invalid configuration:", problems);
}

// --- runs -------------------------------------------------------------------

std::string RunResult::artifacts_json() const {
  ojson j = ojson::object();
  for (const auto& [name, path] : artifacts) j[name] = path.string();
  return j.dump();
}

namespace {

const std::set<std::string> kPathArgs = {"manifest", "input", "tokenizer", "chunks", "init", "base", "adapter", "data"};

class RunContext {
 public:
  explicit RunContext(const RunRequest& req) : req_(req) {}

  const std::string& arg(const std::string& name) const {
    const auto it = req_.args.find(name);
    if (it == req_.args.end() || it->second.empty()) {
      throw ConfigError(req_.command + " needs --" + name);
    }
    return it->second;
  }
  std::string arg_or(const std::string& name, const std::string& fallback) const {
    const auto it = req_.args.find(name);
    return it == req_.args.end() || it->second.empty() ? fallback : it->second;
  }
  bool has(const std::string& name) const {
    const auto it = req_.args.find(name);
    return it != req_.args.end() && !it->second.empty();
  }
  long long int_arg(const std::string& name, long long fallback) const {
    if (!has(name)) return fallback;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(arg(name), &used);
      if (used != arg(name).size()) throw std::invalid_argument(name);
      return v;
    } catch (const std::logic_error&) {
      throw ConfigError("--" + name + " expects an integer, got '" + arg(name) + "'");
    }
  }
  double real_arg(const std::string& name, double fallback) const {
    if (!has(name)) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(arg(name), &used);
      if (used != arg(name).size()) throw std::invalid_argument(name);
      return v;
    } catch (const std::logic_error&) {
      throw ConfigError("--" + name + " expects a number, got '" + arg(name) + "'");
    }
  }

  /// Path argument registered as an input; digests are taken now.
  fs::path input(const std::string& name) {
    fs::path p = arg(name);
    if (!fs::exists(p)) throw DataError("--" + name + " " + p.string() + " does not exist");
    inputs_[name] = {p.string(), digest(p)};
    return p;
  }
  void extra_input(const std::string& name, const fs::path& p) { inputs_[name] = {p.string(), digest(p)}; }

  fs::path out(const std::string& rel) const { return req_.out_dir / rel; }
  void artifact(const std::string& name, const std::string& rel) { result.artifacts[name] = req_.out_dir / rel; }
  void timing(const std::string& key, double seconds) { timing_[key] = seconds; }

  const PipelineConfig& cfg() const { return req_.config; }
  const RunRequest& request() const { return req_; }

  ojson inputs_json() const {
    ojson j = ojson::object();
    for (const auto& [name, entry] : inputs_) j[name] = {{"path", entry.first}, {"sha256", entry.second}};
    return j;
  }
  const ojson& timing_json() const { return timing_; }

  static std::string digest(const fs::path& p) {
    if (!fs::is_directory(p)) return sha256_file(p);
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::string listing;
    for (const auto& f : files) listing += fs::relative(f, p).generic_string() + " " + sha256_file(f) + "\n";
    return sha256_hex(listing);
  }

  RunResult result;

 private:
  const RunRequest& req_;
  std::map<std::string, std::pair<std::string, std::string>> inputs_;
  ojson timing_ = ojson::object();
};

std::string dump_line(const ojson& j) { return j.dump(2) + "\n"; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void cmd_synth_data(RunContext& ctx) {
  const std::string task = ctx.arg("task");
  const auto n = ctx.int_arg("n", 500);
  if (n < 0) throw ConfigError("--n must be >= 0");
  const auto seed = static_cast<std::uint64_t>(ctx.int_arg("seed", 0));
  if (task == "corpus") {
    SynthCorpusOptions o;
    o.documents = {static_cast<std::size_t>(n), static_cast<std::size_t>(n), static_cast<std::size_t>(n)};
    o.seed = seed;
    write_synth_corpus(ctx.out("corpus"), o);
    ctx.artifact("corpus_manifest", "corpus/manifest.json");
    return;
  }
  SynthTaskOptions o;
  o.kind = parse_task_kind(task);
  o.size = static_cast<std::size_t>(n);
  o.seed = seed;
  o.imbalance = ctx.real_arg("imbalance", 0.5);
  o.classes = static_cast<int>(ctx.int_arg("classes", 0));
  o.first_class_share = ctx.real_arg("first-class-share", 0.0);
  const auto records = synth_task(o);
  save_task_records(ctx.out(task + ".jsonl"), records, o.kind);
  ctx.artifact("dataset", task + ".jsonl");
}

void cmd_clean(RunContext& ctx) {
  const auto manifest = ctx.input("manifest");
  const auto files = load_manifest(manifest);
  for (std::size_t i = 0; i < files.size(); ++i) ctx.extra_input("manifest[" + std::to_string(i) + "]", files[i].path);
  const auto result = ingest(files, ctx.cfg().corpus.clean);
  save_documents(ctx.out("clean.jsonl"), result.documents);
  write_text(ctx.out("clean_stats.json"), result.stats.to_json() + "\n");
  ctx.artifact("documents", "clean.jsonl");
  ctx.artifact("stats", "clean_stats.json");
}

void cmd_train_tokenizer(RunContext& ctx) {
  const auto docs = load_documents(ctx.input("input"));
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train_bpe(docs, ctx.cfg().tokenizer.bpe);
  ctx.timing("train_seconds", seconds_since(t0));
  result.vocabulary.save(ctx.out("tokenizer"));
  ojson info = {{"vocab_size", result.vocabulary.size()},
                {"merges", result.vocabulary.merges().size()},
                {"reached_target", result.reached_target}};
  if (!result.reached_target) {
    info["warning"] = result.warning;
    std::cerr << "warning: " << result.warning << "\n";
  }
  write_text(ctx.out("tokenizer_info.json"), dump_line(info));
  ctx.artifact("tokenizer", "tokenizer");
  ctx.artifact("info", "tokenizer_info.json");
}

void cmd_chunk(RunContext& ctx) {
  const auto docs = load_documents(ctx.input("input"));
  const auto vocab = BpeVocabulary::load(ctx.input("tokenizer"));
  const auto& c = ctx.cfg().chunker;
  std::vector<TokenChunk> truncated, windows;
  for (const auto& d : docs) {
    const auto ids = vocab.encode(d.text);
    truncated.push_back({truncate_row(ids, static_cast<std::size_t>(c.truncate_len)), d.source, d.id, 0});
    auto w = sliding_chunks(ids, static_cast<std::size_t>(c.window), static_cast<std::size_t>(c.step), d.source, d.id);
    windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  const auto available = count_strata(windows);
  const auto plan = make_sample_plan(available, c.sample_fraction, c.seed);
  const auto sample = stratified_sample(windows, plan);
  save_chunks(ctx.out("dataset_a.jsonl"), truncated);
  save_chunks(ctx.out("dataset_b.jsonl"), sample);
  ojson stats = ojson::object();
  for (Stratum s : kAllStrata) {
    const auto k = static_cast<std::size_t>(s);
    stats[std::string(stratum_name(s))] = {{"windows", available[k]}, {"sampled", plan.strata_targets[k]}};
  }
  write_text(ctx.out("chunk_stats.json"),
             dump_line({{"documents", docs.size()}, {"fraction", c.sample_fraction}, {"strata", stats}}));
  ctx.artifact("dataset_a", "dataset_a.jsonl");
  ctx.artifact("dataset_b", "dataset_b.jsonl");
  ctx.artifact("stats", "chunk_stats.json");
}

void cmd_pretrain(RunContext& ctx) {
  const auto chunks = load_chunks(ctx.input("chunks"));
  const auto vocab = BpeVocabulary::load(ctx.input("tokenizer"));
  ModelConfig mcfg = ctx.cfg().model;
  mcfg.vocab_size = static_cast<int>(vocab.size());
  Parameters<float> params;
  if (ctx.has("init")) {
    auto ck = load_checkpoint(ctx.input("init"));
    if (!(ck.config == mcfg)) throw ConfigError("--init checkpoint config differs from the configured model");
    params = std::move(ck.params);
  } else {
    mcfg.validate();
    params = init_parameters(mcfg, ctx.cfg().train.train.seed);
  }
  std::vector<TokenSequence> rows;
  for (const auto& c : chunks) {
    if (c.tokens.size() < 2) continue;
    rows.push_back(truncate_row(c.tokens, static_cast<std::size_t>(mcfg.max_seq_len)));
  }
  if (rows.empty()) throw DataError("no chunk has at least two tokens");
  const auto [train_idx, val_idx] = split_indices(rows.size(), ctx.cfg().train.val_fraction, ctx.cfg().train.train.seed);
  std::vector<TokenSequence> train, val;
  for (auto i : train_idx) train.push_back(rows[i]);
  for (auto i : val_idx) val.push_back(rows[i]);

  PretrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& e, const Parameters<float>& p) {
    save_checkpoint(ctx.out("checkpoints/epoch-" + std::to_string(e.epoch)), mcfg, p);
  };
  const auto log = pretrain(params, mcfg, train, val, ctx.cfg().train.train, vocab.specials().pad, hooks,
                            ctx.request().threads);
  ctx.timing("train_seconds", log.wall_seconds);
  save_checkpoint(ctx.out("checkpoint"), mcfg, params);
  write_text(ctx.out("train_log.csv"), log.steps_csv());
  write_text(ctx.out("epochs.json"), log.epochs_json());
  const double final_val = log.epochs.empty() ? 0.0 : log.epochs.back().validation_loss;
  write_text(ctx.out("summary.json"),
             dump_line({{"train_sequences", train.size()},
                        {"validation_sequences", val.size()},
                        {"steps", log.steps.size()},
                        {"final_validation_loss", final_val},
                        {"ln_vocab", std::log(static_cast<double>(mcfg.vocab_size))},
                        {"best_epoch", log.best_epoch},
                        {"parameters", count_parameters(mcfg)}}));
  ctx.artifact("checkpoint", "checkpoint");
  ctx.artifact("train_log", "train_log.csv");
  ctx.artifact("epochs", "epochs.json");
  ctx.artifact("summary", "summary.json");
}

std::vector<TaskExample> load_examples(RunContext& ctx, TaskKind kind, const BpeVocabulary& vocab, const TaskSpec* spec,
                                       TaskSpec& spec_out, int max_len) {
  const auto records = load_task_records(ctx.input("data"), kind);
  if (records.empty()) throw DataError("task dataset " + ctx.arg("data") + " is empty");
  spec_out = spec ? *spec : infer_task_spec(kind, records, static_cast<int>(ctx.int_arg("classes", 2)));
  return encode_task(records, spec_out, vocab, max_len);
}

void write_report(RunContext& ctx, const EvalReport& report, const std::string& task, const std::string& split) {
  write_text(ctx.out("report.json"), report.to_json() + "\n");
  write_text(ctx.out("report.txt"), report.to_table());
  write_text(ctx.out("run_info.json"),
             dump_line({{"task", task}, {"dataset", fs::path(ctx.arg("data")).stem().string()}, {"split", split}}));
  ctx.artifact("report", "report.json");
  ctx.artifact("table", "report.txt");
}

void cmd_finetune(RunContext& ctx) {
  const auto ck = load_checkpoint(ctx.input("base"));
  const auto vocab = BpeVocabulary::load(ctx.input("tokenizer"));
  if (static_cast<int>(vocab.size()) > ck.config.vocab_size) throw DataError("tokenizer is larger than the model vocabulary");
  const auto kind = parse_task_kind(ctx.arg("task"));
  const auto& fc = ctx.cfg().adapt.finetune;
  TaskSpec spec;
  const auto examples = load_examples(ctx, kind, vocab, nullptr, spec, std::min(fc.max_len, ck.config.max_seq_len));
  const auto [train_idx, val_idx] = split_indices(examples.size(), ctx.cfg().adapt.val_fraction, fc.seed);
  std::vector<TaskExample> train, val;
  for (auto i : train_idx) train.push_back(examples[i]);
  for (auto i : val_idx) val.push_back(examples[i]);

  const auto result = finetune(ck.params, ck.config, spec, train, val, fc, vocab.specials().pad);
  ctx.timing("train_seconds", result.wall_seconds);
  save_adapter_checkpoint(ctx.out("adapter"),
                          {ck.config, fc.lora, spec, fc.quantize, fc.quant_block, result.adapters, result.head});
  write_text(ctx.out("finetune_log.json"), result.log_json() + "\n");
  write_report(ctx, result.best_report, ctx.arg("task"), "validation");
  ctx.artifact("adapter", "adapter");
  ctx.artifact("log", "finetune_log.json");
}

void cmd_evaluate(RunContext& ctx) {
  const auto base = load_checkpoint(ctx.input("base"));
  const auto adapter = load_adapter_checkpoint(ctx.input("adapter"));
  if (!(adapter.model == base.config)) throw ConfigError("adapter was trained for a different model config");
  const auto vocab = BpeVocabulary::load(ctx.input("tokenizer"));
  TaskSpec spec;
  const auto examples = load_examples(ctx, adapter.spec.kind, vocab, &adapter.spec, spec,
                                      std::min(ctx.cfg().adapt.finetune.max_len, base.config.max_seq_len));
  FinetuneConfig fc;
  fc.quantize = adapter.quantized;
  fc.quant_block = adapter.quant_block;
  const auto frozen = effective_base(base.params, fc);
  const auto report = evaluate_task(frozen, base.config, adapter.adapters, adapter.head, spec, examples,
                                    ctx.cfg().eval.batch_size, vocab.specials().pad);
  write_report(ctx, report, std::string(task_kind_name(spec.kind)), "evaluation");
}

void cmd_report(RunContext& ctx) {
  const std::string runs = ctx.arg("runs");
  ojson rows = ojson::array();
  std::string table = "| Task | Dataset | F1 |\n|---|---|---|\n";
  std::size_t start = 0;
  int index = 0;
  while (start <= runs.size()) {
    const auto comma = runs.find(',', start);
    const fs::path dir = runs.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    start = comma == std::string::npos ? runs.size() + 1 : comma + 1;
    if (dir.empty()) continue;
    const auto info = ojson::parse(read_text(dir / "run_info.json"), nullptr, false);
    if (info.is_discarded()) throw DataError(dir.string() + "/run_info.json is not valid JSON");
    ctx.extra_input("runs[" + std::to_string(index++) + "]", dir / "report.json");
    const auto report = EvalReport::from_json(read_text(dir / "report.json"));
    char f1[32];
    std::snprintf(f1, sizeof f1, "%.2f", report.weighted_f1 * 100.0);
    const std::string task = info.value("task", report.task), dataset = info.value("dataset", std::string("?"));
    table += "| " + task + " | " + dataset + " | " + f1 + " |\n";
    ojson row = {{"task", task}, {"dataset", dataset}, {"f1", report.weighted_f1}};
    if (report.positive_f1) row["positive_f1"] = *report.positive_f1;
    if (report.span_scores) row["span_f1"] = report.span_scores->f1;
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ConfigError("report needs at least one run directory in --runs");
  write_text(ctx.out("report.md"), table);
  write_text(ctx.out("report.json"), dump_line(rows));
  ctx.artifact("table", "report.md");
  ctx.artifact("rows", "report.json");
}

void cmd_grad_check(RunContext& ctx) {
  const auto& e = ctx.cfg().eval;
  const auto report = grad_check_suite(e.grad_check_samples, e.grad_check_eps,
                                       static_cast<std::uint64_t>(ctx.int_arg("seed", 0)));
  ojson j = ojson::parse(report.to_json());
  j["tolerance"] = e.grad_check_tolerance;
  j["passed"] = report.max_rel_error < e.grad_check_tolerance;
  write_text(ctx.out("grad_check.json"), dump_line(j));
  ctx.artifact("report", "grad_check.json");
  if (!(report.max_rel_error < e.grad_check_tolerance)) ctx.result.status = static_cast<int>(ErrorKind::Numerical);
}

std::map<std::string, std::string> hash_outputs(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json" || rel == "timing.json") continue;
    out[rel] = sha256_file(e.path());
  }
  return out;
}

RunRequest normalized(const RunRequest& req) {
  RunRequest r = req;
  for (auto& [name, value] : r.args) {
    if (value.empty()) continue;
    if (kPathArgs.contains(name)) value = fs::absolute(value).lexically_normal().string();
    if (name == "runs") {
      std::string joined;
      std::size_t start = 0;
      while (start <= value.size()) {
        const auto comma = value.find(',', start);
        const auto part = value.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        start = comma == std::string::npos ? value.size() + 1 : comma + 1;
        if (part.empty()) continue;
        if (!joined.empty()) joined += ',';
        joined += fs::absolute(part).lexically_normal().string();
      }
      value = joined;
    }
  }
  r.out_dir = fs::absolute(r.out_dir).lexically_normal();
  return r;
}

}  // namespace

RunResult run_command(const RunRequest& raw) {
  if (std::find(std::begin(kSubcommands), std::end(kSubcommands), raw.command) == std::end(kSubcommands)) {
    throw ConfigError("unknown subcommand '" + raw.command + "'");
  }
  if (raw.out_dir.empty()) throw ConfigError(raw.command + " needs an output directory (--out)");
  if (raw.threads < 1) throw ConfigError("--threads must be >= 1");
  raw.config.validate();
  const RunRequest req = normalized(raw);
  fs::create_directories(req.out_dir);
  RunContext ctx(req);
  ctx.result.out_dir = req.out_dir;
  const auto t0 = std::chrono::steady_clock::now();

  const std::string& c = req.command;
  if (c == "synth-data") cmd_synth_data(ctx);
  else if (c == "clean") cmd_clean(ctx);
  else if (c == "train-tokenizer") cmd_train_tokenizer(ctx);
  else if (c == "chunk") cmd_chunk(ctx);
  else if (c == "pretrain") cmd_pretrain(ctx);
  else if (c == "finetune") cmd_finetune(ctx);
  else if (c == "evaluate") cmd_evaluate(ctx);
  else if (c == "report") cmd_report(ctx);
  else if (c == "grad-check") cmd_grad_check(ctx);

  ctx.timing("total_seconds", seconds_since(t0));
  ojson args = ojson::object();
  for (const auto& [k, v] : req.args) args[k] = v;
  ojson outputs = ojson::object();
  for (const auto& [rel, digest] : hash_outputs(req.out_dir)) outputs[rel] = digest;
  ojson manifest = {{"tool", "mhgpt"},
                    {"version", std::string(kVersion)},
                    {"command", req.command},
                    {"args", std::move(args)},
                    {"threads", req.threads},
                    {"config", config_object(req.config)},
                    {"inputs", ctx.inputs_json()},
                    {"outputs", std::move(outputs)}};
  write_text(req.out_dir / "manifest.json", dump_line(manifest));
  write_text(req.out_dir / "timing.json", dump_line(ctx.timing_json()));
  ctx.artifact("manifest", "manifest.json");
  return ctx.result;
}

ReplayResult replay_run(const fs::path& run_dir, const fs::path& scratch_dir) {
  const auto manifest = ojson::parse(read_text(run_dir / "manifest.json"), nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object()) throw DataError(run_dir.string() + "/manifest.json is not valid JSON");
  RunRequest req;
  try {
    req.command = manifest.at("command").get<std::string>();
    for (const auto& [k, v] : manifest.at("args").items()) req.args[k] = v.get<std::string>();
    req.threads = manifest.at("threads").get<int>();
    req.config = PipelineConfig::parse(manifest.at("config").dump());
    for (const auto& [name, entry] : manifest.at("inputs").items()) {
      const fs::path p = entry.at("path").get<std::string>();
      if (!fs::exists(p) || RunContext::digest(p) != entry.at("sha256").get<std::string>()) {
        throw DataError("input " + name + " (" + p.string() + ") changed since the run");
      }
    }
  } catch (const ojson::exception& e) {
    throw DataError("malformed run manifest: " + std::string(e.what()));
  }
  if (fs::exists(scratch_dir)) fs::remove_all(scratch_dir);
  req.out_dir = scratch_dir;
  run_command(req);

  ReplayResult result;
  result.replay_dir = fs::absolute(scratch_dir);
  const auto fresh = hash_outputs(scratch_dir);
  std::map<std::string, std::string> recorded;
  for (const auto& [rel, digest] : manifest.at("outputs").items()) recorded[rel] = digest.get<std::string>();
  for (const auto& [rel, digest] : recorded) {
    const auto it = fresh.find(rel);
    if (it == fresh.end()) {
      result.mismatches.push_back(rel + ": missing in replay");
    } else if (it->second != digest) {
      result.mismatches.push_back(rel + ": digest differs");
    }
  }
  for (const auto& [rel, digest] : fresh) {
    if (!recorded.contains(rel)) result.mismatches.push_back(rel + ": not in the original run");
  }
  result.identical = result.mismatches.empty();
  return result;
}

// --- gradient check suite ---------------------------------------------------

GradCheckReport grad_check_suite(int samples, double eps, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.d_ff = 64;
  cfg.n_heads = 4;
  cfg.vocab_size = 40;
  cfg.max_seq_len = 16;
  cfg.init_std = 0.1;
  Rng rng(seed);
  auto params = init_parameters(cfg, rng.fork_seed()).cast<double>();

  const std::vector<TokenSequence> rows = {{5, 9, 3, 17, 22, 8}, {11, 4, 30}, {7, 7, 19, 25, 2}};
  const auto batch = TokenBatch::from_sequences(rows, 0);
  const int per_check = std::max(1, samples / 5);

  GradCheckReport merged = grad_check_lm(params, cfg, batch, eps, per_check, rng.fork_seed());
  LoraConfig lora;
  lora.rank = 4;
  lora.alpha = 8.0;
  const std::vector<std::string> types = {"X", "Y"};
  const TaskSpec specs[] = {TaskSpec::binary(), TaskSpec::multiclass(3), TaskSpec::multilabel(4), TaskSpec::ner(types)};
  for (const auto& spec : specs) {
    auto adapters = attach_lora(cfg, lora, rng.fork_seed()).cast<double>();
    // B starts at zero; perturb it so the A gradients are not identically 0.
    adapters.for_each([&](const std::string&, Matrix<double>& m, TensorKind kind) {
      if (kind == TensorKind::LoraB) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, 0.1);
      }
    });
    auto head = init_head(spec, cfg.d_model, rng.fork_seed(), 0.3).cast<double>();
    TaskLabels labels;
    switch (spec.kind) {
      case TaskKind::Binary: labels.classes = {1, 0, 1}; break;
      case TaskKind::Multiclass: labels.classes = {2, 0, 1}; break;
      case TaskKind::Multilabel: labels.multilabel = {1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 0}; break;
      case TaskKind::Ner:
        labels.tokens.assign(static_cast<std::size_t>(batch.rows()), -1);
        for (int r = 0; r < batch.rows(); ++r) {
          if (batch.mask[static_cast<std::size_t>(r)]) labels.tokens[static_cast<std::size_t>(r)] = r % spec.num_labels();
        }
        break;
    }
    auto rep = grad_check_task(params, cfg, adapters, head, spec, batch, labels, eps, per_check, rng.fork_seed());
    for (auto& s : rep.samples) {
      s.tensor = std::string(task_kind_name(spec.kind)) + "/" + s.tensor;
      merged.samples.push_back(std::move(s));
    }
    merged.max_rel_error = std::max(merged.max_rel_error, rep.max_rel_error);
  }
  return merged;
}

}  // namespace mhgpt
