// mhgpt command-line entry point: one binary, one subcommand per pipeline stage.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/io.hpp"
#include "mhgpt/pipeline.hpp"

namespace {

struct CommandOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::map<std::string, std::string> args;
};

struct OptionSpec {
  const char* name;
  const char* help;
};

const std::map<std::string, std::vector<OptionSpec>> kCommandOptions = {
    {"synth-data",
     {{"task", "binary | multiclass | multilabel | ner | corpus"},
      {"n", "rows (documents per stratum for corpus); default 500"},
      {"seed", "generator seed; default 0"},
      {"imbalance", "binary positive share or multilabel minority-label rate; default 0.5"},
      {"classes", "number of classes / labels (kind default when omitted)"},
      {"first-class-share", "multiclass share of class 0; uniform when omitted"}}},
    {"clean", {{"manifest", "JSON manifest mapping corpus files to strata"}}},
    {"train-tokenizer", {{"input", "cleaned documents (clean.jsonl)"}}},
    {"chunk", {{"input", "cleaned documents (clean.jsonl)"}, {"tokenizer", "tokenizer directory"}}},
    {"pretrain",
     {{"chunks", "chunk file (dataset_a.jsonl or dataset_b.jsonl)"},
      {"tokenizer", "tokenizer directory; sets model.vocab_size"},
      {"init", "optional checkpoint to continue from"}}},
    {"finetune",
     {{"base", "pretrained checkpoint directory"},
      {"tokenizer", "tokenizer directory"},
      {"task", "binary | multiclass | multilabel | ner"},
      {"data", "task dataset (JSON lines)"},
      {"classes", "minimum class count for multiclass data"}}},
    {"evaluate",
     {{"base", "pretrained checkpoint directory"},
      {"adapter", "adapter directory written by finetune"},
      {"tokenizer", "tokenizer directory"},
      {"data", "task dataset (JSON lines)"}}},
    {"report", {{"runs", "comma-separated finetune/evaluate run directories"}}},
    {"grad-check", {{"seed", "model and sampling seed; default 0"}}},
};

std::string config_help() {
  return "Config file: JSON object with sections corpus, chunker, tokenizer, model, train, adapt, eval.\n"
         "Precedence: defaults < --config file < --set section.key=value.\nKeys and defaults:\n" +
         mhgpt::config_reference();
}

int report_error(const mhgpt::Error& e) {
  std::cerr << "error: " << e.what() << "\n";
  return e.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mhgpt: corpus cleaning, tokenizer and model training, adapter fine-tuning and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mhgpt::kVersion));
  app.footer(config_help());
  int threads = 1;
  app.add_option("--threads", threads, "worker thread cap")->check(CLI::PositiveNumber);

  std::map<std::string, CommandOptions> options;
  for (const auto& name : mhgpt::kSubcommands) {
    const std::string cmd(name);
    auto* sub = app.add_subcommand(cmd);
    auto& o = options[cmd];
    sub->add_option("--config", o.config_path, "JSON config file");
    sub->add_option("--set", o.overrides, "override: section.key=value (repeatable)");
    sub->add_option("--out", o.out, "run directory")->required();
    for (const auto& spec : kCommandOptions.at(cmd)) sub->add_option(std::string("--") + spec.name, o.args[spec.name], spec.help);
  }
  std::string replay_run, replay_out;
  auto* replay = app.add_subcommand("replay", "re-execute a run from its manifest and compare output digests");
  replay->add_option("run", replay_run, "run directory")->required();
  replay->add_option("--out", replay_out, "scratch directory for the re-run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(mhgpt::ErrorKind::Config);
  }

  try {
    if (replay->parsed()) {
      const auto r = mhgpt::replay_run(replay_run, replay_out);
      for (const auto& m : r.mismatches) std::cerr << "mismatch: " << m << "\n";
      std::cout << (r.identical ? "identical" : "differs") << "\n";
      std::cout << "{\"replay\":\"" << r.replay_dir.string() << "\"}\n";
      return r.identical ? 0 : static_cast<int>(mhgpt::ErrorKind::Data);
    }
    for (const auto& name : mhgpt::kSubcommands) {
      const std::string cmd(name);
      if (!app.got_subcommand(cmd)) continue;
      auto& o = options[cmd];
      mhgpt::RunRequest req;
      req.command = cmd;
      req.config = o.config_path.empty() ? mhgpt::PipelineConfig::parse("", o.overrides)
                                         : mhgpt::PipelineConfig::load(o.config_path, o.overrides);
      for (const auto& [k, v] : o.args) {
        if (!v.empty()) req.args[k] = v;
      }
      req.out_dir = o.out;
      req.threads = threads;
      const auto result = mhgpt::run_command(req);
      if (cmd == "report") std::cout << mhgpt::read_text(result.artifacts.at("table"));
      if (cmd == "evaluate" || cmd == "finetune") std::cout << mhgpt::read_text(result.artifacts.at("table"));
      std::cout << result.artifacts_json() << "\n";
      return result.status;
    }
  } catch (const mhgpt::Error& e) {
    return report_error(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(mhgpt::ErrorKind::Data);
  }
  return 0;
}
