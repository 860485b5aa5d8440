#include "mhgpt/finetune.hpp"

#include <chrono>
#include <cmath>

#include "json_util.hpp"
#include "mhgpt/checkpoint.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/rng.hpp"

namespace mhgpt {

using detail::ojson;

void FinetuneConfig::validate() const {
  std::vector<std::string> problems;
  try {
    lora.validate();
  } catch (const ConfigError& e) {
    problems.push_back(e.what());
  }
  if (neftune.noise_alpha < 0.0) problems.push_back("adapt.neftune_alpha must be >= 0");
  if (quant_block < 1) problems.push_back("adapt.quant_block must be >= 1");
  if (!(lr > 0.0)) problems.push_back("adapt.lr must be > 0");
  if (warmup_steps < 1) problems.push_back("adapt.warmup_steps must be >= 1");
  if (epochs < 1) problems.push_back("adapt.epochs must be >= 1");
  if (batch_size < 1) problems.push_back("adapt.batch_size must be >= 1");
  if (weight_decay < 0.0) problems.push_back("adapt.weight_decay must be >= 0");
  if (early_stop_patience < 0) problems.push_back("adapt.early_stop_patience must be >= 0");
  if (max_len < 1) problems.push_back("adapt.max_len must be >= 1");
  detail::throw_if_problems("invalid fine-tuning config:", problems);
}

std::string FinetuneResult::log_json() const {
  ojson j;
  ojson ep = ojson::array();
  for (const auto& e : epochs) {
    ep.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"validation_weighted_f1", e.validation_f1}});
  }
  j["epochs"] = std::move(ep);
  j["best_epoch"] = best_epoch;
  j["early_stopped"] = early_stopped;
  j["trainable_parameters"] = trainable_parameters;
  return j.dump(2);
}

Parameters<float> effective_base(const Parameters<float>& base, const FinetuneConfig& cfg) {
  if (!cfg.quantize) return base;
  return dequantized_parameters(base, quantize_base(base, cfg.quant_block));
}

TokenBatch make_task_batch(std::span<const TaskExample> rows, TokenId pad_id) {
  std::vector<TokenSequence> seqs;
  seqs.reserve(rows.size());
  for (const auto& r : rows) seqs.push_back(r.tokens);
  return TokenBatch::from_sequences(seqs, pad_id);
}

TaskLabels make_task_labels(std::span<const TaskExample> rows, const TaskSpec& spec, const TokenBatch& batch) {
  TaskLabels labels;
  switch (spec.kind) {
    case TaskKind::Binary:
    case TaskKind::Multiclass:
      for (const auto& r : rows) labels.classes.push_back(r.label);
      break;
    case TaskKind::Multilabel:
      for (const auto& r : rows) labels.multilabel.insert(labels.multilabel.end(), r.labels.begin(), r.labels.end());
      break;
    case TaskKind::Ner:
      labels.tokens.assign(static_cast<std::size_t>(batch.rows()), -1);
      for (std::size_t b = 0; b < rows.size(); ++b) {
        const auto& tl = rows[b].token_labels;
        if (tl.size() != rows[b].tokens.size()) throw DataError("example " + rows[b].id + " has unaligned token labels");
        for (std::size_t t = 0; t < tl.size() && t < static_cast<std::size_t>(batch.seq); ++t) {
          labels.tokens[b * batch.seq + t] = tl[t];
        }
      }
      break;
  }
  return labels;
}

namespace {

template <class T>
std::vector<ParamSlot<T>> head_slots(TaskHead<T>& head, TaskHead<T>& grads) {
  std::vector<ParamSlot<T>> out;
  out.push_back({"head.weight", &head.weight, &grads.weight, TensorKind::HeadWeight});
  out.push_back({"head.bias", &head.bias, &grads.bias, TensorKind::HeadBias});
  return out;
}

}  // namespace

FinetuneResult finetune(const Parameters<float>& base, const ModelConfig& model_cfg, const TaskSpec& spec,
                        std::span<const TaskExample> train, std::span<const TaskExample> validation,
                        const FinetuneConfig& cfg, TokenId pad_id,
                        const std::function<void(const FinetuneEpoch&)>& on_epoch) {
  cfg.validate();
  spec.validate();
  if (train.empty()) throw DataError("fine-tuning training split is empty");
  if (validation.empty()) throw DataError("fine-tuning validation split is empty");
  const auto start = std::chrono::steady_clock::now();

  const Parameters<float> frozen = effective_base(base, cfg);
  AdapterSet<float> adapters = attach_lora(model_cfg, cfg.lora, cfg.seed);
  Rng seeds(cfg.seed);
  TaskHead<float> head = init_head(spec, model_cfg.d_model, seeds.fork_seed());

  TrainConfig schedule;
  schedule.warmup_steps = cfg.warmup_steps;
  schedule.max_lr = cfg.lr;
  schedule.decay = LrDecay::Constant;

  AdamW optimizer({0.9, 0.95, 1e-8, cfg.weight_decay});
  Rng order_rng(seeds.fork_seed());
  Rng noise_rng(seeds.fork_seed());

  FinetuneResult result;
  result.trainable_parameters = adapters.parameter_count() + head.parameter_count();
  result.adapters = adapters;
  result.head = head;
  double best_f1 = -1.0;
  int declines = 0;
  std::int64_t step = 0;
  std::vector<std::size_t> order(train.size());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      std::vector<TaskExample> rows;
      for (std::size_t k = begin; k < std::min(order.size(), begin + bs); ++k) rows.push_back(train[order[k]]);
      const auto batch = make_task_batch(rows, pad_id);
      const auto labels = make_task_labels(rows, spec, batch);

      ForwardOptions<float> opts;
      opts.adapters = &adapters;
      if (cfg.neftune.noise_alpha > 0.0) {
        opts.embedding_hook = [&](Matrix<float>& x) { neftune_noise(x, batch, cfg.neftune.noise_alpha, noise_rng, true); };
      }
      const auto cache = forward_hidden(frozen, model_cfg, batch, opts);
      auto adapter_grads = adapters.zeros_like();
      auto head_grads = head.zeros_like();
      const auto out = head_forward(cache.hidden, batch, spec, head, &labels, &head_grads);
      if (!std::isfinite(out.loss)) {
        throw NumericalError("non-finite fine-tuning loss at step " + std::to_string(step));
      }
      backward_hidden(frozen, model_cfg, batch, cache, out.d_hidden, static_cast<Parameters<float>*>(nullptr), &adapters, &adapter_grads);

      auto slots = param_slots(adapters, adapter_grads);
      for (auto& s : head_slots(head, head_grads)) slots.push_back(s);
      if (cfg.clip_norm > 0.0) clip_global_norm(slots, cfg.clip_norm);
      optimizer.step(slots, lr_schedule(step, schedule, 0));
      loss_sum += out.loss;
      ++batches;
      ++step;
    }

    const auto report = evaluate_task(frozen, model_cfg, adapters, head, spec, validation, cfg.batch_size, pad_id);
    const FinetuneEpoch rec{epoch, loss_sum / batches, report.weighted_f1};
    result.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (report.weighted_f1 > best_f1) {
      best_f1 = report.weighted_f1;
      result.best_epoch = epoch;
      result.best_report = report;
      result.adapters = adapters;
      result.head = head;
    }
    const auto& hist = result.epochs;
    declines = (hist.size() >= 2 && hist.back().validation_f1 < hist[hist.size() - 2].validation_f1) ? declines + 1 : 0;
    if (cfg.early_stop_patience > 0 && declines >= cfg.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
  }
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

Predictions predict(const Parameters<float>& base, const ModelConfig& model_cfg, const AdapterSet<float>& adapters,
                    const TaskHead<float>& head, const TaskSpec& spec, std::span<const TaskExample> examples,
                    int batch_size, TokenId pad_id) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  Predictions all;
  ForwardOptions<float> opts;
  opts.adapters = adapters.layers.empty() ? nullptr : &adapters;
  opts.keep_activations = false;
  for (std::size_t begin = 0; begin < examples.size(); begin += static_cast<std::size_t>(batch_size)) {
    const auto rows = examples.subspan(begin, std::min(examples.size() - begin, static_cast<std::size_t>(batch_size)));
    const auto batch = make_task_batch(rows, pad_id);
    const auto cache = forward_hidden(base, model_cfg, batch, opts);
    const auto out = head_forward<float>(cache.hidden, batch, spec, head);
    auto p = head_predict(out.logits, batch, spec);
    all.classes.insert(all.classes.end(), p.classes.begin(), p.classes.end());
    all.multilabel.insert(all.multilabel.end(), p.multilabel.begin(), p.multilabel.end());
    for (auto& t : p.tokens) all.tokens.push_back(std::move(t));
  }
  return all;
}

EvalReport score_predictions(const TaskSpec& spec, std::span<const TaskExample> examples, const Predictions& pred) {
  switch (spec.kind) {
    case TaskKind::Binary:
    case TaskKind::Multiclass: {
      std::vector<int> gold;
      for (const auto& e : examples) gold.push_back(e.label);
      return classification_report(gold, pred.classes, spec.labels);
    }
    case TaskKind::Multilabel: {
      std::vector<std::uint8_t> gold;
      for (const auto& e : examples) gold.insert(gold.end(), e.labels.begin(), e.labels.end());
      return multilabel_f1(gold, pred.multilabel, examples.size(), spec.labels);
    }
    case TaskKind::Ner: {
      if (pred.tokens.size() != examples.size()) throw DataError("prediction count does not match the examples");
      std::vector<std::vector<std::string>> gold, guess;
      for (std::size_t i = 0; i < examples.size(); ++i) {
        std::vector<std::string> g, p;
        for (int id : examples[i].token_labels) g.push_back(spec.labels.at(static_cast<std::size_t>(id)));
        for (int id : pred.tokens[i]) p.push_back(spec.labels.at(static_cast<std::size_t>(id)));
        gold.push_back(std::move(g));
        guess.push_back(std::move(p));
      }
      return ner_f1(gold, guess);
    }
  }
  return {};
}

EvalReport evaluate_task(const Parameters<float>& base, const ModelConfig& model_cfg, const AdapterSet<float>& adapters,
                         const TaskHead<float>& head, const TaskSpec& spec, std::span<const TaskExample> examples,
                         int batch_size, TokenId pad_id) {
  return score_predictions(spec, examples,
                           predict(base, model_cfg, adapters, head, spec, examples, batch_size, pad_id));
}

void save_adapter_checkpoint(const std::filesystem::path& dir, const AdapterCheckpoint& ck) {
  TensorDirectory td;
  td.kind = "adapter";
  ojson meta;
  meta["model"] = ojson::parse(model_config_to_json(ck.model));
  ojson targets = ojson::array();
  for (LoraTarget t : kAllLoraTargets) {
    if (ck.lora.targets[static_cast<std::size_t>(t)]) targets.push_back(std::string(lora_target_name(t)));
  }
  meta["lora"] = {{"rank", ck.lora.rank}, {"alpha", ck.lora.alpha}, {"dropout", ck.lora.dropout},
                  {"targets", std::move(targets)}};
  meta["task"] = ojson::parse(ck.spec.to_json());
  meta["quantized"] = ck.quantized;
  meta["quant_block"] = ck.quant_block;
  td.metadata_json = meta.dump();
  auto add = [&](const std::string& name, const Matrix<float>& m, TensorKind kind) {
    td.order.push_back(name);
    td.tensors[name] = m;
    td.vector_shaped[name] = kind == TensorKind::HeadBias;
  };
  ck.adapters.for_each(add);
  ck.head.for_each(add);
  write_tensor_directory(dir, td);
}

AdapterCheckpoint load_adapter_checkpoint(const std::filesystem::path& dir) {
  auto td = read_tensor_directory(dir);
  if (td.kind != "adapter") throw DataError(dir.string() + " is not an adapter checkpoint (kind '" + td.kind + "')");
  AdapterCheckpoint ck;
  try {
    const ojson meta = ojson::parse(td.metadata_json);
    ck.model = model_config_from_json(meta.at("model").dump());
    const auto& l = meta.at("lora");
    ck.lora.rank = l.at("rank").get<int>();
    ck.lora.alpha = l.at("alpha").get<double>();
    ck.lora.dropout = l.at("dropout").get<double>();
    ck.lora.targets = {false, false, false, false};
    for (const auto& name : l.at("targets")) {
      bool found = false;
      for (LoraTarget t : kAllLoraTargets) {
        if (lora_target_name(t) == name.get<std::string>()) {
          ck.lora.targets[static_cast<std::size_t>(t)] = true;
          found = true;
        }
      }
      if (!found) throw DataError("unknown LoRA target " + name.dump());
    }
    ck.spec = TaskSpec::from_json(meta.at("task").dump());
    ck.quantized = meta.at("quantized").get<bool>();
    ck.quant_block = meta.at("quant_block").get<int>();
  } catch (const ojson::exception& e) {
    throw DataError("malformed adapter metadata in " + dir.string() + ": " + e.what());
  }
  ck.model.validate();
  ck.lora.validate();
  ck.adapters = attach_lora(ck.model, ck.lora, 0);
  ck.head = init_head(ck.spec, ck.model.d_model, 0);
  auto take = [&](const std::string& name, Matrix<float>& m, TensorKind) {
    const auto it = td.tensors.find(name);
    if (it == td.tensors.end()) throw DataError("adapter checkpoint is missing tensor " + name);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols()) {
      throw DataError("adapter tensor " + name + " has the wrong shape");
    }
    m = std::move(it->second);
  };
  ck.adapters.for_each(take);
  ck.head.for_each(take);
  return ck;
}

GradCheckReport grad_check_task(Parameters<double>& base, const ModelConfig& model_cfg, AdapterSet<double>& adapters,
                                TaskHead<double>& head, const TaskSpec& spec, const TokenBatch& batch,
                                const TaskLabels& labels, double eps, int samples, std::uint64_t seed) {
  auto grads = Parameters<double>::zeros(model_cfg);
  auto adapter_grads = adapters.zeros_like();
  auto head_grads = head.zeros_like();
  ForwardOptions<double> opts;
  opts.adapters = &adapters;
  {
    const auto cache = forward_hidden(base, model_cfg, batch, opts);
    const auto out = head_forward(cache.hidden, batch, spec, head, &labels, &head_grads);
    backward_hidden(base, model_cfg, batch, cache, out.d_hidden, &grads, &adapters, &adapter_grads);
  }
  std::vector<GradCheckTensor> tensors;
  std::vector<const Matrix<double>*> grad_list;
  base.for_each([&](const std::string& n, Matrix<double>& m, TensorKind k) {
    // The output projection does not feed the task loss.
    if (k != TensorKind::Unembedding) tensors.push_back({n, k, &m, nullptr});
  });
  grads.for_each([&](const std::string&, const Matrix<double>& g, TensorKind k) {
    if (k != TensorKind::Unembedding) grad_list.push_back(&g);
  });
  adapters.for_each([&](const std::string& n, Matrix<double>& m, TensorKind k) { tensors.push_back({n, k, &m, nullptr}); });
  adapter_grads.for_each([&](const std::string&, const Matrix<double>& g, TensorKind) { grad_list.push_back(&g); });
  head.for_each([&](const std::string& n, Matrix<double>& m, TensorKind k) { tensors.push_back({n, k, &m, nullptr}); });
  head_grads.for_each([&](const std::string&, const Matrix<double>& g, TensorKind) { grad_list.push_back(&g); });
  for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i].grad = grad_list.at(i);

  auto loss = [&] {
    ForwardOptions<double> o;
    o.adapters = &adapters;
    o.keep_activations = false;
    const auto cache = forward_hidden(base, model_cfg, batch, o);
    return static_cast<double>(head_forward(cache.hidden, batch, spec, head, &labels).loss);
  };
  return grad_check(tensors, loss, eps, samples, seed);
}

}  // namespace mhgpt
