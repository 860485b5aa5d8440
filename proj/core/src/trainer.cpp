#include "mhgpt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <thread>

#include "json_util.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/rng.hpp"

namespace mhgpt {

using detail::ojson;

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (warmup_steps < 1) problems.push_back("train.warmup_steps must be >= 1");
  if (!(max_lr > 0.0)) problems.push_back("train.max_lr must be > 0");
  if (weight_decay < 0.0) problems.push_back("train.weight_decay must be >= 0");
  if (epochs < 1) problems.push_back("train.epochs must be >= 1");
  if (batch_size < 1) problems.push_back("train.batch_size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) problems.push_back("train betas must lie in [0, 1)");
  if (!(eps > 0.0)) problems.push_back("train.eps must be > 0");
  if (min_lr_ratio < 0.0 || min_lr_ratio > 1.0) problems.push_back("train.min_lr_ratio must lie in [0, 1]");
  if (early_stop_patience < 0) problems.push_back("train.early_stop_patience must be >= 0");
  detail::throw_if_problems("invalid train config:", problems);
}

double lr_schedule(std::int64_t step, const TrainConfig& cfg, std::int64_t total_steps) {
  if (step < cfg.warmup_steps) {
    // Ratio first so the last warmup step yields max_lr exactly.
    return cfg.max_lr * (static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps));
  }
  if (cfg.decay == LrDecay::Constant || total_steps <= cfg.warmup_steps) return cfg.max_lr;
  const double progress = std::min(
      1.0, static_cast<double>(step - cfg.warmup_steps + 1) / static_cast<double>(total_steps - cfg.warmup_steps));
  const double floor = cfg.min_lr_ratio * cfg.max_lr;
  return floor + (cfg.max_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
std::vector<ParamSlot<T>> param_slots(Parameters<T>& params, Parameters<T>& grads) {
  std::vector<ParamSlot<T>> slots;
  params.for_each([&](const std::string& name, Matrix<T>& m, TensorKind kind) {
    slots.push_back({name, &m, nullptr, kind});
  });
  std::size_t i = 0;
  grads.for_each([&](const std::string&, Matrix<T>& g, TensorKind) { slots.at(i++).grad = &g; });
  return slots;
}

template <class T>
std::vector<ParamSlot<T>> param_slots(AdapterSet<T>& params, AdapterSet<T>& grads) {
  std::vector<ParamSlot<T>> slots;
  params.for_each([&](const std::string& name, Matrix<T>& m, TensorKind kind) {
    slots.push_back({name, &m, nullptr, kind});
  });
  std::size_t i = 0;
  grads.for_each([&](const std::string&, Matrix<T>& g, TensorKind) { slots.at(i++).grad = &g; });
  return slots;
}

template std::vector<ParamSlot<float>> param_slots(Parameters<float>&, Parameters<float>&);
template std::vector<ParamSlot<double>> param_slots(Parameters<double>&, Parameters<double>&);
template std::vector<ParamSlot<float>> param_slots(AdapterSet<float>&, AdapterSet<float>&);
template std::vector<ParamSlot<double>> param_slots(AdapterSet<double>&, AdapterSet<double>&);

void AdamW::step(std::span<const ParamSlot<float>> slots, double lr) {
  if (m_.empty()) {
    for (const auto& s : slots) {
      m_.push_back(Matrix<float>::Zero(s.value->rows(), s.value->cols()));
      v_.push_back(Matrix<float>::Zero(s.value->rows(), s.value->cols()));
    }
  }
  if (m_.size() != slots.size()) throw ConfigError("AdamW: parameter list changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(hyper_.beta1);
  const auto b2 = static_cast<float>(hyper_.beta2);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const auto eps = static_cast<float>(hyper_.eps);
  const auto decay = static_cast<float>(1.0 - lr * hyper_.weight_decay);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto& p = *slots[i].value;
    const auto& g = *slots[i].grad;
    if (hyper_.weight_decay != 0.0 && takes_weight_decay(slots[i].kind)) p *= decay;
    m_[i] = b1 * m_[i] + (1.0f - b1) * g;
    v_[i] = b2 * v_[i] + (1.0f - b2) * g.cwiseProduct(g);
    p.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

double clip_global_norm(std::span<const ParamSlot<float>> slots, double max_norm) {
  double sq = 0.0;
  for (const auto& s : slots) sq += s.grad->template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / (norm + 1e-6));
    for (const auto& s : slots) *s.grad *= scale;
  }
  return norm;
}

std::string TrainLog::steps_csv() const {
  std::ostringstream out;
  out << "step,lr,train_loss\n";
  out << std::setprecision(9);
  for (const auto& s : steps) out << s.step << ',' << s.lr << ',' << s.train_loss << '\n';
  return out.str();
}

std::string TrainLog::epochs_json() const {
  ojson j;
  ojson list = ojson::array();
  for (const auto& e : epochs) {
    list.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"validation_loss", e.validation_loss}});
  }
  j["epochs"] = std::move(list);
  j["best_epoch"] = best_epoch;
  j["early_stopped"] = early_stopped;
  return j.dump(2) + "\n";
}

double train_step(Parameters<float>& params, const ModelConfig& cfg, const TokenBatch& batch, AdamW& optimizer,
                  const TrainConfig& train, double lr) {
  auto trace = forward(params, cfg, batch);
  const auto targets = next_token_targets(batch);
  auto loss = lm_loss(trace.logits, std::span<const TokenId>(targets.ids), std::span<const std::uint8_t>(targets.mask), true);
  if (!std::isfinite(loss.loss)) {
    throw NumericalError("non-finite training loss (" + std::to_string(loss.loss) + ") at optimizer step " +
                         std::to_string(optimizer.steps()));
  }
  auto grads = Parameters<float>::zeros(cfg);
  const Matrix<float> d_hidden = backward_logits(params, trace.cache.hidden, loss.d_logits, &grads);
  backward_hidden(params, cfg, batch, trace.cache, d_hidden, &grads);
  auto slots = param_slots(params, grads);
  if (train.clip_norm > 0.0) clip_global_norm(slots, train.clip_norm);
  optimizer.step(slots, lr);
  return static_cast<double>(loss.loss);
}

double evaluate(const Parameters<float>& params, const ModelConfig& cfg, std::span<const TokenSequence> sequences,
                int batch_size, TokenId pad_id, int threads) {
  if (sequences.empty()) throw DataError("evaluate: validation set is empty");
  batch_size = std::max(batch_size, 1);
  const std::size_t n_batches = (sequences.size() + batch_size - 1) / batch_size;
  std::vector<double> sums(n_batches, 0.0);
  std::vector<std::int64_t> counts(n_batches, 0);
  auto run = [&](std::size_t first, std::size_t stride) {
    for (std::size_t b = first; b < n_batches; b += stride) {
      const auto begin = b * batch_size;
      const auto end = std::min(sequences.size(), begin + batch_size);
      const auto batch = TokenBatch::from_sequences(sequences.subspan(begin, end - begin), pad_id);
      const auto targets = next_token_targets(batch);
      if (std::none_of(targets.mask.begin(), targets.mask.end(), [](auto m) { return m != 0; })) continue;
      ForwardOptions<float> opts;
      opts.keep_activations = false;
      const auto trace = forward(params, cfg, batch, opts);
      const auto loss = lm_loss(trace.logits, std::span<const TokenId>(targets.ids),
                                std::span<const std::uint8_t>(targets.mask), false);
      sums[b] = loss.sum;
      counts[b] = loss.count;
    }
  };
  const auto workers = static_cast<std::size_t>(std::clamp<int>(threads, 1, static_cast<int>(n_batches)));
  if (workers == 1) {
    run(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
  }
  double total = 0.0;
  std::int64_t count = 0;
  for (std::size_t b = 0; b < n_batches; ++b) {
    total += sums[b];
    count += counts[b];
  }
  if (count == 0) throw DataError("evaluate: no sequence has two or more tokens");
  return total / static_cast<double>(count);
}

TrainLog pretrain(Parameters<float>& params, const ModelConfig& cfg, std::span<const TokenSequence> train,
                  std::span<const TokenSequence> validation, const TrainConfig& train_cfg, TokenId pad_id,
                  const PretrainHooks& hooks, int threads) {
  train_cfg.validate();
  if (train.empty()) throw DataError("pretrain: training set is empty");
  const auto start = std::chrono::steady_clock::now();
  const std::int64_t per_epoch = static_cast<std::int64_t>((train.size() + train_cfg.batch_size - 1) / train_cfg.batch_size);
  std::int64_t total_steps = per_epoch * train_cfg.epochs;
  if (train_cfg.max_steps > 0) total_steps = std::min(total_steps, train_cfg.max_steps);

  AdamW optimizer({train_cfg.beta1, train_cfg.beta2, train_cfg.eps, train_cfg.weight_decay});
  Rng rng(train_cfg.seed);
  std::vector<std::size_t> order(train.size());
  TrainLog log;
  std::int64_t step = 0;
  int rises = 0;
  double best_val = 0.0;
  for (int epoch = 1; epoch <= train_cfg.epochs && step < total_steps; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    int epoch_batches = 0;
    for (std::size_t begin = 0; begin < order.size() && step < total_steps; begin += train_cfg.batch_size) {
      const auto end = std::min(order.size(), begin + static_cast<std::size_t>(train_cfg.batch_size));
      std::vector<TokenSequence> rows;
      for (std::size_t k = begin; k < end; ++k) rows.push_back(train[order[k]]);
      const auto batch = TokenBatch::from_sequences(rows, pad_id);
      const double lr = lr_schedule(step, train_cfg, total_steps);
      const double loss = train_step(params, cfg, batch, optimizer, train_cfg, lr);
      const StepRecord rec{step, lr, loss};
      log.steps.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
      epoch_loss += loss;
      ++epoch_batches;
      ++step;
    }
    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = epoch_batches > 0 ? epoch_loss / epoch_batches : 0.0;
    er.validation_loss = validation.empty() ? er.train_loss
                                            : evaluate(params, cfg, validation, train_cfg.batch_size, pad_id, threads);
    if (!std::isfinite(er.validation_loss)) {
      throw NumericalError("non-finite validation loss after epoch " + std::to_string(epoch));
    }
    if (!log.epochs.empty() && er.validation_loss > log.epochs.back().validation_loss) {
      ++rises;
    } else {
      rises = 0;
    }
    if (log.epochs.empty() || er.validation_loss < best_val) {
      best_val = er.validation_loss;
      log.best_epoch = epoch;
    }
    log.epochs.push_back(er);
    if (hooks.on_epoch) hooks.on_epoch(er, params);
    if (train_cfg.early_stop_patience > 0 && rises >= train_cfg.early_stop_patience) {
      log.early_stopped = true;
      break;
    }
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

std::set<TensorKind> GradCheckReport::kinds() const {
  std::set<TensorKind> out;
  for (const auto& s : samples) out.insert(s.kind);
  return out;
}

const GradCheckSample* GradCheckReport::worst() const {
  const GradCheckSample* w = nullptr;
  for (const auto& s : samples) {
    if (!w || s.rel_error > w->rel_error) w = &s;
  }
  return w;
}

std::string GradCheckReport::to_json() const {
  ojson j;
  j["max_rel_error"] = max_rel_error;
  j["samples"] = samples.size();
  ojson kinds_json = ojson::array();
  for (auto k : kinds()) kinds_json.push_back(tensor_kind_name(k));
  j["tensor_kinds"] = kinds_json;
  if (const auto* w = worst()) {
    j["worst"] = {{"tensor", w->tensor}, {"index", w->index}, {"analytic", w->analytic}, {"numeric", w->numeric}};
  }
  return j.dump(2);
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(std::span<const GradCheckTensor> tensors, const std::function<double()>& loss, double eps,
                           int samples, std::uint64_t seed) {
  GradCheckReport report;
  if (tensors.empty()) return report;
  Rng rng(seed);
  const int n = std::max<int>(samples, static_cast<int>(tensors.size()));
  for (int k = 0; k < n; ++k) {
    const auto& t = tensors[static_cast<std::size_t>(k) % tensors.size()];
    if (t.value->size() == 0) continue;
    const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(t.value->size())));
    double& x = t.value->data()[idx];
    const double saved = x;
    x = saved + eps;
    const double up = loss();
    x = saved - eps;
    const double down = loss();
    x = saved;
    GradCheckSample s;
    s.tensor = t.name;
    s.kind = t.kind;
    s.index = idx;
    s.analytic = t.grad->data()[idx];
    s.numeric = (up - down) / (2.0 * eps);
    s.rel_error = relative_error(s.analytic, s.numeric);
    report.max_rel_error = std::max(report.max_rel_error, s.rel_error);
    report.samples.push_back(std::move(s));
  }
  return report;
}

GradCheckReport grad_check_lm(Parameters<double>& params, const ModelConfig& cfg, const TokenBatch& batch, double eps,
                              int samples, std::uint64_t seed) {
  const auto targets = next_token_targets(batch);
  auto loss_of = [&](bool with_grad, Parameters<double>* grads) {
    auto trace = forward(params, cfg, batch);
    auto loss = lm_loss(trace.logits, std::span<const TokenId>(targets.ids), std::span<const std::uint8_t>(targets.mask),
                        with_grad);
    if (grads) {
      const Matrix<double> d_hidden = backward_logits(params, trace.cache.hidden, loss.d_logits, grads);
      backward_hidden(params, cfg, batch, trace.cache, d_hidden, grads);
    }
    return loss.loss;
  };
  auto grads = Parameters<double>::zeros(cfg);
  loss_of(true, &grads);
  std::vector<GradCheckTensor> tensors;
  params.for_each([&](const std::string& name, Matrix<double>& m, TensorKind kind) {
    tensors.push_back({name, kind, &m, nullptr});
  });
  std::size_t i = 0;
  grads.for_each([&](const std::string&, const Matrix<double>& g, TensorKind) { tensors.at(i++).grad = &g; });
  return grad_check(tensors, [&] { return loss_of(false, nullptr); }, eps, samples, seed);
}

}  // namespace mhgpt
