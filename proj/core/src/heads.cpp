#include "mhgpt/heads.hpp"

#include <cmath>

#include "json_util.hpp"
#include "mhgpt/error.hpp"
#include "mhgpt/rng.hpp"

namespace mhgpt {

using detail::ojson;

std::string_view task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Binary: return "binary";
    case TaskKind::Multiclass: return "multiclass";
    case TaskKind::Multilabel: return "multilabel";
    case TaskKind::Ner: return "ner";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "binary") return TaskKind::Binary;
  if (name == "multiclass") return TaskKind::Multiclass;
  if (name == "multilabel") return TaskKind::Multilabel;
  if (name == "ner") return TaskKind::Ner;
  throw ConfigError("unknown task kind '" + std::string(name) + "' (expected binary, multiclass, multilabel or ner)");
}

namespace {

std::vector<std::string> numbered(int k) {
  std::vector<std::string> out;
  for (int i = 0; i < k; ++i) out.push_back(std::to_string(i));
  return out;
}

}  // namespace

TaskSpec TaskSpec::binary() { return {TaskKind::Binary, numbered(2), 0.5}; }
TaskSpec TaskSpec::multiclass(int k) { return {TaskKind::Multiclass, numbered(k), 0.5}; }
TaskSpec TaskSpec::multilabel(int k) { return {TaskKind::Multilabel, numbered(k), 0.5}; }

TaskSpec TaskSpec::ner(std::span<const std::string> entity_types) {
  TaskSpec spec{TaskKind::Ner, {"O"}, 0.5};
  for (const auto& t : entity_types) {
    spec.labels.push_back("B-" + t);
    spec.labels.push_back("I-" + t);
  }
  return spec;
}

int TaskSpec::outputs() const { return kind == TaskKind::Binary ? 1 : num_labels(); }

void TaskSpec::validate() const {
  switch (kind) {
    case TaskKind::Binary:
      if (labels.size() != 2) throw ConfigError("binary task needs exactly 2 labels");
      break;
    case TaskKind::Multiclass:
      if (labels.size() < 2) throw ConfigError("multiclass task needs k >= 2");
      break;
    case TaskKind::Multilabel:
      if (labels.empty()) throw ConfigError("multilabel task needs k >= 1");
      if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("multilabel threshold must lie in (0, 1)");
      break;
    case TaskKind::Ner:
      if (labels.empty() || labels.front() != "O") throw ConfigError("ner label set must start with O");
      for (std::size_t i = 1; i < labels.size(); ++i) {
        const auto& l = labels[i];
        if (l.size() < 3 || (l.rfind("B-", 0) != 0 && l.rfind("I-", 0) != 0)) {
          throw ConfigError("ner label '" + l + "' is not a BIO tag");
        }
      }
      break;
  }
}

std::string TaskSpec::to_json() const {
  ojson j;
  j["kind"] = std::string(task_kind_name(kind));
  j["labels"] = labels;
  j["threshold"] = threshold;
  return j.dump();
}

TaskSpec TaskSpec::from_json(std::string_view json) {
  const ojson j = ojson::parse(json, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw DataError("task spec must be a JSON object");
  TaskSpec spec;
  try {
    spec.kind = parse_task_kind(j.at("kind").get<std::string>());
    spec.labels = j.at("labels").get<std::vector<std::string>>();
    spec.threshold = j.value("threshold", 0.5);
  } catch (const ojson::exception& e) {
    throw DataError(std::string("malformed task spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

TaskHead<float> init_head(const TaskSpec& spec, int d_model, std::uint64_t seed, double std) {
  spec.validate();
  Rng rng(seed);
  TaskHead<float> head{Matrix<float>(spec.outputs(), d_model), Matrix<float>::Zero(1, spec.outputs())};
  for (Eigen::Index i = 0; i < head.weight.size(); ++i) head.weight.data()[i] = static_cast<float>(rng.normal(0.0, std));
  return head;
}

std::vector<int> pooled_positions(const TokenBatch& batch) {
  std::vector<int> pos(static_cast<std::size_t>(batch.batch), -1);
  for (int b = 0; b < batch.batch; ++b) {
    for (int t = 0; t < batch.seq; ++t) {
      if (batch.valid(b, t)) pos[static_cast<std::size_t>(b)] = t;
    }
    if (pos[static_cast<std::size_t>(b)] < 0) throw DataError("batch row " + std::to_string(b) + " has no tokens");
  }
  return pos;
}

namespace {

template <class T>
T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

template <class T>
T sigmoid(T z) {
  return z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

/// Cross-entropy of one logit row against `target`; writes softmax - onehot
/// scaled by `scale` into `d` when non-null.
template <class T>
T row_cross_entropy(const T* row, Eigen::Index n, int target, T scale, T* d) {
  T mx = row[0];
  for (Eigen::Index c = 1; c < n; ++c) mx = std::max(mx, row[c]);
  T z = T(0);
  for (Eigen::Index c = 0; c < n; ++c) z += std::exp(row[c] - mx);
  const T log_z = mx + std::log(z);
  if (d) {
    for (Eigen::Index c = 0; c < n; ++c) d[c] = std::exp(row[c] - log_z) * scale;
    d[target] -= scale;
  }
  return log_z - row[target];
}

void check_class(int label, int k, int row) {
  if (label < 0 || label >= k) {
    throw DataError("label " + std::to_string(label) + " out of range [0, " + std::to_string(k) + ") in row " +
                    std::to_string(row));
  }
}

}  // namespace

template <class T>
HeadOutput<T> head_forward(const Matrix<T>& hidden, const TokenBatch& batch, const TaskSpec& spec,
                           const TaskHead<T>& head, const TaskLabels* labels, TaskHead<T>* grads) {
  const bool want_grad = grads != nullptr;
  if (want_grad && !labels) throw ConfigError("head_forward: gradients need labels");
  if (hidden.rows() != batch.rows()) throw ConfigError("head_forward: hidden states do not match the batch");
  HeadOutput<T> out;
  const int k = spec.num_labels();

  if (spec.kind == TaskKind::Ner) {
    out.logits = hidden * head.weight.transpose();
    out.logits.rowwise() += head.bias.row(0);
    if (!labels) return out;
    if (labels->tokens.size() != static_cast<std::size_t>(batch.rows())) {
      throw DataError("ner labels do not match the batch shape");
    }
    std::int64_t count = 0;
    for (int r = 0; r < batch.rows(); ++r) {
      const int y = labels->tokens[static_cast<std::size_t>(r)];
      if (!batch.mask[static_cast<std::size_t>(r)] || y < 0) continue;
      check_class(y, k, r / batch.seq);
      ++count;
    }
    if (count == 0) throw DataError("ner batch has no labelled tokens");
    const T scale = T(1) / static_cast<T>(count);
    Matrix<T> d_logits;
    if (want_grad) d_logits = Matrix<T>::Zero(out.logits.rows(), out.logits.cols());
    T total = T(0);
    for (int r = 0; r < batch.rows(); ++r) {
      const int y = labels->tokens[static_cast<std::size_t>(r)];
      if (!batch.mask[static_cast<std::size_t>(r)] || y < 0) continue;
      total += row_cross_entropy<T>(out.logits.row(r).data(), k, y, scale, want_grad ? d_logits.row(r).data() : nullptr);
    }
    out.loss = total * scale;
    if (want_grad) {
      grads->weight.noalias() += d_logits.transpose() * hidden;
      grads->bias.row(0) += d_logits.colwise().sum();
      out.d_hidden = d_logits * head.weight;
    }
    return out;
  }

  const auto pos = pooled_positions(batch);
  Matrix<T> pooled(batch.batch, hidden.cols());
  for (int b = 0; b < batch.batch; ++b) pooled.row(b) = hidden.row(static_cast<Eigen::Index>(b) * batch.seq + pos[b]);
  out.logits = pooled * head.weight.transpose();
  out.logits.rowwise() += head.bias.row(0);
  if (!labels) return out;

  const T scale = T(1) / static_cast<T>(batch.batch);
  Matrix<T> d_logits = Matrix<T>::Zero(out.logits.rows(), out.logits.cols());
  T total = T(0);
  switch (spec.kind) {
    case TaskKind::Binary:
    case TaskKind::Multiclass:
      if (labels->classes.size() != static_cast<std::size_t>(batch.batch)) {
        throw DataError("class labels do not match the batch size");
      }
      for (int b = 0; b < batch.batch; ++b) {
        const int y = labels->classes[static_cast<std::size_t>(b)];
        check_class(y, k, b);
        if (spec.kind == TaskKind::Binary) {
          const T z = out.logits(b, 0);
          total += softplus(z) - static_cast<T>(y) * z;
          d_logits(b, 0) = (sigmoid(z) - static_cast<T>(y)) * scale;
        } else {
          total += row_cross_entropy<T>(out.logits.row(b).data(), k, y, scale, d_logits.row(b).data());
        }
      }
      break;
    case TaskKind::Multilabel:
      if (labels->multilabel.size() != static_cast<std::size_t>(batch.batch) * k) {
        throw DataError("multilabel targets do not match batch x labels");
      }
      for (int b = 0; b < batch.batch; ++b) {
        for (int c = 0; c < k; ++c) {
          const int y = labels->multilabel[static_cast<std::size_t>(b) * k + c];
          if (y > 1) throw DataError("multilabel target must be 0 or 1 in row " + std::to_string(b));
          const T z = out.logits(b, c);
          total += softplus(z) - static_cast<T>(y) * z;
          d_logits(b, c) = (sigmoid(z) - static_cast<T>(y)) * scale;
        }
      }
      break;
    case TaskKind::Ner:
      break;
  }
  out.loss = total * scale;
  if (want_grad) {
    grads->weight.noalias() += d_logits.transpose() * pooled;
    grads->bias.row(0) += d_logits.colwise().sum();
    const Matrix<T> d_pooled = d_logits * head.weight;
    out.d_hidden = Matrix<T>::Zero(hidden.rows(), hidden.cols());
    for (int b = 0; b < batch.batch; ++b) {
      out.d_hidden.row(static_cast<Eigen::Index>(b) * batch.seq + pos[b]) = d_pooled.row(b);
    }
  }
  return out;
}

template <class T>
Predictions head_predict(const Matrix<T>& logits, const TokenBatch& batch, const TaskSpec& spec) {
  Predictions p;
  switch (spec.kind) {
    case TaskKind::Binary:
      for (Eigen::Index b = 0; b < logits.rows(); ++b) p.classes.push_back(logits(b, 0) >= T(0) ? 1 : 0);
      break;
    case TaskKind::Multiclass:
      for (Eigen::Index b = 0; b < logits.rows(); ++b) {
        Eigen::Index arg = 0;
        logits.row(b).maxCoeff(&arg);
        p.classes.push_back(static_cast<int>(arg));
      }
      break;
    case TaskKind::Multilabel:
      for (Eigen::Index b = 0; b < logits.rows(); ++b) {
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
          p.multilabel.push_back(static_cast<double>(sigmoid(logits(b, c))) >= spec.threshold ? 1 : 0);
        }
      }
      break;
    case TaskKind::Ner:
      for (int b = 0; b < batch.batch; ++b) {
        std::vector<int> row;
        for (int t = 0; t < batch.seq; ++t) {
          if (!batch.valid(b, t)) continue;
          Eigen::Index arg = 0;
          logits.row(static_cast<Eigen::Index>(b) * batch.seq + t).maxCoeff(&arg);
          row.push_back(static_cast<int>(arg));
        }
        p.tokens.push_back(std::move(row));
      }
      break;
  }
  return p;
}

template HeadOutput<float> head_forward(const Matrix<float>&, const TokenBatch&, const TaskSpec&,
                                        const TaskHead<float>&, const TaskLabels*, TaskHead<float>*);
template HeadOutput<double> head_forward(const Matrix<double>&, const TokenBatch&, const TaskSpec&,
                                         const TaskHead<double>&, const TaskLabels*, TaskHead<double>*);
template Predictions head_predict(const Matrix<float>&, const TokenBatch&, const TaskSpec&);
template Predictions head_predict(const Matrix<double>&, const TokenBatch&, const TaskSpec&);

}  // namespace mhgpt
