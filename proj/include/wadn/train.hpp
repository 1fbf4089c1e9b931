#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "wadn/checkpoint.hpp"
#include "wadn/data.hpp"
#include "wadn/error.hpp"
#include "wadn/model.hpp"
#include "wadn/ops.hpp"

namespace wadn {

struct TrainHyper {
  double base_lr = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  std::size_t warmup_steps = 1000;
  std::size_t total_steps = 2000;
  std::size_t batch_size = 32;
  std::size_t eval_every = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
      throw ConfigError("betas must lie in (0, 1)");
    if (adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
    if (warmup_steps == 0) throw ConfigError("warmup_steps must be positive");
    if (total_steps > 0 && warmup_steps > total_steps)
      throw ConfigError("warmup_steps must not exceed total_steps");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
  }
};

/// Linear warmup to the peak at t = warmup, then square-root decay:
/// lr(t) = base · min(t/warmup, 1) / sqrt(max(t, warmup)).
inline double lr_at(const TrainHyper& h, std::size_t t) {
  if (t < 1) throw ContractError("lr_at needs a step >= 1");
  double td = static_cast<double>(t), w = static_cast<double>(h.warmup_steps);
  return h.base_lr * std::min(td / w, 1.0) / std::sqrt(std::max(td, w));
}

inline json train_hyper_to_json(const TrainHyper& h) {
  json j;
  j["base_lr"] = h.base_lr;
  j["beta1"] = h.beta1;
  j["beta2"] = h.beta2;
  j["adam_eps"] = h.adam_eps;
  j["warmup_steps"] = h.warmup_steps;
  j["total_steps"] = h.total_steps;
  j["batch_size"] = h.batch_size;
  j["eval_every"] = h.eval_every;
  j["seed"] = h.seed;
  return j;
}

inline TrainHyper train_hyper_from_json(const json& j) {
  detail::reject_unknown_keys(j, {"base_lr", "beta1", "beta2", "adam_eps", "warmup_steps",
                                  "total_steps", "batch_size", "eval_every", "seed"},
                              "train config");
  auto get_real = [&](const char* key, double fallback) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (!v.is_number()) throw ConfigError(std::string(key) + " must be a number");
    return v.get<double>();
  };
  TrainHyper h;
  h.base_lr = get_real("base_lr", h.base_lr);
  h.beta1 = get_real("beta1", h.beta1);
  h.beta2 = get_real("beta2", h.beta2);
  h.adam_eps = get_real("adam_eps", h.adam_eps);
  h.warmup_steps = detail::get_count(j, "warmup_steps", h.warmup_steps);
  h.total_steps = detail::get_count(j, "total_steps", h.total_steps);
  h.batch_size = detail::get_count(j, "batch_size", h.batch_size);
  h.eval_every = detail::get_count(j, "eval_every", h.eval_every);
  h.seed = detail::get_count(j, "seed", h.seed);
  return h;
}

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;

  static AdamState init(const std::vector<Tensor>& params) {
    AdamState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor& p : params) {
      s.m.emplace_back(p.numel(), 0.0);
      s.v.emplace_back(p.numel(), 0.0);
    }
    return s;
  }
};

/// One bias-corrected Adam update over the accumulated gradients. Tensors with
/// no gradient (never reached by backward) are left untouched, matching a
/// zero-gradient update.
inline void adam_step(std::vector<Tensor>& params, AdamState& st, const TrainHyper& h,
                      double lr) {
  if (params.size() != st.m.size())
    throw ShapeError("adam state tracks " + std::to_string(st.m.size()) + " tensors, got " +
                     std::to_string(params.size()));
  ++st.step;
  double t = static_cast<double>(st.step);
  double bc1 = 1.0 - std::pow(h.beta1, t);
  double bc2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (st.m[i].size() != p.numel())
      throw ShapeError("adam moment size mismatch for tensor " + std::to_string(i));
    const std::vector<double>& g = p.node()->grad;
    if (g.empty()) continue;
    std::vector<double>& data = p.mutable_data();
    std::vector<double>& m = st.m[i];
    std::vector<double>& v = st.v[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      double mhat = m[k] / bc1;
      double vhat = v[k] / bc2;
      data[k] -= lr * mhat / (std::sqrt(vhat) + h.adam_eps);
    }
  }
}

/// Mean over the batch of -log softmax(logits)[label], fused and stabilized
/// with the usual max-shifted log-sum-exp.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("cross_entropy expects [B, C], got " + shape_str(s));
  std::size_t B = s[0], C = s[1];
  if (labels.size() != B)
    throw ShapeError("expected " + std::to_string(B) + " labels, got " +
                     std::to_string(labels.size()));
  for (std::size_t b = 0; b < B; ++b)
    if (labels[b] >= C)
      throw IndexError("label " + std::to_string(labels[b]) + " out of range for " +
                       std::to_string(C) + " classes");

  const std::vector<double>& x = logits.data();
  std::vector<double> softmax(B * C);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = x.data() + b * C;
    double mx = row[0];
    for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      double e = std::exp(row[j] - mx);
      softmax[b * C + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < C; ++j) softmax[b * C + j] /= sum;
    total += mx + std::log(sum) - row[labels[b]];
  }

  Tensor lg = logits;
  return detail::make_result(
      {1}, {total / static_cast<double>(B)}, {lg},
      [B, C, labels, softmax = std::move(softmax)](TensorNode& node) {
        double up = node.grad[0] / static_cast<double>(B);
        double* pg = node.parents[0]->grad_buffer();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t j = 0; j < C; ++j)
            pg[b * C + j] += up * (softmax[b * C + j] - (j == labels[b] ? 1.0 : 0.0));
      });
}

inline std::size_t argmax_lowest(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

struct TokenizedData {
  std::vector<std::vector<std::size_t>> rows;
  std::vector<std::size_t> labels;
};

inline TokenizedData tokenize_dataset(const Dataset& data, TokenMode mode, const Vocab* vocab,
                                      std::size_t seq_len, std::size_t num_classes) {
  TokenizedData out;
  out.rows.reserve(data.size());
  out.labels.reserve(data.size());
  for (const Example& e : data) {
    if (e.label >= num_classes)
      throw ConfigError("label " + std::to_string(e.label) + " out of range for " +
                        std::to_string(num_classes) + " classes");
    out.rows.push_back(tokenize(e.text, mode, vocab, seq_len));
    out.labels.push_back(e.label);
  }
  return out;
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Forward the whole set in inference mode; accuracy breaks argmax ties toward
/// the lowest class index.
inline EvalResult evaluate(Model& m, const TokenizedData& data, std::size_t batch_size = 32) {
  if (data.rows.empty()) throw ConfigError("evaluate on empty dataset");
  NoGradGuard no_grad;
  std::size_t S = m.config.seq_len, C = m.config.num_classes;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.rows.size(); start += batch_size) {
    std::size_t B = std::min(batch_size, data.rows.size() - start);
    std::vector<std::size_t> ids;
    ids.reserve(B * S);
    std::vector<std::size_t> labels(B);
    for (std::size_t b = 0; b < B; ++b) {
      ids.insert(ids.end(), data.rows[start + b].begin(), data.rows[start + b].end());
      labels[b] = data.labels[start + b];
    }
    Tensor logits = model_forward(m, ids, B).logits;
    loss_sum += cross_entropy(logits, labels).item() * static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      correct += argmax_lowest(logits.data().data() + b * C, C) == labels[b];
  }
  EvalResult r;
  r.loss = loss_sum / static_cast<double>(data.rows.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.rows.size());
  return r;
}

inline EvalResult evaluate(Model& m, const Dataset& data, TokenMode mode, const Vocab* vocab,
                           std::size_t batch_size = 32) {
  return evaluate(m, tokenize_dataset(data, mode, vocab, m.config.seq_len, m.config.num_classes),
                  batch_size);
}

struct TrainLogRow {
  std::size_t step = 0;
  const char* split = "train";
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

struct TrainReport {
  std::vector<TrainLogRow> rows;
  double best_val_accuracy = 0.0;
  std::size_t best_step = 0;
};

inline void write_metrics_csv(const TrainReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "step,split,loss,accuracy,lr\n";
  out.precision(17);
  for (const TrainLogRow& r : report.rows)
    out << r.step << ',' << r.split << ',' << r.loss << ',' << r.accuracy << ',' << r.lr << '\n';
  if (!out) throw IoError("write failed: " + path);
}

/// Runs total_steps Adam updates with per-step train rows and periodic
/// validation rows. The checkpoint with the best validation accuracy (earliest
/// on ties) lands at checkpoint_path when one is given; with total_steps = 0
/// that is the initial model.
inline TrainReport train_loop(Model& m, const Dataset& train_data, const Dataset& val_data,
                              const TrainHyper& h, TokenMode mode = TokenMode::Byte,
                              const Vocab* vocab = nullptr,
                              const std::string& checkpoint_path = "") {
  h.validate();
  if (train_data.empty() || val_data.empty()) throw ConfigError("datasets must be nonempty");
  std::size_t S = m.config.seq_len, C = m.config.num_classes;
  TokenizedData train = tokenize_dataset(train_data, mode, vocab, S, C);
  TokenizedData val = tokenize_dataset(val_data, mode, vocab, S, C);

  TrainReport report;
  std::vector<Tensor> params = trainable_params(m);
  AdamState adam = AdamState::init(params);

  if (checkpoint_path.size()) save_checkpoint(m, checkpoint_path);
  if (h.total_steps == 0) return report;

  std::vector<Batch> batches;
  std::size_t epoch = 0, cursor = 0;
  for (std::size_t step = 1; step <= h.total_steps; ++step) {
    if (cursor == batches.size()) {
      batches = batch_iter(train.rows.size(), h.batch_size, h.seed, epoch++);
      cursor = 0;
    }
    const Batch& batch = batches[cursor++];
    std::size_t B = batch.indices.size();
    std::vector<std::size_t> ids;
    ids.reserve(B * S);
    std::vector<std::size_t> labels(B);
    for (std::size_t b = 0; b < B; ++b) {
      ids.insert(ids.end(), train.rows[batch.indices[b]].begin(),
                 train.rows[batch.indices[b]].end());
      labels[b] = train.labels[batch.indices[b]];
    }

    for (Tensor& p : params) p.zero_grad();
    double lr = lr_at(h, step);
    Tensor logits, loss;
    double loss_val;
    try {
      logits = model_forward(m, ids, B).logits;
      loss = cross_entropy(logits, labels);
      loss_val = loss.item();
    } catch (const ContractError& e) {
      throw ContractError(std::string(e.what()) + " at step " + std::to_string(step) + " (lr " +
                          std::to_string(lr) + ")");
    }
    if (!std::isfinite(loss_val))
      throw ContractError("non-finite loss at step " + std::to_string(step) + " (lr " +
                          std::to_string(lr) + ")");
    loss.backward();
    adam_step(params, adam, h, lr);

    std::size_t correct = 0;
    for (std::size_t b = 0; b < B; ++b)
      correct += argmax_lowest(logits.data().data() + b * C, C) == labels[b];
    report.rows.push_back({step, "train", loss_val,
                           static_cast<double>(correct) / static_cast<double>(B), lr});

    if (step % h.eval_every == 0 || step == h.total_steps) {
      EvalResult ev = evaluate(m, val, h.batch_size);
      report.rows.push_back({step, "val", ev.loss, ev.accuracy, lr});
      if (ev.accuracy > report.best_val_accuracy || report.best_step == 0) {
        report.best_val_accuracy = ev.accuracy;
        report.best_step = step;
        if (checkpoint_path.size()) save_checkpoint(m, checkpoint_path);
      }
    }
  }
  return report;
}

}  // namespace wadn
