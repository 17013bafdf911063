#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "lilora/adapters.hpp"
#include "lilora/backbone.hpp"
#include "lilora/diff.hpp"
#include "lilora/errors.hpp"
#include "lilora/linalg.hpp"
#include "lilora/metrics.hpp"
#include "lilora/optim.hpp"
#include "lilora/taskgen.hpp"

namespace lilora {

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  double lambda = 1.0;            // weight of the basis stability loss
  bool grad_through_sim = false;  // differentiate through the cosine coefficient
  std::uint64_t seed = 0;

  static TrainConfig desk() { return {}; }

  /// Optimizer settings used for the 7B-scale runs: lr 2e-5, batch 64, one epoch.
  static TrainConfig paper() {
    TrainConfig c;
    c.adam.lr = 2e-5;
    c.batch_size = 64;
    c.epochs = 1;
    return c;
  }

  void validate() const {
    if (!(adam.lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (!(lambda >= 0.0)) throw ConfigError("train.lambda must be non-negative");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  }
};

// --- losses ----------------------------------------------------------------

/// Mean softmax cross-entropy of row-per-sample logits.
inline double task_loss(const Matrix& logits, const std::vector<std::size_t>& labels) {
  diff::Tape tape;
  const auto z = tape.constant(transpose(logits));
  return tape.value(tape.softmax_cross_entropy(z, labels))[0];
}

/// Cosine between the live task residual B~_t A~_t and the previous task's.
/// Zero when either norm is below 1e-12.
inline double residual_cosine(const LiLoRALayerState& s) {
  if (s.tasks.size() < 2) throw ContractError("residual_cosine needs a previous task (t >= 2)");
  if (!s.residual_prev) throw StateError("missing previous residual snapshot");
  const Matrix p = s.tasks.back().residual();
  const Matrix& q = *s.residual_prev;
  const double np = frobenius_norm(p), nq = frobenius_norm(q);
  if (np < diff::kCosineNormFloor || nq < diff::kCosineNormFloor) return 0.0;
  return frobenius_inner(p, q) / (np * nq);
}

/// (1 - sim_t) * ||B0^t - B0^{t-1}||_F^2 for one layer.
inline double basis_stability_loss(const LiLoRALayerState& s) {
  if (s.tasks.size() < 2) throw ContractError("basis stability loss is defined from the second task on");
  if (!s.B0_prev) throw StateError("missing B0 snapshot from the previous task");
  return (1.0 - residual_cosine(s)) * frobenius_norm_sq(sub(s.B0, *s.B0_prev));
}

/// Sum of the per-layer stability losses.
inline double basis_stability_loss(const AdapterBank& bank) {
  if (!bank.strategy().is_lilora()) throw ContractError("basis stability loss requires a LiLoRA strategy");
  double total = 0.0;
  for (std::size_t i = 0; i < bank.num_layers(); ++i) total += basis_stability_loss(std::get<LiLoRALayerState>(bank.layer(i)));
  return total;
}

// --- training graph --------------------------------------------------------

/// A trainable leaf on the tape and the bank matrix it mirrors.
struct ParamSlot {
  std::string name;
  Matrix* target = nullptr;
  diff::NodeId node;
};

struct TrainingGraph {
  diff::Tape tape;
  diff::NodeId loss;
  diff::NodeId task_loss;
  std::optional<diff::NodeId> reg_loss;  // sum over layers, before lambda
  std::vector<diff::NodeId> sims;        // per layer, LiLoRA from t >= 2
  std::vector<ParamSlot> params;
};

namespace detail {

inline diff::NodeId lilora_delta(TrainingGraph& g, LiLoRALayerState& s, std::size_t layer, bool with_reg,
                                 bool grad_through_sim, std::vector<diff::NodeId>& reg_terms) {
  diff::Tape& t = g.tape;
  const std::string p = "L" + std::to_string(layer) + ".";
  LiLoRATaskEntry& e = s.tasks.back();
  const auto A = t.parameter(s.A, p + "A");
  const auto B0 = t.parameter(s.B0, p + "B0");
  const auto Bt = t.parameter(e.B_tilde, p + "B_tilde");
  const auto At = t.parameter(e.A_tilde, p + "A_tilde");
  g.params.push_back({p + "A", &s.A, A});
  g.params.push_back({p + "B0", &s.B0, B0});
  g.params.push_back({p + "B_tilde", &e.B_tilde, Bt});
  g.params.push_back({p + "A_tilde", &e.A_tilde, At});

  const auto residual = t.matmul(Bt, At);
  diff::NodeId inner;
  if (e.fixed_alpha) {
    inner = t.add(t.scale(B0, *e.fixed_alpha), t.scale(residual, 1.0 - *e.fixed_alpha));
  } else {
    const auto z = t.parameter(e.z, p + "z");
    g.params.push_back({p + "z", &e.z, z});
    const auto alpha = t.sigmoid(z);
    const auto one_minus = t.add(t.constant(Matrix::scalar(1.0)), t.scale(alpha, -1.0));
    inner = t.add(t.scale(B0, alpha), t.scale(residual, one_minus));
  }

  if (with_reg) {
    const auto prev = t.constant(*s.residual_prev, p + "residual_prev");
    diff::NodeId sim;
    if (grad_through_sim) {
      sim = t.frobenius_cosine(residual, prev);
    } else {
      // Same value, no gradient path.
      const Matrix& P = t.value(residual);
      const double np = frobenius_norm(P), nq = frobenius_norm(*s.residual_prev);
      const double c = (np < diff::kCosineNormFloor || nq < diff::kCosineNormFloor)
                           ? 0.0
                           : frobenius_inner(P, *s.residual_prev) / (np * nq);
      sim = t.constant(Matrix::scalar(c), p + "sim");
    }
    g.sims.push_back(sim);
    const auto drift = t.add(B0, t.constant(scale(*s.B0_prev, -1.0), p + "neg_B0_prev"));
    const auto weight = t.add(t.constant(Matrix::scalar(1.0)), t.scale(sim, -1.0));
    reg_terms.push_back(t.scale(t.frobenius_norm_sq(drift), weight));
  }
  return t.matmul(inner, A);
}

}  // namespace detail

/// Record loss = L_task + lambda * L_reg for one batch under the bank's
/// current (unfrozen) task. L_reg enters only for regularized LiLoRA
/// strategies, from the second task on, and when lambda > 0.
inline TrainingGraph build_training_graph(const Backbone& bb, AdapterBank& bank, const Dataset& batch,
                                          const TrainConfig& cfg) {
  if (!bank.has_unfrozen_task()) throw StateError("no unfrozen task to train");
  const std::size_t task = bank.num_tasks() - 1;
  const bool with_reg = bank.strategy().uses_regularizer() && task >= 1 && cfg.lambda > 0.0;

  TrainingGraph g;
  diff::Tape& t = g.tape;
  std::vector<diff::NodeId> weights, reg_terms;
  for (std::size_t l = 0; l < bb.num_layers(); ++l) {
    const Matrix& W0 = bb.layer(l).W;
    const auto a = bank.adapter_for(l);
    if (!a) {
      weights.push_back(t.constant(W0, "W0_" + std::to_string(l)));
      continue;
    }
    const std::string p = "L" + std::to_string(*a) + ".";
    diff::NodeId delta = std::visit(
        [&](auto& s) -> diff::NodeId {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, SeqLoRALayerState>) {
            const auto B = t.parameter(s.pair.B, p + "B");
            const auto A = t.parameter(s.pair.A, p + "A");
            g.params.push_back({p + "B", &s.pair.B, B});
            g.params.push_back({p + "A", &s.pair.A, A});
            return t.matmul(B, A);
          } else if constexpr (std::is_same_v<T, DirLoRALayerState>) {
            LoRAPair& pair = s.tasks.back();
            const auto B = t.parameter(pair.B, p + "B");
            const auto A = t.parameter(pair.A, p + "A");
            g.params.push_back({p + "B", &pair.B, B});
            g.params.push_back({p + "A", &pair.A, A});
            return t.matmul(B, A);
          } else if constexpr (std::is_same_v<T, SharedALayerState>) {
            const auto A = t.parameter(s.A, p + "A");
            const auto B = t.parameter(s.tasks.back().B, p + "B");
            g.params.push_back({p + "A", &s.A, A});
            g.params.push_back({p + "B", &s.tasks.back().B, B});
            return t.matmul(B, A);
          } else {
            return detail::lilora_delta(g, s, *a, with_reg, cfg.grad_through_sim, reg_terms);
          }
        },
        bank.layer(*a));
    weights.push_back(t.add(t.constant(W0, "W0_" + std::to_string(l)), delta));
  }
  const auto logits = record_forward(t, bb, weights, batch.X);
  g.task_loss = t.softmax_cross_entropy(logits, batch.labels);
  g.loss = g.task_loss;
  if (!reg_terms.empty()) {
    diff::NodeId reg = reg_terms.front();
    for (std::size_t i = 1; i < reg_terms.size(); ++i) reg = t.add(reg, reg_terms[i]);
    g.reg_loss = reg;
    g.loss = t.add(g.task_loss, t.scale(reg, cfg.lambda));
  }
  return g;
}

// --- training loop ---------------------------------------------------------

/// One optimizer step, streamed as a line-delimited record.
struct StepRecord {
  long step = 0;
  std::size_t task = 0;
  double task_loss = 0.0;
  double reg_loss = 0.0;
  std::vector<double> sims;    // per layer (LiLoRA, t >= 2)
  std::vector<double> alphas;  // per layer (LiLoRA)
};

struct TaskLog {
  std::size_t task = 0;
  std::vector<StepRecord> steps;
  double train_accuracy = 0.0;  // fraction, after training
};

using StepSink = std::function<void(const StepRecord&)>;

inline double evaluate_accuracy(const Backbone& bb, const AdapterBank& bank, std::size_t task_id, const Dataset& ds) {
  const AdaptedModel model{&bb, &bank, task_id};
  return accuracy(forward_adapted(model, ds.X), ds.labels);
}

/// Open a new task in `bank`, train its unfrozen parameters with Adam on
/// L_task + lambda * L_reg, then freeze it. Adam moments start fresh for
/// every task. `step_counter` continues across tasks.
inline TaskLog train_task(const Backbone& bb, AdapterBank& bank, const Dataset& train, const TrainConfig& cfg,
                          Rng& init_rng, Rng& shuffle_rng, long& step_counter, const StepSink& sink = {}) {
  cfg.validate();
  if (!bb.frozen()) throw StateError("backbone must be frozen before adapter training");
  bank.add_task(init_rng);  // throws StateError if the previous task is unfrozen
  const std::size_t task = bank.num_tasks() - 1;

  TaskLog log;
  log.task = task;
  Adam opt(cfg.adam);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (const auto& idx : minibatches(permutation(shuffle_rng, train.size()), cfg.batch_size)) {
      const Dataset batch = train.subset(idx);
      TrainingGraph g = build_training_graph(bb, bank, batch, cfg);
      const double loss = g.tape.value(g.loss)[0];
      if (!std::isfinite(loss)) throw TrainingError("loss is not finite on task " + std::to_string(task), step_counter);

      StepRecord rec;
      rec.step = step_counter;
      rec.task = task;
      rec.task_loss = g.tape.value(g.task_loss)[0];
      if (bank.strategy().is_lilora()) {
        rec.alphas = bank.alphas(task);
        if (task >= 1) {
          for (std::size_t i = 0; i < bank.num_layers(); ++i)
            rec.sims.push_back(residual_cosine(std::get<LiLoRALayerState>(bank.layer(i))));
          rec.reg_loss = basis_stability_loss(bank);
        }
      }

      g.tape.backward(g.loss);
      std::vector<Matrix*> params;
      std::vector<const Matrix*> grads;
      for (const ParamSlot& p : g.params) {
        params.push_back(p.target);
        grads.push_back(&g.tape.grad(p.node));
      }
      opt.step(params, grads);
      if (sink) sink(rec);
      log.steps.push_back(std::move(rec));
      ++step_counter;
    }
  }
  log.train_accuracy = evaluate_accuracy(bb, bank, task, train);
  bank.freeze_current();
  return log;
}

// --- continual run ---------------------------------------------------------

struct RunSpec {
  Strategy strategy;
  std::size_t r = 8;
  std::size_t r_tilde = 4;
  InitScale init_scale = InitScale::RankScaled;
  TrainConfig train;
  std::vector<std::size_t> injected_layers;  // empty = every layer
};

struct ContinualResult {
  AccuracyMatrix accuracy;          // percent
  std::vector<double> mif;          // MIF_k per stage, percent
  AdapterBank bank;
  std::vector<TaskLog> logs;
  // LiLoRA only: per task, per layer alpha right after the entry is created
  // and after training.
  std::vector<std::vector<double>> alpha_before, alpha_after;
  // LiLoRA only: ||B0^t - B0^{t-1}||_F for t >= 2.
  std::vector<double> b0_drift;
};

inline std::vector<LayerDims> layer_dims_for(const Backbone& bb, const std::vector<std::size_t>& injected, std::size_t r,
                                             std::size_t r_tilde) {
  std::vector<LayerDims> dims;
  for (std::size_t l : injected) dims.push_back({bb.layer(l).W.rows(), bb.layer(l).W.cols(), r, r_tilde});
  return dims;
}

/// Train the suite's tasks in order; after task k evaluate every task j <= k
/// with its own entries to fill a(k, j).
inline ContinualResult run_continual(const Backbone& bb, const TaskSuite& suite, const RunSpec& spec,
                                     const StepSink& sink = {}) {
  spec.train.validate();
  std::vector<std::size_t> injected = spec.injected_layers;
  if (injected.empty())
    for (std::size_t l = 0; l < bb.num_layers(); ++l) injected.push_back(l);

  Rng master(spec.train.seed);
  Rng init_rng = master.fork();
  Rng shuffle_rng = master.fork();

  ContinualResult res;
  res.bank = AdapterBank(spec.strategy, layer_dims_for(bb, injected, spec.r, spec.r_tilde), injected, init_rng,
                         spec.init_scale);
  const std::size_t K = suite.tasks.size();
  res.accuracy = AccuracyMatrix(K);
  const MifChecker checker = MifChecker::class_range(suite.params.classes_per_task);
  const bool lilora = spec.strategy.is_lilora();

  long step = 0;
  std::vector<std::vector<std::size_t>> outputs(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<Matrix> b0_all;
    if (lilora)
      for (std::size_t i = 0; i < res.bank.num_layers(); ++i)
        b0_all.push_back(std::get<LiLoRALayerState>(res.bank.layer(i)).B0);

    StepSink wrapped = sink;
    bool first = true;
    TaskLog log = train_task(bb, res.bank, suite.tasks[k].train, spec.train, init_rng, shuffle_rng, step,
                             [&](const StepRecord& r) {
                               if (first && lilora) res.alpha_before.push_back(r.alphas);
                               first = false;
                               if (wrapped) wrapped(r);
                             });
    if (lilora) {
      if (first) res.alpha_before.push_back(res.bank.alphas(k));
      res.alpha_after.push_back(res.bank.alphas(k));
      if (k >= 1) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < res.bank.num_layers(); ++i)
          d2 += frobenius_norm_sq(sub(std::get<LiLoRALayerState>(res.bank.layer(i)).B0, b0_all[i]));
        res.b0_drift.push_back(std::sqrt(d2));
      }
    }
    res.logs.push_back(std::move(log));

    for (std::size_t j = 0; j <= k; ++j) {
      const AdaptedModel model{&bb, &res.bank, j};
      const Matrix logits = forward_adapted(model, suite.tasks[j].test.X);
      res.accuracy.set(k, j, 100.0 * accuracy(logits, suite.tasks[j].test.labels));
      outputs[j] = predict(logits);
    }
    res.mif.push_back(mean_instruction_following(outputs, checker, k + 1));
  }
  return res;
}

}  // namespace lilora
