#pragma once

// Stage 3: restricted-renormalized KL alignment loss, the combined training
// objective with ci-only gating, the Adam fine-tuning loop, and the
// inference-time routing-steering baseline.

#include "ramoe/analysis/routing.hpp"
#include "ramoe/core/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ramoe::train {

using analysis::TaskExpertMap;
using core::Mat;
using core::Tokens;

struct TrainConfig {
  double lambda = 1.0;        // alignment weight
  int k_experts = 8;          // task experts per layer
  int epochs = 3;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double warmup_ratio = 0.03;
  std::uint64_t seed = 1;
  int adapter_rank = 0;
  double epsilon_kl = 1e-9;
  double max_grad_norm = 0.0;  // global-norm clip; 0 disables
  bool no_align = false;
  bool no_task_expert_restriction = false;
  bool no_ci_filter = false;
  bool all_layers = false;
  int log_every = 10;
  int eval_every = 0;  // steps between held-out CE evals; 0 disables

  void validate() const {
    if (lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
    if (epsilon_kl <= 0.0 || epsilon_kl > 1e-6) throw std::invalid_argument("epsilon_kl must be in (0, 1e-6]");
    if (k_experts < 1 || epochs < 1 || batch_size < 1) throw std::invalid_argument("bad train config");
    if (max_grad_norm < 0.0) throw std::invalid_argument("max_grad_norm must be >= 0");
  }

  bool align_enabled() const { return !no_align && lambda > 0.0; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lambda", c.lambda},           {"k_experts", c.k_experts},
       {"epochs", c.epochs},           {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate}, {"warmup_ratio", c.warmup_ratio},
       {"seed", c.seed},               {"adapter_rank", c.adapter_rank},
       {"epsilon_kl", c.epsilon_kl},   {"max_grad_norm", c.max_grad_norm},
       {"no_align", c.no_align},
       {"no_task_expert_restriction", c.no_task_expert_restriction},
       {"no_ci_filter", c.no_ci_filter}, {"all_layers", c.all_layers},
       {"log_every", c.log_every},     {"eval_every", c.eval_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("lambda").get_to(c.lambda);
  j.at("k_experts").get_to(c.k_experts);
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("warmup_ratio").get_to(c.warmup_ratio);
  j.at("seed").get_to(c.seed);
  j.at("adapter_rank").get_to(c.adapter_rank);
  j.at("epsilon_kl").get_to(c.epsilon_kl);
  c.max_grad_norm = j.value("max_grad_norm", 0.0);
  j.at("no_align").get_to(c.no_align);
  j.at("no_task_expert_restriction").get_to(c.no_task_expert_restriction);
  j.at("no_ci_filter").get_to(c.no_ci_filter);
  j.at("all_layers").get_to(c.all_layers);
  c.log_every = j.value("log_every", 10);
  c.eval_every = j.value("eval_every", 0);
}

// q restricted to the expert set and renormalized; falls back to the uniform
// distribution over the set (and flags it) when the restricted mass is
// below eps.
inline Eigen::VectorXd restrict_renormalize(const Eigen::VectorXd& q, const std::vector<int>& experts,
                                            double eps = 1e-9, bool* mass_underflow = nullptr) {
  if (experts.empty()) throw std::invalid_argument("restrict_renormalize: empty expert set");
  Eigen::VectorXd out(static_cast<Eigen::Index>(experts.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    out(static_cast<Eigen::Index>(i)) = q(experts[i]);
    s += q(experts[i]);
  }
  const bool underflow = s < eps;
  if (mass_underflow) *mass_underflow = underflow;
  if (underflow)
    out.setConstant(1.0 / static_cast<double>(experts.size()));
  else
    out /= s;
  return out;
}

// One training example: teacher-forced prompt + response with a Stage-1 label.
struct TrainExample {
  std::string id;
  Tokens prompt;
  Tokens response;
  std::string label;  // "", cc, ci, ic, ii
};

// Live target-language routing per mid layer for the ci examples of a batch,
// paired with the frozen references.
struct AlignBatchState {
  struct Entry {
    std::string id;
    std::map<int, Eigen::VectorXd> live;  // layer -> full-E live routing (mean over response positions)
  };
  std::vector<Entry> entries;
};

namespace detail {

inline std::vector<int> align_layers(const TaskExpertMap& map, const TrainConfig& cfg) {
  std::vector<int> out;
  if (cfg.all_layers) {
    for (const auto& [l, _] : map.experts) out.push_back(l);
  } else {
    for (int l = map.mid_lo; l <= map.mid_hi; ++l) out.push_back(l);
  }
  return out;
}

inline std::vector<int> loss_expert_set(const TaskExpertMap& map, const TrainConfig& cfg, int layer, int n_experts) {
  if (cfg.no_task_expert_restriction) {
    std::vector<int> all(static_cast<std::size_t>(n_experts));
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  return map.expert_ids(layer);
}

inline bool align_applies(const TrainExample& ex, const TaskExpertMap& map, const TrainConfig& cfg) {
  if (!cfg.align_enabled()) return false;
  if (!cfg.no_ci_filter && ex.label != "ci") return false;
  return map.references.count(ex.id) > 0;
}

}  // namespace detail

// KL(q~_ref || q~_live) summed over align layers, averaged over the entries.
// The reference side is a constant; natural log; live entries floored at
// epsilon_kl and renormalized.
inline double kl_align_loss(const AlignBatchState& state, const TaskExpertMap& map, const TrainConfig& cfg,
                            int n_experts) {
  if (state.entries.empty()) return 0.0;
  double total = 0.0;
  for (const auto& entry : state.entries) {
    const auto& refs = map.references.at(entry.id);
    for (int l : detail::align_layers(map, cfg)) {
      const auto set = detail::loss_expert_set(map, cfg, l, n_experts);
      if (set.empty()) continue;  // no positive-delta experts; layer skipped
      Eigen::VectorXd ref = restrict_renormalize(refs.at(l), set, cfg.epsilon_kl);
      bool underflow = false;
      Eigen::VectorXd live = restrict_renormalize(entry.live.at(l), set, cfg.epsilon_kl, &underflow);
      if (!underflow) {
        live = live.cwiseMax(cfg.epsilon_kl);
        live /= live.sum();
      }
      for (Eigen::Index i = 0; i < ref.size(); ++i)
        if (ref(i) > 0.0) total += ref(i) * (std::log(ref(i)) - std::log(live(i)));
    }
  }
  return total / static_cast<double>(state.entries.size());
}

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double align = 0.0;
  int n_align_examples = 0;
  int mass_underflows = 0;
};

namespace detail {

struct ExampleGraph {
  ad::Var ce;                   // scalar
  ad::Var align;                // scalar, invalid when not applicable
  int underflows = 0;
};

inline ExampleGraph build_example_loss(ad::Tape& tape, const core::Parameters& params, const core::ParamVars& pv,
                                       const TrainExample& ex, const TaskExpertMap& map, const TrainConfig& cfg) {
  Tokens seq = ex.prompt;
  seq.insert(seq.end(), ex.response.begin(), ex.response.end());
  auto graph = core::build_forward(tape, params, pv, seq);
  std::vector<int> targets(seq.size(), 0);
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) targets[t] = seq[t + 1];
  std::vector<int> mask;
  for (std::size_t t = ex.prompt.size() - 1; t + 1 < seq.size(); ++t) mask.push_back(static_cast<int>(t));
  ExampleGraph out;
  out.ce = tape.cross_entropy(graph.logits, targets, mask);

  if (detail::align_applies(ex, map, cfg)) {
    std::vector<int> gen_positions;
    for (std::size_t t = ex.prompt.size(); t < seq.size(); ++t) gen_positions.push_back(static_cast<int>(t));
    const auto& refs = map.references.at(ex.id);
    std::vector<ad::Var> terms;
    for (int l : detail::align_layers(map, cfg)) {
      const auto set = detail::loss_expert_set(map, cfg, l, params.config.n_experts);
      if (set.empty()) continue;
      ad::Var q = tape.mean_rows_subset(graph.layer_probs[static_cast<std::size_t>(l)], gen_positions);
      bool underflow = false;
      terms.push_back(tape.kl_restricted(q, refs.at(l), set, cfg.epsilon_kl, &underflow));
      if (underflow) ++out.underflows;
    }
    if (!terms.empty()) out.align = tape.weighted_sum(terms, std::vector<double>(terms.size(), 1.0));
  }
  return out;
}

}  // namespace detail

// Combined objective over a batch: L = L_CE + lambda * L_align, with L_CE the
// mean per-example masked cross-entropy and L_align the mean over the batch's
// alignment-eligible examples. Gradients accumulate into `grads` when given.
inline LossBreakdown combined_loss(const std::vector<TrainExample>& batch, const core::Parameters& params,
                                   const TaskExpertMap& map, const TrainConfig& cfg,
                                   std::map<std::string, Mat>* grads = nullptr) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("combined_loss: empty batch");
  LossBreakdown out;
  for (const auto& ex : batch)
    if (detail::align_applies(ex, map, cfg)) ++out.n_align_examples;

  const double ce_w = 1.0 / static_cast<double>(batch.size());
  const double align_w = out.n_align_examples > 0 ? 1.0 / static_cast<double>(out.n_align_examples) : 0.0;

  for (const auto& ex : batch) {
    ad::Tape tape;
    core::ParamVars pv = core::ParamVars::make(tape, params);
    auto g = detail::build_example_loss(tape, params, pv, ex, map, cfg);
    out.ce += tape.scalar(g.ce) * ce_w;
    out.mass_underflows += g.underflows;
    std::vector<ad::Var> parts = {g.ce};
    std::vector<double> coeffs = {ce_w};
    if (g.align.valid()) {
      out.align += tape.scalar(g.align) * align_w;
      parts.push_back(g.align);
      coeffs.push_back(cfg.lambda * align_w);
    }
    if (grads != nullptr) {
      tape.backward(tape.weighted_sum(parts, coeffs));
      for (const auto& name : params.trainable_names()) {
        const Mat& gm = tape.grad(pv.at(name));
        auto it = grads->find(name);
        if (it == grads->end())
          (*grads)[name] = gm;
        else
          it->second += gm;
      }
    }
  }
  out.total = out.ce + cfg.lambda * out.align;
  if (!std::isfinite(out.total)) throw std::runtime_error("combined_loss: non-finite loss");
  return out;
}

struct StepMetrics {
  int step = 0;
  double lr = 0.0;
  double loss_ce = 0.0;
  double loss_align = 0.0;
  std::optional<double> eval_ce;
  std::optional<double> selection_rate;
};

inline void to_json(nlohmann::json& j, const StepMetrics& m) {
  j = {{"step", m.step}, {"lr", m.lr}, {"loss_ce", m.loss_ce}, {"loss_align", m.loss_align}};
  if (m.eval_ce) j["eval_ce"] = *m.eval_ce;
  if (m.selection_rate) j["selection_rate"] = *m.selection_rate;
}

inline void from_json(const nlohmann::json& j, StepMetrics& m) {
  j.at("step").get_to(m.step);
  j.at("lr").get_to(m.lr);
  j.at("loss_ce").get_to(m.loss_ce);
  j.at("loss_align").get_to(m.loss_align);
  if (j.contains("eval_ce")) m.eval_ce = j.at("eval_ce").get<double>();
  if (j.contains("selection_rate")) m.selection_rate = j.at("selection_rate").get<double>();
}

struct RunMetrics {
  std::vector<StepMetrics> steps;
};

// Linear warmup over the first warmup_ratio of steps, then linear decay.
inline double lr_at(const TrainConfig& cfg, int step, int total_steps) {
  const int warmup = std::max(1, static_cast<int>(std::ceil(cfg.warmup_ratio * total_steps)));
  if (step < warmup) return cfg.learning_rate * static_cast<double>(step + 1) / warmup;
  if (total_steps <= warmup) return cfg.learning_rate;
  return cfg.learning_rate * static_cast<double>(total_steps - step) / (total_steps - warmup);
}

// Optional per-step evaluation hooks wired in by the pipeline.
struct FinetuneHooks {
  std::function<double(const core::Parameters&)> eval_ce;
  std::function<double(const core::Parameters&)> selection_rate;
};

// Deterministic Adam fine-tuning loop; only trainable arrays (all, or just
// adapters when adapter_rank > 0) are updated.
inline RunMetrics finetune(core::Parameters& params, const std::vector<TrainExample>& dataset,
                           const TaskExpertMap& map, const TrainConfig& cfg,
                           const FinetuneHooks* hooks = nullptr) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("finetune: empty dataset");
  const auto trainable = params.trainable_names();
  std::map<std::string, Mat> m1, m2;
  for (const auto& name : trainable) {
    m1[name] = Mat::Zero(params.at(name).rows(), params.at(name).cols());
    m2[name] = Mat::Zero(params.at(name).rows(), params.at(name).cols());
  }
  const int steps_per_epoch = static_cast<int>((dataset.size() + cfg.batch_size - 1) / cfg.batch_size);
  const int total_steps = steps_per_epoch * cfg.epochs;
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  RunMetrics metrics;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(cfg.seed + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t base = 0; base < dataset.size(); base += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<TrainExample> batch;
      for (std::size_t i = base; i < std::min(dataset.size(), base + static_cast<std::size_t>(cfg.batch_size)); ++i)
        batch.push_back(dataset[order[i]]);
      std::map<std::string, Mat> grads;
      LossBreakdown loss = combined_loss(batch, params, map, cfg, &grads);
      if (cfg.max_grad_norm > 0.0) {
        double sq = 0.0;
        for (const auto& name : trainable) sq += grads.at(name).squaredNorm();
        const double norm = std::sqrt(sq);
        if (norm > cfg.max_grad_norm) {
          const double scale = cfg.max_grad_norm / norm;
          for (const auto& name : trainable) grads.at(name) *= scale;
        }
      }
      const double lr = lr_at(cfg, step, total_steps);
      const double t = static_cast<double>(step + 1);
      for (const auto& name : trainable) {
        Mat& g = grads.at(name);
        m1[name] = beta1 * m1[name] + (1 - beta1) * g;
        m2[name] = beta2 * m2[name] + (1 - beta2) * g.cwiseProduct(g);
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        Mat mhat = m1[name] / bc1;
        Mat vhat = m2[name] / bc2;
        params.at(name) -=
            lr * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + adam_eps).matrix());
      }
      if (!params.all_finite()) throw std::runtime_error("finetune: parameters became non-finite at step " +
                                                         std::to_string(step));
      if (cfg.log_every > 0 && step % cfg.log_every == 0) {
        StepMetrics sm;
        sm.step = step;
        sm.lr = lr;
        sm.loss_ce = loss.ce;
        sm.loss_align = loss.align;
        if (hooks != nullptr && cfg.eval_every > 0 && step % cfg.eval_every == 0) {
          if (hooks->eval_ce) sm.eval_ce = hooks->eval_ce(params);
          if (hooks->selection_rate) sm.selection_rate = hooks->selection_rate(params);
        }
        metrics.steps.push_back(sm);
      }
      ++step;
    }
  }
  return metrics;
}

// Inference-time routing steering: +delta on every task expert's router
// logit at every mid layer.
inline core::RouterSteering make_steering(const TaskExpertMap& map, double delta) {
  core::RouterSteering s;
  s.delta = delta;
  for (int l = map.mid_lo; l <= map.mid_hi; ++l) {
    auto ids = map.expert_ids(l);
    if (!ids.empty()) s.experts_per_layer[l] = std::move(ids);
  }
  return s;
}

inline core::DecodeResult routing_steer_decode(const core::Parameters& params, const Tokens& prompt,
                                               const TaskExpertMap& map, double delta, int max_new) {
  core::RouterSteering s = make_steering(map, delta);
  return core::greedy_decode(params, prompt, max_new, &s);
}

}  // namespace ramoe::train
