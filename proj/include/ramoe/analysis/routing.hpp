#pragma once

// Stage 2: sequence-level routing distributions, entropy-normalized JS
// divergence across parallel pairs, middle-layer identification, task-expert
// selection, and the frozen reference store consumed by Stage 3.

#include "ramoe/core/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ramoe::analysis {

using core::Mat;
using core::RoutingTrace;
using core::Tokens;

// Per-layer mean of per-token routing distributions over generated positions.
struct SeqRoutingDist {
  std::vector<Eigen::VectorXd> q;  // n_layers entries, each E-dim

  int n_layers() const { return static_cast<int>(q.size()); }
};

struct DivergenceProfile {
  std::vector<double> mean_div;  // per layer, in [0,1]
  int n_pairs = 0;
};

struct ExpertScore {
  int id = 0;
  double delta = 0.0;
};

struct TaskExpertMap {
  int mid_lo = 0, mid_hi = -1;                                   // inclusive layer range
  std::map<int, std::vector<ExpertScore>> experts;               // per mid layer, sorted by rule
  std::map<std::string, std::map<int, Eigen::VectorXd>> references;  // ci id -> layer -> q_src
  std::vector<int> layers_without_positive_delta;

  bool empty() const { return mid_hi < mid_lo; }
  std::vector<int> expert_ids(int layer) const {
    std::vector<int> out;
    auto it = experts.find(layer);
    if (it != experts.end())
      for (const auto& s : it->second) out.push_back(s.id);
    return out;
  }
};

// One capturing pass over prompt + response; generated positions cover
// exactly the response span.
inline RoutingTrace teacher_force_trace(const core::Parameters& params, const Tokens& prompt,
                                        const Tokens& response) {
  if (response.empty()) throw std::invalid_argument("teacher_force_trace: empty response");
  Tokens seq = prompt;
  seq.insert(seq.end(), response.begin(), response.end());
  auto fr = core::forward(params, seq, /*capture=*/true);
  RoutingTrace trace = std::move(*fr.trace);
  for (std::size_t i = prompt.size(); i < seq.size(); ++i)
    trace.generated_positions.push_back(static_cast<int>(i));
  return trace;
}

inline SeqRoutingDist seq_routing_dist(const RoutingTrace& trace) {
  if (trace.generated_positions.empty())
    throw std::invalid_argument("seq_routing_dist: no generated positions");
  SeqRoutingDist out;
  for (const Mat& probs : trace.layer_probs) {
    Eigen::VectorXd q = Eigen::VectorXd::Zero(probs.cols());
    for (int t : trace.generated_positions) q += probs.row(t).transpose();
    q /= static_cast<double>(trace.generated_positions.size());
    out.q.push_back(std::move(q));
  }
  return out;
}

namespace detail {

inline void check_distribution(const Eigen::VectorXd& p, const char* what) {
  if (p.size() == 0) throw std::invalid_argument(std::string(what) + ": empty distribution");
  if (p.minCoeff() < 0.0) throw std::invalid_argument(std::string(what) + ": negative entry");
  if (std::abs(p.sum() - 1.0) > 1e-6) throw std::invalid_argument(std::string(what) + ": does not sum to 1");
}

inline double kl_base2(const Eigen::VectorXd& p, const Eigen::VectorXd& m) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) s += p(i) * std::log2(p(i) / m(i));
  return s;
}

}  // namespace detail

// Jensen-Shannon divergence with base-2 logs, so the value lands in [0,1]
// with the entropy normalization built in. 0*log 0 := 0.
inline double js_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  if (p.size() != q.size()) throw std::invalid_argument("js_divergence: length mismatch");
  detail::check_distribution(p, "js_divergence p");
  detail::check_distribution(q, "js_divergence q");
  Eigen::VectorXd m = 0.5 * (p + q);
  const double js = 0.5 * detail::kl_base2(p, m) + 0.5 * detail::kl_base2(q, m);
  return std::clamp(js, 0.0, 1.0);
}

// Mean per-layer JS over pairs matched by id.
inline DivergenceProfile divergence_profile(const std::map<std::string, SeqRoutingDist>& dists_src,
                                            const std::map<std::string, SeqRoutingDist>& dists_tgt) {
  if (dists_src.empty()) throw std::invalid_argument("divergence_profile: no pairs");
  if (dists_src.size() != dists_tgt.size()) throw std::invalid_argument("divergence_profile: id mismatch");
  DivergenceProfile out;
  for (const auto& [id, src] : dists_src) {
    auto it = dists_tgt.find(id);
    if (it == dists_tgt.end()) throw std::invalid_argument("divergence_profile: missing id " + id);
    const SeqRoutingDist& tgt = it->second;
    if (src.n_layers() != tgt.n_layers()) throw std::invalid_argument("divergence_profile: layer count mismatch");
    if (out.mean_div.empty()) out.mean_div.assign(static_cast<std::size_t>(src.n_layers()), 0.0);
    for (int l = 0; l < src.n_layers(); ++l)
      out.mean_div[static_cast<std::size_t>(l)] +=
          js_divergence(src.q[static_cast<std::size_t>(l)], tgt.q[static_cast<std::size_t>(l)]);
    ++out.n_pairs;
  }
  for (double& v : out.mean_div) v /= static_cast<double>(out.n_pairs);
  return out;
}

struct LayerRange {
  int lo = 0, hi = -1;  // inclusive

  int length() const { return hi - lo + 1; }
};

// Longest contiguous run of layers whose mean divergence is strictly below
// the median; ties go to the earliest run.
inline LayerRange middle_layers(const DivergenceProfile& profile) {
  const auto& d = profile.mean_div;
  if (d.size() < 2) throw std::invalid_argument("middle_layers: need at least 2 layers");
  std::vector<double> sorted = d;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  LayerRange best;
  int run_start = -1;
  for (int i = 0; i <= static_cast<int>(n); ++i) {
    const bool below = i < static_cast<int>(n) && d[static_cast<std::size_t>(i)] < med;
    if (below && run_start < 0) run_start = i;
    if (!below && run_start >= 0) {
      if (i - run_start > best.length()) best = {run_start, i - 1};
      run_start = -1;
    }
  }
  if (best.length() <= 0) throw std::runtime_error("middle_layers: degenerate profile (no layer below median)");
  return best;
}

// Elementwise difference of per-expert mean routing weights at one layer.
inline Eigen::VectorXd task_specificity(const std::vector<SeqRoutingDist>& dists_task,
                                        const std::vector<SeqRoutingDist>& dists_gen, int layer) {
  if (dists_task.empty() || dists_gen.empty()) throw std::invalid_argument("task_specificity: empty input");
  auto mean_at = [layer](const std::vector<SeqRoutingDist>& dists) {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(dists[0].q[static_cast<std::size_t>(layer)].size());
    for (const auto& d : dists) m += d.q[static_cast<std::size_t>(layer)];
    return (m / static_cast<double>(dists.size())).eval();
  };
  return mean_at(dists_task) - mean_at(dists_gen);
}

// Top-K experts by delta among those with delta > 0; ties break toward the
// lower expert id. A layer with no positive delta gets an empty set.
inline std::vector<ExpertScore> select_layer_experts(const Eigen::VectorXd& delta, int k) {
  if (k < 1) throw std::invalid_argument("select_layer_experts: K must be >= 1");
  std::vector<int> order(static_cast<std::size_t>(delta.size()));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (delta(a) != delta(b)) return delta(a) > delta(b);
    return a < b;
  });
  std::vector<ExpertScore> out;
  for (int e : order) {
    if (static_cast<int>(out.size()) >= k) break;
    if (delta(e) <= 0.0) break;
    out.push_back({e, delta(e)});
  }
  return out;
}

// Scores every layer it is given (the alignment loss reads the mid range by
// default; the all-layers ablation reads the rest without re-profiling).
inline TaskExpertMap select_task_experts(const std::map<int, Eigen::VectorXd>& delta_per_layer, int k,
                                         const LayerRange& mid) {
  TaskExpertMap map;
  map.mid_lo = mid.lo;
  map.mid_hi = mid.hi;
  for (int l = mid.lo; l <= mid.hi; ++l)
    if (delta_per_layer.find(l) == delta_per_layer.end())
      throw std::invalid_argument("select_task_experts: missing delta for mid layer " + std::to_string(l));
  for (const auto& [l, delta] : delta_per_layer) {
    auto sel = select_layer_experts(delta, k);
    if (sel.empty() && l >= mid.lo && l <= mid.hi) map.layers_without_positive_delta.push_back(l);
    map.experts[l] = std::move(sel);
  }
  return map;
}

// Copies the source-language routing distributions of the ci examples for
// every mid layer; the map is treated as immutable afterwards.
inline void build_reference_store(TaskExpertMap& map, const std::vector<std::string>& ci_ids,
                                  const std::map<std::string, SeqRoutingDist>& src_dists) {
  for (const auto& id : ci_ids) {
    auto it = src_dists.find(id);
    if (it == src_dists.end()) throw std::invalid_argument("build_reference_store: missing id " + id);
    std::map<int, Eigen::VectorXd> per_layer;
    for (int l = 0; l < it->second.n_layers(); ++l) per_layer[l] = it->second.q[static_cast<std::size_t>(l)];
    map.references[id] = std::move(per_layer);
  }
}

// ---- serialization ----

inline void to_json(nlohmann::json& j, const DivergenceProfile& p) {
  j = {{"mean_div", p.mean_div}, {"n_pairs", p.n_pairs}};
}
inline void from_json(const nlohmann::json& j, DivergenceProfile& p) {
  j.at("mean_div").get_to(p.mean_div);
  j.at("n_pairs").get_to(p.n_pairs);
}

inline void to_json(nlohmann::json& j, const ExpertScore& s) { j = {{"id", s.id}, {"delta", s.delta}}; }
inline void from_json(const nlohmann::json& j, ExpertScore& s) {
  j.at("id").get_to(s.id);
  j.at("delta").get_to(s.delta);
}

inline void to_json(nlohmann::json& j, const TaskExpertMap& m) {
  nlohmann::json experts = nlohmann::json::object();
  for (const auto& [layer, sel] : m.experts) experts[std::to_string(layer)] = sel;
  nlohmann::json refs = nlohmann::json::object();
  for (const auto& [id, per_layer] : m.references) {
    nlohmann::json layers = nlohmann::json::object();
    for (const auto& [layer, q] : per_layer)
      layers[std::to_string(layer)] = std::vector<double>(q.data(), q.data() + q.size());
    refs[id] = layers;
  }
  j = {{"mid_layers", {m.mid_lo, m.mid_hi}},
       {"experts", experts},
       {"references", refs},
       {"layers_without_positive_delta", m.layers_without_positive_delta}};
}

inline void from_json(const nlohmann::json& j, TaskExpertMap& m) {
  m.mid_lo = j.at("mid_layers")[0].get<int>();
  m.mid_hi = j.at("mid_layers")[1].get<int>();
  m.experts.clear();
  for (auto it = j.at("experts").begin(); it != j.at("experts").end(); ++it)
    m.experts[std::stoi(it.key())] = it.value().get<std::vector<ExpertScore>>();
  m.references.clear();
  for (auto it = j.at("references").begin(); it != j.at("references").end(); ++it) {
    std::map<int, Eigen::VectorXd> per_layer;
    for (auto lt = it.value().begin(); lt != it.value().end(); ++lt) {
      auto vals = lt.value().get<std::vector<double>>();
      per_layer[std::stoi(lt.key())] = Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
    }
    m.references[it.key()] = std::move(per_layer);
  }
  m.layers_without_positive_delta = j.value("layers_without_positive_delta", std::vector<int>{});
}

// JSONL record for per-example per-layer distributions.
struct RoutingDistRecord {
  std::string id;
  std::string lang;
  int layer = 0;
  std::vector<double> q;
};

inline void to_json(nlohmann::json& j, const RoutingDistRecord& r) {
  j = {{"id", r.id}, {"lang", r.lang}, {"layer", r.layer}, {"q", r.q}};
}
inline void from_json(const nlohmann::json& j, RoutingDistRecord& r) {
  j.at("id").get_to(r.id);
  j.at("lang").get_to(r.lang);
  j.at("layer").get_to(r.layer);
  j.at("q").get_to(r.q);
}

inline std::vector<RoutingDistRecord> to_records(const std::map<std::string, SeqRoutingDist>& dists,
                                                 const std::string& lang) {
  std::vector<RoutingDistRecord> out;
  for (const auto& [id, d] : dists)
    for (int l = 0; l < d.n_layers(); ++l) {
      const auto& q = d.q[static_cast<std::size_t>(l)];
      out.push_back({id, lang, l, std::vector<double>(q.data(), q.data() + q.size())});
    }
  return out;
}

inline std::map<std::string, SeqRoutingDist> from_records(const std::vector<RoutingDistRecord>& records,
                                                          const std::string& lang, int n_layers) {
  std::map<std::string, SeqRoutingDist> out;
  for (const auto& r : records) {
    if (r.lang != lang) continue;
    auto& d = out[r.id];
    if (d.q.empty()) d.q.resize(static_cast<std::size_t>(n_layers));
    d.q[static_cast<std::size_t>(r.layer)] =
        Eigen::Map<const Eigen::VectorXd>(r.q.data(), static_cast<Eigen::Index>(r.q.size()));
  }
  return out;
}

}  // namespace ramoe::analysis
