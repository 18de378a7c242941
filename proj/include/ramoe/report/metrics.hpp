#pragma once

// Evaluation and reporting: task accuracy, task-expert selection rate,
// Pearson correlation, exact FLOPs accounting, and the layer-divergence
// report document.

#include "ramoe/analysis/routing.hpp"
#include "ramoe/synth/lang.hpp"
#include "ramoe/taxonomy/taxonomy.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace ramoe::report {

using analysis::DivergenceProfile;
using analysis::TaskExpertMap;
using core::RoutingTrace;

// Greedy decode each prompt of the chosen language side and score with the
// exact-match judge.
inline double eval_accuracy(const core::Parameters& params, const std::vector<synth::ParallelExample>& eval_set,
                            const std::string& lang, int max_new = 8,
                            const core::RouterSteering* steering = nullptr) {
  if (eval_set.empty()) throw std::invalid_argument("eval_accuracy: empty eval set");
  if (lang != "src" && lang != "tgt") throw std::invalid_argument("eval_accuracy: lang must be src or tgt");
  int correct = 0;
  for (const auto& ex : eval_set) {
    const core::Tokens& prompt = lang == "src" ? ex.prompt_src : ex.prompt_tgt;
    auto dec = core::greedy_decode(params, prompt, max_new, steering);
    if (taxonomy::judge_exact(dec.generated, ex.gold_answer)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(eval_set.size());
}

namespace detail {

// Top-k expert ids for one token's routing row, with the model's tie rule
// (higher probability first, lower id on ties).
inline std::vector<int> topk_ids(const Eigen::RowVectorXd& p, int k) {
  std::vector<int> ids(static_cast<std::size_t>(p.size()));
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return p(a) > p(b); });
  ids.resize(static_cast<std::size_t>(std::min<int>(k, static_cast<int>(p.size()))));
  return ids;
}

}  // namespace detail

// Fraction of top-k selection slots occupied by task experts, over all
// generated tokens and mid layers with a non-empty expert set. The
// mass-weighted variant measures routing probability mass instead of slots.
inline double selection_rate(const std::vector<RoutingTrace>& traces, const TaskExpertMap& map, int top_k,
                             bool mass_weighted = false) {
  if (map.empty()) throw std::invalid_argument("selection_rate: empty task-expert map");
  if (top_k < 1) throw std::invalid_argument("selection_rate: top_k must be >= 1");
  double hit = 0.0, total = 0.0;
  for (const auto& trace : traces) {
    for (int l = map.mid_lo; l <= map.mid_hi; ++l) {
      if (l >= trace.n_layers()) throw std::invalid_argument("selection_rate: trace has too few layers");
      const auto ids = map.expert_ids(l);
      if (ids.empty()) continue;
      const std::set<int> task(ids.begin(), ids.end());
      const core::Mat& probs = trace.layer_probs[static_cast<std::size_t>(l)];
      for (int t : trace.generated_positions) {
        if (mass_weighted) {
          for (int e : ids) hit += probs(t, e);
          total += 1.0;
        } else {
          for (int e : detail::topk_ids(probs.row(t), top_k))
            if (task.count(e)) hit += 1.0;
          total += static_cast<double>(std::min<int>(top_k, static_cast<int>(probs.cols())));
        }
      }
    }
  }
  if (total == 0.0) return 0.0;
  return hit / total;
}

struct PearsonResult {
  double r = 0.0;
  double p = 1.0;  // two-sided, t-distribution with n-2 dof
};

inline PearsonResult pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 3) throw std::invalid_argument("pearson: need at least 3 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson: zero variance");
  PearsonResult out;
  out.r = sxy / std::sqrt(sxx * syy);
  out.r = std::clamp(out.r, -1.0, 1.0);
  const double dof = static_cast<double>(n - 2);
  if (1.0 - out.r * out.r <= 0.0) {
    out.p = 0.0;
  } else {
    const double t = out.r * std::sqrt(dof / (1.0 - out.r * out.r));
    boost::math::students_t dist(dof);
    out.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  }
  return out;
}

struct FlopsInput {
  std::uint64_t B = 0;    // tokens per forward
  std::uint64_t L = 0;    // layers
  std::uint64_t K = 0;    // activated experts per token
  std::uint64_t d_m = 0;  // model width
  std::uint64_t d_e = 0;  // expert width
  std::uint64_t r = 0;    // adapter rank, 0 for none
  std::uint64_t E = 0;    // experts per layer

  void validate() const {
    if (B == 0 || L == 0 || K == 0 || d_m == 0 || d_e == 0 || E == 0)
      throw std::invalid_argument("flops: B, L, K, d_m, d_e, E must be positive");
  }
};

struct FlopsBreakdown {
  std::uint64_t base = 0;   // 6 B L K d_m d_e
  std::uint64_t lora = 0;   // 4 B L K r (d_m + d_e)
  std::uint64_t align = 0;  // 2 B L E
  std::uint64_t total = 0;  // base + lora; align reported separately
};

inline FlopsBreakdown flops_estimate(const FlopsInput& in) {
  in.validate();
  FlopsBreakdown out;
  out.base = 6ull * in.B * in.L * in.K * in.d_m * in.d_e;
  out.lora = 4ull * in.B * in.L * in.K * in.r * (in.d_m + in.d_e);
  out.align = 2ull * in.B * in.L * in.E;
  out.total = out.base + out.lora;
  return out;
}

// "6597.1"-style rendering: FLOPs / 1e9, one decimal.
inline std::string gflops_str(std::uint64_t flops) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << static_cast<double>(flops) / 1e9;
  return os.str();
}

inline void to_json(nlohmann::json& j, const FlopsInput& in) {
  j = {{"B", in.B}, {"L", in.L}, {"K", in.K}, {"d_m", in.d_m}, {"d_e", in.d_e}, {"r", in.r}, {"E", in.E}};
}

inline void from_json(const nlohmann::json& j, FlopsInput& in) {
  j.at("B").get_to(in.B);
  j.at("L").get_to(in.L);
  j.at("K").get_to(in.K);
  j.at("d_m").get_to(in.d_m);
  j.at("d_e").get_to(in.d_e);
  j.at("r").get_to(in.r);
  j.at("E").get_to(in.E);
}

inline void to_json(nlohmann::json& j, const FlopsBreakdown& b) {
  j = {{"base", b.base},
       {"lora", b.lora},
       {"align", b.align},
       {"total", b.total},
       {"base_gflops", gflops_str(b.base)},
       {"lora_gflops", gflops_str(b.lora)},
       {"total_gflops", gflops_str(b.total)}};
}

inline void from_json(const nlohmann::json& j, FlopsBreakdown& b) {
  j.at("base").get_to(b.base);
  j.at("lora").get_to(b.lora);
  j.at("align").get_to(b.align);
  j.at("total").get_to(b.total);
}

// Per-layer divergence per method, with the mid-layer range annotated and the
// mid-layer mean precomputed for each method.
struct DivergenceReport {
  struct Row {
    int layer = 0;
    std::string method;
    double divergence = 0.0;
  };
  std::vector<Row> rows;  // ordered by layer, then method insertion order
  int mid_lo = 0, mid_hi = -1;
  std::map<std::string, double> mid_mean;
};

inline DivergenceReport divergence_report(const std::vector<std::pair<std::string, DivergenceProfile>>& profiles,
                                          const analysis::LayerRange& mid) {
  if (profiles.empty()) throw std::invalid_argument("divergence_report: no profiles");
  const std::size_t n_layers = profiles.front().second.mean_div.size();
  for (const auto& [name, prof] : profiles)
    if (prof.mean_div.size() != n_layers)
      throw std::invalid_argument("divergence_report: layer-count mismatch for method " + name);
  if (mid.lo < 0 || mid.hi >= static_cast<int>(n_layers) || mid.length() < 1)
    throw std::invalid_argument("divergence_report: mid range outside profile");
  DivergenceReport out;
  out.mid_lo = mid.lo;
  out.mid_hi = mid.hi;
  for (std::size_t l = 0; l < n_layers; ++l)
    for (const auto& [name, prof] : profiles)
      out.rows.push_back({static_cast<int>(l), name, prof.mean_div[l]});
  for (const auto& [name, prof] : profiles) {
    double s = 0.0;
    for (int l = mid.lo; l <= mid.hi; ++l) s += prof.mean_div[static_cast<std::size_t>(l)];
    out.mid_mean[name] = s / mid.length();
  }
  return out;
}

inline void to_json(nlohmann::json& j, const DivergenceReport::Row& r) {
  j = {{"layer", r.layer}, {"method", r.method}, {"divergence", r.divergence}};
}

inline void from_json(const nlohmann::json& j, DivergenceReport::Row& r) {
  j.at("layer").get_to(r.layer);
  j.at("method").get_to(r.method);
  j.at("divergence").get_to(r.divergence);
}

inline void to_json(nlohmann::json& j, const DivergenceReport& rep) {
  j = {{"rows", rep.rows}, {"mid_lo", rep.mid_lo}, {"mid_hi", rep.mid_hi}, {"mid_mean", rep.mid_mean}};
}

inline void from_json(const nlohmann::json& j, DivergenceReport& rep) {
  j.at("rows").get_to(rep.rows);
  j.at("mid_lo").get_to(rep.mid_lo);
  j.at("mid_hi").get_to(rep.mid_hi);
  j.at("mid_mean").get_to(rep.mid_mean);
}

// Flat CSV for external plotting.
inline std::string divergence_csv(const DivergenceReport& rep) {
  std::ostringstream os;
  os << "layer,method,divergence\n";
  os.precision(17);
  for (const auto& r : rep.rows) os << r.layer << "," << r.method << "," << r.divergence << "\n";
  return os.str();
}

}  // namespace ramoe::report
