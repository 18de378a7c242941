#include "ramoe/analysis/routing.hpp"
#include "ramoe/io/jsonl.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace ramoe;
using namespace ramoe::analysis;

namespace {

Eigen::VectorXd random_dist(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(1e-3, 1.0);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = u(rng);
  return v / v.sum();
}

// Exhaustive check of every contiguous segment of strictly-below-median
// layers; earliest-longest wins.
LayerRange brute_force_middle(const std::vector<double>& d) {
  std::vector<double> s = d;
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  const double med = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  LayerRange best;
  for (int lo = 0; lo < static_cast<int>(n); ++lo)
    for (int hi = lo; hi < static_cast<int>(n); ++hi) {
      bool ok = true;
      for (int i = lo; i <= hi && ok; ++i) ok = d[static_cast<std::size_t>(i)] < med;
      if (!ok) continue;
      if (hi - lo + 1 > best.length()) best = {lo, hi};
    }
  return best;
}

core::Parameters small_model(int seed = 3) {
  core::ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 8;
  cfg.d_expert = 8;
  cfg.n_layers = 3;
  cfg.n_experts = 4;
  cfg.top_k = 2;
  cfg.max_seq_len = 16;
  return core::init_params(cfg, static_cast<std::uint64_t>(seed));
}

TEST(TeacherForceTrace, ShapeAndPositions) {
  auto p = small_model();
  core::Tokens prompt = {1, 2, 3}, resp = {4, 5};
  auto trace = teacher_force_trace(p, prompt, resp);
  EXPECT_EQ(trace.n_layers(), p.config.n_layers);
  EXPECT_EQ(trace.generated_positions, (std::vector<int>{3, 4}));
  EXPECT_THROW(teacher_force_trace(p, prompt, {}), std::invalid_argument);
}

TEST(TeacherForceTrace, MatchesForwardCapture) {
  auto p = small_model(9);
  core::Tokens prompt = {1, 2}, resp = {3, 4, 5};
  auto trace = teacher_force_trace(p, prompt, resp);
  core::Tokens seq = {1, 2, 3, 4, 5};
  auto fr = core::forward(p, seq, true);
  for (int l = 0; l < trace.n_layers(); ++l)
    EXPECT_EQ(trace.layer_probs[static_cast<std::size_t>(l)], fr.trace->layer_probs[static_cast<std::size_t>(l)]);
}

TEST(SeqRoutingDist, SingleAndSymmetricCases) {
  core::RoutingTrace trace;
  Mat probs(3, 2);
  probs << 1, 0, 0, 1, 0.5, 0.5;
  trace.layer_probs.push_back(probs);
  trace.generated_positions = {0};
  auto d1 = seq_routing_dist(trace);
  EXPECT_EQ(d1.q[0](0), 1.0);

  trace.generated_positions = {0, 1};
  auto d2 = seq_routing_dist(trace);
  EXPECT_NEAR(d2.q[0](0), 0.5, 1e-15);
  EXPECT_NEAR(d2.q[0](1), 0.5, 1e-15);

  trace.generated_positions.clear();
  EXPECT_THROW(seq_routing_dist(trace), std::invalid_argument);
}

TEST(SeqRoutingDist, MatchesElementwiseMeanOracle) {
  std::mt19937_64 rng(2);
  core::RoutingTrace trace;
  Mat probs(5, 4);
  for (int t = 0; t < 5; ++t) probs.row(t) = random_dist(4, rng).transpose();
  trace.layer_probs.push_back(probs);
  trace.generated_positions = {1, 2, 4};
  auto d = seq_routing_dist(trace);
  Eigen::VectorXd expect = (probs.row(1) + probs.row(2) + probs.row(4)).transpose() / 3.0;
  EXPECT_LT((d.q[0] - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(JsDivergence, HandValues) {
  Eigen::VectorXd p(2), q(2), h(2);
  p << 1, 0;
  q << 0, 1;
  h << 0.5, 0.5;
  EXPECT_NEAR(js_divergence(p, p), 0.0, 1e-15);
  EXPECT_NEAR(js_divergence(p, q), 1.0, 1e-12);
  EXPECT_NEAR(js_divergence(p, h), 0.311278, 1e-6);
}

TEST(JsDivergence, InputValidation) {
  Eigen::VectorXd p(2), q(3), bad(2);
  p << 0.5, 0.5;
  q << 0.3, 0.3, 0.4;
  bad << 0.9, 0.3;
  EXPECT_THROW(js_divergence(p, q), std::invalid_argument);
  EXPECT_THROW(js_divergence(p, bad), std::invalid_argument);
}

TEST(JsDivergence, SymmetryBoundsAndIdentityProperty) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    Eigen::VectorXd p = random_dist(6, rng), q = random_dist(6, rng);
    const double a = js_divergence(p, q), b = js_divergence(q, p);
    EXPECT_NEAR(a, b, 1e-12);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    EXPECT_GT(a, 0.0);  // random pairs differ
    EXPECT_NEAR(js_divergence(p, p), 0.0, 1e-12);
  }
}

TEST(DivergenceProfile, MeanOfOneAndIdentity) {
  std::mt19937_64 rng(4);
  std::map<std::string, SeqRoutingDist> src, tgt;
  SeqRoutingDist a, b;
  for (int l = 0; l < 3; ++l) {
    a.q.push_back(random_dist(4, rng));
    b.q.push_back(random_dist(4, rng));
  }
  src["x"] = a;
  tgt["x"] = b;
  auto prof = divergence_profile(src, tgt);
  ASSERT_EQ(prof.mean_div.size(), 3u);
  for (int l = 0; l < 3; ++l)
    EXPECT_NEAR(prof.mean_div[static_cast<std::size_t>(l)],
                js_divergence(a.q[static_cast<std::size_t>(l)], b.q[static_cast<std::size_t>(l)]), 1e-15);

  tgt["x"] = a;
  auto zero = divergence_profile(src, tgt);
  for (double v : zero.mean_div) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(DivergenceProfile, MatchesLoopAndAverageOracle) {
  std::mt19937_64 rng(6);
  std::map<std::string, SeqRoutingDist> src, tgt;
  for (int i = 0; i < 3; ++i) {
    SeqRoutingDist a, b;
    for (int l = 0; l < 4; ++l) {
      a.q.push_back(random_dist(5, rng));
      b.q.push_back(random_dist(5, rng));
    }
    src["id" + std::to_string(i)] = a;
    tgt["id" + std::to_string(i)] = b;
  }
  auto prof = divergence_profile(src, tgt);
  for (int l = 0; l < 4; ++l) {
    double sum = 0.0;
    for (int i = 0; i < 3; ++i) {
      const auto& a = src.at("id" + std::to_string(i)).q[static_cast<std::size_t>(l)];
      const auto& b = tgt.at("id" + std::to_string(i)).q[static_cast<std::size_t>(l)];
      sum += js_divergence(a, b);
    }
    EXPECT_NEAR(prof.mean_div[static_cast<std::size_t>(l)], sum / 3.0, 1e-12);
  }

  std::map<std::string, SeqRoutingDist> missing = tgt;
  missing.erase("id2");
  EXPECT_THROW(divergence_profile(src, missing), std::invalid_argument);
}

TEST(MiddleLayers, SpecExampleAndRunLengthTie) {
  DivergenceProfile p;
  p.mean_div = {0.8, 0.7, 0.3, 0.2, 0.25, 0.6, 0.9};
  auto r = middle_layers(p);
  EXPECT_EQ(r.lo, 2);
  EXPECT_EQ(r.hi, 4);

  // below-median runs of length 2 and 3: the longer one wins
  DivergenceProfile q;
  q.mean_div = {0.3, 0.3, 0.9, 0.2, 0.2, 0.2, 0.95, 0.96, 0.97, 0.98};
  auto r2 = middle_layers(q);  // median 0.6; runs [0..1] and [3..5]
  EXPECT_EQ(r2.lo, 3);
  EXPECT_EQ(r2.hi, 5);
}

TEST(MiddleLayers, DegenerateProfileIsError) {
  DivergenceProfile p;
  p.mean_div = {0.5, 0.5, 0.5, 0.5};
  EXPECT_THROW(middle_layers(p), std::runtime_error);
}

TEST(MiddleLayers, MatchesBruteForceOn1000RandomProfiles) {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> nl(2, 12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> coarse(0, 4);
  for (int trial = 0; trial < 1000; ++trial) {
    DivergenceProfile p;
    const int n = nl(rng);
    for (int i = 0; i < n; ++i)
      p.mean_div.push_back(trial % 2 ? coarse(rng) / 4.0 : u(rng));  // half with ties
    LayerRange expect = brute_force_middle(p.mean_div);
    if (expect.length() <= 0) {
      EXPECT_THROW(middle_layers(p), std::runtime_error);
    } else {
      auto got = middle_layers(p);
      EXPECT_EQ(got.lo, expect.lo) << "trial " << trial;
      EXPECT_EQ(got.hi, expect.hi) << "trial " << trial;
    }
  }
}

TEST(TaskSpecificity, IdentityAndSumZeroAndHandCase) {
  std::mt19937_64 rng(8);
  std::vector<SeqRoutingDist> task, gen;
  for (int i = 0; i < 4; ++i) {
    SeqRoutingDist d;
    d.q.push_back(random_dist(4, rng));
    task.push_back(d);
  }
  auto delta_same = task_specificity(task, task, 0);
  EXPECT_LT(delta_same.cwiseAbs().maxCoeff(), 1e-15);

  for (int i = 0; i < 3; ++i) {
    SeqRoutingDist d;
    d.q.push_back(random_dist(4, rng));
    gen.push_back(d);
  }
  auto delta = task_specificity(task, gen, 0);
  EXPECT_NEAR(delta.sum(), 0.0, 1e-9);

  SeqRoutingDist t1, g1;
  Eigen::VectorXd tv(4), gv(4);
  tv << 0.4, 0.3, 0.2, 0.1;
  gv << 0.25, 0.25, 0.25, 0.25;
  t1.q.push_back(tv);
  g1.q.push_back(gv);
  auto d = task_specificity({t1}, {g1}, 0);
  Eigen::VectorXd expect(4);
  expect << 0.15, 0.05, -0.05, -0.15;
  EXPECT_LT((d - expect).cwiseAbs().maxCoeff(), 1e-12);

  EXPECT_THROW(task_specificity({}, gen, 0), std::invalid_argument);
}

TEST(SelectTaskExperts, PositiveDeltaRuleAndTieBreak) {
  Eigen::VectorXd delta(4);
  delta << 0.15, 0.05, -0.05, -0.15;
  auto sel = select_layer_experts(delta, 8);  // K=8 still yields only the positives
  ASSERT_EQ(sel.size(), 2u);
  EXPECT_EQ(sel[0].id, 0);
  EXPECT_EQ(sel[1].id, 1);

  Eigen::VectorXd allneg(3);
  allneg << -0.1, 0.0, -0.2;
  EXPECT_TRUE(select_layer_experts(allneg, 2).empty());

  Eigen::VectorXd tie(3);
  tie << 0.2, 0.2, 0.1;
  auto s2 = select_layer_experts(tie, 2);
  ASSERT_EQ(s2.size(), 2u);
  EXPECT_EQ(s2[0].id, 0);
  EXPECT_EQ(s2[1].id, 1);
}

TEST(SelectTaskExperts, PropertySuiteOn1000RandomVectors) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> ne(2, 16), kk(1, 10);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = ne(rng), k = kk(rng);
    Eigen::VectorXd delta(n);
    for (int i = 0; i < n; ++i) delta(i) = trial % 3 ? u(rng) : std::round(u(rng) * 4) / 4.0;
    auto sel = select_layer_experts(delta, k);
    EXPECT_LE(static_cast<int>(sel.size()), k);
    for (const auto& s : sel) EXPECT_GT(s.delta, 0.0);
    for (std::size_t i = 1; i < sel.size(); ++i) {
      EXPECT_TRUE(sel[i - 1].delta > sel[i].delta ||
                  (sel[i - 1].delta == sel[i].delta && sel[i - 1].id < sel[i].id));
    }
    // permutation invariance modulo relabeling
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::VectorXd permuted(n);
    for (int i = 0; i < n; ++i) permuted(perm[static_cast<std::size_t>(i)]) = delta(i);
    auto sel2 = select_layer_experts(permuted, k);
    std::multiset<double> d1, d2;
    for (const auto& s : sel) d1.insert(s.delta);
    for (const auto& s : sel2) d2.insert(s.delta);
    EXPECT_EQ(d1, d2) << "trial " << trial;
  }
}

TEST(ReferenceStore, RoundTripAndCiOnly) {
  std::mt19937_64 rng(23);
  TaskExpertMap map;
  map.mid_lo = 1;
  map.mid_hi = 2;
  std::map<std::string, SeqRoutingDist> src;
  for (const char* id : {"a", "b", "c"}) {
    SeqRoutingDist d;
    for (int l = 0; l < 4; ++l) d.q.push_back(random_dist(4, rng));
    src[id] = d;
  }
  build_reference_store(map, {"a", "c"}, src);
  EXPECT_EQ(map.references.count("a"), 1u);
  EXPECT_EQ(map.references.count("b"), 0u);
  EXPECT_EQ(map.references.at("a").at(1), src.at("a").q[1]);
  EXPECT_THROW(build_reference_store(map, {"zz"}, src), std::invalid_argument);

  // file round trip is value-exact
  auto path = std::filesystem::temp_directory_path() / "ramoe_map_test.json";
  io::write_json(nlohmann::json(map), path.string());
  auto back = io::read_json(path.string()).get<TaskExpertMap>();
  std::filesystem::remove(path);
  EXPECT_EQ(back.mid_lo, map.mid_lo);
  EXPECT_EQ(back.mid_hi, map.mid_hi);
  for (const auto& [id, per_layer] : map.references)
    for (const auto& [l, q] : per_layer) EXPECT_EQ(back.references.at(id).at(l), q);
}

TEST(RoutingRecords, FileRoundTripPreservesDistributions) {
  std::mt19937_64 rng(29);
  std::map<std::string, SeqRoutingDist> dists;
  for (int i = 0; i < 3; ++i) {
    SeqRoutingDist d;
    for (int l = 0; l < 2; ++l) d.q.push_back(random_dist(5, rng));
    dists["e" + std::to_string(i)] = d;
  }
  auto path = std::filesystem::temp_directory_path() / "ramoe_dists_test.jsonl";
  io::write_jsonl(to_records(dists, "src"), path.string());
  auto back = from_records(io::read_jsonl<RoutingDistRecord>(path.string()), "src", 2);
  std::filesystem::remove(path);
  for (const auto& [id, d] : dists)
    for (int l = 0; l < 2; ++l) EXPECT_EQ(back.at(id).q[static_cast<std::size_t>(l)], d.q[static_cast<std::size_t>(l)]);
}

}  // namespace
