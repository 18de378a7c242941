#include "ramoe/core/model.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

using namespace ramoe;
using namespace ramoe::core;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 10;
  c.d_model = 8;
  c.d_expert = 12;
  c.n_layers = 2;
  c.n_experts = 4;
  c.top_k = 2;
  c.max_seq_len = 16;
  return c;
}

bool params_equal(const Parameters& a, const Parameters& b) {
  if (a.arrays().size() != b.arrays().size()) return false;
  for (std::size_t i = 0; i < a.arrays().size(); ++i) {
    if (a.arrays()[i].first != b.arrays()[i].first) return false;
    if (a.arrays()[i].second != b.arrays()[i].second) return false;
  }
  return true;
}

TEST(InitParams, DeterministicForFixedSeed) {
  auto cfg = tiny_config();
  EXPECT_TRUE(params_equal(init_params(cfg, 7), init_params(cfg, 7)));
}

TEST(InitParams, DifferentSeedsDiffer) {
  auto cfg = tiny_config();
  EXPECT_FALSE(params_equal(init_params(cfg, 7), init_params(cfg, 8)));
}

TEST(InitParams, ZeroInitAdaptersAreIdentityDelta) {
  auto cfg = tiny_config();
  Parameters base = init_params(cfg, 7);
  cfg.adapter_rank = 4;
  Parameters with = init_params(cfg, 7);
  // same base weights by construction order up to the adapter draws; instead
  // compare forwards after copying base arrays into the adapter model
  for (auto& [name, m] : with.arrays())
    if (name.find(".adapter_") == std::string::npos) m = base.at(name);
  Tokens toks = {1, 4, 2, 9, 0};
  Mat l0 = forward(base, toks, false).logits;
  Mat l1 = forward(with, toks, false).logits;
  EXPECT_EQ(l0, l1);
}

TEST(Forward, TraceRowsSumToOne) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 3);
  Tokens toks = {1, 2, 3, 4, 5, 6};
  auto r = forward(p, toks, true);
  ASSERT_TRUE(r.trace.has_value());
  ASSERT_EQ(r.trace->n_layers(), cfg.n_layers);
  for (const Mat& pm : r.trace->layer_probs) {
    ASSERT_EQ(pm.rows(), static_cast<Eigen::Index>(toks.size()));
    ASSERT_EQ(pm.cols(), cfg.n_experts);
    for (Eigen::Index t = 0; t < pm.rows(); ++t) {
      EXPECT_NEAR(pm.row(t).sum(), 1.0, 1e-9);
      EXPECT_GE(pm.row(t).minCoeff(), 0.0);
    }
  }
}

TEST(Forward, PureAndCaptureInvariant) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 11);
  Tokens toks = {3, 1, 4, 1, 5};
  Mat a = forward(p, toks, false).logits;
  Mat b = forward(p, toks, true).logits;
  Mat c = forward(p, toks, false).logits;
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(Forward, InputValidation) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 1);
  EXPECT_THROW(forward(p, {0, 10}, false), std::invalid_argument);
  Tokens toolong(cfg.max_seq_len + 1, 0);
  EXPECT_THROW(forward(p, toolong, false), std::invalid_argument);
}

// 1 layer, 2 experts, top_k=1, router rigged so expert 0 wins everywhere:
// the MoE block must reduce to the expert-0 FFN path with gate weight 1.
TEST(Forward, SinglePathMatchesHandComputedOracle) {
  ModelConfig cfg;
  cfg.vocab_size = 6;
  cfg.d_model = 4;
  cfg.d_expert = 5;
  cfg.n_layers = 1;
  cfg.n_experts = 2;
  cfg.top_k = 1;
  cfg.max_seq_len = 8;
  Parameters p = init_params(cfg, 42);
  Mat router = Mat::Zero(cfg.d_model, cfg.n_experts);
  // constant logit gap; expert 0 wins for every hidden state
  // (column 0 minus column 1 is +50 regardless of h only if h is fixed sign;
  // instead use a bias-free trick: make column 1 the negation of a huge col 0)
  p.at("layers.0.router") = router;  // all-zero -> tie, broken toward expert 0
  Tokens toks = {1, 2, 3};
  auto r = forward(p, toks, true);

  // independent Eigen-only replication of the forward pass using expert 0 only
  const int T = 3;
  Mat pos(T, cfg.d_model);
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < cfg.d_model; ++j) {
      const double freq = std::pow(10000.0, -2.0 * (j / 2) / cfg.d_model);
      pos(t, j) = (j % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
    }
  Mat x(T, cfg.d_model);
  for (int t = 0; t < T; ++t) x.row(t) = p.at("embed").row(toks[static_cast<std::size_t>(t)]) + pos.row(t);
  auto rms = [&](const Mat& m) {
    Mat o = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      o.row(i) = m.row(i) / std::sqrt(m.row(i).squaredNorm() / m.cols() + 1e-8);
    return o;
  };
  Mat h = rms(x);
  Mat q = h * p.at("layers.0.attn.wq"), k = h * p.at("layers.0.attn.wk"), v = h * p.at("layers.0.attn.wv");
  Mat s = q * k.transpose() / std::sqrt(static_cast<double>(cfg.d_model));
  Mat a = Mat::Zero(T, T);
  for (int i = 0; i < T; ++i) {
    Eigen::RowVectorXd e = (s.row(i).head(i + 1).array() - s.row(i).head(i + 1).maxCoeff()).exp();
    a.row(i).head(i + 1) = e / e.sum();
  }
  x = x + a * v * p.at("layers.0.attn.wo");
  Mat h2 = rms(x);
  Mat up = (h2 * p.at("layers.0.experts.0.up")).cwiseMax(0.0);
  x = x + up * p.at("layers.0.experts.0.down");
  Mat logits = rms(x) * p.at("head");

  EXPECT_LT((logits - r.logits).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Mat z = Mat::Zero(3, 4);
  double ce = cross_entropy(z, {0, 1, 2}, {0, 1, 2});
  EXPECT_NEAR(ce, std::log(4.0), 1e-12);
}

TEST(CrossEntropy, LossVanishesWithMargin) {
  Mat z = Mat::Zero(1, 4);
  z(0, 2) = 50.0;
  EXPECT_NEAR(cross_entropy(z, {0}, {0}), 50.0, 1e-9);  // wrong target: ~margin
  EXPECT_LT(cross_entropy(z, {2}, {0}), 1e-12);
}

TEST(CrossEntropy, MatchesLogSoftmaxOracle) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> d(0.0, 2.0);
  Mat z(3, 5);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) z(i, j) = d(rng);
  std::vector<int> targets = {4, 0, 2};
  std::vector<int> mask = {0, 1, 2};
  double expect = 0.0;
  for (int t : mask) {
    double lse = std::log(z.row(t).array().exp().sum());
    expect += lse - z(t, targets[static_cast<std::size_t>(t)]);
  }
  expect /= 3.0;
  EXPECT_NEAR(cross_entropy(z, targets, mask), expect, 1e-12);
}

TEST(CrossEntropy, EmptyMaskIsError) {
  Mat z = Mat::Zero(2, 3);
  EXPECT_THROW(cross_entropy(z, {0, 1}, {}), std::invalid_argument);
}

TEST(Gradients, FiniteDifferenceOnFullModel) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 17);
  Tokens toks = {1, 5, 2, 8, 3};
  std::vector<int> targets = {5, 2, 8, 3, 9};
  std::vector<int> mask = {2, 3, 4};

  auto loss_at = [&](const Parameters& pp) {
    ad::Tape t;
    ParamVars pv = ParamVars::make(t, pp);
    auto g = build_forward(t, pp, pv, toks);
    return t.scalar(t.cross_entropy(g.logits, targets, mask));
  };

  ad::Tape t;
  ParamVars pv = ParamVars::make(t, p);
  auto g = build_forward(t, p, pv, toks);
  t.backward(t.cross_entropy(g.logits, targets, mask));

  const double h = 1e-5;
  int checked = 0, failed = 0;
  for (const auto& [name, m] : p.arrays()) {
    const Mat& grad = t.grad(pv.at(name));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        Parameters pp = p;
        pp.at(name)(i, j) = m(i, j) + h;
        const double lp = loss_at(pp);
        pp.at(name)(i, j) = m(i, j) - h;
        const double lm = loss_at(pp);
        const double fd = (lp - lm) / (2 * h);
        const double an = grad(i, j);
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
        ++checked;
        if (std::abs(fd - an) > 1e-4 * denom + 1e-8) {
          ++failed;
          ADD_FAILURE() << name << "(" << i << "," << j << "): fd=" << fd << " an=" << an;
        }
      }
  }
  EXPECT_GT(checked, 0);
  EXPECT_EQ(failed, 0);
}

TEST(Gradients, DeadExpertGetsExactZero) {
  ModelConfig cfg = tiny_config();
  cfg.top_k = 1;
  Parameters p = init_params(cfg, 5);
  // rig layer-0 router so expert 0 always wins by a wide margin
  p.at("layers.0.router").setZero();
  p.at("layers.0.router").col(0).setConstant(100.0);
  Tokens toks = {1, 2, 3, 4};
  ad::Tape t;
  ParamVars pv = ParamVars::make(t, p);
  auto g = build_forward(t, p, pv, toks);
  t.backward(t.cross_entropy(g.logits, {2, 3, 4, 5}, {0, 1, 2, 3}));
  // experts 1..3 at layer 0 never execute; their weights are dead paths
  for (int e = 1; e < cfg.n_experts; ++e) {
    const Mat& gu = t.grad(pv.at(Parameters::expert_prefix(0, e) + "up"));
    const Mat& gd = t.grad(pv.at(Parameters::expert_prefix(0, e) + "down"));
    EXPECT_EQ(gu.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(gd.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Gradients, ScalingLossScalesGradientsLinearly) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 21);
  Tokens toks = {1, 5, 2};
  auto run = [&](double lambda) {
    ad::Tape t;
    ParamVars pv = ParamVars::make(t, p);
    auto g = build_forward(t, p, pv, toks);
    ad::Var ce = t.cross_entropy(g.logits, {5, 2, 7}, {0, 1, 2});
    t.backward(t.weighted_sum({ce}, {lambda}));
    return t.grad(pv.at("embed")).eval();
  };
  Mat g1 = run(1.0), g3 = run(3.0);
  EXPECT_LT((3.0 * g1 - g3).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GreedyDecode, DeterministicAndBoundary) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 2);
  Tokens prompt = {1, 2, 3};
  auto a = greedy_decode(p, prompt, 5);
  auto b = greedy_decode(p, prompt, 5);
  EXPECT_EQ(a.generated, b.generated);

  auto z = greedy_decode(p, prompt, 0);
  EXPECT_TRUE(z.generated.empty());
  EXPECT_EQ(z.trace.layer_probs[0].rows(), 3);
  EXPECT_TRUE(z.trace.generated_positions.empty());
}

TEST(GreedyDecode, MatchesStepByStepArgmaxOracle) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 23);
  Tokens prompt = {4, 1};
  auto d = greedy_decode(p, prompt, 6);
  Tokens seq = prompt;
  for (int step = 0; step < 6; ++step) {
    Mat logits = forward(p, seq, false).logits;
    int best = 0;
    logits.row(logits.rows() - 1).maxCoeff(&best);
    seq.push_back(best);
    if (best == cfg.eos_token()) break;
  }
  Tokens expect(seq.begin() + 2, seq.end());
  EXPECT_EQ(d.generated, expect);
  std::vector<int> gp;
  for (std::size_t i = prompt.size(); i < seq.size(); ++i) gp.push_back(static_cast<int>(i));
  EXPECT_EQ(d.trace.generated_positions, gp);
}

TEST(SequencePpl, UniformModelGivesVocabSize) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 2);
  p.at("head").setZero();  // uniform logits regardless of input
  EXPECT_NEAR(sequence_ppl(p, {1, 2}, {3, 4, 5}), static_cast<double>(cfg.vocab_size), 1e-9);
}

TEST(SequencePpl, EqualsExpOfMaskedCrossEntropy) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 13);
  Tokens prompt = {1, 2, 3}, resp = {4, 5};
  Tokens seq = prompt;
  seq.insert(seq.end(), resp.begin(), resp.end());
  Mat logits = forward(p, seq, false).logits;
  std::vector<int> targets(seq.size(), 0);
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) targets[t] = seq[t + 1];
  double ce = cross_entropy(logits, targets, {2, 3});
  EXPECT_NEAR(sequence_ppl(p, prompt, resp), std::exp(ce), 1e-9);
}

TEST(SequencePpl, ThreeTokenOracle) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 29);
  Tokens prompt = {7}, resp = {1, 2, 3};
  Tokens seq = {7, 1, 2, 3};
  Mat logits = forward(p, seq, false).logits;
  double nll = 0.0;
  for (int t = 0; t < 3; ++t) {
    double lse = std::log(logits.row(t).array().exp().sum());
    nll += lse - logits(t, seq[static_cast<std::size_t>(t + 1)]);
  }
  EXPECT_NEAR(sequence_ppl(p, prompt, resp), std::exp(nll / 3.0), 1e-9);
}

TEST(SequencePpl, EmptyResponseIsError) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 2);
  EXPECT_THROW(sequence_ppl(p, {1, 2}, {}), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsValueExact) {
  ModelConfig cfg = tiny_config();
  cfg.adapter_rank = 3;
  Parameters p = init_params(cfg, 31);
  auto path = std::filesystem::temp_directory_path() / "ramoe_ckpt_test.json";
  save_checkpoint(p, path.string());
  Parameters q = load_checkpoint(path.string());
  std::filesystem::remove(path);
  EXPECT_TRUE(params_equal(p, q));
}

TEST(TopkGating, RenormalizedGatesSumToOne) {
  auto cfg = tiny_config();
  Parameters p = init_params(cfg, 37);
  Tokens toks = {0, 1, 2, 3, 4, 5, 6, 7};
  ad::Tape t;
  ParamVars pv = ParamVars::make(t, p);
  auto g = build_forward(t, p, pv, toks);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Mat& probs = t.val(g.layer_probs[static_cast<std::size_t>(l)]);
    for (int tok = 0; tok < static_cast<int>(toks.size()); ++tok) {
      double mass = 0.0;
      for (int e : g.selections[static_cast<std::size_t>(l)][static_cast<std::size_t>(tok)]) mass += probs(tok, e);
      EXPECT_GT(mass, 0.0);  // renormalized gates sum to 1 by construction
    }
  }
}

}  // namespace
