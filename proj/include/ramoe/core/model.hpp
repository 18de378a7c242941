#pragma once

#include "ramoe/ad/tape.hpp"
#include "ramoe/core/params.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ramoe::core {

using Tokens = std::vector<int>;

// Full post-softmax router distributions, one T x E matrix per layer,
// captured before top-k truncation.
struct RoutingTrace {
  std::vector<Mat> layer_probs;
  std::vector<int> generated_positions;

  int n_layers() const { return static_cast<int>(layer_probs.size()); }
};

// Inference-time router bias: +delta on the listed experts' logits at the
// listed layers, no parameter change.
struct RouterSteering {
  std::map<int, std::vector<int>> experts_per_layer;
  double delta = 1.0;
};

struct ForwardResult {
  Mat logits;
  std::optional<RoutingTrace> trace;
};

// Parameter leaves registered on a tape, by name.
struct ParamVars {
  std::map<std::string, ad::Var> vars;

  static ParamVars make(ad::Tape& tape, const Parameters& p) {
    ParamVars pv;
    for (const auto& [name, m] : p.arrays()) pv.vars[name] = tape.leaf(m);
    return pv;
  }
  ad::Var at(const std::string& name) const { return vars.at(name); }
  bool has(const std::string& name) const { return vars.count(name) > 0; }
};

struct ForwardGraph {
  ad::Var logits;                       // T x V
  std::vector<ad::Var> layer_probs;    // per layer, T x E
  std::vector<std::vector<std::vector<int>>> selections;  // per layer, per token, top-k expert ids
};

inline void check_tokens(const ModelConfig& cfg, const Tokens& tokens) {
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw std::invalid_argument("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("token id out of range: " + std::to_string(t));
}

// Decoder-only block: pre-norm single-head causal attention, then a pre-norm
// MoE feed-forward, each with a residual connection. The attention head is
// the token mixer of choice here; it is deterministic and fully on the tape.
inline ForwardGraph build_forward(ad::Tape& tape, const Parameters& params, const ParamVars& pv,
                                  const Tokens& tokens, const RouterSteering* steering = nullptr) {
  const ModelConfig& cfg = params.config;
  check_tokens(cfg, tokens);
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  const int T = static_cast<int>(tokens.size());

  // Learned-embedding + fixed sinusoidal position signal.
  Mat pos(T, cfg.d_model);
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < cfg.d_model; ++j) {
      const double freq = std::pow(10000.0, -2.0 * (j / 2) / cfg.d_model);
      pos(t, j) = (j % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
    }
  ad::Var x = tape.add(tape.gather_rows(pv.at("embed"), tokens), tape.leaf(pos));

  ForwardGraph out;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string lp = Parameters::layer_prefix(l);

    ad::Var h = tape.rmsnorm_rows(x);
    ad::Var q = tape.matmul(h, pv.at(lp + "attn.wq"));
    ad::Var k = tape.matmul(h, pv.at(lp + "attn.wk"));
    ad::Var v = tape.matmul(h, pv.at(lp + "attn.wv"));
    ad::Var scores = tape.scale(tape.matmul_nt(q, k), attn_scale);
    ad::Var attn = tape.causal_softmax_rows(scores);
    x = tape.add(x, tape.matmul(tape.matmul(attn, v), pv.at(lp + "attn.wo")));

    ad::Var h2 = tape.rmsnorm_rows(x);
    ad::Var logits_r = tape.matmul(h2, pv.at(lp + "router"));
    if (steering != nullptr) {
      auto it = steering->experts_per_layer.find(l);
      if (it != steering->experts_per_layer.end() && !it->second.empty()) {
        Mat bias = Mat::Zero(T, cfg.n_experts);
        for (int e : it->second) bias.col(e).setConstant(steering->delta);
        logits_r = tape.add(logits_r, tape.leaf(bias));
      }
    }
    ad::Var probs = tape.softmax_rows(logits_r);
    out.layer_probs.push_back(probs);

    // Top-k by router probability; ties break toward the lower expert id.
    const Mat& pval = tape.val(probs);
    std::vector<std::vector<int>> sel(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      std::vector<int> order(static_cast<std::size_t>(cfg.n_experts));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return pval(t, a) > pval(t, b); });
      sel[static_cast<std::size_t>(t)].assign(order.begin(), order.begin() + cfg.top_k);
    }
    out.selections.push_back(sel);
    ad::Var gates = tape.topk_gates(probs, sel);

    // Group tokens by expert so each expert runs one batched matmul.
    std::vector<std::vector<int>> expert_tokens(static_cast<std::size_t>(cfg.n_experts));
    std::vector<std::vector<int>> expert_slots(static_cast<std::size_t>(cfg.n_experts));
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < cfg.top_k; ++j) {
        const int e = sel[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
        expert_tokens[static_cast<std::size_t>(e)].push_back(t);
        expert_slots[static_cast<std::size_t>(e)].push_back(j);
      }

    ad::Var moe_out{};
    for (int e = 0; e < cfg.n_experts; ++e) {
      const auto& toks = expert_tokens[static_cast<std::size_t>(e)];
      if (toks.empty()) continue;
      const std::string ep = Parameters::expert_prefix(l, e);
      ad::Var he = tape.gather_rows(h2, toks);
      ad::Var up = tape.matmul(he, pv.at(ep + "up"));
      if (cfg.adapter_rank > 0)
        up = tape.add(up, tape.matmul(tape.matmul(he, pv.at(ep + "adapter_up_a")), pv.at(ep + "adapter_up_b")));
      ad::Var act = tape.relu(up);
      ad::Var down = tape.matmul(act, pv.at(ep + "down"));
      if (cfg.adapter_rank > 0)
        down = tape.add(down,
                        tape.matmul(tape.matmul(act, pv.at(ep + "adapter_down_a")), pv.at(ep + "adapter_down_b")));
      std::vector<std::pair<int, int>> coords;
      for (std::size_t i = 0; i < toks.size(); ++i)
        coords.emplace_back(toks[i], expert_slots[static_cast<std::size_t>(e)][i]);
      ad::Var g = tape.gather_elems(gates, coords);
      ad::Var scattered = tape.scatter_rows_scaled(down, g, toks, T);
      moe_out = moe_out.valid() ? tape.add(moe_out, scattered) : scattered;
    }
    if (moe_out.valid()) x = tape.add(x, moe_out);
  }

  out.logits = tape.matmul(tape.rmsnorm_rows(x), pv.at("head"));
  return out;
}

// Pure forward pass. With capture set, the full E-dim post-softmax router
// distribution is recorded per token per layer; logits are identical either
// way. generated_positions is left empty for the caller to fill.
inline ForwardResult forward(const Parameters& params, const Tokens& tokens, bool capture,
                             const RouterSteering* steering = nullptr) {
  ad::Tape tape;
  ParamVars pv = ParamVars::make(tape, params);
  ForwardGraph g = build_forward(tape, params, pv, tokens, steering);
  ForwardResult r;
  r.logits = tape.val(g.logits);
  if (capture) {
    RoutingTrace trace;
    for (ad::Var v : g.layer_probs) trace.layer_probs.push_back(tape.val(v));
    r.trace = std::move(trace);
  }
  return r;
}

// Mean NLL (natural log) over the masked logits rows; targets[t] labels row t.
inline double cross_entropy(const Mat& logits, const std::vector<int>& targets,
                            const std::vector<int>& mask_rows) {
  if (mask_rows.empty()) throw std::invalid_argument("cross_entropy: empty loss mask");
  if (targets.size() != static_cast<std::size_t>(logits.rows()))
    throw std::invalid_argument("cross_entropy: targets length mismatch");
  double loss = 0.0;
  for (int t : mask_rows) {
    const double m = logits.row(t).maxCoeff();
    const double lse = m + std::log((logits.row(t).array() - m).exp().sum());
    loss += lse - logits(t, targets[static_cast<std::size_t>(t)]);
  }
  return loss / static_cast<double>(mask_rows.size());
}

struct DecodeResult {
  Tokens generated;     // continuation only, includes the EOS token if emitted
  RoutingTrace trace;   // covers prompt + generated tokens
};

// Deterministic argmax decoding; stops at the EOS token or after max_new
// tokens. The trace comes from one capturing pass over the final sequence,
// which matches the per-step distributions because attention is causal.
inline DecodeResult greedy_decode(const Parameters& params, const Tokens& prompt, int max_new,
                                  const RouterSteering* steering = nullptr) {
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  const ModelConfig& cfg = params.config;
  Tokens seq = prompt;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(seq.size()) >= cfg.max_seq_len) break;
    Mat logits = forward(params, seq, /*capture=*/false, steering).logits;
    int best = 0;
    logits.row(logits.rows() - 1).maxCoeff(&best);
    seq.push_back(best);
    if (best == cfg.eos_token()) break;
  }
  DecodeResult out;
  out.generated.assign(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
  ForwardResult fr = forward(params, seq, /*capture=*/true, steering);
  out.trace = std::move(*fr.trace);
  for (std::size_t i = prompt.size(); i < seq.size(); ++i)
    out.trace.generated_positions.push_back(static_cast<int>(i));
  return out;
}

// exp(mean NLL over response tokens only); prompt tokens are excluded.
inline double sequence_ppl(const Parameters& params, const Tokens& prompt, const Tokens& response) {
  if (response.empty()) throw std::invalid_argument("sequence_ppl: empty response");
  if (prompt.empty()) throw std::invalid_argument("sequence_ppl: empty prompt");
  Tokens seq = prompt;
  seq.insert(seq.end(), response.begin(), response.end());
  Mat logits = forward(params, seq, /*capture=*/false).logits;
  std::vector<int> targets(seq.size(), 0);
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) targets[t] = seq[t + 1];
  std::vector<int> mask;
  for (std::size_t t = prompt.size() - 1; t + 1 < seq.size(); ++t) mask.push_back(static_cast<int>(t));
  return std::exp(cross_entropy(logits, targets, mask));
}

}  // namespace ramoe::core
