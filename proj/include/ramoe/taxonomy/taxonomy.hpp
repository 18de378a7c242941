#pragma once

// Stage 1: run inference on parallel pairs and assign the four-way
// cc/ci/ic/ii label, either by exact-match judging of decoded answers or by
// the perplexity proxy for tasks without an extractable answer.

#include "ramoe/core/model.hpp"
#include "ramoe/synth/lang.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ramoe::taxonomy {

using core::RoutingTrace;
using core::Tokens;
using synth::ParallelExample;

inline bool is_digit_token(int t) { return t >= synth::kDigit0 && t < synth::kDigit0 + 10; }

// Final digit-run of the response, leading zeros stripped, compared to the
// gold digits as integers. No extractable digits means incorrect, not error.
inline bool judge_exact(const Tokens& response, const Tokens& gold) {
  std::ptrdiff_t end = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(response.size()) - 1; i >= 0; --i)
    if (is_digit_token(response[static_cast<std::size_t>(i)])) {
      end = i;
      break;
    }
  if (end < 0) return false;
  std::ptrdiff_t begin = end;
  while (begin > 0 && is_digit_token(response[static_cast<std::size_t>(begin - 1)])) --begin;
  auto value_of = [](auto first, auto last) {
    long long v = 0;
    for (auto it = first; it != last; ++it) v = v * 10 + (*it - synth::kDigit0);
    return v;
  };
  const long long got = value_of(response.begin() + begin, response.begin() + end + 1);
  for (int t : gold)
    if (!is_digit_token(t)) return false;
  const long long want = value_of(gold.begin(), gold.end());
  return got == want;
}

inline std::string compose_label(bool src_correct, bool tgt_correct) {
  if (src_correct) return tgt_correct ? "cc" : "ci";
  return tgt_correct ? "ic" : "ii";
}

struct CategorizeResult {
  std::vector<ParallelExample> labeled;
  std::map<std::string, double> proportions;          // cc/ci/ic/ii -> fraction
  std::map<std::string, RoutingTrace> traces_src;     // example id -> decode trace
  std::map<std::string, RoutingTrace> traces_tgt;
};

// Greedy-decodes both sides of every pair, stores responses and traces, and
// assigns the taxonomy label.
inline CategorizeResult categorize(const std::vector<ParallelExample>& dataset, const core::Parameters& params,
                                   int max_new = 8) {
  CategorizeResult out;
  std::map<std::string, int> counts = {{"cc", 0}, {"ci", 0}, {"ic", 0}, {"ii", 0}};
  for (const auto& ex : dataset) {
    ParallelExample labeled = ex;
    auto dec_src = core::greedy_decode(params, ex.prompt_src, max_new);
    auto dec_tgt = core::greedy_decode(params, ex.prompt_tgt, max_new);
    labeled.response_src = dec_src.generated;
    labeled.response_tgt = dec_tgt.generated;
    const bool src_ok = judge_exact(dec_src.generated, ex.gold_answer);
    const bool tgt_ok = judge_exact(dec_tgt.generated, ex.gold_answer);
    labeled.label = compose_label(src_ok, tgt_ok);
    counts[labeled.label]++;
    out.traces_src[ex.id] = std::move(dec_src.trace);
    out.traces_tgt[ex.id] = std::move(dec_tgt.trace);
    out.labeled.push_back(std::move(labeled));
  }
  const double n = static_cast<double>(dataset.size());
  for (auto& [label, c] : counts) out.proportions[label] = n > 0 ? c / n : 0.0;
  return out;
}

struct PplRecord {
  std::string id;
  double ppl_src = 0.0;
  double ppl_tgt = 0.0;

  double delta() const { return ppl_tgt - ppl_src; }
};

struct PplLabel {
  std::string id;
  std::string label;            // empty when excluded
  bool excluded = false;
  std::string exclusion_reason; // "non-finite" | "above-99th-percentile"
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Nearest-rank percentile on a sorted copy.
inline double percentile_nearest_rank(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const std::size_t rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(v.size())));
  return v[std::max<std::size_t>(rank, 1) - 1];
}

}  // namespace detail

// PPL-proxy taxonomy. Exclusions (non-finite, above the 99th percentile of
// either PPL column) are applied before the medians are computed; then
// src-correct := ppl_src < median(ppl_src), tgt-incorrect := delta >
// median(delta), both strict.
inline std::vector<PplLabel> ppl_taxonomy(const std::vector<PplRecord>& records) {
  std::vector<PplLabel> out(records.size());
  std::vector<double> finite_src, finite_tgt;
  for (std::size_t i = 0; i < records.size(); ++i) {
    out[i].id = records[i].id;
    if (!std::isfinite(records[i].ppl_src) || !std::isfinite(records[i].ppl_tgt)) {
      out[i].excluded = true;
      out[i].exclusion_reason = "non-finite";
    } else {
      finite_src.push_back(records[i].ppl_src);
      finite_tgt.push_back(records[i].ppl_tgt);
    }
  }
  if (!finite_src.empty()) {
    const double p99_src = detail::percentile_nearest_rank(finite_src, 99.0);
    const double p99_tgt = detail::percentile_nearest_rank(finite_tgt, 99.0);
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (out[i].excluded) continue;
      if (records[i].ppl_src > p99_src || records[i].ppl_tgt > p99_tgt) {
        out[i].excluded = true;
        out[i].exclusion_reason = "above-99th-percentile";
      }
    }
  }
  std::vector<double> src_vals, deltas;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!out[i].excluded) {
      src_vals.push_back(records[i].ppl_src);
      deltas.push_back(records[i].delta());
    }
  if (src_vals.size() < 4) throw std::invalid_argument("ppl_taxonomy: fewer than 4 usable records");
  const double med_src = detail::median(src_vals);
  const double med_delta = detail::median(deltas);
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (out[i].excluded) continue;
    const bool src_correct = records[i].ppl_src < med_src;
    const bool tgt_incorrect = records[i].delta() > med_delta;
    out[i].label = compose_label(src_correct, !tgt_incorrect);
  }
  return out;
}

}  // namespace ramoe::taxonomy
