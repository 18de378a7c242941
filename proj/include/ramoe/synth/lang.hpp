#pragma once

// Synthetic parallel "languages": every task instance has a canonical token
// form; a language renders it through a token bijection. Digits and operators
// are shared across languages by default, only word tokens differ, so the
// same arithmetic content carries a language-specific surface.

#include "ramoe/core/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace ramoe::synth {

using core::Tokens;

// Shared canonical token ids.
inline constexpr int kDigit0 = 0;       // digits occupy 0..9
inline constexpr int kPlus = 10;
inline constexpr int kEquals = 11;      // answer marker
inline constexpr int kCompare = 12;
inline constexpr int kWordBase = 16;    // per-language word blocks start here
inline constexpr int kWordsPerLanguage = 4;

struct LanguageSpec {
  std::string name;
  std::vector<int> token_alphabet;
  int answer_marker = kEquals;
  std::map<int, int> bijection;  // canonical token -> this language's token

  std::map<int, int> inverse() const {
    std::map<int, int> inv;
    for (auto [c, t] : bijection) {
      if (!inv.emplace(t, c).second) throw std::invalid_argument("bijection not injective: " + name);
    }
    return inv;
  }
};

inline constexpr int kSurfaceStride = 20;  // words(4) + digits(10) + operators(3) + slack

// Language i keeps shared digits/operators and owns the word block
// [kWordBase + i*kWordsPerLanguage, ...). With own_surface set, languages
// other than index 0 additionally render prompt digits and operators in a
// private token block, so their entire surface form is language-specific;
// answers stay in the canonical digit tokens either way.
inline LanguageSpec make_language(const std::string& name, int index, int vocab_size, bool own_surface = false) {
  LanguageSpec lang;
  lang.name = name;
  const bool full = own_surface && index > 0;
  const int stride = own_surface ? kSurfaceStride : kWordsPerLanguage;
  const int base = kWordBase + index * stride;
  const int span = full ? kSurfaceStride - 3 : kWordsPerLanguage;
  if (base + span > vocab_size - 1)
    throw std::invalid_argument("vocab too small for language " + name);
  for (int d = 0; d < 10; ++d) lang.bijection[kDigit0 + d] = full ? base + 4 + d : kDigit0 + d;
  lang.bijection[kPlus] = full ? base + 14 : kPlus;
  lang.bijection[kEquals] = full ? base + 15 : kEquals;
  lang.bijection[kCompare] = full ? base + 16 : kCompare;
  for (int w = 0; w < kWordsPerLanguage; ++w) lang.bijection[kWordBase + w] = base + w;
  for (auto [c, t] : lang.bijection) lang.token_alphabet.push_back(t);
  std::sort(lang.token_alphabet.begin(), lang.token_alphabet.end());
  return lang;
}

inline Tokens apply_bijection(const Tokens& canonical, const LanguageSpec& lang) {
  Tokens out;
  out.reserve(canonical.size());
  for (int t : canonical) {
    auto it = lang.bijection.find(t);
    if (it == lang.bijection.end())
      throw std::invalid_argument("token " + std::to_string(t) + " not in bijection domain of " + lang.name);
    out.push_back(it->second);
  }
  return out;
}

// Token-wise translation: invert the source rendering, re-render in target.
inline Tokens translate(const Tokens& src_tokens, const LanguageSpec& lang_src, const LanguageSpec& lang_tgt) {
  auto inv = lang_src.inverse();
  Tokens canonical;
  canonical.reserve(src_tokens.size());
  for (int t : src_tokens) {
    auto it = inv.find(t);
    if (it == inv.end())
      throw std::invalid_argument("token " + std::to_string(t) + " not in alphabet of " + lang_src.name);
    canonical.push_back(it->second);
  }
  return apply_bijection(canonical, lang_tgt);
}

struct ParallelExample {
  std::string id;
  Tokens prompt_src;
  Tokens prompt_tgt;
  Tokens gold_answer;  // digits only, shared across languages
  std::optional<Tokens> response_src;
  std::optional<Tokens> response_tgt;
  std::string label;  // "", or one of cc/ci/ic/ii
};

struct PretrainExample {
  std::string lang;
  Tokens prompt;
  Tokens response;  // answer digits + EOS
};

enum class TaskKind { ModularAddition, SequenceCopy, Comparison };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::ModularAddition: return "modular-addition";
    case TaskKind::SequenceCopy: return "sequence-copy";
    case TaskKind::Comparison: return "comparison";
  }
  throw std::logic_error("bad TaskKind");
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "modular-addition") return TaskKind::ModularAddition;
  if (s == "sequence-copy") return TaskKind::SequenceCopy;
  if (s == "comparison") return TaskKind::Comparison;
  throw std::invalid_argument("unknown task kind: " + s);
}

struct CorpusConfig {
  TaskKind task = TaskKind::ModularAddition;
  int n_pretrain_src = 20000;
  int n_pretrain_tgt = 2000;
  int n_task = 2000;
  int n_eval = 500;
  std::uint64_t seed = 1;
  int modulus = 10;       // modular addition answer = (a+b) mod modulus
  int operand_max = 99;   // operands drawn from [0, operand_max]
  int copy_len = 3;       // sequence-copy payload length

  void validate() const {
    if (n_task < 1 || n_eval < 1 || n_pretrain_src < 1) throw std::invalid_argument("corpus counts must be >= 1");
    if (n_pretrain_tgt < 0) throw std::invalid_argument("n_pretrain_tgt must be >= 0");
    if (modulus < 2 || operand_max < 1 || copy_len < 1) throw std::invalid_argument("bad task parameters");
  }
};

inline void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = {{"task", to_string(c.task)},       {"n_pretrain_src", c.n_pretrain_src},
       {"n_pretrain_tgt", c.n_pretrain_tgt}, {"n_task", c.n_task},
       {"n_eval", c.n_eval},              {"seed", c.seed},
       {"modulus", c.modulus},            {"operand_max", c.operand_max},
       {"copy_len", c.copy_len}};
}

inline void from_json(const nlohmann::json& j, CorpusConfig& c) {
  c.task = task_kind_from_string(j.at("task").get<std::string>());
  j.at("n_pretrain_src").get_to(c.n_pretrain_src);
  j.at("n_pretrain_tgt").get_to(c.n_pretrain_tgt);
  j.at("n_task").get_to(c.n_task);
  j.at("n_eval").get_to(c.n_eval);
  j.at("seed").get_to(c.seed);
  j.at("modulus").get_to(c.modulus);
  j.at("operand_max").get_to(c.operand_max);
  j.at("copy_len").get_to(c.copy_len);
}

struct Corpus {
  std::vector<PretrainExample> pretrain;
  std::vector<ParallelExample> task_parallel;
  std::vector<ParallelExample> eval_parallel;
};

inline Tokens digits_of(int value) {
  if (value == 0) return {kDigit0};
  Tokens out;
  while (value > 0) {
    out.push_back(kDigit0 + value % 10);
    value /= 10;
  }
  std::reverse(out.begin(), out.end());
  return out;
}

namespace detail {

// Canonical prompt/answer for one task instance.
struct Instance {
  Tokens prompt;
  Tokens answer;
};

inline Instance make_instance(const CorpusConfig& cfg, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> operand(0, cfg.operand_max);
  Instance inst;
  inst.prompt = {kWordBase + 0, kWordBase + 1};
  switch (cfg.task) {
    case TaskKind::ModularAddition: {
      const int a = operand(rng), b = operand(rng);
      Tokens da = digits_of(a), db = digits_of(b);
      inst.prompt.insert(inst.prompt.end(), da.begin(), da.end());
      inst.prompt.push_back(kPlus);
      inst.prompt.insert(inst.prompt.end(), db.begin(), db.end());
      inst.prompt.push_back(kEquals);
      inst.answer = digits_of((a + b) % cfg.modulus);
      break;
    }
    case TaskKind::SequenceCopy: {
      std::uniform_int_distribution<int> digit(0, 9);
      Tokens payload;
      for (int i = 0; i < cfg.copy_len; ++i) payload.push_back(kDigit0 + digit(rng));
      inst.prompt.insert(inst.prompt.end(), payload.begin(), payload.end());
      inst.prompt.push_back(kEquals);
      inst.answer = payload;
      break;
    }
    case TaskKind::Comparison: {
      const int a = operand(rng), b = operand(rng);
      Tokens da = digits_of(a), db = digits_of(b);
      inst.prompt.insert(inst.prompt.end(), da.begin(), da.end());
      inst.prompt.push_back(kCompare);
      inst.prompt.insert(inst.prompt.end(), db.begin(), db.end());
      inst.prompt.push_back(kEquals);
      inst.answer = {a > b ? kDigit0 + 1 : kDigit0};
      break;
    }
  }
  return inst;
}

}  // namespace detail

// Deterministic corpus generation. Task and eval splits are disjoint by
// canonical prompt; pretrain mixes the two languages at the configured ratio.
inline Corpus gen_corpus(const CorpusConfig& cfg, const std::vector<LanguageSpec>& langs, int eos_token) {
  cfg.validate();
  if (langs.size() < 2) throw std::invalid_argument("need at least 2 languages");
  // word blocks of distinct languages must not collide
  std::set<int> seen_words;
  for (const auto& lang : langs)
    for (auto [c, t] : lang.bijection)
      if (c >= kWordBase && !seen_words.insert(t).second)
        throw std::invalid_argument("language alphabets overlap on word token " + std::to_string(t));

  std::mt19937_64 rng(cfg.seed);
  const LanguageSpec& src = langs[0];
  const LanguageSpec& tgt = langs[1];

  Corpus out;
  std::set<Tokens> used_prompts;
  auto fresh_instance = [&](bool must_be_new) {
    for (int attempt = 0; attempt < 100000; ++attempt) {
      detail::Instance inst = detail::make_instance(cfg, rng);
      if (!must_be_new || used_prompts.insert(inst.prompt).second) return inst;
    }
    throw std::runtime_error("prompt space exhausted; shrink n_task/n_eval or enlarge operand range");
  };

  auto make_parallel = [&](const std::string& id) {
    detail::Instance inst = fresh_instance(true);
    ParallelExample ex;
    ex.id = id;
    ex.prompt_src = apply_bijection(inst.prompt, src);
    ex.prompt_tgt = apply_bijection(inst.prompt, tgt);
    ex.gold_answer = inst.answer;
    return ex;
  };
  for (int i = 0; i < cfg.n_task; ++i) out.task_parallel.push_back(make_parallel("task-" + std::to_string(i)));
  for (int i = 0; i < cfg.n_eval; ++i) out.eval_parallel.push_back(make_parallel("eval-" + std::to_string(i)));

  auto push_pretrain = [&](const LanguageSpec& lang) {
    detail::Instance inst = fresh_instance(false);
    PretrainExample ex;
    ex.lang = lang.name;
    ex.prompt = apply_bijection(inst.prompt, lang);
    ex.response = inst.answer;
    ex.response.push_back(eos_token);
    out.pretrain.push_back(std::move(ex));
  };
  for (int i = 0; i < cfg.n_pretrain_src; ++i) push_pretrain(src);
  for (int i = 0; i < cfg.n_pretrain_tgt; ++i) push_pretrain(tgt);
  std::shuffle(out.pretrain.begin(), out.pretrain.end(), rng);
  return out;
}

// ---- serialization ----

inline void to_json(nlohmann::json& j, const LanguageSpec& l) {
  nlohmann::json bij = nlohmann::json::object();
  for (auto [c, t] : l.bijection) bij[std::to_string(c)] = t;
  j = {{"name", l.name}, {"token_alphabet", l.token_alphabet}, {"answer_marker", l.answer_marker}, {"bijection", bij}};
}

inline void from_json(const nlohmann::json& j, LanguageSpec& l) {
  j.at("name").get_to(l.name);
  j.at("token_alphabet").get_to(l.token_alphabet);
  j.at("answer_marker").get_to(l.answer_marker);
  l.bijection.clear();
  for (auto it = j.at("bijection").begin(); it != j.at("bijection").end(); ++it)
    l.bijection[std::stoi(it.key())] = it.value().get<int>();
}

inline void to_json(nlohmann::json& j, const ParallelExample& e) {
  j = {{"id", e.id}, {"prompt_src", e.prompt_src}, {"prompt_tgt", e.prompt_tgt}, {"gold_answer", e.gold_answer}};
  if (e.response_src) j["response_src"] = *e.response_src;
  if (e.response_tgt) j["response_tgt"] = *e.response_tgt;
  if (!e.label.empty()) j["label"] = e.label;
}

inline void from_json(const nlohmann::json& j, ParallelExample& e) {
  j.at("id").get_to(e.id);
  j.at("prompt_src").get_to(e.prompt_src);
  j.at("prompt_tgt").get_to(e.prompt_tgt);
  j.at("gold_answer").get_to(e.gold_answer);
  if (j.contains("response_src")) e.response_src = j.at("response_src").get<Tokens>();
  if (j.contains("response_tgt")) e.response_tgt = j.at("response_tgt").get<Tokens>();
  if (j.contains("label")) j.at("label").get_to(e.label);
}

inline void to_json(nlohmann::json& j, const PretrainExample& e) {
  j = {{"lang", e.lang}, {"prompt", e.prompt}, {"response", e.response}};
}

inline void from_json(const nlohmann::json& j, PretrainExample& e) {
  j.at("lang").get_to(e.lang);
  j.at("prompt").get_to(e.prompt);
  j.at("response").get_to(e.response);
}

}  // namespace ramoe::synth
