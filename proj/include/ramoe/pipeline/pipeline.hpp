#pragma once

// Stage orchestration: run-directory layout, per-stage manifests with
// content hashes, the ten CLI stages, and cross-run comparison.

#include "ramoe/io/jsonl.hpp"
#include "ramoe/report/metrics.hpp"
#include "ramoe/taxonomy/taxonomy.hpp"
#include "ramoe/train/align.hpp"

#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ramoe::pipeline {

namespace fs = std::filesystem;

struct PipelineConfig {
  core::ModelConfig model;
  synth::CorpusConfig corpus;
  train::TrainConfig pretrain;
  train::TrainConfig finetune;
  bool own_surface = true;  // target language renders digits/operators in its own token block
  int n_general = 500;     // held-out source-language sequences for the general routing profile
  int eval_max_new = 8;
  double steer_delta = 1.0;
  report::FlopsInput flops{4096, 16, 8, 2048, 1024, 16, 64};
  std::string method = "ramoe";  // row label in reports and comparisons

  void validate() const {
    model.validate();
    corpus.validate();
    pretrain.validate();
    finetune.validate();
    if (n_general < 1) throw std::invalid_argument("n_general must be >= 1");
    if (eval_max_new < 1) throw std::invalid_argument("eval_max_new must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"model", c.model},           {"corpus", c.corpus},   {"pretrain", c.pretrain},
       {"finetune", c.finetune},     {"own_surface", c.own_surface},
       {"n_general", c.n_general}, {"eval_max_new", c.eval_max_new},
       {"steer_delta", c.steer_delta}, {"flops", c.flops},   {"method", c.method}};
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  j.at("model").get_to(c.model);
  j.at("corpus").get_to(c.corpus);
  j.at("pretrain").get_to(c.pretrain);
  j.at("finetune").get_to(c.finetune);
  c.own_surface = j.value("own_surface", true);
  c.n_general = j.value("n_general", 500);
  c.eval_max_new = j.value("eval_max_new", 8);
  c.steer_delta = j.value("steer_delta", 1.0);
  if (j.contains("flops")) j.at("flops").get_to(c.flops);
  c.method = j.value("method", "ramoe");
}

// Hash over the parts of the config that invalidate upstream artifacts
// (model + corpus); training knobs may legitimately differ between stages.
inline std::string upstream_hash(const PipelineConfig& cfg) {
  nlohmann::json j = {{"model", cfg.model}, {"corpus", cfg.corpus}};
  return io::hex64(io::fnv1a(j.dump()));
}

struct Manifest {
  std::string stage;
  std::string config_hash;                      // upstream_hash at write time
  std::map<std::string, std::string> inputs;    // relative path -> content hash
  std::map<std::string, std::string> outputs;
};

inline void to_json(nlohmann::json& j, const Manifest& m) {
  j = {{"stage", m.stage}, {"config_hash", m.config_hash}, {"inputs", m.inputs}, {"outputs", m.outputs}};
}

inline void from_json(const nlohmann::json& j, Manifest& m) {
  j.at("stage").get_to(m.stage);
  j.at("config_hash").get_to(m.config_hash);
  j.at("inputs").get_to(m.inputs);
  j.at("outputs").get_to(m.outputs);
}

namespace detail {

// Canonical location of a stage's outputs, used by downstream readers.
inline fs::path stage_dir(const fs::path& run, const std::string& stage) { return run / stage; }

// Writers never reuse an existing directory: first run claims the canonical
// name, reruns get a fresh timestamped sibling.
inline fs::path alloc_stage_dir(const fs::path& run, const std::string& stage) {
  fs::create_directories(run);
  fs::path dir = stage_dir(run, stage);
  if (!fs::exists(dir)) {
    fs::create_directories(dir);
    return dir;
  }
  const auto now = std::chrono::duration_cast<std::chrono::seconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
  for (long long n = now;; ++n) {
    fs::path alt = run / (stage + "-" + std::to_string(n));
    if (!fs::exists(alt)) {
      fs::create_directories(alt);
      return alt;
    }
  }
}

inline void require_file(const fs::path& path, const std::string& upstream_stage) {
  if (!fs::exists(path))
    throw std::runtime_error("missing upstream artifact: " + path.string() + " (run stage '" + upstream_stage +
                             "' first)");
}

// Record an input in the manifest and verify the upstream stage ran with a
// compatible config.
inline void consume(Manifest& m, const fs::path& run, const fs::path& path, const std::string& upstream_stage) {
  require_file(path, upstream_stage);
  m.inputs[fs::relative(path, run).string()] = io::file_hash(path.string());
  const fs::path up_manifest = stage_dir(run, upstream_stage) / "manifest.json";
  if (fs::exists(up_manifest)) {
    Manifest up = io::read_json(up_manifest.string()).get<Manifest>();
    if (up.config_hash != m.config_hash)
      throw std::runtime_error("config mismatch: stage '" + upstream_stage + "' ran with config hash " +
                               up.config_hash + " but the current config hashes to " + m.config_hash +
                               "; use a fresh run directory or restore the original config");
  }
}

// Outputs are keyed by filename (stage-local), so a rerun into a timestamped
// sibling directory yields a byte-identical manifest when the content matches.
inline void emit(Manifest& m, const fs::path& /*run*/, const fs::path& path) {
  m.outputs[path.filename().string()] = io::file_hash(path.string());
}

inline void write_manifest(const fs::path& dir, const Manifest& m) {
  io::write_json(nlohmann::json(m), (dir / "manifest.json").string());
}

inline std::vector<synth::LanguageSpec> languages(const PipelineConfig& cfg) {
  return {synth::make_language("src", 0, cfg.model.vocab_size, cfg.own_surface),
          synth::make_language("tgt", 1, cfg.model.vocab_size, cfg.own_surface)};
}

inline std::vector<train::TrainExample> pretrain_examples(const std::vector<synth::PretrainExample>& raw) {
  std::vector<train::TrainExample> out;
  for (std::size_t i = 0; i < raw.size(); ++i)
    out.push_back({"pt-" + std::to_string(i), raw[i].prompt, raw[i].response, ""});
  return out;
}

inline std::vector<train::TrainExample> finetune_examples(const std::vector<synth::ParallelExample>& labeled,
                                                          int eos_token) {
  std::vector<train::TrainExample> out;
  for (const auto& ex : labeled) {
    core::Tokens resp = ex.gold_answer;
    resp.push_back(eos_token);
    out.push_back({ex.id, ex.prompt_tgt, resp, ex.label});
  }
  return out;
}

}  // namespace detail

inline fs::path run_gen_data(const PipelineConfig& cfg, const fs::path& run) {
  cfg.validate();
  const fs::path dir = detail::alloc_stage_dir(run, "gen-data");
  Manifest m{"gen-data", upstream_hash(cfg), {}, {}};

  auto langs = detail::languages(cfg);
  auto corpus = synth::gen_corpus(cfg.corpus, langs, cfg.model.eos_token());

  // held-out general text: a separate source-language stream, never used
  // for pretraining
  synth::CorpusConfig gcfg = cfg.corpus;
  gcfg.seed = cfg.corpus.seed + 1;
  gcfg.n_pretrain_src = cfg.n_general;
  gcfg.n_pretrain_tgt = 0;
  gcfg.n_task = 1;
  gcfg.n_eval = 1;
  auto general = synth::gen_corpus(gcfg, langs, cfg.model.eos_token()).pretrain;

  io::write_jsonl(corpus.pretrain, (dir / "pretrain.jsonl").string());
  io::write_jsonl(corpus.task_parallel, (dir / "task_parallel.jsonl").string());
  io::write_jsonl(corpus.eval_parallel, (dir / "eval_parallel.jsonl").string());
  io::write_jsonl(general, (dir / "general.jsonl").string());
  io::write_json(nlohmann::json(langs), (dir / "languages.json").string());
  for (const char* f : {"pretrain.jsonl", "task_parallel.jsonl", "eval_parallel.jsonl", "general.jsonl",
                        "languages.json"})
    detail::emit(m, run, dir / f);
  detail::write_manifest(dir, m);
  return dir;
}

inline fs::path run_pretrain(const PipelineConfig& cfg, const fs::path& run) {
  cfg.validate();
  const fs::path dir = detail::alloc_stage_dir(run, "pretrain");
  Manifest m{"pretrain", upstream_hash(cfg), {}, {}};
  const fs::path corpus_file = detail::stage_dir(run, "gen-data") / "pretrain.jsonl";
  detail::consume(m, run, corpus_file, "gen-data");

  auto raw = io::read_jsonl<synth::PretrainExample>(corpus_file.string());
  auto data = detail::pretrain_examples(raw);
  core::Parameters params = core::init_params(cfg.model, cfg.pretrain.seed);
  train::TrainConfig pc = cfg.pretrain;
  pc.no_align = true;  // plain next-token training; no alignment during pretraining
  auto metrics = train::finetune(params, data, analysis::TaskExpertMap{}, pc);

  core::save_checkpoint(params, (dir / "checkpoint.json").string());
  io::write_jsonl(metrics.steps, (dir / "metrics.jsonl").string());
  io::write_json(nlohmann::json(pc), (dir / "config.json").string());
  for (const char* f : {"checkpoint.json", "metrics.jsonl", "config.json"}) detail::emit(m, run, dir / f);
  detail::write_manifest(dir, m);
  return dir;
}

inline fs::path run_categorize(const PipelineConfig& cfg, const fs::path& run) {
  cfg.validate();
  const fs::path dir = detail::alloc_stage_dir(run, "categorize");
  Manifest m{"categorize", upstream_hash(cfg), {}, {}};
  const fs::path ckpt = detail::stage_dir(run, "pretrain") / "checkpoint.json";
  const fs::path task_file = detail::stage_dir(run, "gen-data") / "task_parallel.jsonl";
  detail::consume(m, run, ckpt, "pretrain");
  detail::consume(m, run, task_file, "gen-data");

  core::Parameters params = core::load_checkpoint(ckpt.string());
  auto task = io::read_jsonl<synth::ParallelExample>(task_file.string());
  auto res = taxonomy::categorize(task, params, cfg.eval_max_new);

  io::write_jsonl(res.labeled, (dir / "labeled.jsonl").string());
  io::write_json(nlohmann::json(res.proportions), (dir / "proportions.json").string());
  for (const char* f : {"labeled.jsonl", "proportions.json"}) detail::emit(m, run, dir / f);
  detail::write_manifest(dir, m);
  return dir;
}

inline fs::path run_profile(const PipelineConfig& cfg, const fs::path& run) {
  cfg.validate();
  const fs::path dir = detail::alloc_stage_dir(run, "profile");
  Manifest m{"profile", upstream_hash(cfg), {}, {}};
  const fs::path ckpt = detail::stage_dir(run, "pretrain") / "checkpoint.json";
  const fs::path labeled_file = detail::stage_dir(run, "categorize") / "labeled.jsonl";
  const fs::path general_file = detail::stage_dir(run, "gen-data") / "general.jsonl";
  detail::consume(m, run, ckpt, "pretrain");
  detail::consume(m, run, labeled_file, "categorize");
  detail::consume(m, run, general_file, "gen-data");

  core::Parameters params = core::load_checkpoint(ckpt.string());
  auto labeled = io::read_jsonl<synth::ParallelExample>(labeled_file.string());
  std::map<std::string, analysis::SeqRoutingDist> dists_src, dists_tgt;
  for (const auto& ex : labeled) {
    if (!ex.response_src || ex.response_src->empty() || !ex.response_tgt || ex.response_tgt->empty()) continue;
    dists_src[ex.id] =
        analysis::seq_routing_dist(analysis::teacher_force_trace(params, ex.prompt_src, *ex.response_src));
    dists_tgt[ex.id] =
        analysis::seq_routing_dist(analysis::teacher_force_trace(params, ex.prompt_tgt, *ex.response_tgt));
  }
  auto profile = analysis::divergence_profile(dists_src, dists_tgt);

  auto general = io::read_jsonl<synth::PretrainExample>(general_file.string());
  std::map<std::string, analysis::SeqRoutingDist> dists_gen;
  for (std::size_t i = 0; i < general.size(); ++i)
    dists_gen["gen-" + std::to_string(i)] =
        analysis::seq_routing_dist(analysis::teacher_force_trace(params, general[i].prompt, general[i].response));

  io::write_jsonl(analysis::to_records(dists_src, "src"), (dir / "routing_src.jsonl").string());
  io::write_jsonl(analysis::to_records(dists_tgt, "tgt"), (dir / "routing_tgt.jsonl").string());
  io::write_jsonl(analysis::to_records(dists_gen, "src"), (dir / "general_src.jsonl").string());
  io::write_json(nlohmann::json(profile), (dir / "divergence.json").string());
  for (const char* f : {"routing_src.jsonl", "routing_tgt.jsonl", "general_src.jsonl", "divergence.json"})
    detail::emit(m, run, dir / f);
  detail::write_manifest(dir, m);
  return dir;
}

inline fs::path run_identify(const PipelineConfig& cfg, const fs::path& run) {
  cfg.validate();
  const fs::path dir = detail::alloc_stage_dir(run, "identify");
  Manifest m{"identify", upstream_hash(cfg), {}, {}};
  const fs::path div_file = detail::stage_dir(run, "profile") / "divergence.json";
  const fs::path src_file = detail::stage_dir(run, "profile") / "routing_src.jsonl";
  const fs::path gen_file = detail::stage_dir(run, "profile") / "general_src.jsonl";
  const fs::path labeled_file = detail::stage_dir(run, "categorize") / "labeled.jsonl";
  detail::consume(m, run, div_file, "profile");
  detail::consume(m, run, src_file, "profile");
  detail::consume(m, run, gen_file, "profile");
  detail::consume(m, run, labeled_file, "categorize");

  auto profile = io::read_json(div_file.string()).get<analysis::DivergenceProfile>();
  auto mid = analysis::middle_layers(profile);
  const int n_layers = static_cast<int>(profile.mean_div.size());

  auto src_records = io::read_jsonl<analysis::RoutingDistRecord>(src_file.string());
  auto gen_records = io::read_jsonl<analysis::RoutingDistRecord>(gen_file.string());
  auto dists_src = analysis::from_records(src_records, "src", n_layers);
  auto dists_gen_map = analysis::from_records(gen_records, "src", n_layers);

  auto labeled = io::read_jsonl<synth::ParallelExample>(labeled_file.string());
  std::vector<analysis::SeqRoutingDist> task_dists;  // src-correct examples only (cc, ci)
  std::vector<std::string> ci_ids;
  for (const auto& ex : labeled) {
    auto it = dists_src.find(ex.id);
    if (it == dists_src.end()) continue;
    if (ex.label == "cc" || ex.label == "ci") task_dists.push_back(it->second);
    if (ex.label == "ci") ci_ids.push_back(ex.id);
  }
  if (task_dists.empty())
    throw std::runtime_error("identify: no src-correct (cc/ci) examples to build the task profile from");
  std::vector<analysis::SeqRoutingDist> gen_dists;
  for (const auto& [id, d] : dists_gen_map) gen_dists.push_back(d);

  std::map<int, Eigen::VectorXd> delta_per_layer;
  for (int l = 0; l < n_layers; ++l) delta_per_layer[l] = analysis::task_specificity(task_dists, gen_dists, l);
  auto map = analysis::select_task_experts(delta_per_layer, cfg.finetune.k_experts, mid);
  analysis::build_reference_store(map, ci_ids, dists_src);

  io::write_json(nlohmann::json(map), (dir / "task_expert_map.json").string());
  detail::emit(m, run, dir / "task_expert_map.json");
  detail::write_manifest(dir, m);
  return dir;
}

inline fs::path run_finetune(const PipelineConfig& cfg, const fs::path& run) {
  cfg.validate();
  const fs::path dir = detail::alloc_stage_dir(run, "finetune");
  Manifest m{"finetune", upstream_hash(cfg), {}, {}};
  const fs::path map_file = detail::stage_dir(run, "identify") / "task_expert_map.json";
  const fs::path labeled_file = detail::stage_dir(run, "categorize") / "labeled.jsonl";
  const fs::path ckpt = detail::stage_dir(run, "pretrain") / "checkpoint.json";
  detail::consume(m, run, map_file, "identify");
  detail::consume(m, run, labeled_file, "categorize");
  detail::consume(m, run, ckpt, "pretrain");

  auto map = io::read_json(map_file.string()).get<analysis::TaskExpertMap>();
  auto labeled = io::read_jsonl<synth::ParallelExample>(labeled_file.string());
  core::Parameters params = core::load_checkpoint(ckpt.string());
  auto data = detail::finetune_examples(labeled, cfg.model.eos_token());
  auto metrics = train::finetune(params, data, map, cfg.finetune);

  core::save_checkpoint(params, (dir / "checkpoint.json").string());
  io::write_jsonl(metrics.steps, (dir / "metrics.jsonl").string());
  io::write_json(nlohmann::json(cfg.finetune), (dir / "config.json").string());
  for (const char* f : {"checkpoint.json", "metrics.jsonl", "config.json"}) detail::emit(m, run, dir / f);
  detail::write_manifest(dir, m);
  return dir;
}

namespace detail {

struct EvalOutput {
  double acc_src = 0.0, acc_tgt = 0.0;
  analysis::DivergenceProfile divergence;
  double mid_mean = 0.0;
  double selection_rate_tgt = 0.0;
  bool have_map = false;
};

// Decode both sides of the eval set, score accuracy, and compute the
// post-hoc divergence profile and task-expert selection rate.
inline EvalOutput evaluate(const PipelineConfig& cfg, const core::Parameters& params,
                           const std::vector<synth::ParallelExample>& eval_set, const analysis::TaskExpertMap* map,
                           const core::RouterSteering* steering = nullptr) {
  EvalOutput out;
  std::map<std::string, analysis::SeqRoutingDist> dists_src, dists_tgt;
  std::vector<core::RoutingTrace> traces_tgt;
  int ok_src = 0, ok_tgt = 0;
  for (const auto& ex : eval_set) {
    auto dec_src = core::greedy_decode(params, ex.prompt_src, cfg.eval_max_new, steering);
    auto dec_tgt = core::greedy_decode(params, ex.prompt_tgt, cfg.eval_max_new, steering);
    if (taxonomy::judge_exact(dec_src.generated, ex.gold_answer)) ++ok_src;
    if (taxonomy::judge_exact(dec_tgt.generated, ex.gold_answer)) ++ok_tgt;
    if (!dec_src.trace.generated_positions.empty() && !dec_tgt.trace.generated_positions.empty()) {
      dists_src[ex.id] = analysis::seq_routing_dist(dec_src.trace);
      dists_tgt[ex.id] = analysis::seq_routing_dist(dec_tgt.trace);
    }
    traces_tgt.push_back(std::move(dec_tgt.trace));
  }
  out.acc_src = static_cast<double>(ok_src) / eval_set.size();
  out.acc_tgt = static_cast<double>(ok_tgt) / eval_set.size();
  out.divergence = analysis::divergence_profile(dists_src, dists_tgt);
  if (map != nullptr && !map->empty()) {
    out.have_map = true;
    double s = 0.0;
    for (int l = map->mid_lo; l <= map->mid_hi; ++l) s += out.divergence.mean_div[static_cast<std::size_t>(l)];
    out.mid_mean = s / (map->mid_hi - map->mid_lo + 1);
    out.selection_rate_tgt = report::selection_rate(traces_tgt, *map, params.config.top_k);
  }
  return out;
}

inline nlohmann::json eval_json(const EvalOutput& out, const std::string& checkpoint,
                                const std::string& eval_set_hash) {
  nlohmann::json j = {{"checkpoint", checkpoint},
                      {"acc_src", out.acc_src},
                      {"acc_tgt", out.acc_tgt},
                      {"divergence", out.divergence},
                      {"eval_set_hash", eval_set_hash}};
  if (out.have_map) {
    j["mid_divergence"] = out.mid_mean;
    j["selection_rate_tgt"] = out.selection_rate_tgt;
  }
  return j;
}

}  // namespace detail

// Evaluates the fine-tuned checkpoint when present, the pretrained one
// otherwise.
inline fs::path run_eval(const PipelineConfig& cfg, const fs::path& run) {
  cfg.validate();
  const fs::path dir = detail::alloc_stage_dir(run, "eval");
  Manifest m{"eval", upstream_hash(cfg), {}, {}};
  const fs::path ft_ckpt = detail::stage_dir(run, "finetune") / "checkpoint.json";
  const fs::path pt_ckpt = detail::stage_dir(run, "pretrain") / "checkpoint.json";
  const fs::path eval_file = detail::stage_dir(run, "gen-data") / "eval_parallel.jsonl";
  const bool finetuned = fs::exists(ft_ckpt);
  const fs::path ckpt = finetuned ? ft_ckpt : pt_ckpt;
  detail::consume(m, run, ckpt, finetuned ? "finetune" : "pretrain");
  detail::consume(m, run, eval_file, "gen-data");

  core::Parameters params = core::load_checkpoint(ckpt.string());
  auto eval_set = io::read_jsonl<synth::ParallelExample>(eval_file.string());

  analysis::TaskExpertMap map;
  const fs::path map_file = detail::stage_dir(run, "identify") / "task_expert_map.json";
  const bool have_map = fs::exists(map_file);
  if (have_map) {
    detail::consume(m, run, map_file, "identify");
    map = io::read_json(map_file.string()).get<analysis::TaskExpertMap>();
  }

  auto out = detail::evaluate(cfg, params, eval_set, have_map ? &map : nullptr);
  io::write_json(detail::eval_json(out, fs::relative(ckpt, run).string(), io::file_hash(eval_file.string())),
                 (dir / "eval.json").string());
  detail::emit(m, run, dir / "eval.json");
  detail::write_manifest(dir, m);
  return dir;
}

// Routing-steering baseline: the pretrained model with router biases, no
// parameter change.
inline fs::path run_steer(const PipelineConfig& cfg, const fs::path& run) {
  cfg.validate();
  const fs::path dir = detail::alloc_stage_dir(run, "steer");
  Manifest m{"steer", upstream_hash(cfg), {}, {}};
  const fs::path pt_ckpt = detail::stage_dir(run, "pretrain") / "checkpoint.json";
  const fs::path map_file = detail::stage_dir(run, "identify") / "task_expert_map.json";
  const fs::path eval_file = detail::stage_dir(run, "gen-data") / "eval_parallel.jsonl";
  detail::consume(m, run, pt_ckpt, "pretrain");
  detail::consume(m, run, map_file, "identify");
  detail::consume(m, run, eval_file, "gen-data");

  core::Parameters params = core::load_checkpoint(pt_ckpt.string());
  auto map = io::read_json(map_file.string()).get<analysis::TaskExpertMap>();
  auto eval_set = io::read_jsonl<synth::ParallelExample>(eval_file.string());
  auto steering = train::make_steering(map, cfg.steer_delta);

  auto out = detail::evaluate(cfg, params, eval_set, &map, &steering);
  nlohmann::json j = detail::eval_json(out, fs::relative(pt_ckpt, run).string(), io::file_hash(eval_file.string()));
  j["delta"] = cfg.steer_delta;
  io::write_json(j, (dir / "steer.json").string());
  detail::emit(m, run, dir / "steer.json");
  detail::write_manifest(dir, m);
  return dir;
}

inline fs::path run_report(const PipelineConfig& cfg, const fs::path& run) {
  cfg.validate();
  const fs::path dir = detail::alloc_stage_dir(run, "report");
  Manifest m{"report", upstream_hash(cfg), {}, {}};
  const fs::path div_file = detail::stage_dir(run, "profile") / "divergence.json";
  const fs::path eval_file = detail::stage_dir(run, "eval") / "eval.json";
  const fs::path map_file = detail::stage_dir(run, "identify") / "task_expert_map.json";
  const fs::path prop_file = detail::stage_dir(run, "categorize") / "proportions.json";
  detail::consume(m, run, div_file, "profile");
  detail::consume(m, run, eval_file, "eval");
  detail::consume(m, run, map_file, "identify");
  detail::consume(m, run, prop_file, "categorize");

  auto before = io::read_json(div_file.string()).get<analysis::DivergenceProfile>();
  auto eval_doc = io::read_json(eval_file.string());
  auto after = eval_doc.at("divergence").get<analysis::DivergenceProfile>();
  auto map = io::read_json(map_file.string()).get<analysis::TaskExpertMap>();

  auto rep = report::divergence_report({{"base", before}, {cfg.method, after}},
                                       analysis::LayerRange{map.mid_lo, map.mid_hi});
  auto flops = report::flops_estimate(cfg.flops);

  nlohmann::json doc = {{"method", cfg.method},
                        {"divergence", rep},
                        {"flops", flops},
                        {"proportions", io::read_json(prop_file.string())},
                        {"eval", eval_doc}};
  io::write_json(doc, (dir / "report.json").string());
  std::ofstream csv((dir / "divergence.csv").string());
  csv << report::divergence_csv(rep);
  csv.close();
  for (const char* f : {"report.json", "divergence.csv"}) detail::emit(m, run, dir / f);
  detail::write_manifest(dir, m);
  return dir;
}

inline fs::path run_flops(const PipelineConfig& cfg, const fs::path& run) {
  cfg.validate();
  const fs::path dir = detail::alloc_stage_dir(run, "flops");
  Manifest m{"flops", upstream_hash(cfg), {}, {}};
  nlohmann::json doc = {{"input", cfg.flops}, {"breakdown", report::flops_estimate(cfg.flops)}};
  io::write_json(doc, (dir / "flops.json").string());
  detail::emit(m, run, dir / "flops.json");
  detail::write_manifest(dir, m);
  return dir;
}

inline fs::path run_stage(const std::string& stage, const PipelineConfig& cfg, const fs::path& run) {
  if (stage == "gen-data") return run_gen_data(cfg, run);
  if (stage == "pretrain") return run_pretrain(cfg, run);
  if (stage == "categorize") return run_categorize(cfg, run);
  if (stage == "profile") return run_profile(cfg, run);
  if (stage == "identify") return run_identify(cfg, run);
  if (stage == "finetune") return run_finetune(cfg, run);
  if (stage == "eval") return run_eval(cfg, run);
  if (stage == "steer") return run_steer(cfg, run);
  if (stage == "report") return run_report(cfg, run);
  if (stage == "flops") return run_flops(cfg, run);
  throw std::invalid_argument("unknown stage: " + stage);
}

struct RunSummary {
  std::string method;
  double acc_src = 0.0, acc_tgt = 0.0;
  double ci_proportion = 0.0;
  double mid_divergence = 0.0;
  double relative_gain = 0.0;  // (acc_tgt - sft_acc_tgt) / sft_acc_tgt, 0 when no SFT row
  std::string eval_set_hash;
};

inline void to_json(nlohmann::json& j, const RunSummary& s) {
  j = {{"method", s.method},
       {"acc_src", s.acc_src},
       {"acc_tgt", s.acc_tgt},
       {"ci_proportion", s.ci_proportion},
       {"mid_divergence", s.mid_divergence},
       {"relative_gain", s.relative_gain},
       {"eval_set_hash", s.eval_set_hash}};
}

inline void from_json(const nlohmann::json& j, RunSummary& s) {
  j.at("method").get_to(s.method);
  j.at("acc_src").get_to(s.acc_src);
  j.at("acc_tgt").get_to(s.acc_tgt);
  j.at("ci_proportion").get_to(s.ci_proportion);
  j.at("mid_divergence").get_to(s.mid_divergence);
  j.at("relative_gain").get_to(s.relative_gain);
  j.at("eval_set_hash").get_to(s.eval_set_hash);
}

// Side-by-side summary of completed runs over the same eval set; row order
// follows the input order. Gains are relative to the run whose method label
// is "sft" when one exists.
inline std::vector<RunSummary> compare_runs(const std::vector<fs::path>& runs) {
  if (runs.size() < 2) throw std::invalid_argument("compare_runs: need at least 2 run directories");
  std::vector<RunSummary> out;
  for (const auto& run : runs) {
    const fs::path eval_file = detail::stage_dir(run, "eval") / "eval.json";
    detail::require_file(eval_file, "eval");
    auto eval_doc = io::read_json(eval_file.string());
    RunSummary s;
    const fs::path cfg_file = run / "config.json";
    s.method = fs::exists(cfg_file) ? io::read_json(cfg_file.string()).value("method", run.filename().string())
                                    : run.filename().string();
    s.acc_src = eval_doc.at("acc_src").get<double>();
    s.acc_tgt = eval_doc.at("acc_tgt").get<double>();
    s.eval_set_hash = eval_doc.at("eval_set_hash").get<std::string>();
    if (eval_doc.contains("mid_divergence")) s.mid_divergence = eval_doc.at("mid_divergence").get<double>();
    const fs::path prop_file = detail::stage_dir(run, "categorize") / "proportions.json";
    if (fs::exists(prop_file)) s.ci_proportion = io::read_json(prop_file.string()).value("ci", 0.0);
    out.push_back(std::move(s));
  }
  for (const auto& s : out)
    if (s.eval_set_hash != out.front().eval_set_hash)
      throw std::runtime_error("compare_runs: eval-set hash mismatch between runs (" + s.eval_set_hash + " vs " +
                               out.front().eval_set_hash + ")");
  const RunSummary* sft = nullptr;
  for (const auto& s : out)
    if (s.method == "sft") sft = &s;
  if (sft != nullptr && sft->acc_tgt > 0.0)
    for (auto& s : out) s.relative_gain = (s.acc_tgt - sft->acc_tgt) / sft->acc_tgt;
  return out;
}

}  // namespace ramoe::pipeline
