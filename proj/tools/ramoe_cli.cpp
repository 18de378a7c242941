// Command-line driver for the three-stage routing-aligned fine-tuning
// pipeline on the synthetic-language testbed.

#include "ramoe/pipeline/pipeline.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace {

void apply_seed(ramoe::pipeline::PipelineConfig& cfg, std::uint64_t seed) {
  cfg.corpus.seed = seed;
  cfg.pretrain.seed = seed;
  cfg.finetune.seed = seed;
}

void apply_ablation(ramoe::pipeline::PipelineConfig& cfg, const std::string& name) {
  if (name == "no-align")
    cfg.finetune.no_align = true;
  else if (name == "no-task-experts")
    cfg.finetune.no_task_expert_restriction = true;
  else if (name == "no-ci-filter")
    cfg.finetune.no_ci_filter = true;
  else if (name == "all-layers")
    cfg.finetune.all_layers = true;
  else
    throw CLI::ValidationError("--ablate", "unknown ablation: " + name);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"routing-aligned MoE fine-tuning pipeline"};

  std::string config_path, stage, out_dir, ablate;
  std::vector<std::string> compare_dirs;
  std::uint64_t seed = 0;
  bool have_seed = false;
  double lambda = 0.0, steer_delta = 0.0;
  bool have_lambda = false, have_delta = false;
  int k_experts = 0;

  app.add_option("--config", config_path, "pipeline config JSON; defaults used when omitted")
      ->check(CLI::ExistingFile);
  app.add_option("--stage", stage,
                 "one of gen-data|pretrain|categorize|profile|identify|finetune|eval|steer|report|flops");
  app.add_option("--seed", seed, "override every stage seed")->each([&](const std::string&) { have_seed = true; });
  app.add_option("--lambda", lambda, "alignment loss weight")->each([&](const std::string&) { have_lambda = true; });
  app.add_option("--k-experts", k_experts, "task experts per layer (K)");
  app.add_option("--ablate", ablate, "no-align|no-task-experts|no-ci-filter|all-layers");
  app.add_option("--steer-delta", steer_delta, "router logit bias for the steering baseline")
      ->each([&](const std::string&) { have_delta = true; });
  app.add_option("--out", out_dir, "run directory");
  app.add_option("--compare", compare_dirs, "completed run directories to compare (repeat; needs >= 2)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!compare_dirs.empty()) {
      std::vector<std::filesystem::path> runs(compare_dirs.begin(), compare_dirs.end());
      auto table = ramoe::pipeline::compare_runs(runs);
      std::cout << nlohmann::json(table).dump(2) << "\n";
      return 0;
    }
    if (stage.empty() || out_dir.empty()) {
      std::cerr << "error: --stage and --out are required (or use --compare)\n";
      return 1;
    }

    ramoe::pipeline::PipelineConfig cfg;
    if (!config_path.empty()) cfg = ramoe::io::read_json(config_path).get<ramoe::pipeline::PipelineConfig>();
    if (have_seed) apply_seed(cfg, seed);
    if (have_lambda) cfg.finetune.lambda = lambda;
    if (k_experts > 0) cfg.finetune.k_experts = k_experts;
    if (!ablate.empty()) apply_ablation(cfg, ablate);
    if (have_delta) cfg.steer_delta = steer_delta;
    cfg.validate();

    const std::filesystem::path run(out_dir);
    std::filesystem::create_directories(run);
    if (!std::filesystem::exists(run / "config.json"))
      ramoe::io::write_json(nlohmann::json(cfg), (run / "config.json").string());

    auto dir = ramoe::pipeline::run_stage(stage, cfg, run);
    std::cout << "stage " << stage << " done: " << dir.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
