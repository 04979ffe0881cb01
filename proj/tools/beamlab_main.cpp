// beamlab — desk-scale mmWave beam-alignment experiments.
//
// Subcommands mirror the pipeline stages (generate, pretrain, finetune,
// shap, select, dknn, eval, report); `run` executes every stage whose
// outputs are missing and writes the manifest.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "beamlab/pipeline.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  unsigned threads = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "Experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", opts.out_dir, "Override the config's output directory");
  cmd->add_option("--threads", opts.threads, "Override the config's thread count");
  cmd->add_option("--seed", opts.seed, "Override the config's root seed")
      ->each([&opts](const std::string&) { opts.seed_set = true; });
}

beamlab::ExperimentConfig resolve(const CommonOpts& opts) {
  beamlab::ExperimentConfig cfg = beamlab::load_config(opts.config_path);
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  if (opts.threads > 0) cfg.threads = opts.threads;
  if (opts.seed_set) cfg.seed = opts.seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale mmWave beam alignment lab"};
  app.require_subcommand(1);

  struct StageCmd {
    CLI::App* cmd;
    CommonOpts opts;
    beamlab::Stage stage;
  };
  std::vector<StageCmd> stage_cmds;
  for (beamlab::Stage s : beamlab::all_stages()) {
    const std::string name = beamlab::stage_name(s);
    StageCmd sc;
    sc.stage = s;
    sc.cmd = app.add_subcommand(name, "Run the '" + name + "' stage");
    stage_cmds.push_back(std::move(sc));
  }
  std::string eval_method;
  double dknn_epsilon = -1.0;
  for (auto& sc : stage_cmds) {
    add_common(sc.cmd, sc.opts);
    if (beamlab::stage_name(sc.stage) == "eval")
      sc.cmd->add_option("--method", eval_method,
                         "Only sweep one baseline (exhaustive|hierarchical|binary)");
    if (beamlab::stage_name(sc.stage) == "dknn")
      sc.cmd->add_option("--epsilon", dknn_epsilon, "Override the FGSM perturbation size");
  }

  CommonOpts run_opts;
  std::string run_stage_name;
  CLI::App* run_cmd = app.add_subcommand("run", "Run all stages and write the manifest");
  add_common(run_cmd, run_opts);
  run_cmd->add_option("--stage", run_stage_name, "Limit the run to a single stage");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      beamlab::ExperimentConfig cfg = resolve(run_opts);
      if (!run_stage_name.empty()) {
        beamlab::run_stage(cfg, beamlab::stage_from_name(run_stage_name));
        beamlab::write_manifest(cfg);
      } else {
        beamlab::run_pipeline(cfg);
      }
      std::cout << "ok: " << cfg.out_dir << "/manifest.json\n";
      return 0;
    }
    for (auto& sc : stage_cmds) {
      if (!sc.cmd->parsed()) continue;
      beamlab::ExperimentConfig cfg = resolve(sc.opts);
      if (beamlab::stage_name(sc.stage) == "eval" && !eval_method.empty()) {
        beamlab::run_eval_method(cfg, eval_method);
      } else {
        if (beamlab::stage_name(sc.stage) == "dknn" && dknn_epsilon >= 0.0)
          cfg.dknn.epsilon = dknn_epsilon;
        beamlab::run_stage(cfg, sc.stage);
      }
      beamlab::write_manifest(cfg);
      std::cout << "ok: stage " << beamlab::stage_name(sc.stage) << " -> " << cfg.out_dir << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
