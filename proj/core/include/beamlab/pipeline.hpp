#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "beamlab/baselines.hpp"
#include "beamlab/channel.hpp"
#include "beamlab/dataset.hpp"
#include "beamlab/dknn.hpp"
#include "beamlab/mlp.hpp"
#include "beamlab/shap.hpp"

namespace beamlab {

// One structured document drives the whole experiment. Every stage draws
// its randomness from `seed` through named sub-streams, so stages can be
// re-run in isolation and reproduce the same artifacts.
struct ExperimentConfig {
  int version = 1;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::string out_dir = "runs/out";

  struct SceneParams {
    int n_ue = 200;
    double los_fraction = 0.7;
    SceneGeometry geometry;
    TwinPerturbation twin{2.0, 0.3, 2.0};
  } scene;

  ArrayConfig array;

  struct CodebookParams {
    int oversampling = 4;
    int n_sensing = 32;  // sensing DFT beams; must equal array.n_bs
  } codebook;

  MeasurementConfig measurement;

  struct DatasetParams {
    std::size_t n_twin_samples = 5000;
    std::size_t n_real_samples = 2000;
    double real_fraction = 0.3;
  } dataset;

  struct TrainParams {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int epochs = 100;
    int batch_size = 256;
  } train;

  struct ShapParams {
    int n_background = 512;
    int n_background_refs = 64;
    std::string estimator = "auto";  // auto | exact | permutation
    int n_permutations = 2048;
    int n_explain = 64;
    bool attribute_logits = true;
    double delta = 0.96;
  } shap;

  struct DknnParams {
    int k_neighbors = 10;
    int n_tables = 16;
    int n_hash_bits = 12;
    bool use_lsh = true;
    double epsilon = 0.5;
    std::vector<double> thresholds{0.2, 0.4};
    int reliability_bins = 10;
  } dknn;

  struct TimingParams {
    double t_s_ms = 5.0 / 64.0;
    double t_frame_ms = 10.0;
    double t_predict_ms = 0.05;
    bool measure_t_predict = false;
  } timing;

  struct EvalParams {
    int n_eval_channels = 128;
    std::vector<int> topk{1, 2, 3};
    std::vector<int> feature_sweep{2, 4, 8, 12, 16, 24, 32};
  } eval;

  TrainConfig train_config(std::uint64_t train_seed) const;
  TimingConfig timing_config() const;
};

// Parses and validates a config document. Unknown keys and type errors are
// rejected with the offending JSON-pointer path in the exception message.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config_json(const std::string& text, const std::string& origin = "config");

// Canonical JSON of the resolved config. Excluding out_dir/threads gives
// the identity the manifest binds to (neither affects artifact content).
std::string config_to_json(const ExperimentConfig& cfg, bool include_environment = true);
void save_resolved_config(const ExperimentConfig& cfg, const std::string& path);

enum class Stage { generate, pretrain, finetune, shap, select, dknn, eval, report };

const std::vector<Stage>& all_stages();
std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);

// Runs one stage, assuming its upstream artifacts exist (throws a dependency
// error naming the missing stage otherwise).
void run_stage(const ExperimentConfig& cfg, Stage stage);

// Per-channel sweep results for one baseline (exhaustive | hierarchical |
// binary), written to eval_sweep_<method>.csv in the run directory.
void run_eval_method(const ExperimentConfig& cfg, const std::string& method);

// Runs every stage whose outputs are missing, then writes manifest.json.
// Returns the manifest as relpath -> sha256.
std::map<std::string, std::string> run_pipeline(const ExperimentConfig& cfg);

// Recomputes hashes of the artifacts currently on disk and writes
// manifest.json (resolved_config.json and the manifest itself are not
// listed; they may embed out_dir).
std::map<std::string, std::string> write_manifest(const ExperimentConfig& cfg);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file(const std::string& path);

}  // namespace beamlab
