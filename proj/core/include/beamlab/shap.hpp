#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "beamlab/mlp.hpp"

namespace beamlab {

enum class ShapEstimator { automatic, exact, permutation };

struct ShapConfig {
  int n_background_refs = 64;
  ShapEstimator estimator = ShapEstimator::automatic;
  int n_permutations = 2048;
  int n_explain = 0;            // 0 = every test row
  bool attribute_logits = true;  // logits vs softmax probabilities as target
  std::uint64_t seed = 0;
};

// Per-sample attributions psi[sample][feature][class], the global mean-|psi|
// ranking and the threshold-selected beam subset.
struct ShapReport {
  std::size_t n_samples = 0;
  std::size_t n_features = 0;
  std::size_t n_classes = 0;
  std::vector<double> psi;      // flat [n_samples * n_features * n_classes]
  std::vector<double> psi_bar;  // [n_features]
  std::vector<int> ranking;     // feature indices, descending psi_bar
  std::vector<int> selected;    // prefix of ranking reaching the threshold
  double delta = 0.0;

  double at(std::size_t d, std::size_t i, std::size_t q) const {
    return psi[(d * n_features + i) * n_classes + q];
  }
};

// Exact enumeration is limited to this many features (2^M subsets).
constexpr int kExactShapMaxFeatures = 14;

// Seeded subsample of the given rows, as dense double vectors.
std::vector<std::vector<double>> background_refs(const BeamDataset& ds,
                                                 std::span<const std::size_t> rows, int n_refs,
                                                 std::uint64_t seed);

// Mean model output over the references with features outside `subset`
// replaced by the reference's values. subset = all features reproduces the
// model output at x; subset = {} is the base value.
std::vector<double> value_function(const MlpModel& m, std::span<const double> x,
                                   std::span<const int> subset,
                                   const std::vector<std::vector<double>>& refs,
                                   bool attribute_logits = true);

// Exact Shapley values, psi[feature * n_classes + q]. Throws
// std::invalid_argument when the feature count exceeds kExactShapMaxFeatures,
// pointing the caller at the permutation estimator.
std::vector<double> shapley_exact(const MlpModel& m, std::span<const double> x,
                                  const std::vector<std::vector<double>>& refs,
                                  const ShapConfig& cfg);

// Unbiased permutation-sampling estimator with the same value function.
std::vector<double> shapley_sampled(const MlpModel& m, std::span<const double> x,
                                    const std::vector<std::vector<double>>& refs,
                                    const ShapConfig& cfg, std::uint64_t sample_seed);

// Attributions for the given rows (parallel across rows; per-row seeds are
// derived from cfg.seed so results do not depend on the thread count).
ShapReport attribute_rows(const MlpModel& m, const BeamDataset& ds,
                          std::span<const std::size_t> rows,
                          const std::vector<std::vector<double>>& refs, const ShapConfig& cfg,
                          unsigned n_threads = 1);

// Fills psi_bar (mean absolute attribution per feature) and the descending
// ranking; ties keep index order.
void aggregate(ShapReport& report);
std::vector<double> mean_abs_attribution(const ShapReport& report);

// Smallest prefix of the descending ranking whose psi_bar mass reaches
// delta * total. Requires 0 < delta <= 1.
std::vector<int> select_features(std::span<const double> psi_bar, double delta);

// Fresh model on the column-sliced dataset (selected features, ascending
// beam order).
MlpModel retrain_reduced(const BeamDataset& ds, const std::vector<int>& selected,
                         const TrainConfig& tc, std::uint64_t init_seed, TrainLog* log = nullptr);

void save_shap_report(const ShapReport& report, const std::string& json_path);
ShapReport load_shap_report(const std::string& json_path);
void export_importance_csv(const ShapReport& report, const std::string& path);
void save_psi_tensor(const ShapReport& report, const std::string& path);

}  // namespace beamlab
