#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "beamlab/mlp.hpp"

namespace beamlab {

// Cross-polytope LSH over unit-normalized layer representations. Each table
// hashes with n_funcs pseudo-rotations, where n_funcs is chosen so a key
// carries roughly n_hash_bits of bucket resolution for the layer dimension.
struct LshParams {
  int n_tables = 16;
  int n_hash_bits = 12;
  std::uint64_t seed = 0;
};

struct DknnConfig {
  int k_neighbors = 10;
  LshParams lsh;
  bool use_lsh = true;  // false = exact cosine scan (the reference oracle)
};

// Nonconformity scores of the holdout set, kept sorted.
struct CalibrationScores {
  std::vector<int> sorted_scores;
  std::size_t size() const { return sorted_scores.size(); }
};

struct CredibilityRecord {
  int prediction = 0;
  double confidence = 0.0;
  double credibility = 0.0;
  std::vector<double> p_values;
  std::vector<std::vector<std::uint16_t>> neighbor_labels;  // per representation space
};

// Frozen model plus per-layer representations of the training rows (three
// hidden activations and the logits), with per-layer LSH tables and the
// labels needed for the nonconformity count. Queries fall back to an exact
// scan whenever the candidate union is smaller than k.
class LayerIndex {
 public:
  LayerIndex() = default;
  LayerIndex(const MlpModel& m, const BeamDataset& ds, const DknnConfig& cfg);

  std::size_t n_layers() const { return spaces_.size(); }
  std::size_t n_points() const { return labels_.size(); }
  int k_neighbors() const { return cfg_.k_neighbors; }
  int n_classes() const { return model_.output_dim(); }
  const MlpModel& model() const { return model_; }

  // Row ids of the k nearest stored representations per layer (cosine,
  // ties to the lower row id).
  std::vector<std::vector<std::uint32_t>> neighbors(std::span<const double> x) const;
  std::vector<std::vector<std::uint16_t>> neighbor_labels(std::span<const double> x) const;

  std::uint16_t label_of(std::size_t row) const { return labels_[row]; }

 private:
  struct Table {
    std::vector<float> rotations;  // n_funcs x dim x dim
    std::vector<std::vector<std::uint32_t>> buckets;
    std::vector<std::uint64_t> bucket_keys;  // parallel to buckets, sorted
  };
  struct Space {
    int dim = 0;
    int n_funcs = 1;
    std::vector<float> reps;  // n_points x dim, unit norm
    std::vector<Table> tables;
  };

  std::uint64_t hash_key(const Space& space, const Table& table, const float* v) const;
  std::vector<std::uint32_t> top_k(const Space& space, const float* query,
                                   std::span<const std::uint32_t> candidates) const;

  MlpModel model_;
  DknnConfig cfg_;
  std::vector<Space> spaces_;
  std::vector<std::uint16_t> labels_;
};

LayerIndex build_index(const MlpModel& m, const BeamDataset& train, const DknnConfig& cfg);

// Number of neighbors across all representation spaces whose label differs
// from the candidate label j.
int nonconformity(const LayerIndex& idx, std::span<const double> x, int j);
int nonconformity_from_labels(const std::vector<std::vector<std::uint16_t>>& omega, int j);

// One score per holdout row at its true label. Throws on an empty holdout.
CalibrationScores calibrate(const LayerIndex& idx, const BeamDataset& holdout_ds,
                            std::span<const std::size_t> holdout_rows);

// p_j = |{c in C : c >= rho(x, j)}| / |C| for every candidate label.
std::vector<double> p_values(const LayerIndex& idx, const CalibrationScores& cal,
                             std::span<const double> x);

// The same fraction for one raw nonconformity score.
double p_value(const CalibrationScores& cal, int rho);

// Prediction = argmax p (lowest index on ties); credibility = max p;
// confidence = 1 - second-highest p.
CredibilityRecord classify(const LayerIndex& idx, const CalibrationScores& cal,
                           std::span<const double> x);

struct ScoredPrediction {
  double score = 0.0;  // credibility or softmax confidence, in [0,1]
  bool correct = false;
};

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;  // NaN when the bin is empty
};

// Bin s covers (s/S, (s+1)/S]; a score of exactly 0 lands in bin 0.
std::vector<ReliabilityBin> reliability_diagram(std::span<const ScoredPrediction> records,
                                                int n_bins);

struct RobustnessSummary {
  std::vector<double> thresholds;
  std::vector<double> clean_below;  // fraction with credibility < threshold
  std::vector<double> adversarial_below;
  double mean_clean_credibility = 0.0;
  double mean_adversarial_credibility = 0.0;
};

RobustnessSummary robustness_eval(const LayerIndex& idx, const CalibrationScores& cal,
                                  const std::vector<std::vector<double>>& clean,
                                  const std::vector<std::vector<double>>& adversarial,
                                  std::span<const double> thresholds);

void export_records_csv(std::span<const CredibilityRecord> records,
                        std::span<const int> true_labels, const std::string& path);
void export_reliability_csv(std::span<const ReliabilityBin> bins, const std::string& path);

}  // namespace beamlab
