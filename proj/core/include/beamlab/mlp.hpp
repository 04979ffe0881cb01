#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "beamlab/dataset.hpp"

namespace beamlab {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int epochs = 100;
  int batch_size = 256;
  std::uint64_t seed = 0;
};

struct ForwardResult {
  std::vector<double> logits;
  std::vector<double> probs;
  // Post-activation output of each hidden layer, then the logits.
  std::vector<std::vector<double>> layer_reps;
};

struct Gradients {
  std::vector<std::vector<double>> weights;  // same shapes as the model
  std::vector<std::vector<double>> biases;
};

// Fully connected ReLU network with a softmax head. Weights are row-major
// (out x in) per layer. Any dims vector with >= 2 entries is a valid
// architecture; hidden layers may be absent (affine model).
class MlpModel {
 public:
  MlpModel() = default;
  // He-uniform initialization, deterministic in seed.
  MlpModel(std::vector<int> dims, std::uint64_t seed);

  const std::vector<int>& dims() const { return dims_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  std::size_t n_layers() const { return weights_.size(); }
  std::size_t parameter_count() const;
  std::uint64_t init_seed() const { return init_seed_; }

  std::vector<double>& weight(std::size_t layer) { return weights_[layer]; }
  const std::vector<double>& weight(std::size_t layer) const { return weights_[layer]; }
  std::vector<double>& bias(std::size_t layer) { return biases_[layer]; }
  const std::vector<double>& bias(std::size_t layer) const { return biases_[layer]; }

  ForwardResult forward(std::span<const double> x) const;
  ForwardResult forward_row(const BeamDataset& ds, std::size_t row) const;

  // Mean cross entropy over the given rows, with log clamped at 1e-12.
  double loss(const BeamDataset& ds, std::span<const std::size_t> rows) const;

  // Analytic backprop gradients of loss() (mean over the rows).
  Gradients gradients(const BeamDataset& ds, std::span<const std::size_t> rows) const;

  // Gradient of the single-sample cross entropy with respect to the input.
  std::vector<double> input_gradient(std::span<const double> x, int label) const;

  std::vector<int> topk(std::span<const double> x, int k) const;

  bool operator==(const MlpModel&) const = default;

 private:
  std::vector<int> dims_;
  std::vector<std::vector<double>> weights_;
  std::vector<std::vector<double>> biases_;
  std::uint64_t init_seed_ = 0;
};

std::size_t parameter_count(const std::vector<int>& dims);

// Default classifier stack: input -> 64 -> 64 -> 128 -> n_classes.
std::vector<int> default_dims(int input_dim, int n_classes);

struct TrainLog {
  std::vector<double> epoch_loss;
};

// Adam training on the train split. Deterministic in (model, ds, tc).
// Throws std::runtime_error if the loss turns non-finite.
MlpModel train(const MlpModel& init, const BeamDataset& ds, const TrainConfig& tc,
               TrainLog* log = nullptr);

// Same loop, starting from pretrained weights.
MlpModel finetune(const MlpModel& pretrained, const BeamDataset& augmented, const TrainConfig& tc,
                  TrainLog* log = nullptr);

// x + eps * sign(dL/dx) at the given label.
std::vector<double> fgsm(const MlpModel& m, std::span<const double> x, int label, double eps);

void save_model(const MlpModel& m, const std::string& path);
MlpModel load_model(const std::string& path);

}  // namespace beamlab
