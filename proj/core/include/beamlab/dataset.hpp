#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "beamlab/channel.hpp"
#include "beamlab/codebook.hpp"

namespace beamlab {

struct MeasurementConfig {
  double tx_power_dbm = 30.0;
  double noise_dbm_low = -114.0;
  double noise_dbm_high = -94.0;
  bool noiseless_labels = true;
  // Zero measurement noise everywhere (the noise range still defines the
  // reference noise power that SNR reports divide by).
  bool noiseless_measurements = false;
};

enum class Split : std::uint8_t { train = 0, holdout = 1, test = 2 };
enum class Origin : std::uint8_t { twin = 0, real = 1 };

// Labeled RSSI dataset. Features are linear received powers, z-scored per
// column with statistics of the train split (kept in col_mean/col_std).
// feature_beams records which sensing beam produced each column so reduced
// datasets stay traceable to physical beams.
struct BeamDataset {
  std::uint32_t n_features = 0;
  std::uint32_t n_classes = 0;
  std::vector<float> features;  // row-major, n_rows x n_features
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> split;
  std::vector<std::uint8_t> origin;
  std::vector<double> col_mean;
  std::vector<double> col_std;
  std::vector<std::uint16_t> feature_beams;

  std::size_t n_rows() const { return labels.size(); }
  const float* row(std::size_t r) const { return features.data() + r * n_features; }
  float* row(std::size_t r) { return features.data() + r * n_features; }
  std::vector<std::size_t> rows_with(Split s) const;
  std::size_t count(Split s) const;

  bool operator==(const BeamDataset&) const = default;
};

double dbm_to_mw(double dbm);

// Per-beam received power |sqrt(P) h^H w_i + z_i|^2. One noise power is
// drawn per call, uniformly in dBm over the configured range; z_i is then
// i.i.d. complex Gaussian with that power. Sensing must be a dft or odft
// book (narrow-beam sensing is the fixed-subset baseline).
std::vector<double> rssi_features(const ChannelVector& h, const Codebook& sensing,
                                  const MeasurementConfig& mc, std::uint64_t seed);

// Noise-free argmax_q |h^H w_q|^2 over the candidate book, ties to the
// lowest index.
int optimal_label(const ChannelVector& h, const Codebook& candidates);

// Draws n_samples rows by resampling UEs and noise realizations from the
// scene's normalized channel set, labels them noise-free (when configured),
// assigns a seeded 70/10/20 split and standardizes columns on train stats.
BeamDataset build_dataset(const Scene& scene, const ArrayConfig& cfg, const Codebook& sensing,
                          const Codebook& candidates, const MeasurementConfig& mc,
                          std::size_t n_samples, Origin origin, std::uint64_t seed);

// Transfer-learning union: all twin train rows plus a seeded real_fraction
// of real train rows; holdout and test stay pure real.
BeamDataset augment(const BeamDataset& real, const BeamDataset& twin, double real_fraction,
                    std::uint64_t seed);

// Column projection onto the given feature positions (sorted ascending by
// the caller if a canonical order is wanted).
BeamDataset slice_columns(const BeamDataset& ds, const std::vector<int>& columns);

// "BTDS" versioned binary files; round trips are bit exact.
void save_dataset(const BeamDataset& ds, const std::string& path);
BeamDataset load_dataset(const std::string& path);
void export_dataset_csv(const BeamDataset& ds, const std::string& path);

}  // namespace beamlab
