#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "beamlab/codebook.hpp"
#include "beamlab/dataset.hpp"
#include "beamlab/mlp.hpp"

namespace beamlab {

// Frame timing. t_s is the 5G NR scan slot (5 ms / 64 beams). t_frame has
// no standard value; reports flag it as a configured default.
struct TimingConfig {
  double t_s_ms = 5.0 / 64.0;
  double t_frame_ms = 10.0;
  double t_predict_ms = 0.05;
};

struct SweepResult {
  int chosen_beam = 0;
  int n_measurements = 0;
  double achieved_snr_db = 0.0;  // true beam SNR at the reference noise power
  double sweep_time_ms = 0.0;    // n_measurements * t_s
};

// Reference noise power (mW) used for reported SNRs: the midpoint of the
// configured dBm range, independent of the per-trial noise draw.
double reference_noise_mw(const MeasurementConfig& mc);

// SNR (dB) a given beamforming vector achieves on h.
double beam_snr_db(const ChannelVector& h, const ChannelVector& w, const MeasurementConfig& mc);

// Sweeps every candidate beam with noisy RSSI and keeps the strongest.
SweepResult exhaustive_search(const ChannelVector& h, const Codebook& candidates,
                              const MeasurementConfig& mc, const TimingConfig& timing,
                              std::uint64_t seed);

// Two-tier search: best wide beam first, then its child narrow beams.
// Wide-stage ties resolve to the higher index so a child sitting on the
// shared edge of two wide cells resolves to the parent that owns it.
SweepResult hierarchical_search(const ChannelVector& h, const Codebook& wide,
                                const Codebook& candidates, const MeasurementConfig& mc,
                                const TimingConfig& timing, std::uint64_t seed);

// log2(Q)-level bisection with two covering beams per level
// (2 + 2*log2(Q/2) measurements). Q must be a power of two.
SweepResult binary_search(const ChannelVector& h, const Codebook& candidates,
                          const MeasurementConfig& mc, const TimingConfig& timing,
                          std::uint64_t seed);

// Model-driven policy: sweep the model's sensing beams, standardize with the
// training statistics, then sweep the top-k predictions when k > 1.
SweepResult dl_policy_sweep(const MlpModel& m, const ChannelVector& h, const Codebook& sensing,
                            std::span<const double> col_mean, std::span<const double> col_std,
                            const Codebook& candidates, const MeasurementConfig& mc,
                            const TimingConfig& timing, int k, std::uint64_t seed);

// Evenly spaced O-DFT indices for the fixed narrow-beam sensing baseline.
std::vector<int> fixed_subset_indices(int n_candidates, int subset_size);

// Same classifier, trained on the narrow-subset dataset.
MlpModel fixed_subset_baseline(const BeamDataset& ds, const TrainConfig& tc,
                               std::uint64_t init_seed, TrainLog* log = nullptr);

double topk_accuracy(const MlpModel& m, const BeamDataset& ds,
                     std::span<const std::size_t> rows, int k);

// Eq.-style effective spectral efficiency:
// ((t_frame - t_ia)/t_frame) * log2(1 + snr) with
// t_ia = (n_measurements + k*1{k>1}) * t_s + t_predict; zero when the
// alignment overhead fills the frame.
double effective_se(double snr_linear, const TimingConfig& timing, int n_measurements, int k);

// Mean of per-channel SNRs, in dB domain.
double average_snr_db(std::span<const double> snr_db);

// Best achievable SNR over a codebook (the oracle policy).
double oracle_snr_db(const ChannelVector& h, const Codebook& candidates,
                     const MeasurementConfig& mc);

// Median single-forward latency over n_trials runs.
double measure_predict_ms(const MlpModel& m, int n_trials = 1000);

}  // namespace beamlab
