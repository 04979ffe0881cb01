#include "beamlab/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "beamlab/rng.hpp"

namespace beamlab {

namespace {

// One sweep trial shares a single drawn noise power; every measurement gets
// a fresh complex Gaussian sample of that power.
struct SweepNoise {
  std::mt19937_64 eng;
  double sigma2 = 0.0;

  SweepNoise(const MeasurementConfig& mc, std::uint64_t seed) : eng(seed) {
    if (mc.noiseless_measurements) {
      sigma2 = 0.0;
    } else {
      std::uniform_real_distribution<double> noise_dbm(mc.noise_dbm_low, mc.noise_dbm_high);
      sigma2 = dbm_to_mw(noise_dbm(eng));
    }
  }

  double measure(const ChannelVector& h, const ChannelVector& w, double amp) {
    std::complex<double> acc{0.0, 0.0};
    for (std::size_t i = 0; i < h.size(); ++i) acc += std::conj(h[i]) * w[i];
    std::complex<double> r = amp * acc;
    if (sigma2 > 0.0) {
      std::normal_distribution<double> quad(0.0, std::sqrt(sigma2 / 2.0));
      r += std::complex<double>(quad(eng), quad(eng));
    }
    return std::norm(r);
  }
};

int argmax_low(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

// Wide-stage argmax with edge-aware ties. A child on the shared edge of two
// wide cells measures the same power in both (up to rounding); the owning
// parent is the higher-indexed one, except across the periodic seam at
// u = -1 where beam 0 owns the edge rather than beam n-1.
int argmax_wide_tied(std::span<const double> v, double rel_eps) {
  double peak = 0.0;
  for (double x : v) peak = std::max(peak, x);
  int lowest = -1, highest = -1;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] >= peak * (1.0 - rel_eps)) {
      if (lowest < 0) lowest = static_cast<int>(i);
      highest = static_cast<int>(i);
    }
  }
  if (lowest == 0 && highest == static_cast<int>(v.size()) - 1) return 0;
  return highest;
}

}  // namespace

double reference_noise_mw(const MeasurementConfig& mc) {
  return dbm_to_mw(0.5 * (mc.noise_dbm_low + mc.noise_dbm_high));
}

double beam_snr_db(const ChannelVector& h, const ChannelVector& w, const MeasurementConfig& mc) {
  std::complex<double> acc{0.0, 0.0};
  for (std::size_t i = 0; i < h.size(); ++i) acc += std::conj(h[i]) * w[i];
  const double snr = dbm_to_mw(mc.tx_power_dbm) * std::norm(acc) / reference_noise_mw(mc);
  return 10.0 * std::log10(snr);
}

SweepResult exhaustive_search(const ChannelVector& h, const Codebook& candidates,
                              const MeasurementConfig& mc, const TimingConfig& timing,
                              std::uint64_t seed) {
  if (candidates.kind != CodebookKind::odft && candidates.kind != CodebookKind::dft)
    throw std::invalid_argument("exhaustive_search: candidate book must be dft/odft");
  SweepNoise noise(mc, rng::derive(seed, rng::Stream::eval));
  const double amp = std::sqrt(dbm_to_mw(mc.tx_power_dbm));
  std::vector<double> rssi(candidates.size());
  for (std::size_t q = 0; q < candidates.size(); ++q)
    rssi[q] = noise.measure(h, candidates.vectors[q], amp);
  SweepResult out;
  out.chosen_beam = argmax_low(rssi);
  out.n_measurements = static_cast<int>(candidates.size());
  out.sweep_time_ms = out.n_measurements * timing.t_s_ms;
  out.achieved_snr_db = beam_snr_db(h, candidates.vectors[static_cast<std::size_t>(out.chosen_beam)], mc);
  return out;
}

SweepResult hierarchical_search(const ChannelVector& h, const Codebook& wide,
                                const Codebook& candidates, const MeasurementConfig& mc,
                                const TimingConfig& timing, std::uint64_t seed) {
  const int n_wide = static_cast<int>(wide.size());
  const int n_narrow = static_cast<int>(candidates.size());
  if (n_wide < 1 || n_narrow < n_wide)
    throw std::invalid_argument("hierarchical_search: bad codebook sizes");
  SweepNoise noise(mc, rng::derive(seed, rng::Stream::eval));
  const double amp = std::sqrt(dbm_to_mw(mc.tx_power_dbm));

  std::vector<double> tier1(wide.size());
  for (std::size_t m = 0; m < wide.size(); ++m) tier1[m] = noise.measure(h, wide.vectors[m], amp);
  const int best_wide = argmax_wide_tied(tier1, 1e-10);

  const auto [lo, hi] = child_beam_range(best_wide, n_wide, n_narrow);
  std::vector<double> tier2(static_cast<std::size_t>(hi - lo));
  for (int q = lo; q < hi; ++q)
    tier2[static_cast<std::size_t>(q - lo)] = noise.measure(h, candidates.vectors[static_cast<std::size_t>(q)], amp);
  const int best_child = lo + argmax_low(tier2);

  SweepResult out;
  out.chosen_beam = best_child;
  out.n_measurements = n_wide + (n_narrow + n_wide - 1) / n_wide;
  out.sweep_time_ms = out.n_measurements * timing.t_s_ms;
  out.achieved_snr_db = beam_snr_db(h, candidates.vectors[static_cast<std::size_t>(best_child)], mc);
  return out;
}

SweepResult binary_search(const ChannelVector& h, const Codebook& candidates,
                          const MeasurementConfig& mc, const TimingConfig& timing,
                          std::uint64_t seed) {
  const int q_total = static_cast<int>(candidates.size());
  if (q_total < 2 || (q_total & (q_total - 1)) != 0)
    throw std::invalid_argument("binary_search: candidate count must be a power of two");
  const int n_bs = static_cast<int>(h.size());
  SweepNoise noise(mc, rng::derive(seed, rng::Stream::eval));
  const double amp = std::sqrt(dbm_to_mw(mc.tx_power_dbm));

  // Covering beam for odft index block [a, b): a zero-padded subarray beam
  // whose first null sits at the block edge.
  auto covering_beam = [&](int a, int b) {
    const int width = b - a;
    if (width == 1) return candidates.vectors[static_cast<std::size_t>(a)];
    const double u = -1.0 + static_cast<double>(2 * a + width - 1) / q_total;
    const int n_sub = std::min(n_bs, q_total / width);
    ChannelVector sub = steering_from_spatial_freq(u, n_sub);
    ChannelVector w(static_cast<std::size_t>(n_bs), {0.0, 0.0});
    for (int i = 0; i < n_sub; ++i) w[static_cast<std::size_t>(i)] = sub[static_cast<std::size_t>(i)];
    return w;
  };

  int lo = 0, hi = q_total;
  int n_meas = 0;
  while (hi - lo > 1) {
    const int mid = (lo + hi) / 2;
    const double left = noise.measure(h, covering_beam(lo, mid), amp);
    const double right = noise.measure(h, covering_beam(mid, hi), amp);
    n_meas += 2;
    if (right > left)
      lo = mid;
    else
      hi = mid;
  }

  SweepResult out;
  out.chosen_beam = lo;
  out.n_measurements = n_meas;
  out.sweep_time_ms = out.n_measurements * timing.t_s_ms;
  out.achieved_snr_db = beam_snr_db(h, candidates.vectors[static_cast<std::size_t>(lo)], mc);
  return out;
}

SweepResult dl_policy_sweep(const MlpModel& m, const ChannelVector& h, const Codebook& sensing,
                            std::span<const double> col_mean, std::span<const double> col_std,
                            const Codebook& candidates, const MeasurementConfig& mc,
                            const TimingConfig& timing, int k, std::uint64_t seed) {
  if (k < 1 || k > static_cast<int>(candidates.size()))
    throw std::invalid_argument("dl_policy_sweep: k out of range");
  if (col_mean.size() != sensing.size() || col_std.size() != sensing.size())
    throw std::invalid_argument("dl_policy_sweep: standardization stats mismatch");
  SweepNoise noise(mc, rng::derive(seed, rng::Stream::eval));
  const double amp = std::sqrt(dbm_to_mw(mc.tx_power_dbm));

  std::vector<double> x(sensing.size());
  for (std::size_t i = 0; i < sensing.size(); ++i)
    x[i] = (noise.measure(h, sensing.vectors[i], amp) - col_mean[i]) / col_std[i];

  const auto top = m.topk(x, k);
  int chosen = top.front();
  int n_meas = static_cast<int>(sensing.size());
  if (k > 1) {
    std::vector<double> refine(top.size());
    for (std::size_t i = 0; i < top.size(); ++i)
      refine[i] = noise.measure(h, candidates.vectors[static_cast<std::size_t>(top[i])], amp);
    chosen = top[static_cast<std::size_t>(argmax_low(refine))];
    n_meas += k;
  }

  SweepResult out;
  out.chosen_beam = chosen;
  out.n_measurements = n_meas;
  out.sweep_time_ms = out.n_measurements * timing.t_s_ms;
  out.achieved_snr_db = beam_snr_db(h, candidates.vectors[static_cast<std::size_t>(chosen)], mc);
  return out;
}

std::vector<int> fixed_subset_indices(int n_candidates, int subset_size) {
  if (subset_size < 1 || subset_size > n_candidates)
    throw std::invalid_argument("fixed_subset_indices: bad subset size");
  std::vector<int> out(static_cast<std::size_t>(subset_size));
  for (int j = 0; j < subset_size; ++j)
    out[static_cast<std::size_t>(j)] = (2 * j + 1) * n_candidates / (2 * subset_size);
  return out;
}

MlpModel fixed_subset_baseline(const BeamDataset& ds, const TrainConfig& tc,
                               std::uint64_t init_seed, TrainLog* log) {
  MlpModel init(default_dims(static_cast<int>(ds.n_features), static_cast<int>(ds.n_classes)),
                init_seed);
  return train(init, ds, tc, log);
}

double topk_accuracy(const MlpModel& m, const BeamDataset& ds,
                     std::span<const std::size_t> rows, int k) {
  if (rows.empty()) throw std::invalid_argument("topk_accuracy: empty row set");
  std::vector<double> x(ds.n_features);
  std::size_t hits = 0;
  for (std::size_t r : rows) {
    const float* src = ds.row(r);
    for (std::size_t c = 0; c < x.size(); ++c) x[c] = src[c];
    const auto top = m.topk(x, k);
    if (std::find(top.begin(), top.end(), static_cast<int>(ds.labels[r])) != top.end()) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

double effective_se(double snr_linear, const TimingConfig& timing, int n_measurements, int k) {
  if (n_measurements < 1 || k < 0) throw std::invalid_argument("effective_se: bad arguments");
  const double t_ia =
      (static_cast<double>(n_measurements) + (k > 1 ? static_cast<double>(k) : 0.0)) * timing.t_s_ms +
      timing.t_predict_ms;
  if (t_ia >= timing.t_frame_ms) return 0.0;
  return (timing.t_frame_ms - t_ia) / timing.t_frame_ms * std::log2(1.0 + snr_linear);
}

double average_snr_db(std::span<const double> snr_db) {
  if (snr_db.empty()) throw std::invalid_argument("average_snr_db: empty input");
  double acc = 0.0;
  for (double v : snr_db) acc += v;
  return acc / static_cast<double>(snr_db.size());
}

double oracle_snr_db(const ChannelVector& h, const Codebook& candidates,
                     const MeasurementConfig& mc) {
  const auto powers = beam_powers(h, candidates);
  const double best = *std::max_element(powers.begin(), powers.end());
  return 10.0 * std::log10(dbm_to_mw(mc.tx_power_dbm) * best / reference_noise_mw(mc));
}

double measure_predict_ms(const MlpModel& m, int n_trials) {
  if (n_trials < 1) throw std::invalid_argument("measure_predict_ms: n_trials must be >= 1");
  std::vector<double> x(static_cast<std::size_t>(m.input_dim()), 0.5);
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(n_trials));
  volatile double sink = 0.0;
  for (int t = 0; t < n_trials; ++t) {
    const auto start = std::chrono::steady_clock::now();
    const auto fwd = m.forward(x);
    const auto stop = std::chrono::steady_clock::now();
    sink = sink + fwd.probs[0];
    times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
  }
  std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2),
                   times.end());
  return times[times.size() / 2];
}

}  // namespace beamlab
