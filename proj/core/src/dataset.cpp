#include "beamlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "beamlab/rng.hpp"

namespace beamlab {

std::vector<std::size_t> BeamDataset::rows_with(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < n_rows(); ++r)
    if (split[r] == static_cast<std::uint8_t>(s)) out.push_back(r);
  return out;
}

std::size_t BeamDataset::count(Split s) const {
  return static_cast<std::size_t>(
      std::count(split.begin(), split.end(), static_cast<std::uint8_t>(s)));
}

double dbm_to_mw(double dbm) { return std::pow(10.0, dbm / 10.0); }

std::vector<double> rssi_features(const ChannelVector& h, const Codebook& sensing,
                                  const MeasurementConfig& mc, std::uint64_t seed) {
  if (sensing.kind != CodebookKind::dft && sensing.kind != CodebookKind::odft)
    throw std::invalid_argument("rssi_features: sensing book must be dft or odft beams");
  if (mc.noise_dbm_low > mc.noise_dbm_high)
    throw std::invalid_argument("rssi_features: noise range low > high");

  auto eng = rng::engine(seed);
  std::uniform_real_distribution<double> noise_dbm(mc.noise_dbm_low, mc.noise_dbm_high);
  const double sigma2 = mc.noiseless_measurements ? 0.0 : dbm_to_mw(noise_dbm(eng));
  const double amp = std::sqrt(dbm_to_mw(mc.tx_power_dbm));
  // Complex Gaussian with total power sigma2: each quadrature has sigma2/2.
  std::normal_distribution<double> quad(0.0, std::sqrt(sigma2 / 2.0));

  std::vector<double> x(sensing.size());
  for (std::size_t i = 0; i < sensing.size(); ++i) {
    const auto& w = sensing.vectors[i];
    if (w.size() != h.size()) throw std::invalid_argument("rssi_features: dimension mismatch");
    std::complex<double> acc{0.0, 0.0};
    for (std::size_t n = 0; n < h.size(); ++n) acc += std::conj(h[n]) * w[n];
    std::complex<double> r = amp * acc;
    if (sigma2 > 0.0) r += std::complex<double>(quad(eng), quad(eng));
    x[i] = std::norm(r);
  }
  return x;
}

int optimal_label(const ChannelVector& h, const Codebook& candidates) {
  const std::vector<double> p = beam_powers(h, candidates);
  int best = 0;
  for (std::size_t q = 1; q < p.size(); ++q)
    if (p[q] > p[best]) best = static_cast<int>(q);
  return best;
}

namespace {

// 70/10/20 with deterministic counts (rounded half away from zero) over a
// seeded permutation of the rows.
void assign_split(BeamDataset& ds, std::uint64_t seed) {
  const std::size_t n = ds.n_rows();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  auto eng = rng::engine(seed);
  std::shuffle(perm.begin(), perm.end(), eng);
  const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
  const auto n_holdout = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) {
    Split s = Split::test;
    if (i < n_train)
      s = Split::train;
    else if (i < n_train + n_holdout)
      s = Split::holdout;
    ds.split[perm[i]] = static_cast<std::uint8_t>(s);
  }
}

void standardize_on_train(BeamDataset& ds) {
  const std::size_t cols = ds.n_features;
  ds.col_mean.assign(cols, 0.0);
  ds.col_std.assign(cols, 1.0);
  const auto train_rows = ds.rows_with(Split::train);
  if (train_rows.empty()) throw std::runtime_error("standardize: no train rows");
  for (std::size_t c = 0; c < cols; ++c) {
    double mean = 0.0;
    for (std::size_t r : train_rows) mean += ds.row(r)[c];
    mean /= static_cast<double>(train_rows.size());
    double var = 0.0;
    for (std::size_t r : train_rows) {
      const double d = ds.row(r)[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(train_rows.size());
    const double sd = std::sqrt(var);
    ds.col_mean[c] = mean;
    ds.col_std[c] = sd > 1e-300 ? sd : 1.0;
  }
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    float* row = ds.row(r);
    for (std::size_t c = 0; c < cols; ++c)
      row[c] = static_cast<float>((row[c] - ds.col_mean[c]) / ds.col_std[c]);
  }
}

}  // namespace

BeamDataset build_dataset(const Scene& scene, const ArrayConfig& cfg, const Codebook& sensing,
                          const Codebook& candidates, const MeasurementConfig& mc,
                          std::size_t n_samples, Origin origin, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("build_dataset: n_samples must be >= 1");
  const auto channels = channel_matrix(scene, cfg, /*normalize=*/true);

  BeamDataset ds;
  ds.n_features = static_cast<std::uint32_t>(sensing.size());
  ds.n_classes = static_cast<std::uint32_t>(candidates.size());
  ds.features.resize(n_samples * sensing.size());
  ds.labels.resize(n_samples);
  ds.split.assign(n_samples, 0);
  ds.origin.assign(n_samples, static_cast<std::uint8_t>(origin));
  ds.feature_beams.resize(sensing.size());
  std::iota(ds.feature_beams.begin(), ds.feature_beams.end(), std::uint16_t{0});

  // Labels are computed once per UE; rows resample (UE, noise realization).
  std::vector<int> label_per_ue(channels.size());
  for (std::size_t u = 0; u < channels.size(); ++u) {
    if (mc.noiseless_labels) {
      label_per_ue[u] = optimal_label(channels[u], candidates);
    } else {
      const auto noisy = rssi_features(channels[u], candidates, mc,
                                       rng::derive(seed, rng::Stream::noise, u));
      label_per_ue[u] = static_cast<int>(
          std::max_element(noisy.begin(), noisy.end()) - noisy.begin());
    }
  }

  auto pick_eng = rng::engine(rng::derive(seed, rng::Stream::sample));
  std::uniform_int_distribution<std::size_t> pick(0, channels.size() - 1);
  for (std::size_t d = 0; d < n_samples; ++d) {
    const std::size_t u = pick(pick_eng);
    const auto x = rssi_features(channels[u], sensing, mc,
                                 rng::derive(seed, rng::Stream::noise, d + channels.size()));
    float* row = ds.row(d);
    for (std::size_t c = 0; c < x.size(); ++c) row[c] = static_cast<float>(x[c]);
    ds.labels[d] = static_cast<std::uint16_t>(label_per_ue[u]);
  }

  assign_split(ds, rng::derive(seed, rng::Stream::split));
  standardize_on_train(ds);
  return ds;
}

BeamDataset augment(const BeamDataset& real, const BeamDataset& twin, double real_fraction,
                    std::uint64_t seed) {
  if (real_fraction < 0.0 || real_fraction > 1.0)
    throw std::invalid_argument("augment: real_fraction must be in [0,1]");
  if (real.n_features != twin.n_features || real.n_classes != twin.n_classes)
    throw std::invalid_argument("augment: incompatible datasets");

  const auto twin_train = twin.rows_with(Split::train);
  const auto real_train = real.rows_with(Split::train);
  std::vector<std::size_t> sampled(real_train);
  auto eng = rng::engine(seed);
  std::shuffle(sampled.begin(), sampled.end(), eng);
  sampled.resize(static_cast<std::size_t>(
      std::floor(real_fraction * static_cast<double>(real_train.size()))));
  std::sort(sampled.begin(), sampled.end());

  BeamDataset out;
  out.n_features = real.n_features;
  out.n_classes = real.n_classes;
  out.feature_beams = real.feature_beams;
  out.col_mean = real.col_mean;
  out.col_std = real.col_std;

  auto append_row = [&out](const BeamDataset& src, std::size_t r, Split s) {
    const float* row = src.row(r);
    out.features.insert(out.features.end(), row, row + src.n_features);
    out.labels.push_back(src.labels[r]);
    out.split.push_back(static_cast<std::uint8_t>(s));
    out.origin.push_back(src.origin[r]);
  };

  for (std::size_t r : twin_train) append_row(twin, r, Split::train);
  for (std::size_t r : sampled) append_row(real, r, Split::train);
  for (std::size_t r = 0; r < real.n_rows(); ++r) {
    const auto s = static_cast<Split>(real.split[r]);
    if (s != Split::train) append_row(real, r, s);
  }
  return out;
}

BeamDataset slice_columns(const BeamDataset& ds, const std::vector<int>& columns) {
  if (columns.empty()) throw std::invalid_argument("slice_columns: empty selection");
  BeamDataset out;
  out.n_features = static_cast<std::uint32_t>(columns.size());
  out.n_classes = ds.n_classes;
  out.labels = ds.labels;
  out.split = ds.split;
  out.origin = ds.origin;
  out.features.resize(ds.n_rows() * columns.size());
  for (int c : columns)
    if (c < 0 || static_cast<std::uint32_t>(c) >= ds.n_features)
      throw std::out_of_range("slice_columns: column out of range");
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    const float* src = ds.row(r);
    float* dst = out.row(r);
    for (std::size_t j = 0; j < columns.size(); ++j)
      dst[j] = src[static_cast<std::size_t>(columns[j])];
  }
  for (int c : columns) {
    out.col_mean.push_back(ds.col_mean[static_cast<std::size_t>(c)]);
    out.col_std.push_back(ds.col_std[static_cast<std::size_t>(c)]);
    out.feature_beams.push_back(ds.feature_beams[static_cast<std::size_t>(c)]);
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'B', 'T', 'D', 'S'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void put_vec(std::ofstream& os, const std::vector<T>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("dataset file: truncated read");
  return v;
}

template <typename T>
void get_vec(std::ifstream& is, std::vector<T>& v, std::size_t n) {
  v.resize(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!is) throw std::runtime_error("dataset file: truncated read");
}

}  // namespace

void save_dataset(const BeamDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_dataset: cannot open " + path);
  os.write(kMagic, 4);
  put(os, kVersion);
  put(os, static_cast<std::uint32_t>(ds.n_rows()));
  put(os, ds.n_features);
  put(os, ds.n_classes);
  put_vec(os, ds.features);
  put_vec(os, ds.labels);
  put_vec(os, ds.split);
  put_vec(os, ds.origin);
  put_vec(os, ds.col_mean);
  put_vec(os, ds.col_std);
  put_vec(os, ds.feature_beams);
  if (!os) throw std::runtime_error("save_dataset: write failed for " + path);
}

BeamDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_dataset: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_dataset: bad magic in " + path);
  if (get<std::uint16_t>(is) != kVersion)
    throw std::runtime_error("load_dataset: unsupported version");
  BeamDataset ds;
  const auto rows = get<std::uint32_t>(is);
  ds.n_features = get<std::uint32_t>(is);
  ds.n_classes = get<std::uint32_t>(is);
  get_vec(is, ds.features, static_cast<std::size_t>(rows) * ds.n_features);
  get_vec(is, ds.labels, rows);
  get_vec(is, ds.split, rows);
  get_vec(is, ds.origin, rows);
  get_vec(is, ds.col_mean, ds.n_features);
  get_vec(is, ds.col_std, ds.n_features);
  get_vec(is, ds.feature_beams, ds.n_features);
  return ds;
}

void export_dataset_csv(const BeamDataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("export_dataset_csv: cannot open " + path);
  os << "row,label,split,origin";
  for (std::uint32_t c = 0; c < ds.n_features; ++c) os << ",x_" << ds.feature_beams[c];
  os << "\n";
  os.precision(9);
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    os << r << "," << ds.labels[r] << "," << int(ds.split[r]) << "," << int(ds.origin[r]);
    const float* row = ds.row(r);
    for (std::uint32_t c = 0; c < ds.n_features; ++c) os << "," << row[c];
    os << "\n";
  }
}

}  // namespace beamlab
