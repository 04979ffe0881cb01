#include "beamlab/dknn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "beamlab/rng.hpp"

#include <fstream>

namespace beamlab {

namespace {

int bits_per_crosspolytope(int dim) {
  int bits = 1;
  while ((1 << bits) < 2 * dim) ++bits;
  return bits;
}

// Unit-normalizes in place; an all-zero vector stays zero and is routed to
// the reserved bucket by the hash.
void normalize(float* v, int dim) {
  double norm = 0.0;
  for (int i = 0; i < dim; ++i) norm += static_cast<double>(v[i]) * v[i];
  norm = std::sqrt(norm);
  if (norm < 1e-12) return;
  const float inv = static_cast<float>(1.0 / norm);
  for (int i = 0; i < dim; ++i) v[i] *= inv;
}

bool is_zero(const float* v, int dim) {
  for (int i = 0; i < dim; ++i)
    if (v[i] != 0.0f) return false;
  return true;
}

}  // namespace

std::uint64_t LayerIndex::hash_key(const Space& space, const Table& table, const float* v) const {
  const int dim = space.dim;
  const std::uint64_t reserved = static_cast<std::uint64_t>(2 * dim);
  std::uint64_t key = 0;
  if (is_zero(v, dim)) {
    for (int f = 0; f < space.n_funcs; ++f) key = key * (reserved + 1) + reserved;
    return key;
  }
  for (int f = 0; f < space.n_funcs; ++f) {
    const float* rot = table.rotations.data() + static_cast<std::size_t>(f) * dim * dim;
    int best_axis = 0;
    double best_abs = -1.0;
    bool best_neg = false;
    for (int o = 0; o < dim; ++o) {
      const float* row = rot + static_cast<std::size_t>(o) * dim;
      double acc = 0.0;
      for (int i = 0; i < dim; ++i) acc += static_cast<double>(row[i]) * v[i];
      const double mag = std::abs(acc);
      if (mag > best_abs) {
        best_abs = mag;
        best_axis = o;
        best_neg = acc < 0.0;
      }
    }
    const std::uint64_t value = static_cast<std::uint64_t>(2 * best_axis + (best_neg ? 1 : 0));
    key = key * (reserved + 1) + value;
  }
  return key;
}

LayerIndex::LayerIndex(const MlpModel& m, const BeamDataset& ds, const DknnConfig& cfg)
    : model_(m), cfg_(cfg) {
  if (cfg.k_neighbors < 1) throw std::invalid_argument("LayerIndex: k_neighbors must be >= 1");
  const auto rows = ds.rows_with(Split::train);
  if (rows.empty()) throw std::invalid_argument("LayerIndex: train split is empty");

  labels_.reserve(rows.size());
  for (std::size_t r : rows) labels_.push_back(ds.labels[r]);

  // Representation spaces: every hidden activation plus the logits.
  const std::size_t n_spaces = m.dims().size() - 1;
  spaces_.resize(n_spaces);
  for (std::size_t s = 0; s < n_spaces; ++s) {
    spaces_[s].dim = m.dims()[s + 1];
    spaces_[s].reps.resize(rows.size() * static_cast<std::size_t>(spaces_[s].dim));
  }

  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto fwd = m.forward_row(ds, rows[k]);
    for (std::size_t s = 0; s < n_spaces; ++s) {
      float* dst = spaces_[s].reps.data() + k * static_cast<std::size_t>(spaces_[s].dim);
      const auto& rep = fwd.layer_reps[s];
      for (int i = 0; i < spaces_[s].dim; ++i) dst[i] = static_cast<float>(rep[static_cast<std::size_t>(i)]);
      normalize(dst, spaces_[s].dim);
    }
  }

  if (!cfg.use_lsh) return;

  for (std::size_t s = 0; s < n_spaces; ++s) {
    auto& space = spaces_[s];
    space.n_funcs = std::max(1, cfg.lsh.n_hash_bits / bits_per_crosspolytope(space.dim));
    space.tables.resize(static_cast<std::size_t>(cfg.lsh.n_tables));
    for (int t = 0; t < cfg.lsh.n_tables; ++t) {
      auto& table = space.tables[static_cast<std::size_t>(t)];
      auto eng = rng::engine(rng::derive(cfg.lsh.seed, rng::Stream::lsh,
                                         (s << 16) ^ static_cast<std::uint64_t>(t)));
      std::normal_distribution<double> gauss(0.0, 1.0);
      table.rotations.resize(static_cast<std::size_t>(space.n_funcs) * space.dim * space.dim);
      for (auto& g : table.rotations) g = static_cast<float>(gauss(eng));

      std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> buckets;
      for (std::size_t k = 0; k < labels_.size(); ++k) {
        const float* v = space.reps.data() + k * static_cast<std::size_t>(space.dim);
        buckets[hash_key(space, table, v)].push_back(static_cast<std::uint32_t>(k));
      }
      table.bucket_keys.reserve(buckets.size());
      for (const auto& [key, _] : buckets) table.bucket_keys.push_back(key);
      std::sort(table.bucket_keys.begin(), table.bucket_keys.end());
      table.buckets.resize(table.bucket_keys.size());
      for (std::size_t b = 0; b < table.bucket_keys.size(); ++b)
        table.buckets[b] = std::move(buckets[table.bucket_keys[b]]);
    }
  }
}

std::vector<std::uint32_t> LayerIndex::top_k(const Space& space, const float* query,
                                             std::span<const std::uint32_t> candidates) const {
  const auto k = static_cast<std::size_t>(cfg_.k_neighbors);
  std::vector<std::pair<double, std::uint32_t>> scored;
  scored.reserve(candidates.size());
  for (std::uint32_t id : candidates) {
    const float* v = space.reps.data() + static_cast<std::size_t>(id) * space.dim;
    double dot = 0.0;
    for (int i = 0; i < space.dim; ++i) dot += static_cast<double>(v[i]) * query[i];
    scored.emplace_back(dot, id);
  }
  const std::size_t keep = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;
                    });
  std::vector<std::uint32_t> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.push_back(scored[i].second);
  return out;
}

std::vector<std::vector<std::uint32_t>> LayerIndex::neighbors(std::span<const double> x) const {
  const auto fwd = model_.forward(x);
  std::vector<std::vector<std::uint32_t>> out(spaces_.size());
  std::vector<std::uint32_t> all;
  for (std::size_t s = 0; s < spaces_.size(); ++s) {
    const auto& space = spaces_[s];
    std::vector<float> q(static_cast<std::size_t>(space.dim));
    for (int i = 0; i < space.dim; ++i)
      q[static_cast<std::size_t>(i)] = static_cast<float>(fwd.layer_reps[s][static_cast<std::size_t>(i)]);
    normalize(q.data(), space.dim);

    std::vector<std::uint32_t> candidates;
    if (cfg_.use_lsh) {
      std::vector<char> seen(labels_.size(), 0);
      for (const auto& table : space.tables) {
        const std::uint64_t key = hash_key(space, table, q.data());
        const auto it =
            std::lower_bound(table.bucket_keys.begin(), table.bucket_keys.end(), key);
        if (it == table.bucket_keys.end() || *it != key) continue;
        const auto& bucket = table.buckets[static_cast<std::size_t>(it - table.bucket_keys.begin())];
        for (std::uint32_t id : bucket) {
          if (!seen[id]) {
            seen[id] = 1;
            candidates.push_back(id);
          }
        }
      }
    }
    if (!cfg_.use_lsh || candidates.size() < static_cast<std::size_t>(cfg_.k_neighbors)) {
      // Exact fallback: the candidate union cannot cover k neighbors.
      if (all.empty()) {
        all.resize(labels_.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint32_t>(i);
      }
      out[s] = top_k(space, q.data(), all);
    } else {
      out[s] = top_k(space, q.data(), candidates);
    }
  }
  return out;
}

std::vector<std::vector<std::uint16_t>> LayerIndex::neighbor_labels(std::span<const double> x) const {
  const auto ids = neighbors(x);
  std::vector<std::vector<std::uint16_t>> omega(ids.size());
  for (std::size_t s = 0; s < ids.size(); ++s) {
    omega[s].reserve(ids[s].size());
    for (std::uint32_t id : ids[s]) omega[s].push_back(labels_[id]);
  }
  return omega;
}

LayerIndex build_index(const MlpModel& m, const BeamDataset& train, const DknnConfig& cfg) {
  return LayerIndex(m, train, cfg);
}

int nonconformity_from_labels(const std::vector<std::vector<std::uint16_t>>& omega, int j) {
  int count = 0;
  for (const auto& layer : omega)
    for (std::uint16_t label : layer)
      if (static_cast<int>(label) != j) ++count;
  return count;
}

int nonconformity(const LayerIndex& idx, std::span<const double> x, int j) {
  if (j < 0 || j >= idx.n_classes()) throw std::out_of_range("nonconformity: bad candidate label");
  return nonconformity_from_labels(idx.neighbor_labels(x), j);
}

CalibrationScores calibrate(const LayerIndex& idx, const BeamDataset& holdout_ds,
                            std::span<const std::size_t> holdout_rows) {
  if (holdout_rows.empty()) throw std::invalid_argument("calibrate: empty holdout set");
  CalibrationScores cal;
  cal.sorted_scores.reserve(holdout_rows.size());
  std::vector<double> x(holdout_ds.n_features);
  for (std::size_t r : holdout_rows) {
    const float* src = holdout_ds.row(r);
    for (std::size_t c = 0; c < x.size(); ++c) x[c] = src[c];
    const auto omega = idx.neighbor_labels(x);
    cal.sorted_scores.push_back(nonconformity_from_labels(omega, holdout_ds.labels[r]));
  }
  std::sort(cal.sorted_scores.begin(), cal.sorted_scores.end());
  return cal;
}

namespace {

std::vector<double> p_values_from_omega(const std::vector<std::vector<std::uint16_t>>& omega,
                                        const CalibrationScores& cal, int n_classes) {
  if (cal.size() == 0) throw std::invalid_argument("p_values: empty calibration set");
  // rho(x, j) = total neighbors - (neighbors labeled j).
  std::vector<int> label_count(static_cast<std::size_t>(n_classes), 0);
  int total = 0;
  for (const auto& layer : omega) {
    total += static_cast<int>(layer.size());
    for (std::uint16_t label : layer) ++label_count[label];
  }
  std::vector<double> p(static_cast<std::size_t>(n_classes));
  const double inv = 1.0 / static_cast<double>(cal.size());
  for (int j = 0; j < n_classes; ++j) {
    const int rho = total - label_count[static_cast<std::size_t>(j)];
    const auto it = std::lower_bound(cal.sorted_scores.begin(), cal.sorted_scores.end(), rho);
    p[static_cast<std::size_t>(j)] =
        static_cast<double>(cal.sorted_scores.end() - it) * inv;
  }
  return p;
}

}  // namespace

std::vector<double> p_values(const LayerIndex& idx, const CalibrationScores& cal,
                             std::span<const double> x) {
  return p_values_from_omega(idx.neighbor_labels(x), cal, idx.n_classes());
}

double p_value(const CalibrationScores& cal, int rho) {
  if (cal.size() == 0) throw std::invalid_argument("p_value: empty calibration set");
  const auto it = std::lower_bound(cal.sorted_scores.begin(), cal.sorted_scores.end(), rho);
  return static_cast<double>(cal.sorted_scores.end() - it) / static_cast<double>(cal.size());
}

CredibilityRecord classify(const LayerIndex& idx, const CalibrationScores& cal,
                           std::span<const double> x) {
  CredibilityRecord rec;
  rec.neighbor_labels = idx.neighbor_labels(x);
  rec.p_values = p_values_from_omega(rec.neighbor_labels, cal, idx.n_classes());

  rec.prediction = 0;
  for (std::size_t j = 1; j < rec.p_values.size(); ++j)
    if (rec.p_values[j] > rec.p_values[static_cast<std::size_t>(rec.prediction)])
      rec.prediction = static_cast<int>(j);
  rec.credibility = rec.p_values[static_cast<std::size_t>(rec.prediction)];

  double second = 0.0;
  bool has_second = false;
  for (std::size_t j = 0; j < rec.p_values.size(); ++j) {
    if (static_cast<int>(j) == rec.prediction) continue;
    if (!has_second || rec.p_values[j] > second) {
      second = rec.p_values[j];
      has_second = true;
    }
  }
  rec.confidence = has_second ? 1.0 - second : 1.0;
  return rec;
}

std::vector<ReliabilityBin> reliability_diagram(std::span<const ScoredPrediction> records,
                                                int n_bins) {
  if (n_bins < 1) throw std::invalid_argument("reliability_diagram: n_bins must be >= 1");
  std::vector<ReliabilityBin> bins(static_cast<std::size_t>(n_bins));
  std::vector<std::size_t> correct(static_cast<std::size_t>(n_bins), 0);
  for (int s = 0; s < n_bins; ++s) {
    bins[static_cast<std::size_t>(s)].lower = static_cast<double>(s) / n_bins;
    bins[static_cast<std::size_t>(s)].upper = static_cast<double>(s + 1) / n_bins;
  }
  for (const auto& rec : records) {
    if (rec.score < 0.0 || rec.score > 1.0)
      throw std::invalid_argument("reliability_diagram: score outside [0,1]");
    int b = static_cast<int>(std::ceil(rec.score * n_bins)) - 1;
    b = std::clamp(b, 0, n_bins - 1);
    ++bins[static_cast<std::size_t>(b)].count;
    if (rec.correct) ++correct[static_cast<std::size_t>(b)];
  }
  for (int s = 0; s < n_bins; ++s) {
    auto& bin = bins[static_cast<std::size_t>(s)];
    bin.accuracy = bin.count == 0
                       ? std::numeric_limits<double>::quiet_NaN()
                       : static_cast<double>(correct[static_cast<std::size_t>(s)]) /
                             static_cast<double>(bin.count);
  }
  return bins;
}

RobustnessSummary robustness_eval(const LayerIndex& idx, const CalibrationScores& cal,
                                  const std::vector<std::vector<double>>& clean,
                                  const std::vector<std::vector<double>>& adversarial,
                                  std::span<const double> thresholds) {
  if (clean.empty() || adversarial.empty())
    throw std::invalid_argument("robustness_eval: both row sets must be non-empty");
  auto credibilities = [&](const std::vector<std::vector<double>>& rows) {
    std::vector<double> cred;
    cred.reserve(rows.size());
    for (const auto& x : rows) cred.push_back(classify(idx, cal, x).credibility);
    return cred;
  };
  const auto cred_clean = credibilities(clean);
  const auto cred_adv = credibilities(adversarial);

  RobustnessSummary out;
  out.thresholds.assign(thresholds.begin(), thresholds.end());
  auto frac_below = [](const std::vector<double>& cred, double t) {
    std::size_t n = 0;
    for (double c : cred)
      if (c < t) ++n;
    return static_cast<double>(n) / static_cast<double>(cred.size());
  };
  for (double t : thresholds) {
    out.clean_below.push_back(frac_below(cred_clean, t));
    out.adversarial_below.push_back(frac_below(cred_adv, t));
  }
  auto mean = [](const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
  };
  out.mean_clean_credibility = mean(cred_clean);
  out.mean_adversarial_credibility = mean(cred_adv);
  return out;
}

void export_records_csv(std::span<const CredibilityRecord> records,
                        std::span<const int> true_labels, const std::string& path) {
  if (records.size() != true_labels.size())
    throw std::invalid_argument("export_records_csv: size mismatch");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("export_records_csv: cannot open " + path);
  os << "row,prediction,true_label,confidence,credibility\n";
  os.precision(17);
  for (std::size_t r = 0; r < records.size(); ++r) {
    os << r << "," << records[r].prediction << "," << true_labels[r] << ","
       << records[r].confidence << "," << records[r].credibility << "\n";
  }
}

void export_reliability_csv(std::span<const ReliabilityBin> bins, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("export_reliability_csv: cannot open " + path);
  os << "bin_lower,count,accuracy\n";
  os.precision(17);
  for (const auto& bin : bins) {
    os << bin.lower << "," << bin.count << ",";
    if (std::isnan(bin.accuracy))
      os << "nan";
    else
      os << bin.accuracy;
    os << "\n";
  }
}

}  // namespace beamlab
