#include "beamlab/shap.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "beamlab/parallel.hpp"
#include "beamlab/rng.hpp"
#include "json.hpp"

namespace beamlab {

namespace {

std::vector<double> model_output(const MlpModel& m, std::span<const double> x, bool logits) {
  auto fwd = m.forward(x);
  return logits ? std::move(fwd.logits) : std::move(fwd.probs);
}

// v(S) for a bitmask subset; refs supply the values of absent features.
std::vector<double> masked_value(const MlpModel& m, std::span<const double> x, std::uint64_t mask,
                                 const std::vector<std::vector<double>>& refs, bool logits,
                                 std::vector<double>& scratch) {
  const std::size_t n_features = x.size();
  const auto q = static_cast<std::size_t>(m.output_dim());
  std::vector<double> acc(q, 0.0);
  for (const auto& ref : refs) {
    for (std::size_t i = 0; i < n_features; ++i)
      scratch[i] = (mask >> i) & 1u ? x[i] : ref[i];
    const auto out = model_output(m, scratch, logits);
    for (std::size_t c = 0; c < q; ++c) acc[c] += out[c];
  }
  for (double& v : acc) v /= static_cast<double>(refs.size());
  return acc;
}

void check_refs(const std::vector<std::vector<double>>& refs, std::size_t n_features) {
  if (refs.empty()) throw std::invalid_argument("shap: need at least one background reference");
  for (const auto& r : refs)
    if (r.size() != n_features) throw std::invalid_argument("shap: reference dimension mismatch");
}

}  // namespace

std::vector<std::vector<double>> background_refs(const BeamDataset& ds,
                                                 std::span<const std::size_t> rows, int n_refs,
                                                 std::uint64_t seed) {
  if (n_refs < 1) throw std::invalid_argument("background_refs: n_refs must be >= 1");
  if (rows.empty()) throw std::invalid_argument("background_refs: empty row set");
  std::vector<std::size_t> pool(rows.begin(), rows.end());
  auto eng = rng::engine(seed);
  std::shuffle(pool.begin(), pool.end(), eng);
  if (pool.size() > static_cast<std::size_t>(n_refs)) pool.resize(static_cast<std::size_t>(n_refs));
  std::vector<std::vector<double>> refs;
  refs.reserve(pool.size());
  for (std::size_t r : pool) {
    std::vector<double> v(ds.n_features);
    const float* src = ds.row(r);
    for (std::size_t c = 0; c < v.size(); ++c) v[c] = src[c];
    refs.push_back(std::move(v));
  }
  return refs;
}

std::vector<double> value_function(const MlpModel& m, std::span<const double> x,
                                   std::span<const int> subset,
                                   const std::vector<std::vector<double>>& refs,
                                   bool attribute_logits) {
  check_refs(refs, x.size());
  if (x.size() > 64) throw std::invalid_argument("value_function: more than 64 features");
  std::uint64_t mask = 0;
  for (int i : subset) {
    if (i < 0 || static_cast<std::size_t>(i) >= x.size())
      throw std::out_of_range("value_function: feature index out of range");
    mask |= std::uint64_t{1} << i;
  }
  std::vector<double> scratch(x.size());
  return masked_value(m, x, mask, refs, attribute_logits, scratch);
}

std::vector<double> shapley_exact(const MlpModel& m, std::span<const double> x,
                                  const std::vector<std::vector<double>>& refs,
                                  const ShapConfig& cfg) {
  const std::size_t n = x.size();
  check_refs(refs, n);
  if (n > kExactShapMaxFeatures)
    throw std::invalid_argument(
        "shapley_exact: feature count exceeds the enumeration limit, use shapley_sampled");
  const auto q = static_cast<std::size_t>(m.output_dim());
  const std::size_t n_masks = std::size_t{1} << n;

  // v(S) for every subset, then one combination pass.
  std::vector<double> values(n_masks * q);
  std::vector<double> scratch(n);
  for (std::size_t mask = 0; mask < n_masks; ++mask) {
    const auto v = masked_value(m, x, mask, refs, cfg.attribute_logits, scratch);
    std::copy(v.begin(), v.end(), values.begin() + static_cast<std::ptrdiff_t>(mask * q));
  }

  // weight[s] = s! (n-s-1)! / n!
  std::vector<double> weight(n);
  for (std::size_t s = 0; s < n; ++s) {
    double w = 1.0;
    for (std::size_t t = 1; t <= s; ++t) w *= static_cast<double>(t);
    for (std::size_t t = 1; t <= n - s - 1; ++t) w *= static_cast<double>(t);
    for (std::size_t t = 1; t <= n; ++t) w /= static_cast<double>(t);
    weight[s] = w;
  }

  std::vector<double> psi(n * q, 0.0);
  for (std::size_t mask = 0; mask < n_masks; ++mask) {
    const auto s = static_cast<std::size_t>(std::popcount(mask));
    const double* v_base = values.data() + mask * q;
    for (std::size_t i = 0; i < n; ++i) {
      if ((mask >> i) & 1u) continue;
      const double* v_with = values.data() + (mask | (std::uint64_t{1} << i)) * q;
      double* out = psi.data() + i * q;
      const double w = weight[s];
      for (std::size_t c = 0; c < q; ++c) out[c] += w * (v_with[c] - v_base[c]);
    }
  }
  return psi;
}

std::vector<double> shapley_sampled(const MlpModel& m, std::span<const double> x,
                                    const std::vector<std::vector<double>>& refs,
                                    const ShapConfig& cfg, std::uint64_t sample_seed) {
  const std::size_t n = x.size();
  check_refs(refs, n);
  if (n > 64) throw std::invalid_argument("shapley_sampled: more than 64 features");
  if (cfg.n_permutations < 1)
    throw std::invalid_argument("shapley_sampled: n_permutations must be >= 1");
  const auto q = static_cast<std::size_t>(m.output_dim());

  std::vector<double> scratch(n);
  const std::vector<double> v_empty =
      masked_value(m, x, 0, refs, cfg.attribute_logits, scratch);

  std::vector<double> psi(n * q, 0.0);
  std::vector<std::size_t> order(n);
  for (int p = 0; p < cfg.n_permutations; ++p) {
    auto eng = rng::engine(rng::derive(sample_seed, {static_cast<std::uint64_t>(p)}));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), eng);
    std::uint64_t mask = 0;
    std::vector<double> v_prev = v_empty;
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t i = order[t];
      mask |= std::uint64_t{1} << i;
      const auto v_cur = masked_value(m, x, mask, refs, cfg.attribute_logits, scratch);
      double* out = psi.data() + i * q;
      for (std::size_t c = 0; c < q; ++c) out[c] += v_cur[c] - v_prev[c];
      v_prev = v_cur;
    }
  }
  const double inv = 1.0 / static_cast<double>(cfg.n_permutations);
  for (double& v : psi) v *= inv;
  return psi;
}

ShapReport attribute_rows(const MlpModel& m, const BeamDataset& ds,
                          std::span<const std::size_t> rows,
                          const std::vector<std::vector<double>>& refs, const ShapConfig& cfg,
                          unsigned n_threads) {
  if (rows.empty()) throw std::invalid_argument("attribute_rows: no rows to explain");
  const std::size_t n_features = ds.n_features;
  const auto q = static_cast<std::size_t>(m.output_dim());

  bool exact = cfg.estimator == ShapEstimator::exact;
  if (cfg.estimator == ShapEstimator::automatic)
    exact = n_features <= static_cast<std::size_t>(kExactShapMaxFeatures);

  ShapReport report;
  report.n_samples = rows.size();
  report.n_features = n_features;
  report.n_classes = q;
  report.psi.assign(rows.size() * n_features * q, 0.0);

  parallel_for(rows.size(), n_threads, [&](std::size_t d) {
    std::vector<double> x(n_features);
    const float* src = ds.row(rows[d]);
    for (std::size_t c = 0; c < n_features; ++c) x[c] = src[c];
    std::vector<double> psi;
    if (exact) {
      psi = shapley_exact(m, x, refs, cfg);
    } else {
      psi = shapley_sampled(m, x, refs, cfg, rng::derive(cfg.seed, rng::Stream::shap, d));
    }
    std::copy(psi.begin(), psi.end(),
              report.psi.begin() + static_cast<std::ptrdiff_t>(d * n_features * q));
  });

  aggregate(report);
  return report;
}

std::vector<double> mean_abs_attribution(const ShapReport& report) {
  std::vector<double> bar(report.n_features, 0.0);
  for (std::size_t d = 0; d < report.n_samples; ++d)
    for (std::size_t i = 0; i < report.n_features; ++i)
      for (std::size_t c = 0; c < report.n_classes; ++c) bar[i] += std::abs(report.at(d, i, c));
  const double denom = static_cast<double>(report.n_samples * report.n_classes);
  for (double& v : bar) v /= denom;
  return bar;
}

void aggregate(ShapReport& report) {
  if (report.psi.empty()) throw std::invalid_argument("aggregate: empty attribution tensor");
  report.psi_bar = mean_abs_attribution(report);
  report.ranking.resize(report.n_features);
  std::iota(report.ranking.begin(), report.ranking.end(), 0);
  std::stable_sort(report.ranking.begin(), report.ranking.end(), [&](int a, int b) {
    return report.psi_bar[static_cast<std::size_t>(a)] > report.psi_bar[static_cast<std::size_t>(b)];
  });
}

std::vector<int> select_features(std::span<const double> psi_bar, double delta) {
  if (!(delta > 0.0) || delta > 1.0)
    throw std::invalid_argument("select_features: delta must be in (0,1]");
  if (psi_bar.empty()) throw std::invalid_argument("select_features: empty scores");
  std::vector<int> ranking(psi_bar.size());
  std::iota(ranking.begin(), ranking.end(), 0);
  std::stable_sort(ranking.begin(), ranking.end(), [&](int a, int b) {
    return psi_bar[static_cast<std::size_t>(a)] > psi_bar[static_cast<std::size_t>(b)];
  });
  const double total = std::accumulate(psi_bar.begin(), psi_bar.end(), 0.0);
  std::vector<int> selected;
  double cum = 0.0;
  for (int i : ranking) {
    selected.push_back(i);
    cum += psi_bar[static_cast<std::size_t>(i)];
    if (cum >= delta * total) break;
  }
  return selected;
}

MlpModel retrain_reduced(const BeamDataset& ds, const std::vector<int>& selected,
                         const TrainConfig& tc, std::uint64_t init_seed, TrainLog* log) {
  if (selected.empty()) throw std::invalid_argument("retrain_reduced: empty selection");
  std::vector<int> columns(selected);
  std::sort(columns.begin(), columns.end());
  const BeamDataset sliced = slice_columns(ds, columns);
  MlpModel init(default_dims(static_cast<int>(columns.size()), static_cast<int>(ds.n_classes)),
                init_seed);
  return train(init, sliced, tc, log);
}

void save_shap_report(const ShapReport& report, const std::string& json_path) {
  nlohmann::json j;
  j["n_samples"] = report.n_samples;
  j["n_features"] = report.n_features;
  j["n_classes"] = report.n_classes;
  j["psi_bar"] = report.psi_bar;
  j["ranking"] = report.ranking;
  j["selected"] = report.selected;
  j["delta"] = report.delta;
  std::ofstream os(json_path);
  if (!os) throw std::runtime_error("save_shap_report: cannot open " + json_path);
  os << j.dump(2) << "\n";
}

ShapReport load_shap_report(const std::string& json_path) {
  std::ifstream is(json_path);
  if (!is) throw std::runtime_error("load_shap_report: cannot open " + json_path);
  nlohmann::json j = nlohmann::json::parse(is);
  ShapReport report;
  report.n_samples = j.at("n_samples").get<std::size_t>();
  report.n_features = j.at("n_features").get<std::size_t>();
  report.n_classes = j.at("n_classes").get<std::size_t>();
  report.psi_bar = j.at("psi_bar").get<std::vector<double>>();
  report.ranking = j.at("ranking").get<std::vector<int>>();
  report.selected = j.at("selected").get<std::vector<int>>();
  report.delta = j.at("delta").get<double>();
  return report;
}

void export_importance_csv(const ShapReport& report, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("export_importance_csv: cannot open " + path);
  os << "rank,feature,mean_abs_shap,selected\n";
  os.precision(17);
  for (std::size_t r = 0; r < report.ranking.size(); ++r) {
    const int f = report.ranking[r];
    const bool sel =
        std::find(report.selected.begin(), report.selected.end(), f) != report.selected.end();
    os << r << "," << f << "," << report.psi_bar[static_cast<std::size_t>(f)] << "," << (sel ? 1 : 0)
       << "\n";
  }
}

void save_psi_tensor(const ShapReport& report, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_psi_tensor: cannot open " + path);
  const char magic[4] = {'B', 'L', 'S', 'P'};
  os.write(magic, 4);
  const std::uint16_t version = 1;
  os.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(report.n_samples),
                                 static_cast<std::uint32_t>(report.n_features),
                                 static_cast<std::uint32_t>(report.n_classes)};
  os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  os.write(reinterpret_cast<const char*>(report.psi.data()),
           static_cast<std::streamsize>(report.psi.size() * sizeof(double)));
}

}  // namespace beamlab
