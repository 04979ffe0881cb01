#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "beamlab/shap.hpp"
#include "doctest.h"

using namespace beamlab;

namespace {

// Affine model (no hidden layers): logits = W x + b.
MlpModel linear_model(const std::vector<std::vector<double>>& w, const std::vector<double>& b) {
  const int out = static_cast<int>(w.size());
  const int in = static_cast<int>(w.front().size());
  MlpModel m({in, out}, 0);
  for (int o = 0; o < out; ++o)
    for (int i = 0; i < in; ++i)
      m.weight(0)[static_cast<std::size_t>(o * in + i)] = w[static_cast<std::size_t>(o)][static_cast<std::size_t>(i)];
  m.bias(0) = b;
  return m;
}

std::vector<std::vector<double>> random_refs(int n, int dim, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> refs(static_cast<std::size_t>(n),
                                        std::vector<double>(static_cast<std::size_t>(dim)));
  for (auto& r : refs)
    for (auto& v : r) v = g(eng);
  return refs;
}

std::vector<double> random_x(int dim, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(static_cast<std::size_t>(dim));
  for (auto& v : x) v = g(eng);
  return x;
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace

TEST_SUITE("shap") {

TEST_CASE("value function endpoints") {
  MlpModel m({4, 8, 3}, 5);
  const auto x = random_x(4, 1);
  const auto refs = random_refs(6, 4, 2);

  SUBCASE("full subset reproduces the model output") {
    const auto v = value_function(m, x, std::vector<int>{0, 1, 2, 3}, refs);
    const auto direct = m.forward(x).logits;
    for (std::size_t q = 0; q < v.size(); ++q)
      CHECK(v[q] == doctest::Approx(direct[q]).epsilon(1e-12));
  }
  SUBCASE("empty subset is the mean reference output") {
    const auto v = value_function(m, x, std::vector<int>{}, refs);
    std::vector<double> expect(3, 0.0);
    for (const auto& r : refs) {
      const auto out = m.forward(r).logits;
      for (std::size_t q = 0; q < 3; ++q) expect[q] += out[q];
    }
    for (auto& e : expect) e /= static_cast<double>(refs.size());
    for (std::size_t q = 0; q < 3; ++q) CHECK(v[q] == doctest::Approx(expect[q]).epsilon(1e-12));
  }
  SUBCASE("singleton subset on a linear model adds one linear term") {
    const auto lin = linear_model({{1.5, -2.0, 0.5, 3.0}}, {0.25});
    const auto base = value_function(lin, x, std::vector<int>{}, refs);
    for (int i = 0; i < 4; ++i) {
      double mean_ref = 0.0;
      for (const auto& r : refs) mean_ref += r[static_cast<std::size_t>(i)];
      mean_ref /= static_cast<double>(refs.size());
      const double coeff = lin.weight(0)[static_cast<std::size_t>(i)];
      const auto v = value_function(lin, x, std::vector<int>{i}, refs);
      CHECK(v[0] == doctest::Approx(base[0] + coeff * (x[static_cast<std::size_t>(i)] - mean_ref))
                        .epsilon(1e-12));
    }
  }
}

TEST_CASE("constant model gets zero attribution everywhere") {
  MlpModel m({5, 4, 3}, 7);
  for (auto& w : m.weight(0)) w = 0.0;
  for (auto& w : m.weight(1)) w = 0.0;
  m.bias(1) = {1.0, -0.5, 2.0};
  const auto psi = shapley_exact(m, random_x(5, 3), random_refs(4, 5, 4), ShapConfig{});
  for (double v : psi) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("linear model recovers the closed-form Shapley values") {
  const std::vector<std::vector<double>> w = {{2.0, -1.0, 0.5}, {0.0, 3.0, -2.0}};
  const auto m = linear_model(w, {0.1, -0.2});
  const auto x = random_x(3, 9);
  const auto refs = random_refs(10, 3, 8);
  const auto psi = shapley_exact(m, x, refs, ShapConfig{});
  for (int i = 0; i < 3; ++i) {
    double mean_ref = 0.0;
    for (const auto& r : refs) mean_ref += r[static_cast<std::size_t>(i)];
    mean_ref /= static_cast<double>(refs.size());
    for (int q = 0; q < 2; ++q) {
      const double expect =
          w[static_cast<std::size_t>(q)][static_cast<std::size_t>(i)] * (x[static_cast<std::size_t>(i)] - mean_ref);
      CHECK(psi[static_cast<std::size_t>(i * 2 + q)] == doctest::Approx(expect).epsilon(1e-9));
    }
  }
}

TEST_CASE("efficiency: attributions sum to full minus base value") {
  MlpModel m({6, 10, 5}, 11);
  const auto x = random_x(6, 21);
  const auto refs = random_refs(8, 6, 22);
  const auto psi = shapley_exact(m, x, refs, ShapConfig{});
  const auto v_full = value_function(m, x, std::vector<int>{0, 1, 2, 3, 4, 5}, refs);
  const auto v_base = value_function(m, x, std::vector<int>{}, refs);
  for (int q = 0; q < 5; ++q) {
    double sum = 0.0;
    for (int i = 0; i < 6; ++i) sum += psi[static_cast<std::size_t>(i * 5 + q)];
    CHECK(std::abs(sum - (v_full[static_cast<std::size_t>(q)] - v_base[static_cast<std::size_t>(q)])) < 1e-8);
  }
}

TEST_CASE("exact estimator refuses oversized feature sets") {
  MlpModel m({15, 4, 2}, 1);
  const auto x = random_x(15, 2);
  const auto refs = random_refs(2, 15, 3);
  CHECK_THROWS_WITH_AS(shapley_exact(m, x, refs, ShapConfig{}),
                       doctest::Contains("shapley_sampled"), std::invalid_argument);
}

TEST_CASE("permutation estimator tracks the exact values") {
  MlpModel m({10, 12, 6}, 31);
  const auto x = random_x(10, 32);
  const auto refs = random_refs(16, 10, 33);
  ShapConfig cfg;
  const auto exact = shapley_exact(m, x, refs, cfg);
  cfg.n_permutations = 2048;
  const auto sampled = shapley_sampled(m, x, refs, cfg, 77);
  const double scale = max_abs(exact);
  double err = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) err = std::max(err, std::abs(exact[i] - sampled[i]));
  CHECK(err < 0.05 * scale);
}

TEST_CASE("single permutation with a fixed seed is reproducible") {
  MlpModel m({6, 8, 4}, 3);
  const auto x = random_x(6, 4);
  const auto refs = random_refs(4, 6, 5);
  ShapConfig cfg;
  cfg.n_permutations = 1;
  const auto a = shapley_sampled(m, x, refs, cfg, 123);
  const auto b = shapley_sampled(m, x, refs, cfg, 123);
  CHECK(a == b);
  const auto c = shapley_sampled(m, x, refs, cfg, 124);
  CHECK(a != c);
}

TEST_CASE("sampling error shrinks as permutations grow") {
  MlpModel m({8, 10, 4}, 41);
  const auto x = random_x(8, 42);
  const auto refs = random_refs(8, 8, 43);
  ShapConfig cfg;
  const auto exact = shapley_exact(m, x, refs, cfg);

  auto worst = [&](int n_perm) {
    ShapConfig c = cfg;
    c.n_permutations = n_perm;
    const auto est = shapley_sampled(m, x, refs, c, 99);
    double err = 0.0;
    for (std::size_t i = 0; i < exact.size(); ++i) err = std::max(err, std::abs(exact[i] - est[i]));
    return err;
  };
  const double e128 = worst(128);
  const double e512 = worst(512);
  const double e2048 = worst(2048);
  // Root-n decay with slack for one frozen draw.
  CHECK(e2048 < e128);
  CHECK(e512 < 2.0 * e128);
  CHECK(e2048 < 2.0 * e512);

  // Efficiency telescopes permutation by permutation, so it holds for the
  // sampled estimator too.
  const auto v_full = value_function(m, x, std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}, refs);
  const auto v_base = value_function(m, x, std::vector<int>{}, refs);
  ShapConfig c = cfg;
  c.n_permutations = 128;
  const auto est = shapley_sampled(m, x, refs, c, 7);
  for (int q = 0; q < 4; ++q) {
    double sum = 0.0;
    for (int i = 0; i < 8; ++i) sum += est[static_cast<std::size_t>(i * 4 + q)];
    CHECK(std::abs(sum - (v_full[static_cast<std::size_t>(q)] - v_base[static_cast<std::size_t>(q)])) < 1e-8);
  }
}

TEST_CASE("aggregation matches a naive triple loop") {
  ShapReport report;
  report.n_samples = 3;
  report.n_features = 4;
  report.n_classes = 2;
  std::mt19937_64 eng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  report.psi.resize(3 * 4 * 2);
  for (auto& v : report.psi) v = g(eng);
  aggregate(report);

  for (std::size_t i = 0; i < 4; ++i) {
    double acc = 0.0;
    for (std::size_t d = 0; d < 3; ++d)
      for (std::size_t q = 0; q < 2; ++q) acc += std::abs(report.at(d, i, q));
    acc /= 3.0 * 2.0;
    CHECK(report.psi_bar[i] == doctest::Approx(acc).epsilon(1e-12));
  }
  auto sorted = report.ranking;
  CHECK(std::is_sorted(sorted.begin(), sorted.end(), [&](int a, int b) {
    return report.psi_bar[static_cast<std::size_t>(a)] > report.psi_bar[static_cast<std::size_t>(b)];
  }));
}

TEST_CASE("aggregation of all-zero attributions keeps index order") {
  ShapReport report;
  report.n_samples = 2;
  report.n_features = 5;
  report.n_classes = 3;
  report.psi.assign(2 * 5 * 3, 0.0);
  aggregate(report);
  CHECK(report.ranking == std::vector<int>{0, 1, 2, 3, 4});
}

TEST_CASE("single sample and class aggregate to the absolute value") {
  ShapReport report;
  report.n_samples = 1;
  report.n_features = 3;
  report.n_classes = 1;
  report.psi = {-2.0, 0.5, 1.0};
  aggregate(report);
  CHECK(report.psi_bar == std::vector<double>{2.0, 0.5, 1.0});
  CHECK(report.ranking == std::vector<int>{0, 2, 1});
}

TEST_CASE("threshold selection picks the smallest covering prefix") {
  const std::vector<double> psi_bar{5.0, 3.0, 1.0, 1.0};
  SUBCASE("0.8 needs the top two (8 of 10)") {
    CHECK(select_features(psi_bar, 0.8) == std::vector<int>{0, 1});
  }
  SUBCASE("a tiny threshold keeps only the top feature") {
    CHECK(select_features(psi_bar, 1e-9) == std::vector<int>{0});
  }
  SUBCASE("threshold one keeps everything with mass") {
    CHECK(select_features(psi_bar, 1.0) == std::vector<int>{0, 1, 2, 3});
  }
  SUBCASE("selection grows monotonically with the threshold") {
    std::vector<int> prev;
    for (double delta : {0.1, 0.3, 0.5, 0.71, 0.82, 0.92, 0.96, 0.99, 1.0}) {
      const auto cur = select_features(psi_bar, delta);
      CHECK(cur.size() >= prev.size());
      for (std::size_t i = 0; i < prev.size(); ++i) CHECK(cur[i] == prev[i]);
      prev = cur;
    }
  }
  CHECK_THROWS_AS(select_features(psi_bar, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(select_features(psi_bar, 1.5), std::invalid_argument);
}

TEST_CASE("interchangeable features receive equal attribution") {
  // Logits depend on x0 + x1 symmetrically.
  MlpModel m({4, 6, 3}, 51);
  const int in = 4;
  for (int o = 0; o < 6; ++o) {
    auto& w = m.weight(0);
    w[static_cast<std::size_t>(o * in + 1)] = w[static_cast<std::size_t>(o * in + 0)];
  }
  std::vector<double> x{0.8, 0.8, -0.3, 1.2};
  auto refs = random_refs(6, 4, 52);
  for (auto& r : refs) r[1] = r[0];
  const auto psi = shapley_exact(m, x, refs, ShapConfig{});
  for (int q = 0; q < 3; ++q)
    CHECK(std::abs(psi[static_cast<std::size_t>(0 * 3 + q)] - psi[static_cast<std::size_t>(1 * 3 + q)]) < 1e-8);
}

TEST_CASE("ignored features receive zero attribution") {
  MlpModel m({4, 6, 3}, 61);
  const int in = 4;
  for (int o = 0; o < 6; ++o) m.weight(0)[static_cast<std::size_t>(o * in + 2)] = 0.0;
  const auto psi =
      shapley_exact(m, random_x(4, 62), random_refs(5, 4, 63), ShapConfig{});
  for (int q = 0; q < 3; ++q) CHECK(std::abs(psi[static_cast<std::size_t>(2 * 3 + q)]) < 1e-10);
}

TEST_CASE("attribute_rows is independent of the thread count") {
  ArrayConfig cfg;
  cfg.n_bs = 8;
  const Codebook sensing = dft_codebook(cfg, 1);
  const Codebook candidates = dft_codebook(cfg, 2);
  const Scene scene = generate_scene(20, cfg, 3, 0.7);
  MeasurementConfig mc;
  const BeamDataset ds = build_dataset(scene, cfg, sensing, candidates, mc, 200, Origin::twin, 4);
  MlpModel m(default_dims(8, 16), 9);

  const auto rows = ds.rows_with(Split::test);
  const auto refs = background_refs(ds, ds.rows_with(Split::train), 8, 11);
  ShapConfig sc;
  sc.seed = 13;
  const ShapReport one = attribute_rows(m, ds, rows, refs, sc, 1);
  const ShapReport four = attribute_rows(m, ds, rows, refs, sc, 4);
  CHECK(one.psi == four.psi);
  CHECK(one.ranking == four.ranking);
}

TEST_CASE("reduced retraining reproduces the published parameter count") {
  ArrayConfig cfg;
  const Codebook sensing = dft_codebook(cfg, 1);
  const Codebook candidates = dft_codebook(cfg, 4);
  const Scene scene = generate_scene(20, cfg, 3, 0.7);
  MeasurementConfig mc;
  const BeamDataset ds = build_dataset(scene, cfg, sensing, candidates, mc, 150, Origin::twin, 4);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 64;
  tc.seed = 5;
  const std::vector<int> selected{31, 2, 17, 9, 4, 21, 11, 28, 0, 13, 26, 7};
  const MlpModel reduced = retrain_reduced(ds, selected, tc, 8);
  CHECK(reduced.input_dim() == 12);
  CHECK(reduced.parameter_count() == 29824);
  CHECK_THROWS_AS(retrain_reduced(ds, {}, tc, 8), std::invalid_argument);
}

}  // TEST_SUITE
