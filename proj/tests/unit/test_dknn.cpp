#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "beamlab/dknn.hpp"
#include "doctest.h"

using namespace beamlab;

namespace {

// Clustered classification data: class c lives near a random unit anchor.
// A short training run gives the layers the clustered geometry the index
// relies on in the real pipeline.
struct Fixture {
  BeamDataset ds;
  MlpModel model;

  Fixture(int n_rows, int n_features, int n_classes, std::uint64_t seed, int epochs = 25) {
    std::mt19937_64 eng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<std::vector<double>> anchors(static_cast<std::size_t>(n_classes),
                                             std::vector<double>(static_cast<std::size_t>(n_features)));
    for (auto& a : anchors)
      for (auto& v : a) v = 2.0 * g(eng);

    ds.n_features = static_cast<std::uint32_t>(n_features);
    ds.n_classes = static_cast<std::uint32_t>(n_classes);
    std::uniform_int_distribution<int> pick(0, n_classes - 1);
    for (int r = 0; r < n_rows; ++r) {
      const int c = pick(eng);
      for (int f = 0; f < n_features; ++f)
        ds.features.push_back(static_cast<float>(anchors[static_cast<std::size_t>(c)][static_cast<std::size_t>(f)] +
                                                 0.3 * g(eng)));
      ds.labels.push_back(static_cast<std::uint16_t>(c));
      const int slot = r % 10;
      Split s = slot < 7 ? Split::train : (slot < 8 ? Split::holdout : Split::test);
      ds.split.push_back(static_cast<std::uint8_t>(s));
      ds.origin.push_back(static_cast<std::uint8_t>(Origin::real));
    }
    ds.col_mean.assign(ds.n_features, 0.0);
    ds.col_std.assign(ds.n_features, 1.0);
    ds.feature_beams.resize(ds.n_features);
    std::iota(ds.feature_beams.begin(), ds.feature_beams.end(), std::uint16_t{0});

    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 64;
    tc.seed = seed + 1;
    model = train(MlpModel({n_features, 16, 16, 24, n_classes}, seed + 2), ds, tc);
  }

  std::vector<double> row(std::size_t r) const {
    std::vector<double> x(ds.n_features);
    for (std::size_t c = 0; c < x.size(); ++c) x[c] = ds.row(r)[c];
    return x;
  }
};

const Fixture& fixture() {
  static Fixture f(1200, 12, 8, 17);
  return f;
}

}  // namespace

TEST_SUITE("dknn") {

TEST_CASE("every training row is its own nearest neighbor at every layer") {
  const auto& f = fixture();
  DknnConfig cfg;
  const LayerIndex index(f.model, f.ds, cfg);
  const auto train_rows = f.ds.rows_with(Split::train);
  CHECK(index.n_points() == train_rows.size());
  CHECK(index.n_layers() == 4);  // three hidden activations plus logits

  for (std::size_t k = 0; k < train_rows.size(); k += 37) {
    const auto ids = index.neighbors(f.row(train_rows[k]));
    for (const auto& layer_ids : ids) {
      REQUIRE(layer_ids.size() == static_cast<std::size_t>(cfg.k_neighbors));
      CHECK(std::find(layer_ids.begin(), layer_ids.end(), static_cast<std::uint32_t>(k)) !=
            layer_ids.end());
    }
  }
}

TEST_CASE("LSH retrieval recalls the exact cosine neighbors") {
  const auto& f = fixture();
  DknnConfig lsh_cfg;
  lsh_cfg.lsh.seed = 3;
  DknnConfig exact_cfg = lsh_cfg;
  exact_cfg.use_lsh = false;
  const LayerIndex lsh_index(f.model, f.ds, lsh_cfg);
  const LayerIndex exact_index(f.model, f.ds, exact_cfg);

  const auto test_rows = f.ds.rows_with(Split::test);
  double recall = 0.0;
  std::size_t n_layers_counted = 0;
  for (std::size_t i = 0; i < std::min<std::size_t>(test_rows.size(), 500); ++i) {
    const auto x = f.row(test_rows[i]);
    const auto approx = lsh_index.neighbors(x);
    const auto exact = exact_index.neighbors(x);
    for (std::size_t layer = 0; layer < approx.size(); ++layer) {
      std::size_t hit = 0;
      for (auto id : exact[layer])
        if (std::find(approx[layer].begin(), approx[layer].end(), id) != approx[layer].end()) ++hit;
      recall += static_cast<double>(hit) / static_cast<double>(exact[layer].size());
      ++n_layers_counted;
    }
  }
  recall /= static_cast<double>(n_layers_counted);
  CHECK(recall >= 0.9);
}

TEST_CASE("nonconformity counts disagreeing neighbor labels") {
  const std::vector<std::vector<std::uint16_t>> omega = {
      {1, 1, 2, 3}, {1, 2, 2, 2}, {3, 3, 3, 3}};
  CHECK(nonconformity_from_labels(omega, 1) == 9);
  CHECK(nonconformity_from_labels(omega, 2) == 8);
  CHECK(nonconformity_from_labels(omega, 3) == 7);
  CHECK(nonconformity_from_labels(omega, 0) == 12);

  SUBCASE("all neighbors agreeing gives zero") {
    const std::vector<std::vector<std::uint16_t>> pure(4, std::vector<std::uint16_t>(10, 5));
    CHECK(nonconformity_from_labels(pure, 5) == 0);
    // With the default four spaces and ten neighbors the ceiling is 40.
    CHECK(nonconformity_from_labels(pure, 6) == 40);
  }
}

TEST_CASE("nonconformity through the index stays within bounds") {
  const auto& f = fixture();
  const LayerIndex index(f.model, f.ds, DknnConfig{});
  const auto rows = f.ds.rows_with(Split::test);
  for (std::size_t i = 0; i < rows.size(); i += 17) {
    const auto x = f.row(rows[i]);
    for (int j : {0, 3, 7}) {
      const int rho = nonconformity(index, x, j);
      CHECK(rho >= 0);
      CHECK(rho <= 4 * 10);
    }
    const auto omega = index.neighbor_labels(x);
    CHECK(nonconformity(index, x, 2) == nonconformity_from_labels(omega, 2));
  }
  CHECK_THROWS_AS(nonconformity(index, f.row(rows[0]), 8), std::out_of_range);
}

TEST_CASE("calibration scores skew low on in-distribution holdout data") {
  const auto& f = fixture();
  const LayerIndex index(f.model, f.ds, DknnConfig{});
  const auto holdout = f.ds.rows_with(Split::holdout);
  const CalibrationScores cal = calibrate(index, f.ds, holdout);
  REQUIRE(cal.size() == holdout.size());
  const int median = cal.sorted_scores[cal.size() / 2];
  CHECK(median < 4 * 10 / 2);
  CHECK(std::is_sorted(cal.sorted_scores.begin(), cal.sorted_scores.end()));

  const CalibrationScores again = calibrate(index, f.ds, holdout);
  CHECK(again.sorted_scores == cal.sorted_scores);

  CHECK_THROWS_AS(calibrate(index, f.ds, std::vector<std::size_t>{}), std::invalid_argument);
}

TEST_CASE("p-values count the calibration tail") {
  CalibrationScores cal;
  cal.sorted_scores = {1, 2, 3, 4, 5};
  CHECK(p_value(cal, 3) == doctest::Approx(3.0 / 5.0));
  CHECK(p_value(cal, 0) == doctest::Approx(1.0));
  CHECK(p_value(cal, 6) == doctest::Approx(0.0));

  SUBCASE("monotone: a larger score never raises the p-value") {
    std::mt19937_64 eng(9);
    std::uniform_int_distribution<int> score(0, 40);
    CalibrationScores random_cal;
    for (int i = 0; i < 100; ++i) random_cal.sorted_scores.push_back(score(eng));
    std::sort(random_cal.sorted_scores.begin(), random_cal.sorted_scores.end());
    for (int rho = 0; rho < 40; ++rho)
      CHECK(p_value(random_cal, rho) >= p_value(random_cal, rho + 1));
  }
}

TEST_CASE("classification extracts max and second-max p-values") {
  const auto& f = fixture();
  const LayerIndex index(f.model, f.ds, DknnConfig{});
  const CalibrationScores cal = calibrate(index, f.ds, f.ds.rows_with(Split::holdout));
  const auto rows = f.ds.rows_with(Split::test);

  for (std::size_t i = 0; i < rows.size(); i += 13) {
    const auto x = f.row(rows[i]);
    const CredibilityRecord rec = classify(index, cal, x);
    const auto p = p_values(index, cal, x);
    CHECK(rec.p_values == p);

    // Sort oracle for the order statistics.
    std::vector<double> sorted(p);
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    CHECK(rec.credibility == doctest::Approx(sorted[0]));
    CHECK(rec.confidence == doctest::Approx(1.0 - sorted[1]));
    CHECK(rec.prediction ==
          static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
    CHECK(rec.credibility >= 0.0);
    CHECK(rec.credibility <= 1.0);
    CHECK(rec.confidence >= 0.0);
    CHECK(rec.confidence <= 1.0);
  }
}

TEST_CASE("conformal validity holds with finite-sample slack") {
  const auto& f = fixture();
  const LayerIndex index(f.model, f.ds, DknnConfig{});
  const CalibrationScores cal = calibrate(index, f.ds, f.ds.rows_with(Split::holdout));
  const auto rows = f.ds.rows_with(Split::test);
  std::vector<double> p_true;
  for (auto r : rows) {
    const auto p = p_values(index, cal, f.row(r));
    p_true.push_back(p[f.ds.labels[r]]);
  }
  for (double t = 0.05; t < 1.0; t += 0.05) {
    double below = 0.0;
    for (double p : p_true)
      if (p <= t) below += 1.0;
    below /= static_cast<double>(p_true.size());
    CHECK(below <= t + 1.0 / static_cast<double>(cal.size()) + 0.2 * t + 0.05);
  }
}

TEST_CASE("exact and LSH indexes agree on nearly every prediction") {
  const auto& f = fixture();
  DknnConfig lsh_cfg;
  DknnConfig exact_cfg = lsh_cfg;
  exact_cfg.use_lsh = false;
  const LayerIndex a(f.model, f.ds, lsh_cfg);
  const LayerIndex b(f.model, f.ds, exact_cfg);
  const CalibrationScores cal_a = calibrate(a, f.ds, f.ds.rows_with(Split::holdout));
  const CalibrationScores cal_b = calibrate(b, f.ds, f.ds.rows_with(Split::holdout));
  const auto rows = f.ds.rows_with(Split::test);
  double agree = 0.0;
  for (auto r : rows) {
    const auto x = f.row(r);
    if (classify(a, cal_a, x).prediction == classify(b, cal_b, x).prediction) agree += 1.0;
  }
  CHECK(agree / static_cast<double>(rows.size()) >= 0.95);
}

TEST_CASE("reliability diagram bins cover half-open intervals") {
  SUBCASE("all confident and correct records land in the last bin") {
    std::vector<ScoredPrediction> records(20, {1.0, true});
    const auto bins = reliability_diagram(records, 10);
    REQUIRE(bins.size() == 10);
    for (int s = 0; s < 9; ++s) {
      CHECK(bins[static_cast<std::size_t>(s)].count == 0);
      CHECK(std::isnan(bins[static_cast<std::size_t>(s)].accuracy));
    }
    CHECK(bins[9].count == 20);
    CHECK(bins[9].accuracy == doctest::Approx(1.0));
  }
  SUBCASE("a single bin reports overall accuracy") {
    std::vector<ScoredPrediction> records = {{0.1, true}, {0.9, false}, {0.5, true}, {0.7, true}};
    const auto bins = reliability_diagram(records, 1);
    REQUIRE(bins.size() == 1);
    CHECK(bins[0].count == 4);
    CHECK(bins[0].accuracy == doctest::Approx(0.75));
  }
  SUBCASE("hand-placed records produce exact counts") {
    // Scores chosen so bin membership is unambiguous: bin s is (s/5,(s+1)/5].
    std::vector<ScoredPrediction> records = {
        {0.0, true},   // bin 0 (zero lands low)
        {0.2, false},  // bin 0 (right edge)
        {0.21, true},  // bin 1
        {0.4, true},   // bin 1
        {0.5, false},  // bin 2
        {0.55, true},  // bin 2
        {0.6, true},   // bin 2
        {0.9, false},  // bin 4
        {0.95, true},  // bin 4
        {1.0, true},   // bin 4
    };
    const auto bins = reliability_diagram(records, 5);
    CHECK(bins[0].count == 2);
    CHECK(bins[0].accuracy == doctest::Approx(0.5));
    CHECK(bins[1].count == 2);
    CHECK(bins[1].accuracy == doctest::Approx(1.0));
    CHECK(bins[2].count == 3);
    CHECK(bins[2].accuracy == doctest::Approx(2.0 / 3.0));
    CHECK(bins[3].count == 0);
    CHECK(std::isnan(bins[3].accuracy));
    CHECK(bins[4].count == 3);
    CHECK(bins[4].accuracy == doctest::Approx(2.0 / 3.0));
  }
  CHECK_THROWS_AS(reliability_diagram(std::vector<ScoredPrediction>{}, 0), std::invalid_argument);
}

TEST_CASE("robustness evaluation compares credibility distributions") {
  const auto& f = fixture();
  const LayerIndex index(f.model, f.ds, DknnConfig{});
  const CalibrationScores cal = calibrate(index, f.ds, f.ds.rows_with(Split::holdout));
  const auto rows = f.ds.rows_with(Split::test);
  std::vector<std::vector<double>> clean;
  for (std::size_t i = 0; i < std::min<std::size_t>(rows.size(), 60); ++i)
    clean.push_back(f.row(rows[i]));

  SUBCASE("identical sets give identical fractions") {
    const std::vector<double> thresholds{0.2, 0.4};
    const auto summary = robustness_eval(index, cal, clean, clean, thresholds);
    CHECK(summary.clean_below == summary.adversarial_below);
    CHECK(summary.mean_clean_credibility == doctest::Approx(summary.mean_adversarial_credibility));
  }
  SUBCASE("a zero threshold flags nothing") {
    const std::vector<double> thresholds{0.0};
    const auto summary = robustness_eval(index, cal, clean, clean, thresholds);
    CHECK(summary.clean_below[0] == 0.0);
    CHECK(summary.adversarial_below[0] == 0.0);
  }
  SUBCASE("strong perturbations depress credibility") {
    std::vector<std::vector<double>> adversarial;
    for (const auto& x : clean)
      adversarial.push_back(fgsm(f.model, x, 0, 3.0));
    const std::vector<double> thresholds{0.2, 0.4};
    const auto summary = robustness_eval(index, cal, clean, adversarial, thresholds);
    CHECK(summary.mean_adversarial_credibility < summary.mean_clean_credibility);
  }
  CHECK_THROWS_AS(robustness_eval(index, cal, {}, clean, std::vector<double>{0.2}),
                  std::invalid_argument);
}

}  // TEST_SUITE
