#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>

#include "beamlab/mlp.hpp"
#include "doctest.h"

using namespace beamlab;

namespace {

// Hand-rolled dataset builder for toy problems.
BeamDataset toy_dataset(const std::vector<std::vector<double>>& rows,
                        const std::vector<int>& labels, int n_classes) {
  BeamDataset ds;
  ds.n_features = static_cast<std::uint32_t>(rows.front().size());
  ds.n_classes = static_cast<std::uint32_t>(n_classes);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (double v : rows[r]) ds.features.push_back(static_cast<float>(v));
    ds.labels.push_back(static_cast<std::uint16_t>(labels[r]));
    ds.split.push_back(static_cast<std::uint8_t>(Split::train));
    ds.origin.push_back(static_cast<std::uint8_t>(Origin::twin));
  }
  ds.col_mean.assign(ds.n_features, 0.0);
  ds.col_std.assign(ds.n_features, 1.0);
  ds.feature_beams.resize(ds.n_features);
  std::iota(ds.feature_beams.begin(), ds.feature_beams.end(), std::uint16_t{0});
  return ds;
}

// Four Gaussian clusters at the corners of a square.
BeamDataset separable_toy(int n_per_class, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> jitter(0.0, 0.15);
  const double cx[4] = {-1.0, 1.0, -1.0, 1.0};
  const double cy[4] = {-1.0, -1.0, 1.0, 1.0};
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < n_per_class; ++i) {
      rows.push_back({cx[c] + jitter(eng), cy[c] + jitter(eng)});
      labels.push_back(c);
    }
  return toy_dataset(rows, labels, 4);
}

void zero_model(MlpModel& m) {
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    std::fill(m.weight(l).begin(), m.weight(l).end(), 0.0);
    std::fill(m.bias(l).begin(), m.bias(l).end(), 0.0);
  }
}

}  // namespace

TEST_SUITE("mlp") {

TEST_CASE("zero weights give a uniform softmax") {
  MlpModel m({4, 16, 128}, 1);
  zero_model(m);
  const auto fwd = m.forward(std::vector<double>{1.0, -2.0, 0.5, 3.0});
  for (double p : fwd.probs) CHECK(p == doctest::Approx(1.0 / 128).epsilon(1e-12));
}

TEST_CASE("softmax always sums to one") {
  std::mt19937_64 eng(2);
  std::normal_distribution<double> g(0.0, 2.0);
  MlpModel m({6, 32, 32, 10}, 3);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> x(6);
    for (auto& v : x) v = g(eng);
    const auto fwd = m.forward(x);
    const double sum = std::accumulate(fwd.probs.begin(), fwd.probs.end(), 0.0);
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("hand-computed forward pass on a 2-2-2 model") {
  MlpModel m({2, 2, 2}, 0);
  m.weight(0) = {1.0, -1.0, 0.5, 2.0};  // row-major out x in
  m.bias(0) = {0.1, -0.2};
  m.weight(1) = {2.0, 1.0, -1.0, 1.0};
  m.bias(1) = {0.0, 0.5};
  const auto fwd = m.forward(std::vector<double>{1.0, 2.0});
  // Pencil run: z1 = (-0.9, 4.3) -> relu (0, 4.3); logits = (4.3, 4.8).
  CHECK(fwd.layer_reps[0][0] == doctest::Approx(0.0));
  CHECK(fwd.layer_reps[0][1] == doctest::Approx(4.3));
  CHECK(fwd.logits[0] == doctest::Approx(4.3).epsilon(1e-12));
  CHECK(fwd.logits[1] == doctest::Approx(4.8).epsilon(1e-12));
  CHECK_THROWS_AS(m.forward(std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("uniform prediction loss is log of the class count") {
  MlpModel m({3, 128}, 1);
  zero_model(m);
  const auto ds = toy_dataset({{0.1, 0.2, 0.3}, {1.0, -1.0, 0.0}}, {5, 100}, 128);
  const std::vector<std::size_t> rows{0, 1};
  CHECK(m.loss(ds, rows) == doctest::Approx(std::log(128.0)).epsilon(1e-9));
}

TEST_CASE("loss matches an independent scalar recomputation") {
  std::mt19937_64 eng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  MlpModel m({5, 12, 7}, 9);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int r = 0; r < 10; ++r) {
    std::vector<double> x(5);
    for (auto& v : x) v = g(eng);
    rows.push_back(x);
    labels.push_back(r % 7);
  }
  const auto ds = toy_dataset(rows, labels, 7);
  std::vector<std::size_t> idx(10);
  std::iota(idx.begin(), idx.end(), std::size_t{0});

  double expect = 0.0;
  for (int r = 0; r < 10; ++r) {
    // Evaluate on the float-rounded features the dataset actually stores.
    std::vector<double> x(ds.n_features);
    for (std::size_t c = 0; c < x.size(); ++c) x[c] = ds.row(static_cast<std::size_t>(r))[c];
    const auto fwd = m.forward(x);
    double peak = *std::max_element(fwd.logits.begin(), fwd.logits.end());
    double denom = 0.0;
    for (double l : fwd.logits) denom += std::exp(l - peak);
    const double p = std::exp(fwd.logits[static_cast<std::size_t>(labels[static_cast<std::size_t>(r)])] - peak) / denom;
    expect -= std::log(p);
  }
  expect /= 10.0;
  CHECK(m.loss(ds, idx) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central finite differences") {
  std::mt19937_64 eng(6);
  std::normal_distribution<double> g(0.0, 1.0);
  MlpModel m({5, 9, 8, 6}, 13);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int r = 0; r < 8; ++r) {
    std::vector<double> x(5);
    for (auto& v : x) v = g(eng);
    rows.push_back(x);
    labels.push_back(r % 6);
  }
  auto ds = toy_dataset(rows, labels, 6);
  std::vector<std::size_t> idx(8);
  std::iota(idx.begin(), idx.end(), std::size_t{0});

  const Gradients grads = m.gradients(ds, idx);
  std::uniform_int_distribution<std::size_t> pick_layer(0, m.n_layers() - 1);
  const double step = 1e-5;
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t l = pick_layer(eng);
    std::uniform_int_distribution<std::size_t> pick_w(0, m.weight(l).size() - 1);
    const std::size_t i = pick_w(eng);
    MlpModel up = m, down = m;
    up.weight(l)[i] += step;
    down.weight(l)[i] -= step;
    const double fd = (up.loss(ds, idx) - down.loss(ds, idx)) / (2 * step);
    const double an = grads.weights[l][i];
    CHECK(std::abs(an - fd) / (std::abs(an) + 1e-8) < 1e-4);
  }
}

TEST_CASE("output bias gradient is the mean softmax error") {
  std::mt19937_64 eng(14);
  std::normal_distribution<double> g(0.0, 1.0);
  MlpModel m({4, 8, 5}, 21);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int r = 0; r < 6; ++r) {
    std::vector<double> x(4);
    for (auto& v : x) v = g(eng);
    rows.push_back(x);
    labels.push_back(r % 5);
  }
  const auto ds = toy_dataset(rows, labels, 5);
  std::vector<std::size_t> idx(6);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const Gradients grads = m.gradients(ds, idx);

  std::vector<double> expect(5, 0.0);
  for (int r = 0; r < 6; ++r) {
    const auto fwd = m.forward_row(ds, static_cast<std::size_t>(r));
    for (int q = 0; q < 5; ++q)
      expect[static_cast<std::size_t>(q)] +=
          fwd.probs[static_cast<std::size_t>(q)] - (q == labels[static_cast<std::size_t>(r)] ? 1.0 : 0.0);
  }
  for (auto& v : expect) v /= 6.0;
  for (int q = 0; q < 5; ++q)
    CHECK(grads.biases[1][static_cast<std::size_t>(q)] ==
          doctest::Approx(expect[static_cast<std::size_t>(q)]).epsilon(1e-10));
}

TEST_CASE("near-perfect logits drive the gradient to zero") {
  MlpModel m({2, 3}, 1);
  zero_model(m);
  m.bias(0) = {50.0, 0.0, 0.0};
  const auto ds = toy_dataset({{0.0, 0.0}}, {0}, 3);
  const std::vector<std::size_t> idx{0};
  const Gradients grads = m.gradients(ds, idx);
  double norm = 0.0;
  for (const auto& layer : grads.weights)
    for (double v : layer) norm += v * v;
  for (const auto& layer : grads.biases)
    for (double v : layer) norm += v * v;
  CHECK(std::sqrt(norm) < 1e-8);
}

TEST_CASE("training separates an easy four-cluster problem") {
  const BeamDataset ds = separable_toy(50, 3);
  TrainConfig tc;
  tc.epochs = 100;
  tc.batch_size = 32;
  tc.seed = 5;
  MlpModel init({2, 16, 16, 4}, 7);
  TrainLog log;
  const MlpModel trained = train(init, ds, tc, &log);

  const auto rows = ds.rows_with(Split::train);
  std::size_t hits = 0;
  for (auto r : rows) {
    const auto fwd = trained.forward_row(ds, r);
    const auto best = std::max_element(fwd.probs.begin(), fwd.probs.end()) - fwd.probs.begin();
    if (best == ds.labels[r]) ++hits;
  }
  CHECK(static_cast<double>(hits) / rows.size() >= 0.99);

  // Epoch-mean loss should be non-increasing for nearly every transition.
  REQUIRE(log.epoch_loss.size() == 100);
  int non_increasing = 0;
  for (std::size_t e = 1; e < log.epoch_loss.size(); ++e)
    if (log.epoch_loss[e] <= log.epoch_loss[e - 1] + 1e-9) ++non_increasing;
  CHECK(non_increasing >= 89);
}

TEST_CASE("training is deterministic in the seed") {
  const BeamDataset ds = separable_toy(20, 11);
  TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 16;
  tc.seed = 2;
  MlpModel init({2, 8, 4}, 3);
  const MlpModel a = train(init, ds, tc);
  const MlpModel b = train(init, ds, tc);
  CHECK(a == b);
}

TEST_CASE("an exploding learning rate surfaces as a training error") {
  const BeamDataset ds = separable_toy(10, 1);
  TrainConfig tc;
  tc.learning_rate = 1e300;
  tc.epochs = 3;
  tc.batch_size = 16;
  tc.seed = 1;
  MlpModel init({2, 8, 4}, 3);
  CHECK_THROWS_AS(train(init, ds, tc), std::runtime_error);
}

TEST_CASE("published parameter counts for the default stack") {
  const std::vector<std::pair<int, std::size_t>> expected = {
      {2, 29184}, {4, 29312}, {8, 29568}, {12, 29824}, {16, 30080}, {24, 30592}, {32, 31104}};
  for (const auto& [m_w, count] : expected)
    CHECK(parameter_count(default_dims(m_w, 128)) == count);
  MlpModel m(default_dims(12, 128), 0);
  CHECK(m.parameter_count() == 29824);
}

TEST_CASE("softmax is invariant to a constant logit shift") {
  std::mt19937_64 eng(31);
  std::normal_distribution<double> g(0.0, 1.0);
  MlpModel m({3, 6, 5}, 17);
  MlpModel shifted = m;
  for (auto& b : shifted.bias(1)) b += 7.31;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x(3);
    for (auto& v : x) v = g(eng);
    const auto p = m.forward(x).probs;
    const auto q = shifted.forward(x).probs;
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - q[i]) < 1e-9);
  }
}

TEST_CASE("fgsm perturbs by exactly epsilon in max norm") {
  MlpModel m({4, 8, 5}, 23);
  const std::vector<double> x{0.2, -1.0, 0.7, 0.0};

  const auto same = fgsm(m, x, 2, 0.0);
  CHECK(same == x);

  const auto adv = fgsm(m, x, 2, 0.25);
  double linf = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) linf = std::max(linf, std::abs(adv[i] - x[i]));
  CHECK(linf <= 0.25 + 1e-15);
  CHECK(linf > 0.0);
}

TEST_CASE("fgsm increases the loss on nearly all rows of a trained model") {
  const BeamDataset ds = separable_toy(40, 9);
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 32;
  tc.seed = 6;
  MlpModel init({2, 16, 4}, 2);
  const MlpModel m = train(init, ds, tc);

  int increased = 0;
  int total = 0;
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    std::vector<double> x{ds.row(r)[0], ds.row(r)[1]};
    const int label = ds.labels[r];
    const auto adv = fgsm(m, x, label, 0.2);
    const auto loss_at = [&](const std::vector<double>& in) {
      const auto fwd = m.forward(in);
      return -std::log(std::max(fwd.probs[static_cast<std::size_t>(label)], 1e-12));
    };
    if (loss_at(adv) >= loss_at(x) - 1e-12) ++increased;
    ++total;
  }
  CHECK(static_cast<double>(increased) / total >= 0.95);
}

TEST_CASE("topk ordering and tie handling") {
  MlpModel m({3, 4}, 1);
  zero_model(m);
  const std::vector<double> x{0.0, 0.0, 0.0};

  SUBCASE("uniform probabilities fall back to the lowest index") {
    const auto top = m.topk(x, 1);
    CHECK(top == std::vector<int>{0});
  }
  SUBCASE("k equal to the class count is a permutation") {
    auto top = m.topk(x, 4);
    std::sort(top.begin(), top.end());
    CHECK(top == std::vector<int>{0, 1, 2, 3});
  }
  SUBCASE("matches a sort oracle on a random model") {
    MlpModel r({3, 4, 9}, 5);
    const std::vector<double> in{0.3, -0.2, 1.5};
    const auto probs = r.forward(in).probs;
    std::vector<int> oracle(9);
    std::iota(oracle.begin(), oracle.end(), 0);
    std::stable_sort(oracle.begin(), oracle.end(),
                     [&](int a, int b) { return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)]; });
    oracle.resize(3);
    CHECK(r.topk(in, 3) == oracle);
  }
  CHECK_THROWS_AS(m.topk(x, 0), std::invalid_argument);
  CHECK_THROWS_AS(m.topk(x, 5), std::invalid_argument);
}

TEST_CASE("zero-fraction augmentation makes finetune equal continued training") {
  ArrayConfig cfg;
  cfg.n_bs = 8;
  const Codebook sensing = dft_codebook(cfg, 1);
  const Codebook candidates = dft_codebook(cfg, 2);
  const Scene real_scene = generate_scene(20, cfg, 41, 0.6);
  const Scene twin_scene = perturb_to_twin(real_scene, TwinPerturbation{2.0, 0.2, 1.0}, 6);
  MeasurementConfig mc;
  const BeamDataset real = build_dataset(real_scene, cfg, sensing, candidates, mc, 200, Origin::real, 1);
  const BeamDataset twin = build_dataset(twin_scene, cfg, sensing, candidates, mc, 300, Origin::twin, 2);

  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 64;
  tc.seed = 77;
  MlpModel pre(default_dims(8, 16), 5);

  const BeamDataset aug0 = augment(real, twin, 0.0, 9);
  const MlpModel a = finetune(pre, aug0, tc);
  const MlpModel b = finetune(pre, twin, tc);
  CHECK(a == b);
}

TEST_CASE("checkpoint round trip restores the exact model") {
  MlpModel m({5, 16, 8}, 99);
  const auto dir = std::filesystem::temp_directory_path() / "beamlab_mlp_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "model.bmlp").string();
  save_model(m, path);
  const MlpModel loaded = load_model(path);
  CHECK(loaded == m);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
