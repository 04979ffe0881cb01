#include "beamlab/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "beamlab/rng.hpp"

namespace beamlab {

namespace {

void softmax_inplace(std::vector<double>& v) {
  const double peak = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - peak);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

constexpr double kLogClamp = 1e-12;

}  // namespace

std::size_t parameter_count(const std::vector<int>& dims) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l)
    n += static_cast<std::size_t>(dims[l]) * static_cast<std::size_t>(dims[l + 1]) +
         static_cast<std::size_t>(dims[l + 1]);
  return n;
}

std::vector<int> default_dims(int input_dim, int n_classes) {
  return {input_dim, 64, 64, 128, n_classes};
}

MlpModel::MlpModel(std::vector<int> dims, std::uint64_t seed) : dims_(std::move(dims)), init_seed_(seed) {
  if (dims_.size() < 2) throw std::invalid_argument("MlpModel: need at least input and output dims");
  for (int d : dims_)
    if (d < 1) throw std::invalid_argument("MlpModel: dims must be positive");
  weights_.resize(dims_.size() - 1);
  biases_.resize(dims_.size() - 1);
  auto eng = rng::engine(rng::derive(seed, rng::Stream::init));
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const auto fan_in = static_cast<std::size_t>(dims_[l]);
    const auto fan_out = static_cast<std::size_t>(dims_[l + 1]);
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> w_dist(-limit, limit);
    weights_[l].resize(fan_in * fan_out);
    for (double& w : weights_[l]) w = w_dist(eng);
    biases_[l].assign(fan_out, 0.0);
  }
}

std::size_t MlpModel::parameter_count() const { return beamlab::parameter_count(dims_); }

ForwardResult MlpModel::forward(std::span<const double> x) const {
  if (x.size() != static_cast<std::size_t>(input_dim()))
    throw std::invalid_argument("forward: input dimension mismatch");
  ForwardResult out;
  std::vector<double> act(x.begin(), x.end());
  for (std::size_t l = 0; l < n_layers(); ++l) {
    const auto in_dim = static_cast<std::size_t>(dims_[l]);
    const auto out_dim = static_cast<std::size_t>(dims_[l + 1]);
    std::vector<double> next(out_dim);
    const double* w = weights_[l].data();
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = biases_[l][o];
      const double* wrow = w + o * in_dim;
      for (std::size_t i = 0; i < in_dim; ++i) acc += wrow[i] * act[i];
      next[o] = acc;
    }
    const bool hidden = l + 1 < n_layers();
    if (hidden)
      for (double& v : next) v = v > 0.0 ? v : 0.0;
    act = std::move(next);
    out.layer_reps.push_back(act);
  }
  out.logits = act;
  out.probs = act;
  softmax_inplace(out.probs);
  return out;
}

ForwardResult MlpModel::forward_row(const BeamDataset& ds, std::size_t row) const {
  std::vector<double> x(ds.n_features);
  const float* r = ds.row(row);
  for (std::size_t c = 0; c < x.size(); ++c) x[c] = r[c];
  return forward(x);
}

double MlpModel::loss(const BeamDataset& ds, std::span<const std::size_t> rows) const {
  if (rows.empty()) throw std::invalid_argument("loss: empty batch");
  double total = 0.0;
  for (std::size_t r : rows) {
    const auto fwd = forward_row(ds, r);
    const double p = std::max(fwd.probs[ds.labels[r]], kLogClamp);
    total -= std::log(p);
  }
  return total / static_cast<double>(rows.size());
}

namespace {

// One backprop pass; activations and deltas live in the caller's scratch.
void accumulate_sample(const MlpModel& m, std::span<const double> x, int label,
                       std::vector<std::vector<double>>& acts, Gradients& g) {
  const auto& dims = m.dims();
  const std::size_t n_layers = dims.size() - 1;
  acts[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto in_dim = static_cast<std::size_t>(dims[l]);
    const auto out_dim = static_cast<std::size_t>(dims[l + 1]);
    auto& next = acts[l + 1];
    next.resize(out_dim);
    const double* w = m.weight(l).data();
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = m.bias(l)[o];
      const double* wrow = w + o * in_dim;
      for (std::size_t i = 0; i < in_dim; ++i) acc += wrow[i] * acts[l][i];
      next[o] = acc;
    }
    if (l + 1 < n_layers)
      for (double& v : next) v = v > 0.0 ? v : 0.0;
  }

  std::vector<double> delta = acts[n_layers];
  softmax_inplace(delta);
  delta[static_cast<std::size_t>(label)] -= 1.0;

  for (std::size_t l = n_layers; l-- > 0;) {
    const auto in_dim = static_cast<std::size_t>(dims[l]);
    const auto out_dim = static_cast<std::size_t>(dims[l + 1]);
    double* gw = g.weights[l].data();
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double d = delta[o];
      g.biases[l][o] += d;
      double* grow = gw + o * in_dim;
      const double* a = acts[l].data();
      for (std::size_t i = 0; i < in_dim; ++i) grow[i] += d * a[i];
    }
    if (l == 0) break;
    std::vector<double> prev(in_dim, 0.0);
    const double* w = m.weight(l).data();
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double d = delta[o];
      const double* wrow = w + o * in_dim;
      for (std::size_t i = 0; i < in_dim; ++i) prev[i] += wrow[i] * d;
    }
    // ReLU mask: the stored activation is already post-activation.
    for (std::size_t i = 0; i < in_dim; ++i)
      if (acts[l][i] <= 0.0) prev[i] = 0.0;
    delta = std::move(prev);
  }
}

Gradients zero_like(const MlpModel& m) {
  Gradients g;
  g.weights.resize(m.n_layers());
  g.biases.resize(m.n_layers());
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    g.weights[l].assign(m.weight(l).size(), 0.0);
    g.biases[l].assign(m.bias(l).size(), 0.0);
  }
  return g;
}

void scale(Gradients& g, double s) {
  for (auto& v : g.weights)
    for (double& x : v) x *= s;
  for (auto& v : g.biases)
    for (double& x : v) x *= s;
}

}  // namespace

Gradients MlpModel::gradients(const BeamDataset& ds, std::span<const std::size_t> rows) const {
  if (rows.empty()) throw std::invalid_argument("gradients: empty batch");
  Gradients g = zero_like(*this);
  std::vector<std::vector<double>> acts(dims_.size());
  std::vector<double> x(ds.n_features);
  for (std::size_t r : rows) {
    const float* src = ds.row(r);
    for (std::size_t c = 0; c < x.size(); ++c) x[c] = src[c];
    accumulate_sample(*this, x, ds.labels[r], acts, g);
  }
  scale(g, 1.0 / static_cast<double>(rows.size()));
  return g;
}

std::vector<double> MlpModel::input_gradient(std::span<const double> x, int label) const {
  if (label < 0 || label >= output_dim()) throw std::out_of_range("input_gradient: bad label");
  const std::size_t n_layers = dims_.size() - 1;
  std::vector<std::vector<double>> acts(dims_.size());
  acts[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto in_dim = static_cast<std::size_t>(dims_[l]);
    const auto out_dim = static_cast<std::size_t>(dims_[l + 1]);
    acts[l + 1].resize(out_dim);
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = biases_[l][o];
      const double* wrow = weights_[l].data() + o * in_dim;
      for (std::size_t i = 0; i < in_dim; ++i) acc += wrow[i] * acts[l][i];
      acts[l + 1][o] = (l + 1 < n_layers && acc < 0.0) ? 0.0 : acc;
    }
  }
  std::vector<double> delta = acts[n_layers];
  softmax_inplace(delta);
  delta[static_cast<std::size_t>(label)] -= 1.0;
  for (std::size_t l = n_layers; l-- > 0;) {
    const auto in_dim = static_cast<std::size_t>(dims_[l]);
    const auto out_dim = static_cast<std::size_t>(dims_[l + 1]);
    std::vector<double> prev(in_dim, 0.0);
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double d = delta[o];
      const double* wrow = weights_[l].data() + o * in_dim;
      for (std::size_t i = 0; i < in_dim; ++i) prev[i] += wrow[i] * d;
    }
    if (l > 0)
      for (std::size_t i = 0; i < in_dim; ++i)
        if (acts[l][i] <= 0.0) prev[i] = 0.0;
    delta = std::move(prev);
  }
  return delta;
}

std::vector<int> MlpModel::topk(std::span<const double> x, int k) const {
  if (k < 1 || k > output_dim()) throw std::invalid_argument("topk: k out of range");
  const auto fwd = forward(x);
  std::vector<int> idx(static_cast<std::size_t>(output_dim()));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double pa = fwd.probs[static_cast<std::size_t>(a)];
    const double pb = fwd.probs[static_cast<std::size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

namespace {

struct AdamState {
  std::vector<std::vector<double>> mw, vw, mb, vb;
  explicit AdamState(const MlpModel& m) {
    mw.resize(m.n_layers());
    vw.resize(m.n_layers());
    mb.resize(m.n_layers());
    vb.resize(m.n_layers());
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
      mw[l].assign(m.weight(l).size(), 0.0);
      vw[l].assign(m.weight(l).size(), 0.0);
      mb[l].assign(m.bias(l).size(), 0.0);
      vb[l].assign(m.bias(l).size(), 0.0);
    }
  }
};

void adam_update(std::vector<double>& param, const std::vector<double>& grad,
                 std::vector<double>& m, std::vector<double>& v, const TrainConfig& tc,
                 double bias1, double bias2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * grad[i];
    v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bias1;
    const double vhat = v[i] / bias2;
    param[i] -= tc.learning_rate * mhat / (std::sqrt(vhat) + tc.epsilon);
  }
}

}  // namespace

MlpModel train(const MlpModel& init, const BeamDataset& ds, const TrainConfig& tc, TrainLog* log) {
  if (tc.epochs < 1 || tc.batch_size < 1 || !(tc.learning_rate > 0.0))
    throw std::invalid_argument("train: bad config");
  if (init.input_dim() != static_cast<int>(ds.n_features) ||
      init.output_dim() != static_cast<int>(ds.n_classes))
    throw std::invalid_argument("train: model does not match dataset shape");
  auto rows = ds.rows_with(Split::train);
  if (rows.empty()) throw std::invalid_argument("train: dataset has no train rows");

  MlpModel m = init;
  AdamState adam(m);
  std::vector<std::vector<double>> acts(m.dims().size());
  std::vector<double> x(ds.n_features);
  long long step = 0;

  if (log) log->epoch_loss.clear();
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    auto eng = rng::engine(rng::derive(tc.seed, rng::Stream::shuffle, static_cast<std::uint64_t>(epoch)));
    std::shuffle(rows.begin(), rows.end(), eng);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t stop = std::min(rows.size(), start + static_cast<std::size_t>(tc.batch_size));
      const std::size_t n = stop - start;
      Gradients g = zero_like(m);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const std::size_t r = rows[i];
        const float* src = ds.row(r);
        for (std::size_t c = 0; c < x.size(); ++c) x[c] = src[c];
        const auto fwd = m.forward(x);
        batch_loss -= std::log(std::max(fwd.probs[ds.labels[r]], 1e-12));
        accumulate_sample(m, x, ds.labels[r], acts, g);
      }
      scale(g, 1.0 / static_cast<double>(n));
      batch_loss /= static_cast<double>(n);
      epoch_total += batch_loss * static_cast<double>(n);
      if (!std::isfinite(batch_loss)) throw std::runtime_error("train: loss diverged");
      ++step;
      const double bias1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step));
      const double bias2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step));
      for (std::size_t l = 0; l < m.n_layers(); ++l) {
        adam_update(m.weight(l), g.weights[l], adam.mw[l], adam.vw[l], tc, bias1, bias2);
        adam_update(m.bias(l), g.biases[l], adam.mb[l], adam.vb[l], tc, bias1, bias2);
      }
    }
    if (log) log->epoch_loss.push_back(epoch_total / static_cast<double>(rows.size()));
  }
  return m;
}

MlpModel finetune(const MlpModel& pretrained, const BeamDataset& augmented, const TrainConfig& tc,
                  TrainLog* log) {
  return train(pretrained, augmented, tc, log);
}

std::vector<double> fgsm(const MlpModel& m, std::span<const double> x, int label, double eps) {
  if (!(eps >= 0.0)) throw std::invalid_argument("fgsm: eps must be >= 0");
  const auto grad = m.input_gradient(x, label);
  std::vector<double> adv(x.begin(), x.end());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
    adv[i] += eps * s;
  }
  return adv;
}

namespace {

constexpr char kModelMagic[4] = {'B', 'L', 'M', 'C'};
constexpr std::uint16_t kModelVersion = 1;

}  // namespace

void save_model(const MlpModel& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_model: cannot open " + path);
  os.write(kModelMagic, 4);
  os.write(reinterpret_cast<const char*>(&kModelVersion), sizeof(kModelVersion));
  const auto n_dims = static_cast<std::uint32_t>(m.dims().size());
  os.write(reinterpret_cast<const char*>(&n_dims), sizeof(n_dims));
  for (int d : m.dims()) {
    const auto v = static_cast<std::uint32_t>(d);
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  const std::uint64_t seed = m.init_seed();
  os.write(reinterpret_cast<const char*>(&seed), sizeof(seed));
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    os.write(reinterpret_cast<const char*>(m.weight(l).data()),
             static_cast<std::streamsize>(m.weight(l).size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(m.bias(l).data()),
             static_cast<std::streamsize>(m.bias(l).size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("save_model: write failed for " + path);
}

MlpModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_model: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kModelMagic, 4) != 0)
    throw std::runtime_error("load_model: bad magic in " + path);
  std::uint16_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kModelVersion) throw std::runtime_error("load_model: unsupported version");
  std::uint32_t n_dims = 0;
  is.read(reinterpret_cast<char*>(&n_dims), sizeof(n_dims));
  std::vector<int> dims(n_dims);
  for (auto& d : dims) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    d = static_cast<int>(v);
  }
  std::uint64_t seed = 0;
  is.read(reinterpret_cast<char*>(&seed), sizeof(seed));
  MlpModel m(dims, seed);
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    is.read(reinterpret_cast<char*>(m.weight(l).data()),
            static_cast<std::streamsize>(m.weight(l).size() * sizeof(double)));
    is.read(reinterpret_cast<char*>(m.bias(l).data()),
            static_cast<std::streamsize>(m.bias(l).size() * sizeof(double)));
  }
  if (!is) throw std::runtime_error("load_model: truncated file " + path);
  return m;
}

}  // namespace beamlab
