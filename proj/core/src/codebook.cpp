#include "beamlab/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace beamlab {

Codebook dft_codebook(const ArrayConfig& cfg, int oversampling) {
  if (cfg.n_bs < 2) throw std::invalid_argument("dft_codebook: n_bs must be >= 2");
  if (oversampling < 1) throw std::invalid_argument("dft_codebook: oversampling must be >= 1");
  const int q_total = cfg.n_bs * oversampling;
  Codebook book;
  book.kind = oversampling == 1 ? CodebookKind::dft : CodebookKind::odft;
  book.oversampling = oversampling;
  book.vectors.reserve(static_cast<std::size_t>(q_total));
  for (int q = 0; q < q_total; ++q) {
    const double u = oversampling == 1
                         ? -1.0 + (2.0 * q + 1.0) / static_cast<double>(q_total)
                         : -1.0 + 2.0 * q / static_cast<double>(q_total);
    book.vectors.push_back(steering_from_spatial_freq(u, cfg.n_bs));
  }
  return book;
}

Codebook wide_codebook(const ArrayConfig& cfg, int n_wide) {
  if (n_wide < 1 || cfg.n_bs % n_wide != 0)
    throw std::invalid_argument("wide_codebook: n_wide must divide n_bs");
  Codebook book;
  book.kind = n_wide == cfg.n_bs ? CodebookKind::dft : CodebookKind::wide_tier1;
  book.oversampling = 1;
  book.vectors.reserve(static_cast<std::size_t>(n_wide));
  const int n_sub = n_wide;  // subarray aperture sets the lobe width to one tile
  for (int m = 0; m < n_wide; ++m) {
    const double u = -1.0 + (2.0 * m + 1.0) / static_cast<double>(n_wide);
    ChannelVector sub = steering_from_spatial_freq(u, n_sub);
    ChannelVector w(static_cast<std::size_t>(cfg.n_bs), {0.0, 0.0});
    for (int i = 0; i < n_sub; ++i) w[static_cast<std::size_t>(i)] = sub[static_cast<std::size_t>(i)];
    double norm = 0.0;
    for (const auto& v : w) norm += std::norm(v);
    norm = std::sqrt(norm);
    for (auto& v : w) v /= norm;
    book.vectors.push_back(std::move(w));
  }
  return book;
}

ChannelVector quantized_mrt(const ChannelVector& h, int bits) {
  if (bits < 1) throw std::invalid_argument("quantized_mrt: bits must be >= 1");
  double energy = 0.0;
  for (const auto& v : h) energy += std::norm(v);
  if (!(energy > 0.0)) throw std::domain_error("quantized_mrt: zero channel");
  const double step = 2.0 * std::numbers::pi / static_cast<double>(1 << bits);
  const double amp = 1.0 / std::sqrt(static_cast<double>(h.size()));
  ChannelVector w(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double phase = step * std::round(std::arg(h[i]) / step);
    w[i] = std::polar(amp, phase);
  }
  return w;
}

Codebook subset_codebook(const Codebook& book, const std::vector<int>& indices) {
  Codebook out;
  out.kind = book.kind;
  out.oversampling = book.oversampling;
  out.vectors.reserve(indices.size());
  for (int idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= book.size())
      throw std::out_of_range("subset_codebook: beam index out of range");
    out.vectors.push_back(book.vectors[static_cast<std::size_t>(idx)]);
  }
  return out;
}

std::pair<int, int> child_beam_range(int wide_index, int n_wide, int n_narrow) {
  if (n_wide < 1 || n_narrow < n_wide)
    throw std::invalid_argument("child_beam_range: need 1 <= n_wide <= n_narrow");
  if (wide_index < 0 || wide_index >= n_wide)
    throw std::out_of_range("child_beam_range: wide_index out of range");
  const int per_wide = (n_narrow + n_wide - 1) / n_wide;
  const int lo = wide_index * per_wide;
  const int hi = std::min(n_narrow, lo + per_wide);
  return {lo, hi};
}

std::vector<double> beam_powers(const ChannelVector& h, const Codebook& book) {
  std::vector<double> out(book.size());
  for (std::size_t q = 0; q < book.size(); ++q) {
    const auto& w = book.vectors[q];
    if (w.size() != h.size()) throw std::invalid_argument("beam_powers: dimension mismatch");
    std::complex<double> acc{0.0, 0.0};
    for (std::size_t i = 0; i < h.size(); ++i) acc += std::conj(h[i]) * w[i];
    out[q] = std::norm(acc);
  }
  return out;
}

void export_codebook_csv(const Codebook& book, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("export_codebook_csv: cannot open " + path);
  os << "beam";
  for (int i = 0; i < book.n_bs(); ++i) os << ",re_" << i << ",im_" << i;
  os << "\n";
  os.precision(17);
  for (std::size_t q = 0; q < book.size(); ++q) {
    os << q;
    for (const auto& v : book.vectors[q]) os << "," << v.real() << "," << v.imag();
    os << "\n";
  }
}

}  // namespace beamlab
