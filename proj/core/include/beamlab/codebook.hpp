#pragma once

#include <string>
#include <utility>
#include <vector>

#include "beamlab/channel.hpp"

namespace beamlab {

enum class CodebookKind { dft, odft, wide_tier1, quantized };

// Spatial-frequency grids (u = 2*spacing*sin(phi), gridded over [-1,1)):
//   dft / wide tier-1:  u_m = -1 + (2m+1)/n          (half-bin offset)
//   odft (os > 1):      u_q = -1 + 2q/(n_bs*os)
// With these grids the os=1 book is orthogonal, every os=1 beam appears in
// the os=4 book (beam m maps to odft index os*m + os/2), and the child set
// of wide beam m is the odft index block [m*Q/M, (m+1)*Q/M).
struct Codebook {
  std::vector<ChannelVector> vectors;
  CodebookKind kind = CodebookKind::dft;
  int oversampling = 1;

  std::size_t size() const { return vectors.size(); }
  int n_bs() const { return vectors.empty() ? 0 : static_cast<int>(vectors.front().size()); }
};

// n_bs*oversampling unit-norm constant-modulus beams. oversampling=1 gives
// the orthogonal DFT book used for sensing.
Codebook dft_codebook(const ArrayConfig& cfg, int oversampling = 1);

// n_wide tier-1 beams: DFT beams of an n_wide-element subarray, zero padded
// to the full aperture. n_wide must divide n_bs; n_wide == n_bs reduces to
// dft_codebook(cfg, 1).
Codebook wide_codebook(const ArrayConfig& cfg, int n_wide);

// Constant-modulus matched filter with the phase of each element rounded to
// a 2^bits-level phase shifter. Throws std::domain_error on a zero channel.
ChannelVector quantized_mrt(const ChannelVector& h, int bits);

// Beams of `book` restricted to `indices` (order preserved). Used for the
// fixed narrow-beam sensing baseline.
Codebook subset_codebook(const Codebook& book, const std::vector<int>& indices);

// Child narrow beams of wide beam m: odft indices
// [m*ceil(Q/M), (m+1)*ceil(Q/M)) clipped to Q.
std::pair<int, int> child_beam_range(int wide_index, int n_wide, int n_narrow);

// |h^H w|^2 for every beam in the book.
std::vector<double> beam_powers(const ChannelVector& h, const Codebook& book);

// CSV export: one row per beam, "beam,re_0,im_0,...".
void export_codebook_csv(const Codebook& book, const std::string& path);

}  // namespace beamlab
