#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

namespace beamlab {

using ChannelVector = std::vector<std::complex<double>>;

// Uniform linear array at the base station.
struct ArrayConfig {
  int n_bs = 32;
  double carrier_hz = 28e9;
  double spacing_wavelengths = 0.5;
};

// One propagation path: complex gain and angle of departure. NLOS paths
// carry the range of the virtual scatterer that produced them so a twin
// perturbation can displace it geometrically.
struct PathComponent {
  std::complex<double> gain;
  double aod_rad = 0.0;
  double scatter_range_m = 0.0;
  bool is_los = false;

  bool operator==(const PathComponent&) const = default;
};

struct Scene {
  std::vector<std::array<double, 2>> ue_positions;      // meters, BS at origin
  std::vector<std::vector<PathComponent>> paths_per_ue;  // length L per UE, 1 <= L <= L_max
  std::uint64_t rng_seed = 0;
  double los_fraction = 0.0;

  std::size_t n_ue() const { return ue_positions.size(); }

  bool operator==(const Scene&) const = default;
};

// Controlled twin imperfections. All-zero perturbation leaves the scene
// untouched, bit for bit.
struct TwinPerturbation {
  double scatterer_shift_m = 2.0;
  double path_drop_prob = 0.0;
  double gain_jitter_db = 0.0;
};

// Parametric stand-in for a ray-traced site: geometry of the UE service
// sector and the scatterer field the cluster model draws from. UEs gather
// in a few angular lobes (streets, plazas); n_ue_clusters = 0 falls back
// to bearings uniform over the sector.
struct SceneGeometry {
  double sector_half_angle_rad = 1.0471975511965976;  // 60 degrees
  int n_ue_clusters = 3;
  double ue_cluster_spread_rad = 0.12;
  double ue_range_min_m = 20.0;
  double ue_range_max_m = 200.0;
  int n_scatterers = 8;
  double scatterer_range_min_m = 15.0;
  double scatterer_range_max_m = 80.0;
  double cluster_angle_spread_rad = 0.05;
  int l_max = 5;
  double nlos_gain_mean_db = -15.0;
  double nlos_gain_sigma_db = 6.0;
  double los_advantage_min_db = 10.0;
  double los_advantage_max_db = 20.0;
  double range_loss_exponent = 2.0;  // 1/d^n amplitude falloff toward far UEs
};

// Eq.-style steering vector for a ULA: element i is
// (1/sqrt(N)) * exp(j * 2*pi * spacing * i * sin(phi)). Throws
// std::domain_error unless |phi| < pi/2.
ChannelVector steering_vector(double phi_rad, const ArrayConfig& cfg);

// Same vector parametrized by spatial frequency u = 2*spacing*sin(phi),
// valid on [-1, 1]. Codebooks grid this domain directly.
ChannelVector steering_from_spatial_freq(double u, int n_bs);

// Draws a scene of n_ue users with clustered multipath. Deterministic in
// (n_ue, cfg, seed, los_fraction, geom).
Scene generate_scene(int n_ue, const ArrayConfig& cfg, std::uint64_t seed, double los_fraction,
                     const SceneGeometry& geom = SceneGeometry{});

// Produces the digital-twin copy: NLOS virtual scatterers displaced by
// scatterer_shift_m, NLOS paths dropped with path_drop_prob (at least one
// path always survives), gain magnitudes jittered by +-gain_jitter_db.
Scene perturb_to_twin(const Scene& scene, const TwinPerturbation& pert, std::uint64_t seed);

// Sum of gain-weighted steering vectors over the UE's paths (no
// normalization). Throws std::out_of_range for a bad UE index.
ChannelVector synthesize_channel(const Scene& scene, std::size_t ue, const ArrayConfig& cfg);

// All UE channels of a scene; when normalize is set, every entry is scaled
// by one common factor so the largest |h_i| over the whole set equals 1.
std::vector<ChannelVector> channel_matrix(const Scene& scene, const ArrayConfig& cfg,
                                          bool normalize = true);

// Scales all channels in place by 1/max|h_i|; returns the scale applied.
// Throws std::domain_error if every channel is zero.
double normalize_channel_set(std::vector<ChannelVector>& channels);

// Versioned binary round trip plus a human-readable JSON dump.
void save_scene(const Scene& scene, const std::string& path);
Scene load_scene(const std::string& path);
void dump_scene_json(const Scene& scene, const std::string& path);

}  // namespace beamlab
