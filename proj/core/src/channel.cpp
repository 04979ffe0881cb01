#include "beamlab/channel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "beamlab/rng.hpp"
#include "json.hpp"

namespace beamlab {

namespace {

constexpr double kPi = std::numbers::pi;

void check_array(const ArrayConfig& cfg) {
  if (cfg.n_bs < 2) throw std::invalid_argument("ArrayConfig: n_bs must be >= 2");
  if (!(cfg.spacing_wavelengths > 0.0))
    throw std::invalid_argument("ArrayConfig: spacing_wavelengths must be > 0");
}

double clamp_aod(double aod) {
  constexpr double lim = kPi / 2 - 1e-6;
  return std::clamp(aod, -lim, lim);
}

}  // namespace

ChannelVector steering_from_spatial_freq(double u, int n_bs) {
  ChannelVector b(static_cast<std::size_t>(n_bs));
  const double amp = 1.0 / std::sqrt(static_cast<double>(n_bs));
  for (int i = 0; i < n_bs; ++i) {
    const double phase = kPi * u * static_cast<double>(i);
    b[static_cast<std::size_t>(i)] = std::polar(amp, phase);
  }
  return b;
}

ChannelVector steering_vector(double phi_rad, const ArrayConfig& cfg) {
  check_array(cfg);
  if (!(std::abs(phi_rad) < kPi / 2))
    throw std::domain_error("steering_vector: |phi| must be < pi/2");
  const double u = 2.0 * cfg.spacing_wavelengths * std::sin(phi_rad);
  return steering_from_spatial_freq(u, cfg.n_bs);
}

Scene generate_scene(int n_ue, const ArrayConfig& cfg, std::uint64_t seed, double los_fraction,
                     const SceneGeometry& geom) {
  check_array(cfg);
  if (n_ue < 1) throw std::invalid_argument("generate_scene: n_ue must be >= 1");
  if (los_fraction < 0.0 || los_fraction > 1.0)
    throw std::invalid_argument("generate_scene: los_fraction must be in [0,1]");

  Scene scene;
  scene.rng_seed = seed;
  scene.los_fraction = los_fraction;
  scene.ue_positions.resize(static_cast<std::size_t>(n_ue));
  scene.paths_per_ue.resize(static_cast<std::size_t>(n_ue));

  // Site layout shared by all UEs: angular lobes the users gather in, and
  // the scatterer field that defines the NLOS clusters.
  auto site_eng = rng::engine(rng::derive(seed, rng::Stream::scene, 0));
  std::uniform_real_distribution<double> bearing_dist(-geom.sector_half_angle_rad,
                                                      geom.sector_half_angle_rad);
  std::uniform_real_distribution<double> scat_range_dist(geom.scatterer_range_min_m,
                                                         geom.scatterer_range_max_m);
  std::vector<double> lobe_center(static_cast<std::size_t>(std::max(0, geom.n_ue_clusters)));
  {
    const double margin = 2.0 * geom.ue_cluster_spread_rad;
    std::uniform_real_distribution<double> lobe_dist(-geom.sector_half_angle_rad + margin,
                                                     geom.sector_half_angle_rad - margin);
    for (auto& c : lobe_center) c = lobe_dist(site_eng);
  }
  std::vector<double> scat_bearing(static_cast<std::size_t>(geom.n_scatterers));
  std::vector<double> scat_range(static_cast<std::size_t>(geom.n_scatterers));
  for (int k = 0; k < geom.n_scatterers; ++k) {
    scat_bearing[static_cast<std::size_t>(k)] = bearing_dist(site_eng);
    scat_range[static_cast<std::size_t>(k)] = scat_range_dist(site_eng);
  }

  for (int u = 0; u < n_ue; ++u) {
    auto eng = rng::engine(rng::derive(seed, rng::Stream::scene, static_cast<std::uint64_t>(u) + 1));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    double ue_bearing;
    if (lobe_center.empty()) {
      ue_bearing = bearing_dist(eng);
    } else {
      std::uniform_int_distribution<std::size_t> pick_lobe(0, lobe_center.size() - 1);
      std::normal_distribution<double> offset(0.0, geom.ue_cluster_spread_rad);
      ue_bearing = std::clamp(lobe_center[pick_lobe(eng)] + offset(eng),
                              -geom.sector_half_angle_rad, geom.sector_half_angle_rad);
    }
    const double ue_range =
        geom.ue_range_min_m + (geom.ue_range_max_m - geom.ue_range_min_m) * unit(eng);
    scene.ue_positions[static_cast<std::size_t>(u)] = {ue_range * std::cos(ue_bearing),
                                                       ue_range * std::sin(ue_bearing)};

    const bool is_los = unit(eng) < los_fraction;
    std::uniform_int_distribution<int> l_dist(1, geom.l_max);
    const int n_paths = l_dist(eng);
    const int n_nlos = is_los ? n_paths - 1 : n_paths;

    // Distance attenuation shared by all of this UE's paths (amplitude dB).
    const double range_db =
        -10.0 * geom.range_loss_exponent * std::log10(ue_range / geom.ue_range_min_m);

    std::vector<PathComponent> paths;
    paths.reserve(static_cast<std::size_t>(n_paths));

    std::normal_distribution<double> nlos_db_dist(geom.nlos_gain_mean_db, geom.nlos_gain_sigma_db);
    std::uniform_int_distribution<int> pick_scat(0, geom.n_scatterers - 1);
    std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * kPi);

    double max_nlos_db = geom.nlos_gain_mean_db;
    for (int l = 0; l < n_nlos; ++l) {
      const int k = pick_scat(eng);
      // Laplacian angular spread around the cluster bearing.
      const double v = unit(eng) - 0.5;
      const double lap = -geom.cluster_angle_spread_rad * std::copysign(1.0, v) *
                         std::log(1.0 - 2.0 * std::abs(v));
      PathComponent p;
      p.aod_rad = clamp_aod(scat_bearing[static_cast<std::size_t>(k)] + lap);
      p.scatter_range_m = scat_range[static_cast<std::size_t>(k)];
      p.is_los = false;
      const double mag_db = nlos_db_dist(eng) + range_db;
      max_nlos_db = std::max(max_nlos_db, mag_db);
      p.gain = std::polar(std::pow(10.0, mag_db / 20.0), phase_dist(eng));
      paths.push_back(p);
    }

    if (is_los) {
      std::uniform_real_distribution<double> adv_dist(geom.los_advantage_min_db,
                                                      geom.los_advantage_max_db);
      PathComponent p;
      p.aod_rad = clamp_aod(ue_bearing);
      p.scatter_range_m = ue_range;
      p.is_los = true;
      const double base_db = n_nlos > 0 ? max_nlos_db : geom.nlos_gain_mean_db + range_db;
      p.gain = std::polar(std::pow(10.0, (base_db + adv_dist(eng)) / 20.0), phase_dist(eng));
      paths.insert(paths.begin(), p);
    }

    scene.paths_per_ue[static_cast<std::size_t>(u)] = std::move(paths);
  }
  return scene;
}

Scene perturb_to_twin(const Scene& scene, const TwinPerturbation& pert, std::uint64_t seed) {
  if (pert.scatterer_shift_m < 0.0 || pert.gain_jitter_db < 0.0 || pert.path_drop_prob < 0.0 ||
      pert.path_drop_prob > 1.0)
    throw std::invalid_argument("perturb_to_twin: invalid perturbation");

  Scene twin = scene;
  for (std::size_t u = 0; u < scene.n_ue(); ++u) {
    const auto& orig = scene.paths_per_ue[u];
    auto eng = rng::engine(rng::derive(seed, rng::Stream::twin, u));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<PathComponent> kept;
    kept.reserve(orig.size());
    for (const auto& path : orig) {
      PathComponent p = path;
      if (!p.is_los && pert.scatterer_shift_m > 0.0) {
        // Displace the virtual scatterer in the plane; the AoD moves by at
        // most asin(shift / range).
        const double theta = 2.0 * kPi * unit(eng);
        const double r = p.scatter_range_m;
        const double x = r * std::cos(p.aod_rad) + pert.scatterer_shift_m * std::cos(theta);
        const double y = r * std::sin(p.aod_rad) + pert.scatterer_shift_m * std::sin(theta);
        p.aod_rad = clamp_aod(std::atan2(y, x));
        p.scatter_range_m = std::hypot(x, y);
      }
      bool drop = false;
      if (!p.is_los && pert.path_drop_prob > 0.0) drop = unit(eng) < pert.path_drop_prob;
      if (pert.gain_jitter_db > 0.0) {
        const double j = (2.0 * unit(eng) - 1.0) * pert.gain_jitter_db;
        p.gain *= std::pow(10.0, j / 20.0);
      }
      if (!drop) kept.push_back(p);
    }

    if (kept.empty()) {
      // Every path was dropped; retain the strongest original one.
      const auto strongest =
          std::max_element(orig.begin(), orig.end(), [](const auto& a, const auto& b) {
            return std::abs(a.gain) < std::abs(b.gain);
          });
      kept.push_back(*strongest);
    }
    twin.paths_per_ue[u] = std::move(kept);
  }
  return twin;
}

ChannelVector synthesize_channel(const Scene& scene, std::size_t ue, const ArrayConfig& cfg) {
  check_array(cfg);
  if (ue >= scene.n_ue()) throw std::out_of_range("synthesize_channel: ue index out of range");
  ChannelVector h(static_cast<std::size_t>(cfg.n_bs), {0.0, 0.0});
  for (const auto& path : scene.paths_per_ue[ue]) {
    const ChannelVector b = steering_vector(path.aod_rad, cfg);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += path.gain * b[i];
  }
  return h;
}

double normalize_channel_set(std::vector<ChannelVector>& channels) {
  double peak = 0.0;
  for (const auto& h : channels)
    for (const auto& v : h) peak = std::max(peak, std::abs(v));
  if (!(peak > 0.0)) throw std::domain_error("normalize_channel_set: all channels are zero");
  const double scale = 1.0 / peak;
  for (auto& h : channels)
    for (auto& v : h) v *= scale;
  return scale;
}

std::vector<ChannelVector> channel_matrix(const Scene& scene, const ArrayConfig& cfg,
                                          bool normalize) {
  std::vector<ChannelVector> out(scene.n_ue());
  for (std::size_t u = 0; u < scene.n_ue(); ++u) out[u] = synthesize_channel(scene, u, cfg);
  if (normalize) normalize_channel_set(out);
  return out;
}

namespace {

constexpr char kSceneMagic[4] = {'B', 'L', 'S', 'C'};
constexpr std::uint16_t kSceneVersion = 1;

template <typename T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("scene file: truncated read");
  return v;
}

}  // namespace

void save_scene(const Scene& scene, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_scene: cannot open " + path);
  os.write(kSceneMagic, 4);
  put(os, kSceneVersion);
  put(os, scene.rng_seed);
  put(os, scene.los_fraction);
  put(os, static_cast<std::uint32_t>(scene.n_ue()));
  for (std::size_t u = 0; u < scene.n_ue(); ++u) {
    put(os, scene.ue_positions[u][0]);
    put(os, scene.ue_positions[u][1]);
    put(os, static_cast<std::uint32_t>(scene.paths_per_ue[u].size()));
    for (const auto& p : scene.paths_per_ue[u]) {
      put(os, p.gain.real());
      put(os, p.gain.imag());
      put(os, p.aod_rad);
      put(os, p.scatter_range_m);
      put(os, static_cast<std::uint8_t>(p.is_los ? 1 : 0));
    }
  }
  if (!os) throw std::runtime_error("save_scene: write failed for " + path);
}

Scene load_scene(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_scene: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kSceneMagic, 4) != 0)
    throw std::runtime_error("load_scene: bad magic in " + path);
  const auto version = get<std::uint16_t>(is);
  if (version != kSceneVersion) throw std::runtime_error("load_scene: unsupported version");
  Scene scene;
  scene.rng_seed = get<std::uint64_t>(is);
  scene.los_fraction = get<double>(is);
  const auto n_ue = get<std::uint32_t>(is);
  scene.ue_positions.resize(n_ue);
  scene.paths_per_ue.resize(n_ue);
  for (std::uint32_t u = 0; u < n_ue; ++u) {
    scene.ue_positions[u][0] = get<double>(is);
    scene.ue_positions[u][1] = get<double>(is);
    const auto n_paths = get<std::uint32_t>(is);
    scene.paths_per_ue[u].resize(n_paths);
    for (std::uint32_t l = 0; l < n_paths; ++l) {
      auto& p = scene.paths_per_ue[u][l];
      const double re = get<double>(is);
      const double im = get<double>(is);
      p.gain = {re, im};
      p.aod_rad = get<double>(is);
      p.scatter_range_m = get<double>(is);
      p.is_los = get<std::uint8_t>(is) != 0;
    }
  }
  return scene;
}

void dump_scene_json(const Scene& scene, const std::string& path) {
  nlohmann::json j;
  j["rng_seed"] = scene.rng_seed;
  j["los_fraction"] = scene.los_fraction;
  j["ue_positions"] = nlohmann::json::array();
  j["paths_per_ue"] = nlohmann::json::array();
  for (std::size_t u = 0; u < scene.n_ue(); ++u) {
    j["ue_positions"].push_back({scene.ue_positions[u][0], scene.ue_positions[u][1]});
    nlohmann::json paths = nlohmann::json::array();
    for (const auto& p : scene.paths_per_ue[u]) {
      paths.push_back({{"gain_re", p.gain.real()},
                       {"gain_im", p.gain.imag()},
                       {"aod_rad", p.aod_rad},
                       {"scatter_range_m", p.scatter_range_m},
                       {"is_los", p.is_los}});
    }
    j["paths_per_ue"].push_back(std::move(paths));
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("dump_scene_json: cannot open " + path);
  os << j.dump(2) << "\n";
}

}  // namespace beamlab
