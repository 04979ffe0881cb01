#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace beamlab::rng {

// Stream tags for deriving stage-specific seeds from one root seed.
// Keeping them fixed means stages can be re-run in isolation and still
// see the same random stream.
enum class Stream : std::uint64_t {
  scene = 1,
  twin = 2,
  noise = 3,
  init = 4,
  shuffle = 5,
  shap = 6,
  lsh = 7,
  fgsm = 8,
  split = 9,
  sample = 10,
  eval = 11,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Folds a path of tags/indices into a root seed. Same path, same seed,
// independent of evaluation order elsewhere.
inline std::uint64_t derive(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(root);
  for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline std::uint64_t derive(std::uint64_t root, Stream tag) {
  return derive(root, {static_cast<std::uint64_t>(tag)});
}

inline std::uint64_t derive(std::uint64_t root, Stream tag, std::uint64_t index) {
  return derive(root, {static_cast<std::uint64_t>(tag), index});
}

inline std::mt19937_64 engine(std::uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace beamlab::rng
