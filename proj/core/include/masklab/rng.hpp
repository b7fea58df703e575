// Deterministic sampling helpers over mt19937_64. Distributions are
// hand-rolled so the engine state alone captures the whole RNG state
// (std::normal_distribution keeps a hidden spare that would leak into
// checkpoints otherwise).
#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace masklab {

// Uniform in [0, 1) with 53 random bits.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [lo, hi], both inclusive.
inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  assert(lo <= hi);
  const auto span = static_cast<std::uint64_t>(hi) - lo + 1;
  return lo + static_cast<int>(rng() % span);
}

// Box-Muller without the cached spare draw.
inline double normal(std::mt19937_64& rng) {
  const double u1 = 1.0 - uniform01(rng);  // (0, 1], keeps log finite
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.141592653589793238462643 * u2);
}

inline std::string rng_state_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 rng_from_state_string(const std::string& state) {
  std::mt19937_64 rng;
  std::istringstream is(state);
  is >> rng;
  return rng;
}

// Independent sub-streams derived from one seed (splitmix-style), so the
// weight init and the data order cannot alias each other.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace masklab
