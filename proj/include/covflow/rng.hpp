#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace covflow {

// Deterministic RNG with explicit seed derivation. All distributions are
// implemented on top of the raw 64-bit stream so results are reproducible
// across platforms and standard library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Mixes words into a single derived seed (splitmix64 chain). Used to give
  // independent substreams to samples, layers, epochs, etc.
  static std::uint64_t mix(std::initializer_list<std::uint64_t> words);

  std::uint64_t next_u64();

  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller.
  double gaussian();

  std::uint64_t poisson(double lambda);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace covflow
