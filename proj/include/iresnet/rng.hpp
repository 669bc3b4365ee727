#pragma once

#include "iresnet/common.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace iresnet {

/// Seeded random stream. Identical seeds give identical sequences on every run;
/// child streams are derived from the seed by a fixed label so that adding a
/// consumer never perturbs the draws of another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  /// Independent stream keyed by `label`, a pure function of (seed, label).
  Rng derive(std::string_view label) const;
  /// Independent stream keyed by an integer offset (per-worker streams).
  Rng derive(std::uint64_t offset) const;

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller; keeps no cached second draw so the engine
  /// state alone determines the rest of the stream.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  Matrix normal_matrix(Index rows, Index cols);
  Matrix rademacher_matrix(Index rows, Index cols);
  Vector unit_vector(Index dim);

  /// Textual engine state, round-trips through restore().
  std::string state() const;
  void restore(const std::string& state);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace iresnet
