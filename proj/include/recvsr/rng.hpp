#pragma once

// Named random sub-streams derived from one root seed, so that adding a new
// consumer never perturbs the draws seen by existing ones.

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "recvsr/hash.hpp"

namespace recvsr {

using Rng = std::mt19937_64;

inline Rng substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
  Fnv1a h;
  h.update(name);
  const std::uint64_t tag = h.digest();
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

/// Uniform double in [lo, hi) built from 53 random bits, independent of the
/// standard library's distribution implementation.
inline double uniform(Rng& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

/// Uniform integer in [lo, hi] by rejection sampling.
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(rng());
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t v;
  do v = rng(); while (v >= limit);
  return lo + static_cast<std::int64_t>(v % span);
}

/// Standard normal draw via Box-Muller (one value per call).
inline double normal(Rng& rng) {
  double u1;
  do u1 = uniform(rng, 0.0, 1.0); while (u1 <= 0.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace recvsr
