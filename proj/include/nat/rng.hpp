// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Deterministic counter-style random number generation.
 *
 * Every sampler in this library is a pure function of (inputs, seed). The
 * generator is SplitMix64: tiny, fast, platform-independent, and good enough
 * for the Bernoulli/uniform draws the masking and rollout code needs. Seeds
 * for nested work (steps, groups, trajectories, replicates) are derived by
 * hashing the parent seed together with integer stream tags, so replicates
 * are reproducible and statistically independent without shared state.
 *
 * std::random distributions are deliberately avoided: their output is
 * implementation-defined, which would break the byte-identical reproducibility
 * contract of the CLI.
 */

#include <cstdint>

namespace nat::rng {

/// One SplitMix64 mixing step (Steele, Lea, Flood 2014; public domain).
constexpr std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derive a child seed from a parent seed and up to three stream tags.
constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t a,
                               std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = mix(seed ^ 0x2545f4914f6cdd1dULL);
  h = mix(h ^ a);
  h = mix(h ^ b);
  h = mix(h ^ c);
  return h;
}

/// Stream tags used when deriving seeds for nested work. Values are arbitrary
/// but frozen: changing them changes every downstream sample.
enum Stream : std::uint64_t {
  kStep = 0x01,
  kPrompt = 0x02,
  kRollout = 0x03,
  kMask = 0x04,
  kReplicate = 0x05,
  kBattery = 0x06,
};

/// Minimal SplitMix64 stream.
class SplitMix64 {
 public:
  explicit constexpr SplitMix64(std::uint64_t seed) : state_(seed) {}

  constexpr std::uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n) without modulo bias (n >= 1).
  std::uint64_t next_below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next();
    while (v >= limit) v = next();
    return v % n;
  }

 private:
  std::uint64_t state_;
};

}  // namespace nat::rng
