// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Token-selection designs and their survival schedules.
 *
 * Three mask families:
 *  - independent:          each token kept with its own Bernoulli draw (URS);
 *  - prefix:               a random contiguous prefix survives (RPC);
 *  - deterministic_prefix: a fixed prefix always survives (truncation).
 *
 * A SurvivalSchedule holds the per-position inclusion probabilities p_t that
 * inverse-probability reweighting divides by, so every p_t must be strictly
 * positive. Deterministic truncation has no schedule at all: positions past
 * the cut have inclusion probability zero, which is exactly why it cannot be
 * reweighted into an unbiased estimator.
 *
 * Positions are 0-based throughout; a prefix mask with cutoff L keeps
 * positions 0..L-1.
 */

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace nat::masking {

enum class MaskKind { independent, prefix, deterministic_prefix };

/// Binary per-token inclusion indicators.
struct Mask {
  std::vector<std::uint8_t> bits;
  MaskKind kind = MaskKind::independent;

  std::size_t size() const { return bits.size(); }
  std::size_t popcount() const;

  /// Prefix-kind masks must be non-increasing (ones then zeros).
  void validate() const;
};

/// Per-position inclusion probabilities p_t in (0, 1].
struct SurvivalSchedule {
  std::vector<double> probs;
  MaskKind kind = MaskKind::independent;

  std::size_t size() const { return probs.size(); }

  /// All p_t > 0; prefix schedules additionally need p_0 = 1 and
  /// non-increasing probabilities.
  void validate() const;
};

/// Distribution of the prefix cutoff L over {min_cutoff, ..., length}.
/// The uniform family is what the samplers expose; arbitrary mass sequences
/// are accepted for analysis and tests.
class CutoffDistribution {
 public:
  /// Uniform cutoff on {min_cutoff, ..., length}. min_cutoff must be >= 1;
  /// a min_cutoff above `length` degenerates to full retention (clamped).
  static CutoffDistribution uniform(std::size_t length,
                                    std::size_t min_cutoff = 1);

  /// Explicit probability masses for cutoffs min_cutoff..length; must be
  /// non-negative, sum to 1 (within 1e-12), and give the final cutoff
  /// positive mass.
  static CutoffDistribution with_mass(std::size_t length,
                                      std::size_t min_cutoff,
                                      std::vector<double> mass);

  std::size_t length() const { return length_; }
  std::size_t min_cutoff() const { return min_cutoff_; }
  bool is_uniform() const { return uniform_; }

  /// q(cutoff) for cutoff in {min_cutoff, ..., length}, else 0.
  double mass(std::size_t cutoff) const;

  /// Survival function p_t = Pr(L >= t + 1) for 0-based position t.
  SurvivalSchedule survival() const;

 private:
  CutoffDistribution(std::size_t length, std::size_t min_cutoff,
                     std::vector<double> mass, bool uniform);

  std::size_t length_;
  std::size_t min_cutoff_;
  std::vector<double> mass_;  // mass_[i] = q(min_cutoff + i)
  bool uniform_;
};

/// Independent Bernoulli(p) mask of the given length. Requires 0 < p <= 1
/// (p = 0 would violate the positivity that reweighting relies on).
Mask urs_sample(std::size_t length, double p, std::uint64_t seed);

/// Constant schedule [p, ..., p].
SurvivalSchedule urs_schedule(std::size_t length, double p);

/// Uniform-cutoff prefix schedule: p_t = (T - t) / T for 0-based t.
SurvivalSchedule rpc_survival_uniform(std::size_t length);

/// Min-cutoff prefix schedule: p_t = 1 for the first `min_cutoff` positions,
/// then (T - t) / (T - C + 1). min_cutoff above T clamps to full retention.
SurvivalSchedule rpc_survival_min_cutoff(std::size_t length,
                                         std::size_t min_cutoff);

struct RpcDraw {
  std::size_t cutoff = 0;  // number of retained tokens, in {C, ..., T}
  Mask mask;
};

/// Draw a cutoff from the distribution and build the prefix mask.
RpcDraw rpc_sample(const CutoffDistribution& dist, std::uint64_t seed);

/// Deterministic prefix keeping the first max(1, floor(keep_fraction * T))
/// tokens. No survival schedule exists for this design; callers must not
/// apply inverse-probability weights to it.
Mask det_truncate(std::size_t length, double keep_fraction);

/// E[L] under the cutoff distribution; (C + T) / 2 for the uniform family.
double expected_prefix_length(const CutoffDistribution& dist);

/// Cov(m_s, m_t) = p_t * (1 - p_s) for 0-based s <= t under a prefix
/// schedule. Prefix masks only; the formula has no meaning elsewhere.
double mask_covariance(const SurvivalSchedule& schedule, std::size_t s,
                       std::size_t t);

// ---------------------------------------------------------------------------
// Scheme dispatch shared by the trainer, the verification suite, and the CLI.
// ---------------------------------------------------------------------------

enum class SchemeKind { full, urs, rpc, rpc_min_cutoff, det_trunc };

/// A token-selection design with its parameters. `full` behaves exactly like
/// urs(p = 1): every token kept, unit weights.
struct SelectionScheme {
  SchemeKind kind = SchemeKind::full;
  double p = 0.5;                // urs
  std::size_t min_cutoff = 1;    // rpc_min_cutoff
  double keep_fraction = 0.5;    // det_trunc

  static SelectionScheme full();
  static SelectionScheme urs(double p);
  static SelectionScheme rpc();
  static SelectionScheme rpc_min_cutoff(std::size_t min_cutoff);
  static SelectionScheme det_trunc(double keep_fraction);

  /// Validates parameters against the sampler preconditions.
  void validate() const;

  Mask draw(std::size_t length, std::uint64_t seed) const;

  /// Inclusion probabilities, or nullopt for deterministic truncation.
  std::optional<SurvivalSchedule> schedule(std::size_t length) const;

  /// True when the design retains a contiguous prefix, enabling genuine
  /// forward-pass truncation (rpc, rpc_min_cutoff, det_trunc).
  bool prefix_structured() const;

  std::string label() const;
};

SchemeKind scheme_kind_from_string(const std::string& name);
std::string to_string(SchemeKind kind);

/// Audit forms for run reports: masks as bit strings ("110100..."),
/// schedules as probability arrays.
std::string to_bit_string(const Mask& mask);
std::string schedule_to_json(const SurvivalSchedule& schedule);

}  // namespace nat::masking
