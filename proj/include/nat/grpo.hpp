// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Full-token GRPO objective: importance ratios, group-relative advantages,
 * the clipped surrogate, an optional KL penalty against a reference policy,
 * and token -> sequence -> group aggregation.
 *
 * Sign convention: all quantities here are values of an objective to be
 * maximized (gradient ascent). Everything is a pure function of its inputs
 * and safe to call concurrently.
 */

#include <cstdint>
#include <span>
#include <vector>

namespace nat::grpo {

using Token = std::int32_t;

/// One sampled response with per-token log-probabilities (nats) under the
/// current, behavior, and (optionally) reference policies, plus its scalar
/// reward. logp_reference empty means "no reference policy".
struct Trajectory {
  std::vector<Token> prompt_tokens;
  std::vector<Token> response_tokens;
  std::vector<double> logp_current;
  std::vector<double> logp_behavior;
  std::vector<double> logp_reference;
  double reward = 0.0;

  std::size_t length() const { return response_tokens.size(); }

  /// Throws std::invalid_argument unless lengths agree, T >= 1, and all
  /// log-probabilities are finite and <= 0.
  void validate() const;
};

/// G >= 2 responses sampled for one shared prompt.
struct GroupBatch {
  std::vector<Trajectory> trajectories;

  std::size_t group_size() const { return trajectories.size(); }

  /// Requires G >= 2, identical prompts, and valid member trajectories.
  void validate() const;
};

struct GrpoParams {
  double clip_eps = 0.2;  // trust-region half-width, in (0, 1)
  double kl_beta = 0.0;   // KL penalty strength, >= 0
  double adv_eps = 1e-6;  // advantage denominator stabilizer, > 0

  void validate() const;
};

/// exp(logp_current - logp_behavior). Throws on non-finite input.
double importance_ratio(double logp_current, double logp_behavior);

/// Group-relative advantages (R_i - mean) / (population std + adv_eps).
/// Requires |rewards| >= 2. Identical rewards give exactly zero advantages.
std::vector<double> group_advantage(std::span<const double> rewards,
                                    double adv_eps);

/// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A). Requires ratio > 0.
double clipped_surrogate(double ratio, double advantage, double clip_eps);

/// Sampled-action KL approximation: logp_current - logp_reference.
double token_kl(double logp_current, double logp_reference);

/// Per-token objective: surrogate minus kl_beta * token_kl. `t` is a 0-based
/// response position. Requesting the KL term (kl_beta > 0) on a trajectory
/// without reference log-probs is an error telling the caller to set
/// kl_beta = 0.
double token_loss(const Trajectory& traj, std::size_t t, double advantage,
                  const GrpoParams& params);

/// Mean of token_loss over the response.
double sequence_mean_loss(const Trajectory& traj, double advantage,
                          const GrpoParams& params);

/// Group objective: mean over trajectories of sequence_mean_loss, with
/// advantages computed from the group's rewards.
double grpo_objective(const GroupBatch& batch, const GrpoParams& params);

}  // namespace nat::grpo
