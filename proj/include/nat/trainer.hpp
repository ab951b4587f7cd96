// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * GRPO training loop with pluggable token-selection schemes.
 *
 * Each step: snapshot the behavior policy, roll out G responses per prompt,
 * compute rewards and group advantages on FULL responses, draw per-trajectory
 * masks, accumulate the reweighted gradient of the group objective over
 * retained tokens only, and apply one ascent step (optionally multiple
 * epochs). Rewards and advantages never depend on the mask; only the
 * gradient work is sparsified.
 *
 * Seeds: per-step seed = derive(cfg.seed, kStep, step); per-trajectory
 * rollout and mask seeds hang off the step seed with their own stream tags,
 * so replicate studies are scriptable and bit-reproducible.
 */

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "nat/grpo.hpp"
#include "nat/masking.hpp"
#include "nat/toy.hpp"

namespace nat::train {

/// Sparse gradient over policy logit rows.
using SparseGrad = std::map<toy::ContextKey, std::vector<double>>;

struct TrainConfig {
  masking::SelectionScheme scheme = masking::SelectionScheme::full();
  std::int32_t group_size = 8;       // G >= 2
  std::int32_t groups_per_step = 16; // prompts per optimizer step
  std::int32_t steps = 200;
  double learning_rate = 0.2;
  std::optional<double> grad_clip_norm;  // global-norm clip; none by default
  std::int32_t update_epochs = 1;    // >1 exercises the off-policy clip path
  std::int32_t context_order = 2;    // policy k
  grpo::GrpoParams grpo;
  std::uint64_t seed = 0;
  toy::TaskSpec task;

  void validate() const;
};

struct StepMetrics {
  std::int32_t step = 0;
  double mean_reward = 0.0;
  double entropy = 0.0;    // nats, behavior policy over visited contexts
  double grad_norm = 0.0;  // first-epoch global gradient norm, pre-clip
  double selected_token_ratio = 0.0;
  std::uint64_t forward_token_budget = 0;     // sum of processed lengths
  std::uint64_t forward_attention_proxy = 0;  // sum of processed length^2
  std::uint64_t backward_token_budget = 0;    // tokens contributing gradient
  double clip_fraction = 0.0;  // clipped surrogate terms / retained terms
};

/// Per-step compute budgets for a set of trajectories and their masks.
/// Independent masking cannot shorten the causal forward pass, so urs (and
/// full) charge the full length forward; prefix designs charge the retained
/// prefix in both passes.
struct BudgetCounters {
  std::uint64_t forward_token_budget = 0;
  std::uint64_t forward_attention_proxy = 0;
  std::uint64_t backward_token_budget = 0;
  std::uint64_t full_token_total = 0;
  std::uint64_t full_attention_total = 0;

  double selected_token_ratio() const;
};

BudgetCounters budget_accounting(const masking::SelectionScheme& scheme,
                                 std::span<const std::size_t> full_lengths,
                                 std::span<const masking::Mask> masks);

/// Gradient of the per-token objective at response position t with respect
/// to the policy's logits (nonzero in one row). The surrogate's min() makes
/// the gradient zero exactly where the clipped branch is active.
toy::LogitRowGrad token_loss_grad(const toy::KGramPolicy& policy,
                                  const grpo::Trajectory& traj, std::size_t t,
                                  double advantage,
                                  const grpo::GrpoParams& params);

/// One optimizer step. Mutates the policy in place and reports metrics.
/// `reference` supplies log-probs for the KL term when grpo.kl_beta > 0.
StepMetrics train_step(toy::KGramPolicy& policy, const TrainConfig& cfg,
                       std::uint64_t step_seed,
                       const toy::KGramPolicy* reference = nullptr);

struct TrainResult {
  std::vector<StepMetrics> metrics;
  toy::KGramPolicy policy;
};

/// Fresh uniform policy trained for cfg.steps steps with deterministic
/// per-step seeds. When kl_beta > 0 the initial policy is the KL reference.
TrainResult run_training(const TrainConfig& cfg);

}  // namespace nat::train
