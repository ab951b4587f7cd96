// SPDX-License-Identifier: Apache-2.0

#include "nat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "nat/rng.hpp"
#include "nat/util.hpp"

namespace nat::train {

namespace {

struct TrajectoryWork {
  grpo::Trajectory traj;
  double advantage = 0.0;
  masking::Mask mask;
  std::optional<masking::SurvivalSchedule> schedule;
};

/// Surrogate derivative with respect to log pi at position t, i.e. the
/// coefficient multiplying grad log pi. The min() in the surrogate zeroes
/// the derivative when the clipped branch is active.
struct SurrogateSlope {
  double coeff = 0.0;
  bool clipped = false;
};

SurrogateSlope surrogate_slope(double ratio, double advantage,
                               double clip_eps) {
  const double unclipped = ratio * advantage;
  const double clipped =
      std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage;
  SurrogateSlope s;
  if (unclipped <= clipped) {
    // d/dtheta [ratio * A] = ratio * A * grad log pi.
    s.coeff = unclipped;
    s.clipped = false;
  } else {
    s.coeff = 0.0;
    s.clipped = true;
  }
  return s;
}

double sparse_grad_norm(const SparseGrad& grad) {
  util::KahanSum sq;
  for (const auto& [key, row] : grad) {
    for (double g : row) sq.add(g * g);
  }
  return std::sqrt(sq.value());
}

}  // namespace

void TrainConfig::validate() const {
  scheme.validate();
  if (group_size < 2) throw std::invalid_argument("group size must be >= 2");
  if (groups_per_step < 1) {
    throw std::invalid_argument("groups per step must be >= 1");
  }
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("learning rate must be positive");
  }
  if (update_epochs < 1) {
    throw std::invalid_argument("update epochs must be >= 1");
  }
  if (context_order < 0) {
    throw std::invalid_argument("context order must be >= 0");
  }
  grpo.validate();
  task.validate();
}

double BudgetCounters::selected_token_ratio() const {
  if (full_token_total == 0) return 0.0;
  return static_cast<double>(backward_token_budget) /
         static_cast<double>(full_token_total);
}

BudgetCounters budget_accounting(const masking::SelectionScheme& scheme,
                                 std::span<const std::size_t> full_lengths,
                                 std::span<const masking::Mask> masks) {
  if (full_lengths.size() != masks.size()) {
    throw std::invalid_argument("lengths and masks must correspond 1:1");
  }
  BudgetCounters counters;
  for (std::size_t i = 0; i < full_lengths.size(); ++i) {
    const std::uint64_t full = full_lengths[i];
    const std::uint64_t kept = masks[i].popcount();
    counters.full_token_total += full;
    counters.full_attention_total += full * full;
    if (scheme.prefix_structured()) {
      // Only the retained prefix is ever processed.
      counters.forward_token_budget += kept;
      counters.forward_attention_proxy += kept * kept;
      counters.backward_token_budget += kept;
    } else {
      // Causal attention still walks the whole sequence forward.
      counters.forward_token_budget += full;
      counters.forward_attention_proxy += full * full;
      counters.backward_token_budget += kept;
    }
  }
  return counters;
}

toy::LogitRowGrad token_loss_grad(const toy::KGramPolicy& policy,
                                  const grpo::Trajectory& traj, std::size_t t,
                                  double advantage,
                                  const grpo::GrpoParams& params) {
  if (t >= traj.length()) {
    throw std::out_of_range("token position out of range");
  }
  std::vector<toy::Token> context = traj.prompt_tokens;
  context.insert(context.end(), traj.response_tokens.begin(),
                 traj.response_tokens.begin() + static_cast<std::ptrdiff_t>(t));
  const toy::Token token = traj.response_tokens[t];
  const double logp_cur = toy::logprob(policy, context, token);
  const double ratio = grpo::importance_ratio(logp_cur, traj.logp_behavior[t]);
  const SurrogateSlope slope =
      surrogate_slope(ratio, advantage, params.clip_eps);
  const double coeff = slope.coeff - params.kl_beta;

  toy::LogitRowGrad grad = toy::logprob_grad(policy, context, token);
  for (double& g : grad.d_logits) g *= coeff;
  return grad;
}

StepMetrics train_step(toy::KGramPolicy& policy, const TrainConfig& cfg,
                       std::uint64_t step_seed,
                       const toy::KGramPolicy* reference) {
  cfg.validate();
  if (cfg.grpo.kl_beta > 0.0 && reference == nullptr) {
    throw std::invalid_argument(
        "kl_beta > 0 requires a reference policy; pass one or set kl_beta = 0");
  }

  const toy::KGramPolicy behavior = policy;  // rollout snapshot
  const auto num_groups = static_cast<std::size_t>(cfg.groups_per_step);
  const auto group_size = static_cast<std::size_t>(cfg.group_size);
  const double trajectory_count =
      static_cast<double>(num_groups) * static_cast<double>(group_size);

  std::vector<TrajectoryWork> work;
  work.reserve(num_groups * group_size);
  std::vector<std::vector<toy::Token>> visited_contexts;
  util::KahanSum reward_sum;

  for (std::size_t g = 0; g < num_groups; ++g) {
    const std::vector<toy::Token> prompt =
        toy::sample_prompt(cfg.task, rng::derive(step_seed, rng::kPrompt, g));
    std::vector<double> rewards(group_size);
    const std::size_t base = work.size();
    for (std::size_t i = 0; i < group_size; ++i) {
      TrajectoryWork item;
      item.traj = toy::rollout(behavior, cfg.task, prompt,
                               rng::derive(step_seed, rng::kRollout, g, i));
      item.traj.logp_current = item.traj.logp_behavior;  // on-policy at birth
      if (reference != nullptr) {
        item.traj.logp_reference.reserve(item.traj.length());
        std::vector<toy::Token> ctx = prompt;
        for (toy::Token tok : item.traj.response_tokens) {
          item.traj.logp_reference.push_back(toy::logprob(*reference, ctx, tok));
          ctx.push_back(tok);
        }
      }
      rewards[i] = item.traj.reward;
      reward_sum.add(item.traj.reward);
      work.push_back(std::move(item));
    }
    // Advantages come from full-response rewards, untouched by any mask.
    const std::vector<double> adv =
        grpo::group_advantage(rewards, cfg.grpo.adv_eps);
    for (std::size_t i = 0; i < group_size; ++i) {
      TrajectoryWork& item = work[base + i];
      item.advantage = adv[i];
      const std::size_t len = item.traj.length();
      item.mask =
          cfg.scheme.draw(len, rng::derive(step_seed, rng::kMask, g, i));
      item.schedule = cfg.scheme.schedule(len);
      std::vector<toy::Token> ctx = item.traj.prompt_tokens;
      for (toy::Token tok : item.traj.response_tokens) {
        visited_contexts.push_back(ctx);
        ctx.push_back(tok);
      }
    }
  }

  // Budgets reflect the masks actually drawn this step.
  std::vector<std::size_t> lengths;
  std::vector<masking::Mask> masks;
  lengths.reserve(work.size());
  masks.reserve(work.size());
  for (const TrajectoryWork& item : work) {
    lengths.push_back(item.traj.length());
    masks.push_back(item.mask);
  }
  const BudgetCounters budget =
      budget_accounting(cfg.scheme, lengths, masks);

  StepMetrics metrics;
  metrics.mean_reward = reward_sum.value() / trajectory_count;
  metrics.entropy = toy::policy_entropy(behavior, visited_contexts);
  metrics.forward_token_budget = budget.forward_token_budget;
  metrics.forward_attention_proxy = budget.forward_attention_proxy;
  metrics.backward_token_budget = budget.backward_token_budget;
  metrics.selected_token_ratio = budget.selected_token_ratio();

  std::uint64_t clipped_terms = 0;
  std::uint64_t retained_terms = 0;

  for (std::int32_t epoch = 0; epoch < cfg.update_epochs; ++epoch) {
    SparseGrad accum;
    for (const TrajectoryWork& item : work) {
      const std::size_t len = item.traj.length();
      const double inv_len = 1.0 / static_cast<double>(len);
      std::vector<toy::Token> context = item.traj.prompt_tokens;
      for (std::size_t t = 0; t < len; ++t) {
        const std::uint8_t kept = item.mask.bits[t];
        if (!kept && item.mask.kind != masking::MaskKind::independent) {
          break;  // prefix masks: nothing past the cutoff is processed
        }
        if (kept) {
          const toy::Token token = item.traj.response_tokens[t];
          const double logp_cur = toy::logprob(policy, context, token);
          const double ratio =
              grpo::importance_ratio(logp_cur, item.traj.logp_behavior[t]);
          const SurrogateSlope slope =
              surrogate_slope(ratio, item.advantage, cfg.grpo.clip_eps);
          ++retained_terms;
          if (slope.clipped) ++clipped_terms;
          const double coeff = slope.coeff - cfg.grpo.kl_beta;
          // Reweighted token weight inside the group objective.
          const double ht_weight =
              item.schedule ? 1.0 / item.schedule->probs[t] : 1.0;
          const double weight =
              coeff * ht_weight * inv_len / trajectory_count;
          if (weight != 0.0) {
            toy::LogitRowGrad grad = toy::logprob_grad(policy, context, token);
            auto [it, inserted] = accum.try_emplace(
                std::move(grad.key),
                std::vector<double>(grad.d_logits.size(), 0.0));
            std::vector<double>& row = it->second;
            for (std::size_t v = 0; v < row.size(); ++v) {
              row[v] += weight * grad.d_logits[v];
            }
          }
        }
        context.push_back(item.traj.response_tokens[t]);
      }
    }

    const double norm = sparse_grad_norm(accum);
    if (!std::isfinite(norm)) {
      throw std::runtime_error(
          "non-finite gradient in train_step (seed " +
          std::to_string(step_seed) + ", epoch " + std::to_string(epoch) +
          "); aborting");
    }
    if (epoch == 0) metrics.grad_norm = norm;

    double scale = cfg.learning_rate;
    if (cfg.grad_clip_norm && norm > *cfg.grad_clip_norm && norm > 0.0) {
      scale *= *cfg.grad_clip_norm / norm;
    }
    for (const auto& [key, row] : accum) {
      std::vector<double>& target = policy.mutable_logit_row(key);
      for (std::size_t v = 0; v < row.size(); ++v) {
        target[v] += scale * row[v];
      }
    }
  }

  metrics.clip_fraction =
      retained_terms == 0
          ? 0.0
          : static_cast<double>(clipped_terms) /
                static_cast<double>(retained_terms);
  return metrics;
}

TrainResult run_training(const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result;
  result.policy =
      toy::KGramPolicy::make(cfg.task.vocab_size, cfg.context_order);
  const toy::KGramPolicy reference = result.policy;
  const toy::KGramPolicy* ref_ptr =
      cfg.grpo.kl_beta > 0.0 ? &reference : nullptr;
  result.metrics.reserve(static_cast<std::size_t>(cfg.steps));
  for (std::int32_t step = 0; step < cfg.steps; ++step) {
    StepMetrics m = train_step(
        result.policy, cfg,
        rng::derive(cfg.seed, rng::kStep, static_cast<std::uint64_t>(step)),
        ref_ptr);
    m.step = step;
    result.metrics.push_back(m);
  }
  return result;
}

}  // namespace nat::train
