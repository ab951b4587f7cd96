// SPDX-License-Identifier: Apache-2.0

#include "nat/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "nat/util.hpp"

namespace nat::grpo {

namespace {

void check_logp_vector(const std::vector<double>& v, std::size_t expected,
                       const char* name) {
  if (v.size() != expected) {
    throw std::invalid_argument(std::string(name) + " length " +
                                std::to_string(v.size()) +
                                " does not match response length " +
                                std::to_string(expected));
  }
  for (double x : v) {
    if (!std::isfinite(x) || x > 0.0) {
      throw std::invalid_argument(std::string(name) +
                                  " entries must be finite and <= 0");
    }
  }
}

}  // namespace

void Trajectory::validate() const {
  if (response_tokens.empty()) {
    throw std::invalid_argument("trajectory has no response tokens");
  }
  check_logp_vector(logp_current, response_tokens.size(), "logp_current");
  check_logp_vector(logp_behavior, response_tokens.size(), "logp_behavior");
  if (!logp_reference.empty()) {
    check_logp_vector(logp_reference, response_tokens.size(),
                      "logp_reference");
  }
}

void GroupBatch::validate() const {
  if (trajectories.size() < 2) {
    throw std::invalid_argument("group requires at least 2 trajectories");
  }
  for (const Trajectory& t : trajectories) {
    t.validate();
    if (t.prompt_tokens != trajectories.front().prompt_tokens) {
      throw std::invalid_argument(
          "all trajectories in a group must share one prompt");
    }
  }
}

void GrpoParams::validate() const {
  if (!(clip_eps > 0.0) || !(clip_eps < 1.0)) {
    throw std::invalid_argument("clip_eps must lie in (0, 1)");
  }
  if (!(adv_eps > 0.0)) {
    throw std::invalid_argument("adv_eps must be > 0");
  }
  if (kl_beta < 0.0) {
    throw std::invalid_argument("kl_beta must be >= 0");
  }
}

double importance_ratio(double logp_current, double logp_behavior) {
  if (!std::isfinite(logp_current) || !std::isfinite(logp_behavior)) {
    throw std::invalid_argument("importance_ratio requires finite log-probs");
  }
  return std::exp(logp_current - logp_behavior);
}

std::vector<double> group_advantage(std::span<const double> rewards,
                                    double adv_eps) {
  const std::size_t g = rewards.size();
  if (g < 2) {
    throw std::invalid_argument("group_advantage requires at least 2 rewards");
  }
  if (adv_eps < 0.0) {
    throw std::invalid_argument("adv_eps must be >= 0");
  }
  // A degenerate group (every reward identical) is a no-op, not an error:
  // all advantages are exactly zero.
  const auto [min_it, max_it] = std::minmax_element(rewards.begin(),
                                                    rewards.end());
  if (*min_it == *max_it) return std::vector<double>(g, 0.0);
  const double mu = util::mean(rewards);
  util::KahanSum sq;
  for (double r : rewards) sq.add((r - mu) * (r - mu));
  // Population form: divide by G, matching the group-mean normalizer.
  const double sigma = std::sqrt(sq.value() / static_cast<double>(g));
  std::vector<double> adv(g);
  for (std::size_t i = 0; i < g; ++i) {
    const double centered = rewards[i] - mu;
    adv[i] = centered == 0.0 ? 0.0 : centered / (sigma + adv_eps);
  }
  return adv;
}

double clipped_surrogate(double ratio, double advantage, double clip_eps) {
  if (!(ratio > 0.0)) {
    throw std::invalid_argument("importance ratio must be positive");
  }
  const double clipped =
      std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage;
  return std::min(ratio * advantage, clipped);
}

double token_kl(double logp_current, double logp_reference) {
  if (!std::isfinite(logp_current) || !std::isfinite(logp_reference)) {
    throw std::invalid_argument("token_kl requires finite log-probs");
  }
  return logp_current - logp_reference;
}

double token_loss(const Trajectory& traj, std::size_t t, double advantage,
                  const GrpoParams& params) {
  if (t >= traj.length()) {
    throw std::out_of_range("token position " + std::to_string(t) +
                            " out of range for response length " +
                            std::to_string(traj.length()));
  }
  const double ratio =
      importance_ratio(traj.logp_current[t], traj.logp_behavior[t]);
  double loss = clipped_surrogate(ratio, advantage, params.clip_eps);
  if (params.kl_beta > 0.0) {
    if (traj.logp_reference.empty()) {
      throw std::invalid_argument(
          "trajectory has no reference log-probs; set kl_beta = 0 or supply "
          "logp_reference");
    }
    loss -= params.kl_beta *
            token_kl(traj.logp_current[t], traj.logp_reference[t]);
  }
  return loss;
}

double sequence_mean_loss(const Trajectory& traj, double advantage,
                          const GrpoParams& params) {
  const std::size_t n = traj.length();
  util::KahanSum sum;
  for (std::size_t t = 0; t < n; ++t) {
    sum.add(token_loss(traj, t, advantage, params));
  }
  return sum.value() / static_cast<double>(n);
}

double grpo_objective(const GroupBatch& batch, const GrpoParams& params) {
  batch.validate();
  params.validate();
  std::vector<double> rewards;
  rewards.reserve(batch.group_size());
  for (const Trajectory& t : batch.trajectories) rewards.push_back(t.reward);
  const std::vector<double> adv = group_advantage(rewards, params.adv_eps);
  util::KahanSum sum;
  for (std::size_t i = 0; i < batch.group_size(); ++i) {
    sum.add(sequence_mean_loss(batch.trajectories[i], adv[i], params));
  }
  return sum.value() / static_cast<double>(batch.group_size());
}

}  // namespace nat::grpo
