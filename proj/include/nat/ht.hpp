// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Horvitz-Thompson estimation of the per-sequence mean loss and its gradient
 * from masked tokens, plus the variance / MSE analytics that quantify what
 * each token-selection design costs.
 *
 * The estimator is (1/T) * sum_t (m_t / p_t) * L_t. It is unbiased for the
 * full mean whenever every position has p_t > 0, which is the single property
 * deterministic truncation lacks: its dropped positions have p_t = 0, so it
 * gets no reweighted pathway here, only the plainly biased prefix mean.
 */

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "nat/masking.hpp"

namespace nat::ht {

/// Raised when a mask includes a position whose inclusion probability is not
/// strictly positive; reweighting by 1/p is meaningless there.
class HtViolationError : public std::runtime_error {
 public:
  explicit HtViolationError(const std::string& what)
      : std::runtime_error(what) {}
};

/// Token losses together with the mask that selected them and the schedule
/// that priced the selection.
struct MaskedLossVector {
  std::vector<double> token_losses;
  masking::Mask mask;
  masking::SurvivalSchedule schedule;

  std::size_t size() const { return token_losses.size(); }

  /// Lengths must agree and mask/schedule kinds must match.
  void validate() const;
};

/// Empirical moments of an estimator against a known truth.
/// mse = variance + bias^2 by construction.
struct VarianceReport {
  double mean = 0.0;
  double variance = 0.0;  // population form
  double bias = 0.0;
  double mse = 0.0;
  std::string method;

  std::string to_json() const;
};

/// (1/T) * sum_t (m_t / p_t) * L_t.
double ht_sequence_estimate(const MaskedLossVector& v);

/// Unweighted prefix mean (1/T) * sum of retained losses. This is the
/// estimator deterministic truncation actually computes; it carries the
/// design's bias and is kept separate from the reweighted path on purpose.
double det_prefix_mean_estimate(std::span<const double> token_losses,
                                const masking::Mask& mask);

/// Reweighted gradient (1/T) * sum_t (m_t / p_t) * g_t over dense per-token
/// gradient vectors of equal dimension.
std::vector<double> ht_masked_gradient(
    std::span<const std::vector<double>> token_grads,
    const masking::Mask& mask, const masking::SurvivalSchedule& schedule);

/// Second-moment inflation of a single reweighted score term under
/// independent Bernoulli(p) masking: exactly 1/p.
double urs_second_moment_factor(double p);

/// Estimator variance under independent masking:
/// (1/T^2) * sum_t L_t^2 * (1 - p_t) / p_t.
double independent_masking_variance(std::span<const double> losses,
                                    const masking::SurvivalSchedule& schedule);

/// Exact estimator variance under prefix cutting, by enumerating cutoffs:
/// E[((1/T) * sum_{t<cutoff} L_t / p_t)^2] - ((1/T) * sum_t L_t)^2.
double rpc_stopping_time_variance(std::span<const double> losses,
                                  const masking::CutoffDistribution& dist);

/// Variance-minimizing inclusion probabilities under a budget B = sum p_t:
/// p_t proportional to |L_t|, water-filled into (0, 1]. Zero-loss positions
/// get the floor `p_min` so positivity survives. The output need not be
/// monotone; prefix designs that want monotonicity must impose it themselves.
std::vector<double> optimal_schedule(std::span<const double> abs_losses,
                                     double budget, double p_min = 1e-3);

/// Empirical mean / variance / bias / mse of replicated estimates against a
/// known truth. Requires at least 2 estimates.
VarianceReport mse_decompose(std::span<const double> estimates, double truth,
                             std::string_view method = "monte_carlo");

}  // namespace nat::ht
