// SPDX-License-Identifier: Apache-2.0

#include "nat/ht.hpp"

#include <algorithm>
#include <cmath>

#include "nat/util.hpp"

namespace nat::ht {

void MaskedLossVector::validate() const {
  if (token_losses.empty()) {
    throw std::invalid_argument("masked loss vector must be non-empty");
  }
  if (mask.size() != token_losses.size() ||
      schedule.size() != token_losses.size()) {
    throw std::invalid_argument(
        "losses, mask, and schedule must have equal length");
  }
  if (mask.kind != schedule.kind) {
    throw std::invalid_argument("mask kind and schedule kind must match");
  }
}

double ht_sequence_estimate(const MaskedLossVector& v) {
  v.validate();
  const std::size_t n = v.size();
  util::KahanSum sum;
  for (std::size_t t = 0; t < n; ++t) {
    if (!v.mask.bits[t]) continue;
    const double p = v.schedule.probs[t];
    if (!(p > 0.0)) {
      throw HtViolationError(
          "included token at position " + std::to_string(t) +
          " has inclusion probability <= 0; the estimate cannot be "
          "reweighted (deterministic truncation has no unbiased pathway)");
    }
    sum.add(v.token_losses[t] / p);
  }
  return sum.value() / static_cast<double>(n);
}

double det_prefix_mean_estimate(std::span<const double> token_losses,
                                const masking::Mask& mask) {
  if (mask.size() != token_losses.size()) {
    throw std::invalid_argument("losses and mask must have equal length");
  }
  util::KahanSum sum;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask.bits[t]) sum.add(token_losses[t]);
  }
  return sum.value() / static_cast<double>(mask.size());
}

std::vector<double> ht_masked_gradient(
    std::span<const std::vector<double>> token_grads,
    const masking::Mask& mask, const masking::SurvivalSchedule& schedule) {
  const std::size_t n = token_grads.size();
  if (n == 0) throw std::invalid_argument("token gradients must be non-empty");
  if (mask.size() != n || schedule.size() != n) {
    throw std::invalid_argument(
        "gradients, mask, and schedule must have equal length");
  }
  const std::size_t dim = token_grads.front().size();
  std::vector<util::KahanSum> acc(dim);
  for (std::size_t t = 0; t < n; ++t) {
    if (token_grads[t].size() != dim) {
      throw std::invalid_argument("token gradients must share one dimension");
    }
    if (!mask.bits[t]) continue;
    const double p = schedule.probs[t];
    if (!(p > 0.0)) {
      throw HtViolationError("included token at position " +
                             std::to_string(t) +
                             " has inclusion probability <= 0");
    }
    const double w = 1.0 / p;
    for (std::size_t d = 0; d < dim; ++d) acc[d].add(w * token_grads[t][d]);
  }
  std::vector<double> out(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    out[d] = acc[d].value() / static_cast<double>(n);
  }
  return out;
}

double urs_second_moment_factor(double p) {
  if (!(p > 0.0) || p > 1.0) {
    throw std::invalid_argument("inclusion probability must lie in (0, 1]");
  }
  return 1.0 / p;
}

double independent_masking_variance(
    std::span<const double> losses,
    const masking::SurvivalSchedule& schedule) {
  if (schedule.kind != masking::MaskKind::independent) {
    throw std::invalid_argument(
        "independent-masking variance needs an independent schedule");
  }
  if (schedule.size() != losses.size()) {
    throw std::invalid_argument("losses and schedule must have equal length");
  }
  const double n = static_cast<double>(losses.size());
  util::KahanSum sum;
  for (std::size_t t = 0; t < losses.size(); ++t) {
    const double p = schedule.probs[t];
    if (!(p > 0.0)) {
      throw std::invalid_argument("schedule probabilities must be positive");
    }
    sum.add(losses[t] * losses[t] * (1.0 - p) / p);
  }
  return sum.value() / (n * n);
}

double rpc_stopping_time_variance(std::span<const double> losses,
                                  const masking::CutoffDistribution& dist) {
  if (losses.size() != dist.length()) {
    throw std::invalid_argument("losses must match the cutoff length");
  }
  const double n = static_cast<double>(losses.size());
  const masking::SurvivalSchedule schedule = dist.survival();
  // Running prefix sum of L_t / p_t gives each cutoff's estimate in O(T).
  util::KahanSum weighted_prefix;
  util::KahanSum second_moment;
  for (std::size_t cutoff = 1; cutoff <= dist.length(); ++cutoff) {
    weighted_prefix.add(losses[cutoff - 1] / schedule.probs[cutoff - 1]);
    const double q = dist.mass(cutoff);
    if (q == 0.0) continue;
    const double estimate = weighted_prefix.value() / n;
    second_moment.add(q * estimate * estimate);
  }
  const double full_mean = util::kahan_total(losses) / n;
  return second_moment.value() - full_mean * full_mean;
}

std::vector<double> optimal_schedule(std::span<const double> abs_losses,
                                     double budget, double p_min) {
  const std::size_t n = abs_losses.size();
  if (n == 0) throw std::invalid_argument("losses must be non-empty");
  if (!(budget > 0.0)) throw std::invalid_argument("budget must be positive");
  if (budget > static_cast<double>(n) + 1e-12) {
    throw std::invalid_argument("budget cannot exceed the sequence length");
  }
  double positive_mass = 0.0;
  std::size_t num_zero = 0;
  for (double l : abs_losses) {
    if (l < 0.0) {
      throw std::invalid_argument("absolute losses must be >= 0");
    }
    if (l == 0.0) {
      ++num_zero;
    } else {
      positive_mass += l;
    }
  }
  if (num_zero == n) {
    throw std::invalid_argument("at least one loss must be nonzero");
  }

  std::vector<double> probs(n, 0.0);
  // Zero-loss positions take the positivity floor; the rest of the budget is
  // shared proportionally to |L_t| with clipping at 1 (water-filling).
  double remaining = budget - static_cast<double>(num_zero) * p_min;
  if (!(remaining > 0.0)) {
    throw std::invalid_argument(
        "budget too small to grant every zero-loss position its floor");
  }
  for (std::size_t t = 0; t < n; ++t) {
    if (abs_losses[t] == 0.0) probs[t] = p_min;
  }

  std::vector<std::size_t> active;
  active.reserve(n - num_zero);
  for (std::size_t t = 0; t < n; ++t) {
    if (abs_losses[t] > 0.0) active.push_back(t);
  }
  // Each pass clips saturated entries to 1 and rescales the rest; at most
  // n passes before the active set stabilizes.
  while (!active.empty()) {
    const double scale = remaining / positive_mass;
    bool clipped_any = false;
    std::vector<std::size_t> still_active;
    still_active.reserve(active.size());
    for (std::size_t t : active) {
      if (abs_losses[t] * scale >= 1.0) {
        probs[t] = 1.0;
        remaining -= 1.0;
        positive_mass -= abs_losses[t];
        clipped_any = true;
      } else {
        still_active.push_back(t);
      }
    }
    if (!clipped_any) {
      for (std::size_t t : still_active) {
        probs[t] = abs_losses[t] * scale;
      }
      remaining = 0.0;
      break;
    }
    active = std::move(still_active);
  }
  // Budget beyond what the proportional positions can absorb (all clipped at
  // 1) spills evenly onto the floored zero-loss positions; budget <= T keeps
  // them within (0, 1].
  if (remaining > 0.0 && num_zero > 0) {
    const double delta = remaining / static_cast<double>(num_zero);
    for (std::size_t t = 0; t < n; ++t) {
      if (abs_losses[t] == 0.0) probs[t] = std::min(1.0, p_min + delta);
    }
  }
  return probs;
}

std::string VarianceReport::to_json() const {
  return "{\"mean\":" + util::format_double(mean) +
         ",\"variance\":" + util::format_double(variance) +
         ",\"bias\":" + util::format_double(bias) +
         ",\"mse\":" + util::format_double(mse) + ",\"method\":\"" + method +
         "\"}";
}

VarianceReport mse_decompose(std::span<const double> estimates, double truth,
                             std::string_view method) {
  if (estimates.size() < 2) {
    throw std::invalid_argument("mse_decompose needs at least 2 estimates");
  }
  const double n = static_cast<double>(estimates.size());
  const double mean = util::mean(estimates);
  util::KahanSum sq;
  for (double e : estimates) sq.add((e - mean) * (e - mean));
  VarianceReport report;
  report.mean = mean;
  report.variance = sq.value() / n;
  report.bias = mean - truth;
  report.mse = report.variance + report.bias * report.bias;
  report.method = std::string(method);
  return report;
}

}  // namespace nat::ht
