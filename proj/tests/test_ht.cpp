// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "nat/ht.hpp"
#include "nat/masking.hpp"
#include "nat/rng.hpp"
#include "nat/util.hpp"

using namespace nat;

namespace {

ht::MaskedLossVector make_vector(std::vector<double> losses,
                                 std::vector<std::uint8_t> bits,
                                 std::vector<double> probs,
                                 masking::MaskKind kind) {
  ht::MaskedLossVector v;
  v.token_losses = std::move(losses);
  v.mask.bits = std::move(bits);
  v.mask.kind = kind;
  v.schedule.probs = std::move(probs);
  v.schedule.kind = kind;
  return v;
}

std::vector<double> random_losses(rng::SplitMix64& gen, std::size_t n) {
  std::vector<double> out(n);
  for (double& x : out) x = -2.0 + 4.0 * gen.next_double();
  return out;
}

}  // namespace

TEST_CASE("ht_sequence_estimate substitutes mask over probability") {
  using masking::MaskKind;
  const auto both = make_vector({2, 4}, {1, 1}, {1.0, 0.5}, MaskKind::prefix);
  CHECK(ht::ht_sequence_estimate(both) == doctest::Approx(5.0).epsilon(1e-12));

  const auto first = make_vector({2, 4}, {1, 0}, {1.0, 0.5}, MaskKind::prefix);
  CHECK(ht::ht_sequence_estimate(first) == doctest::Approx(1.0).epsilon(1e-12));

  // The two prefix masks are equiprobable under the uniform cutoff, so the
  // expectation is the full mean.
  CHECK(0.5 * (5.0 + 1.0) == doctest::Approx(3.0));

  const auto full =
      make_vector({2, 4}, {1, 1}, {1.0, 1.0}, MaskKind::independent);
  CHECK(ht::ht_sequence_estimate(full) == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("ht_sequence_estimate rejects zero-probability inclusions") {
  const auto bad = make_vector({2, 4}, {1, 1}, {1.0, 0.0},
                               masking::MaskKind::deterministic_prefix);
  CHECK_THROWS_AS(ht::ht_sequence_estimate(bad), ht::HtViolationError);

  // Excluded positions with p = 0 never enter the sum.
  const auto excluded = make_vector({2, 4}, {1, 0}, {1.0, 0.0},
                                    masking::MaskKind::deterministic_prefix);
  CHECK(ht::ht_sequence_estimate(excluded) ==
        doctest::Approx(1.0).epsilon(1e-12));

  auto mismatched = make_vector({2, 4}, {1, 1}, {1.0, 0.5},
                                masking::MaskKind::prefix);
  mismatched.mask.kind = masking::MaskKind::independent;
  CHECK_THROWS_AS(ht::ht_sequence_estimate(mismatched), std::invalid_argument);
}

TEST_CASE("ht_sequence_estimate is linear in the losses") {
  rng::SplitMix64 gen(21);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t n = 2 + gen.next_below(6);
    const auto a = random_losses(gen, n);
    const auto b = random_losses(gen, n);
    const double alpha = -1.0 + 2.0 * gen.next_double();
    const double beta = -1.0 + 2.0 * gen.next_double();
    const auto scheme = masking::SelectionScheme::urs(0.5);
    const auto mask = scheme.draw(n, gen.next());
    const auto schedule = *scheme.schedule(n);

    auto with = [&](std::vector<double> losses) {
      ht::MaskedLossVector v;
      v.token_losses = std::move(losses);
      v.mask = mask;
      v.schedule = schedule;
      return ht::ht_sequence_estimate(v);
    };
    std::vector<double> combo(n);
    for (std::size_t t = 0; t < n; ++t) combo[t] = alpha * a[t] + beta * b[t];
    CHECK(with(combo) ==
          doctest::Approx(alpha * with(a) + beta * with(b)).epsilon(1e-11));
  }
}

TEST_CASE("unbiasedness by exhaustive enumeration") {
  rng::SplitMix64 gen(22);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t n = 2 + gen.next_below(5);
    const auto losses = random_losses(gen, n);
    const double mean = util::kahan_total(losses) / static_cast<double>(n);

    // Independent masks: walk every bit pattern.
    const double p = 0.25 + 0.5 * gen.next_double();
    const auto schedule = masking::urs_schedule(n, p);
    double expectation = 0.0;
    for (std::size_t bits = 0; bits < (std::size_t{1} << n); ++bits) {
      ht::MaskedLossVector v;
      v.token_losses = losses;
      v.schedule = schedule;
      v.mask.kind = masking::MaskKind::independent;
      v.mask.bits.resize(n);
      double prob = 1.0;
      for (std::size_t t = 0; t < n; ++t) {
        v.mask.bits[t] = (bits >> t) & 1U;
        prob *= v.mask.bits[t] ? p : 1.0 - p;
      }
      expectation += prob * ht::ht_sequence_estimate(v);
    }
    CHECK(expectation == doctest::Approx(mean).epsilon(1e-12));

    // Prefix masks: walk every cutoff.
    const auto prefix_schedule = masking::rpc_survival_uniform(n);
    double prefix_expectation = 0.0;
    for (std::size_t cutoff = 1; cutoff <= n; ++cutoff) {
      ht::MaskedLossVector v;
      v.token_losses = losses;
      v.schedule = prefix_schedule;
      v.mask.kind = masking::MaskKind::prefix;
      v.mask.bits.resize(n);
      for (std::size_t t = 0; t < n; ++t) v.mask.bits[t] = t < cutoff ? 1 : 0;
      prefix_expectation +=
          ht::ht_sequence_estimate(v) / static_cast<double>(n);
    }
    CHECK(prefix_expectation == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("ht_masked_gradient reweights token gradients") {
  using masking::MaskKind;
  masking::Mask one;
  one.kind = MaskKind::independent;
  one.bits = {1};
  masking::SurvivalSchedule quarter;
  quarter.kind = MaskKind::independent;
  quarter.probs = {0.25};
  const std::vector<std::vector<double>> single = {{1.0, 0.0}};
  const auto scaled = ht::ht_masked_gradient(single, one, quarter);
  CHECK(scaled[0] == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(scaled[1] == 0.0);

  masking::Mask none;
  none.kind = MaskKind::independent;
  none.bits = {0, 0};
  const auto schedule = masking::urs_schedule(2, 0.5);
  const std::vector<std::vector<double>> grads = {{1.0, 0.0}, {0.0, 1.0}};
  const auto zero = ht::ht_masked_gradient(grads, none, schedule);
  CHECK(zero == std::vector<double>{0.0, 0.0});

  // Enumerate the four masks at p = 0.5: the expectation is the full-token
  // mean gradient [0.5, 0.5].
  std::vector<double> expectation(2, 0.0);
  for (int bits = 0; bits < 4; ++bits) {
    masking::Mask m;
    m.kind = MaskKind::independent;
    m.bits = {static_cast<std::uint8_t>(bits & 1),
              static_cast<std::uint8_t>((bits >> 1) & 1)};
    const auto g = ht::ht_masked_gradient(grads, m, schedule);
    for (std::size_t d = 0; d < 2; ++d) expectation[d] += 0.25 * g[d];
  }
  CHECK(expectation[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(expectation[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("second-moment inflation factor") {
  CHECK(ht::urs_second_moment_factor(1.0) == 1.0);
  CHECK(ht::urs_second_moment_factor(0.25) == 4.0);
  CHECK_THROWS_AS(ht::urs_second_moment_factor(0.0), std::invalid_argument);

  // Monte-Carlo oracle on a unit score term at p = 0.5.
  rng::SplitMix64 gen(23);
  const double p = 0.5;
  util::KahanSum sum;
  const std::size_t n = 100000;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = gen.next_double() < p ? 1.0 : 0.0;
    sum.add((m / p) * (m / p));
  }
  CHECK(std::abs(sum.value() / n - 2.0) <= 0.05);
}

TEST_CASE("independent masking variance formula") {
  const auto schedule = masking::urs_schedule(2, 0.5);
  CHECK(ht::independent_masking_variance(std::vector{2.0, 4.0}, schedule) ==
        doctest::Approx(5.0).epsilon(1e-12));

  // Enumeration oracle: the four masks give Var = E[est^2] - mean^2 = 5.
  double second = 0.0;
  for (int bits = 0; bits < 4; ++bits) {
    ht::MaskedLossVector v;
    v.token_losses = {2.0, 4.0};
    v.schedule = schedule;
    v.mask.kind = masking::MaskKind::independent;
    v.mask.bits = {static_cast<std::uint8_t>(bits & 1),
                   static_cast<std::uint8_t>((bits >> 1) & 1)};
    const double est = ht::ht_sequence_estimate(v);
    second += 0.25 * est * est;
  }
  CHECK(second - 9.0 == doctest::Approx(5.0).epsilon(1e-12));

  const auto certain = masking::urs_schedule(3, 1.0);
  CHECK(ht::independent_masking_variance(std::vector{1.0, 2.0, 3.0},
                                         certain) == 0.0);

  const auto single = masking::urs_schedule(1, 0.2);
  CHECK(ht::independent_masking_variance(std::vector{3.0}, single) ==
        doctest::Approx(9.0 * 0.8 / 0.2).epsilon(1e-12));

  const auto prefix = masking::rpc_survival_uniform(2);
  CHECK_THROWS_AS(
      ht::independent_masking_variance(std::vector{2.0, 4.0}, prefix),
      std::invalid_argument);
}

TEST_CASE("rpc stopping-time variance") {
  const auto dist = masking::CutoffDistribution::uniform(2, 1);
  // Estimator takes values 1 and 5 with probability 1/2 each.
  CHECK(ht::rpc_stopping_time_variance(std::vector{2.0, 4.0}, dist) ==
        doctest::Approx(4.0).epsilon(1e-12));

  const auto point = masking::CutoffDistribution::uniform(4, 4);
  CHECK(ht::rpc_stopping_time_variance(std::vector{1.0, 2.0, 3.0, 4.0},
                                       point) == 0.0);

  // Constant losses: enumeration oracle equals the closed-form evaluation.
  rng::SplitMix64 gen(24);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t n = 2 + gen.next_below(5);
    const double c = -1.0 + 2.0 * gen.next_double();
    const std::vector<double> losses(n, c);
    const auto uniform = masking::CutoffDistribution::uniform(n);
    const auto schedule = uniform.survival();
    double second = 0.0;
    for (std::size_t cutoff = 1; cutoff <= n; ++cutoff) {
      double est = 0.0;
      for (std::size_t t = 0; t < cutoff; ++t) {
        est += losses[t] / schedule.probs[t];
      }
      est /= static_cast<double>(n);
      second += uniform.mass(cutoff) * est * est;
    }
    const double mean = c;
    CHECK(ht::rpc_stopping_time_variance(losses, uniform) ==
          doctest::Approx(second - mean * mean).epsilon(1e-11));
  }
}

TEST_CASE("rpc variance equals independent variance plus covariance term") {
  // Same losses, matched per-position inclusion probabilities: the gap is
  // exactly the reweighted covariance sum, by enumeration.
  rng::SplitMix64 gen(25);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t n = 2 + gen.next_below(5);
    const auto losses = random_losses(gen, n);
    const auto dist = masking::CutoffDistribution::uniform(n);
    const auto prefix_schedule = dist.survival();
    masking::SurvivalSchedule matched;
    matched.kind = masking::MaskKind::independent;
    matched.probs = prefix_schedule.probs;

    const double var_rpc = ht::rpc_stopping_time_variance(losses, dist);
    const double var_ind = ht::independent_masking_variance(losses, matched);

    double cov_term = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t t = s + 1; t < n; ++t) {
        cov_term += (losses[s] / prefix_schedule.probs[s]) *
                    (losses[t] / prefix_schedule.probs[t]) *
                    masking::mask_covariance(prefix_schedule, s, t);
      }
    }
    cov_term *= 2.0 / (static_cast<double>(n) * static_cast<double>(n));
    CHECK(var_rpc - var_ind == doctest::Approx(cov_term).epsilon(1e-10));
  }
}

TEST_CASE("optimal schedule water-filling") {
  // Grid-search oracle: minimize 16/p1 + 4/p2 subject to p1 + p2 = 1.5.
  double best_obj = 1e300;
  double best_p1 = 0.0;
  for (int i = 1; i <= 10000; ++i) {
    const double p1 = i * 1e-4;
    const double p2 = 1.5 - p1;
    if (p1 > 1.0 || p2 <= 0.0 || p2 > 1.0) continue;
    const double obj = 16.0 / p1 + 4.0 / p2;
    if (obj < best_obj) {
      best_obj = obj;
      best_p1 = p1;
    }
  }
  CHECK(best_p1 == doctest::Approx(1.0).epsilon(1e-3));

  const auto probs = ht::optimal_schedule(std::vector{4.0, 2.0}, 1.5);
  CHECK(probs[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(probs[1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(16.0 / probs[0] + 4.0 / probs[1] <= best_obj + 1e-6);

  const auto uniform = ht::optimal_schedule(std::vector{3.0, 3.0, 3.0, 3.0},
                                            2.0);
  for (double p : uniform) CHECK(p == doctest::Approx(0.5).epsilon(1e-12));

  const auto everything = ht::optimal_schedule(std::vector{1.0, 5.0, 2.0},
                                               3.0);
  for (double p : everything) CHECK(p == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(ht::optimal_schedule(std::vector{1.0, 2.0}, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(ht::optimal_schedule(std::vector{0.0, 0.0}, 1.0),
                  std::invalid_argument);

  // Zero-loss positions keep a positivity floor rather than dropping to 0.
  const auto floored = ht::optimal_schedule(std::vector{0.0, 3.0, 1.0}, 1.0);
  CHECK(floored[0] == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(floored[0] > 0.0);

  // The proportional solution is not forced monotone; callers can detect
  // non-monotone schedules themselves.
  const auto humped = ht::optimal_schedule(std::vector{1.0, 5.0, 2.0}, 1.6);
  CHECK_FALSE(util::is_non_increasing(humped));
}

TEST_CASE("optimal schedule invariants") {
  rng::SplitMix64 gen(26);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t n = 2 + gen.next_below(8);
    std::vector<double> abs_losses(n);
    for (double& l : abs_losses) {
      l = gen.next_double() < 0.2 ? 0.0 : gen.next_double() * 3.0;
    }
    bool any = false;
    for (double l : abs_losses) any = any || l > 0.0;
    if (!any) abs_losses[0] = 1.0;
    const double budget =
        0.5 + (static_cast<double>(n) - 0.5) * gen.next_double();
    const auto probs = ht::optimal_schedule(abs_losses, budget);

    util::KahanSum total;
    for (double p : probs) {
      CHECK(p > 0.0);
      CHECK(p <= 1.0 + 1e-12);
      total.add(p);
    }
    CHECK(total.value() == doctest::Approx(budget).epsilon(1e-9));

    // Objective no worse than the uniform schedule at the same budget.
    const double uniform_p =
        std::min(1.0, budget / static_cast<double>(n));
    double obj = 0.0, uniform_obj = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      obj += abs_losses[t] * abs_losses[t] / probs[t];
      uniform_obj += abs_losses[t] * abs_losses[t] / uniform_p;
    }
    CHECK(obj <= uniform_obj + 1e-9);
  }
}

TEST_CASE("mse decomposition") {
  const auto exact = ht::mse_decompose(std::vector{3.0, 3.0, 3.0}, 3.0);
  CHECK(exact.bias == 0.0);
  CHECK(exact.variance == 0.0);
  CHECK(exact.mse == 0.0);

  // Deterministic-truncation toy: keep the first of [2, 4] unweighted; the
  // estimator is constantly 1 against truth 3.
  masking::Mask keep_first;
  keep_first.kind = masking::MaskKind::deterministic_prefix;
  keep_first.bits = {1, 0};
  const std::vector<double> losses = {2.0, 4.0};
  std::vector<double> det_estimates(
      1000, ht::det_prefix_mean_estimate(losses, keep_first));
  const auto det = ht::mse_decompose(det_estimates, 3.0);
  CHECK(det.bias == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(det.variance == 0.0);
  CHECK(det.mse == doctest::Approx(4.0).epsilon(1e-12));

  // The unbiased prefix design on the same losses: bias within Monte-Carlo
  // noise, variance near the stopping-time value 4.
  const auto dist = masking::CutoffDistribution::uniform(2);
  const auto schedule = dist.survival();
  const std::size_t n = 100000;
  std::vector<double> estimates;
  estimates.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto draw = masking::rpc_sample(dist, rng::derive(31, rng::kMask, i));
    ht::MaskedLossVector v;
    v.token_losses = losses;
    v.mask = draw.mask;
    v.schedule = schedule;
    estimates.push_back(ht::ht_sequence_estimate(v));
  }
  const auto rpc = ht::mse_decompose(estimates, 3.0);
  const double se = std::sqrt(rpc.variance / static_cast<double>(n));
  CHECK(std::abs(rpc.bias) <= 3.0 * se);
  CHECK(rpc.variance ==
        doctest::Approx(ht::rpc_stopping_time_variance(losses, dist))
            .epsilon(0.05));
  CHECK(rpc.mse ==
        doctest::Approx(rpc.variance + rpc.bias * rpc.bias).epsilon(1e-12));

  CHECK_THROWS_AS(ht::mse_decompose(std::vector{1.0}, 1.0),
                  std::invalid_argument);
}
