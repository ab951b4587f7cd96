// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Executable statistics for the estimator claims: unbiasedness of reweighted
 * token masking (values and gradients), the closed-form variance identities,
 * and the second-moment inflation of independent masking. Small problems are
 * checked by exhaustive enumeration of mask outcomes (exact, tolerance
 * 1e-12); larger ones by Monte-Carlo with 3-standard-error tolerances.
 *
 * Deterministic truncation appears as a first-class negative control: its
 * unbiasedness reports are expected to FAIL, and the suite treats a passing
 * negative control as an error.
 */

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nat/masking.hpp"
#include "nat/toy.hpp"

namespace nat::verify {

struct TestReport {
  std::string name;
  std::string method;        // "enumeration" | "monte_carlo"
  double statistic = 0.0;    // measured value
  double reference = 0.0;    // expected value
  double tolerance = 0.0;
  std::uint64_t replicates = 0;
  bool passed = false;       // |statistic - reference| <= tolerance
  bool expected_to_fail = false;

  /// A report is acceptable when it passes, unless it is a negative control,
  /// which must fail.
  bool acceptable() const { return passed != expected_to_fail; }

  std::string to_json() const;
};

TestReport make_report(std::string name, std::string method, double statistic,
                       double reference, double tolerance,
                       std::uint64_t replicates, bool expected_to_fail = false);

/// One possible mask realization with its probability.
struct MaskOutcome {
  double prob = 0.0;
  masking::Mask mask;
};

/// Exhaustive mask outcomes for a scheme at the given length. Independent
/// schemes enumerate 2^T realizations and are capped at 2^20; prefix schemes
/// enumerate their cutoffs; deterministic designs have a single outcome.
std::vector<MaskOutcome> enumerate_mask_outcomes(
    const masking::SelectionScheme& scheme, std::size_t length);

bool enumerable(const masking::SelectionScheme& scheme, std::size_t length);

/// The estimate a scheme actually computes for one drawn mask: reweighted
/// for schemes with a survival schedule, the plain prefix mean for
/// deterministic truncation.
double scheme_estimate(std::span<const double> losses,
                       const masking::SelectionScheme& scheme,
                       const masking::Mask& mask);

/// Expectation of the masked estimator versus the full mean. Enumeration
/// when possible (tolerance 1e-12), otherwise Monte-Carlo with a
/// 3-standard-error tolerance. Deterministic truncation is flagged as an
/// expected failure.
TestReport test_ht_unbiasedness(std::span<const double> losses,
                                const masking::SelectionScheme& scheme,
                                std::uint64_t seed,
                                std::uint64_t mc_replicates = 100000);

/// Mean masked policy gradient versus the full-token gradient on a group of
/// rollouts from the given policy state. Enumeration-exact where possible;
/// Monte-Carlo reports a max z-score across components otherwise.
TestReport test_gradient_unbiasedness(const toy::KGramPolicy& policy,
                                      const toy::TaskSpec& task,
                                      const masking::SelectionScheme& scheme,
                                      std::uint64_t seed,
                                      std::uint64_t mc_replicates = 20000);

/// Closed-form variance operations versus exhaustive-enumeration variance.
std::vector<TestReport> test_variance_formulas(
    std::span<const double> losses,
    std::span<const masking::SelectionScheme> designs);

struct SuiteConfig {
  std::uint64_t seed = 20260808;
  std::string filter;  // substring on report names; empty runs everything
};

struct SuiteResult {
  std::vector<TestReport> reports;
  bool ok = true;  // every report acceptable

  std::string to_json() const;
};

/// The registered battery: unbiasedness (values and gradients, positive and
/// negative controls), variance identities including the worked values,
/// second-moment inflation, and mask covariance.
SuiteResult run_suite(const SuiteConfig& config);

}  // namespace nat::verify
