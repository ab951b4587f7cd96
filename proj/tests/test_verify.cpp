// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "nat/rng.hpp"
#include "nat/util.hpp"
#include "nat/verify.hpp"

using namespace nat;

TEST_CASE("mask outcome enumeration is a probability distribution") {
  for (auto scheme :
       {masking::SelectionScheme::urs(0.3), masking::SelectionScheme::rpc(),
        masking::SelectionScheme::rpc_min_cutoff(2),
        masking::SelectionScheme::det_trunc(0.5),
        masking::SelectionScheme::full()}) {
    for (std::size_t n : {1, 3, 6}) {
      const auto outcomes = verify::enumerate_mask_outcomes(scheme, n);
      util::KahanSum total;
      for (const auto& o : outcomes) {
        CHECK(o.mask.size() == n);
        total.add(o.prob);
      }
      CHECK(total.value() == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK(verify::enumerate_mask_outcomes(masking::SelectionScheme::urs(0.5), 3)
            .size() == 8);
  CHECK(verify::enumerate_mask_outcomes(masking::SelectionScheme::rpc(), 5)
            .size() == 5);
  CHECK_FALSE(verify::enumerable(masking::SelectionScheme::urs(0.5), 30));
  CHECK_THROWS_AS(
      verify::enumerate_mask_outcomes(masking::SelectionScheme::urs(0.5), 30),
      std::invalid_argument);
}

TEST_CASE("ht unbiasedness passes for positive schedules") {
  const std::vector<double> losses = {2.0, 4.0};
  const auto rpc =
      verify::test_ht_unbiasedness(losses, masking::SelectionScheme::rpc(), 1);
  CHECK(rpc.method == "enumeration");
  CHECK(rpc.statistic == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(rpc.reference == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(rpc.passed);
  CHECK(rpc.acceptable());

  // Single always-kept token: every scheme is exact.
  const std::vector<double> single = {1.375};
  for (auto scheme :
       {masking::SelectionScheme::urs(0.5), masking::SelectionScheme::rpc(),
        masking::SelectionScheme::full()}) {
    const auto r = verify::test_ht_unbiasedness(single, scheme, 2);
    CHECK(r.passed);
  }

  // Large T goes through Monte-Carlo with a 3-SE band.
  rng::SplitMix64 gen(62);
  std::vector<double> long_losses(20);
  for (double& l : long_losses) l = -2.0 + 4.0 * gen.next_double();
  const auto mc = verify::test_ht_unbiasedness(
      long_losses, masking::SelectionScheme::urs(0.3), 3);
  CHECK(mc.method == "monte_carlo");
  CHECK(mc.replicates == 100000);
  CHECK(mc.passed);
}

TEST_CASE("deterministic truncation is an expected unbiasedness failure") {
  const std::vector<double> losses = {1.0, 2.0, 3.0, 4.0};
  const auto det = verify::test_ht_unbiasedness(
      losses, masking::SelectionScheme::det_trunc(0.5), 4);
  CHECK(det.expected_to_fail);
  CHECK_FALSE(det.passed);
  CHECK(det.acceptable());
  // Bias is the lost tail: estimate (1+2)/4 versus truth 2.5.
  CHECK(det.statistic == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(det.statistic - det.reference ==
        doctest::Approx(-(3.0 + 4.0) / 4.0).epsilon(1e-12));
}

TEST_CASE("gradient unbiasedness: exact for prefix cutting, fails for det") {
  toy::TaskSpec task;
  task.vocab_size = 7;
  task.prompt_length = 2;
  task.max_response_length = 6;
  rng::SplitMix64 gen(63);
  for (int rep = 0; rep < 5; ++rep) {
    auto policy = toy::KGramPolicy::make(task.vocab_size, 2);
    for (int c = 0; c < 10; ++c) {
      toy::ContextKey key = {static_cast<toy::Token>(gen.next_below(6)),
                             static_cast<toy::Token>(gen.next_below(6))};
      for (double& v : policy.mutable_logit_row(key)) {
        v = -1.0 + 2.0 * gen.next_double();
      }
    }
    const auto rpc = verify::test_gradient_unbiasedness(
        policy, task, masking::SelectionScheme::rpc(), gen.next());
    CHECK(rpc.method == "enumeration");
    CHECK(rpc.passed);

    const auto identity = verify::test_gradient_unbiasedness(
        policy, task, masking::SelectionScheme::urs(1.0), gen.next());
    CHECK(identity.passed);

    const auto det = verify::test_gradient_unbiasedness(
        policy, task, masking::SelectionScheme::det_trunc(0.5), gen.next());
    CHECK(det.expected_to_fail);
    CHECK_FALSE(det.passed);
    CHECK(det.statistic > 1e-6);  // nonzero bias reported
  }
}

TEST_CASE("variance formulas match enumeration") {
  const std::vector<double> losses = {2.0, 4.0};
  const std::vector<masking::SelectionScheme> designs = {
      masking::SelectionScheme::urs(0.5), masking::SelectionScheme::rpc(),
      masking::SelectionScheme::urs(1.0)};
  const auto reports = verify::test_variance_formulas(losses, designs);
  REQUIRE(reports.size() == 3);
  CHECK(reports[0].statistic == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(reports[1].statistic == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(reports[2].statistic == doctest::Approx(0.0).epsilon(1e-12));
  for (const auto& r : reports) {
    CHECK(r.passed);
    CHECK(r.method == "enumeration");
  }
}

TEST_CASE("suite runs clean and honors the filter") {
  verify::SuiteConfig config;
  const auto result = verify::run_suite(config);
  CHECK(result.ok);
  CHECK(result.reports.size() > 40);

  std::size_t negative_controls = 0;
  for (const auto& r : result.reports) {
    CHECK(r.acceptable());
    if (r.expected_to_fail) {
      ++negative_controls;
      CHECK_FALSE(r.passed);
    }
  }
  CHECK(negative_controls >= 2);

  verify::SuiteConfig filtered = config;
  filtered.filter = "variance";
  const auto variance_only = verify::run_suite(filtered);
  CHECK(variance_only.ok);
  CHECK(variance_only.reports.size() > 0);
  CHECK(variance_only.reports.size() < result.reports.size());
  for (const auto& r : variance_only.reports) {
    CHECK(r.name.find("variance") != std::string::npos);
  }

  // A filter that matches nothing: vacuous pass.
  verify::SuiteConfig none = config;
  none.filter = "no-such-test";
  const auto empty = verify::run_suite(none);
  CHECK(empty.ok);
  CHECK(empty.reports.empty());
}

TEST_CASE("suite verdicts are stable across seeds") {
  // Tolerances absorb Monte-Carlo noise: the suite stays green whatever the
  // battery seed.
  for (std::uint64_t seed : {20260808ULL, 1ULL, 999ULL}) {
    verify::SuiteConfig config;
    config.seed = seed;
    const auto result = verify::run_suite(config);
    CHECK(result.ok);
  }
}

TEST_CASE("reports serialize to json") {
  const auto report =
      verify::make_report("demo", "enumeration", 1.0, 1.0, 1e-12, 0, false);
  const std::string text = report.to_json();
  CHECK(text.find("\"name\":\"demo\"") != std::string::npos);
  CHECK(text.find("\"passed\":true") != std::string::npos);

  verify::SuiteConfig config;
  config.filter = "worked";
  const auto result = verify::run_suite(config);
  const std::string suite_text = result.to_json();
  CHECK(suite_text.front() == '[');  // report array
  CHECK(suite_text.find("variance_worked") != std::string::npos);
}
