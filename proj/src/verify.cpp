// SPDX-License-Identifier: Apache-2.0

#include "nat/verify.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "nat/grpo.hpp"
#include "nat/ht.hpp"
#include "nat/rng.hpp"
#include "nat/trainer.hpp"
#include "nat/util.hpp"

namespace nat::verify {

namespace {

constexpr std::size_t kEnumerationCap = std::size_t{1} << 20;
constexpr double kExactTolerance = 1e-12;

std::vector<double> random_losses(std::size_t n, rng::SplitMix64& gen,
                                  double lo = -2.0, double hi = 2.0) {
  std::vector<double> out(n);
  for (double& x : out) x = lo + (hi - lo) * gen.next_double();
  return out;
}

}  // namespace

TestReport make_report(std::string name, std::string method, double statistic,
                       double reference, double tolerance,
                       std::uint64_t replicates, bool expected_to_fail) {
  TestReport r;
  r.name = std::move(name);
  r.method = std::move(method);
  r.statistic = statistic;
  r.reference = reference;
  r.tolerance = tolerance;
  r.replicates = replicates;
  r.passed = std::abs(statistic - reference) <= tolerance;
  r.expected_to_fail = expected_to_fail;
  return r;
}

std::string TestReport::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["method"] = method;
  j["statistic"] = statistic;
  j["reference"] = reference;
  j["tolerance"] = tolerance;
  j["replicates"] = replicates;
  j["passed"] = passed;
  j["expected_to_fail"] = expected_to_fail;
  return j.dump();
}

bool enumerable(const masking::SelectionScheme& scheme, std::size_t length) {
  using masking::SchemeKind;
  switch (scheme.kind) {
    case SchemeKind::urs:
      return length < 63 && (std::size_t{1} << length) <= kEnumerationCap;
    case SchemeKind::full:
    case SchemeKind::rpc:
    case SchemeKind::rpc_min_cutoff:
    case SchemeKind::det_trunc:
      return true;
  }
  return false;
}

std::vector<MaskOutcome> enumerate_mask_outcomes(
    const masking::SelectionScheme& scheme, std::size_t length) {
  using masking::Mask;
  using masking::MaskKind;
  using masking::SchemeKind;
  if (length < 1) throw std::invalid_argument("length must be >= 1");
  std::vector<MaskOutcome> outcomes;
  switch (scheme.kind) {
    case SchemeKind::full:
    case SchemeKind::det_trunc: {
      MaskOutcome o;
      o.prob = 1.0;
      o.mask = scheme.draw(length, 0);
      outcomes.push_back(std::move(o));
      break;
    }
    case SchemeKind::urs: {
      if (!enumerable(scheme, length)) {
        throw std::invalid_argument(
            "independent masking enumeration capped at 2^20 outcomes");
      }
      const std::size_t count = std::size_t{1} << length;
      outcomes.reserve(count);
      for (std::size_t bits = 0; bits < count; ++bits) {
        MaskOutcome o;
        o.mask.kind = MaskKind::independent;
        o.mask.bits.resize(length);
        double prob = 1.0;
        for (std::size_t t = 0; t < length; ++t) {
          const bool kept = (bits >> t) & 1U;
          o.mask.bits[t] = kept ? 1 : 0;
          prob *= kept ? scheme.p : 1.0 - scheme.p;
        }
        o.prob = prob;
        outcomes.push_back(std::move(o));
      }
      break;
    }
    case SchemeKind::rpc:
    case SchemeKind::rpc_min_cutoff: {
      const std::size_t min_cutoff =
          scheme.kind == SchemeKind::rpc
              ? 1
              : std::min(scheme.min_cutoff, length);
      const auto dist = masking::CutoffDistribution::uniform(length, min_cutoff);
      for (std::size_t c = dist.min_cutoff(); c <= length; ++c) {
        MaskOutcome o;
        o.prob = dist.mass(c);
        o.mask.kind = MaskKind::prefix;
        o.mask.bits.resize(length);
        for (std::size_t t = 0; t < length; ++t) {
          o.mask.bits[t] = t < c ? 1 : 0;
        }
        outcomes.push_back(std::move(o));
      }
      break;
    }
  }
  return outcomes;
}

double scheme_estimate(std::span<const double> losses,
                       const masking::SelectionScheme& scheme,
                       const masking::Mask& mask) {
  if (scheme.kind == masking::SchemeKind::det_trunc) {
    return ht::det_prefix_mean_estimate(losses, mask);
  }
  ht::MaskedLossVector v;
  v.token_losses.assign(losses.begin(), losses.end());
  v.mask = mask;
  v.schedule = *scheme.schedule(losses.size());
  return ht::ht_sequence_estimate(v);
}

TestReport test_ht_unbiasedness(std::span<const double> losses,
                                const masking::SelectionScheme& scheme,
                                std::uint64_t seed,
                                std::uint64_t mc_replicates) {
  const std::size_t n = losses.size();
  const double full_mean = util::kahan_total(losses) / static_cast<double>(n);
  const bool negative_control =
      scheme.kind == masking::SchemeKind::det_trunc;
  const std::string name = "ht_unbiasedness/" + scheme.label() + "/T" +
                           std::to_string(n);

  // Independent masks have 2^T outcomes; enumerate up to T = 12 and fall
  // back to Monte-Carlo beyond. Prefix designs enumerate at any length.
  const bool use_enumeration =
      scheme.kind == masking::SchemeKind::urs ? n <= 12 : enumerable(scheme, n);
  if (use_enumeration) {
    util::KahanSum expectation;
    for (const MaskOutcome& outcome : enumerate_mask_outcomes(scheme, n)) {
      expectation.add(outcome.prob * scheme_estimate(losses, scheme, outcome.mask));
    }
    return make_report(name, "enumeration", expectation.value(), full_mean,
                       kExactTolerance, 0, negative_control);
  }

  util::KahanSum sum;
  util::KahanSum sum_sq;
  for (std::uint64_t i = 0; i < mc_replicates; ++i) {
    const masking::Mask mask =
        scheme.draw(n, rng::derive(seed, rng::kReplicate, i));
    const double est = scheme_estimate(losses, scheme, mask);
    sum.add(est);
    sum_sq.add(est * est);
  }
  const double count = static_cast<double>(mc_replicates);
  const double mean = sum.value() / count;
  const double var = std::max(0.0, sum_sq.value() / count - mean * mean);
  const double se = std::sqrt(var / count);
  return make_report(name, "monte_carlo", mean, full_mean, 3.0 * se,
                     mc_replicates, negative_control);
}

namespace {

using GradTable = std::map<toy::ContextKey, std::vector<double>>;

void grad_table_add(GradTable& table, const toy::ContextKey& key,
                    const std::vector<double>& row, double weight) {
  auto [it, inserted] =
      table.try_emplace(key, std::vector<double>(row.size(), 0.0));
  for (std::size_t v = 0; v < row.size(); ++v) {
    it->second[v] += weight * row[v];
  }
}

double grad_table_max_abs_diff(const GradTable& a, const GradTable& b) {
  double worst = 0.0;
  auto scan = [&worst](const GradTable& lhs, const GradTable& rhs) {
    for (const auto& [key, row] : lhs) {
      const auto it = rhs.find(key);
      for (std::size_t v = 0; v < row.size(); ++v) {
        const double other = it == rhs.end() ? 0.0 : it->second[v];
        worst = std::max(worst, std::abs(row[v] - other));
      }
    }
  };
  scan(a, b);
  scan(b, a);
  return worst;
}

}  // namespace

TestReport test_gradient_unbiasedness(const toy::KGramPolicy& policy,
                                      const toy::TaskSpec& task,
                                      const masking::SelectionScheme& scheme,
                                      std::uint64_t seed,
                                      std::uint64_t mc_replicates) {
  // Fix a group of trajectories; masks are the only randomness from here on.
  constexpr std::size_t kGroup = 4;
  const std::vector<toy::Token> prompt =
      toy::sample_prompt(task, rng::derive(seed, rng::kPrompt, 0));
  std::vector<grpo::Trajectory> group;
  std::vector<double> rewards;
  for (std::size_t i = 0; i < kGroup; ++i) {
    grpo::Trajectory traj = toy::rollout(policy, task, prompt,
                                         rng::derive(seed, rng::kRollout, i));
    traj.logp_current = traj.logp_behavior;
    rewards.push_back(traj.reward);
    group.push_back(std::move(traj));
  }
  // Force a reward split so the advantages are not identically zero.
  rewards.front() = 1.0;
  rewards.back() = 0.0;
  const std::vector<double> advantages = grpo::group_advantage(rewards, 1e-6);
  const grpo::GrpoParams params;

  // Pick the longest trajectory; short ones make the enumeration trivial.
  std::size_t pick = 0;
  for (std::size_t i = 1; i < group.size(); ++i) {
    if (group[i].length() > group[pick].length()) pick = i;
  }
  grpo::Trajectory traj = group[pick];
  if (traj.length() < 3) {
    // Degenerate rollout (immediate eos everywhere); fix a synthetic
    // response so the mask enumeration is non-trivial.
    traj.response_tokens.clear();
    traj.logp_behavior.clear();
    std::vector<toy::Token> ctx = prompt;
    for (toy::Token tok : {toy::Token{0}, toy::Token{1}, toy::Token{2},
                           toy::Token{0}}) {
      traj.logp_behavior.push_back(toy::logprob(policy, ctx, tok));
      traj.response_tokens.push_back(tok);
      ctx.push_back(tok);
    }
    traj.logp_current = traj.logp_behavior;
  }
  double advantage = advantages[pick];
  if (std::abs(advantage) < 0.5) advantage = 1.0;
  const std::size_t len = traj.length();
  const double inv_len = 1.0 / static_cast<double>(len);

  std::vector<toy::LogitRowGrad> token_grads;
  token_grads.reserve(len);
  for (std::size_t t = 0; t < len; ++t) {
    token_grads.push_back(
        train::token_loss_grad(policy, traj, t, advantage, params));
  }

  GradTable full_grad;
  for (const toy::LogitRowGrad& g : token_grads) {
    grad_table_add(full_grad, g.key, g.d_logits, inv_len);
  }

  const bool negative_control =
      scheme.kind == masking::SchemeKind::det_trunc;
  const std::string name = "gradient_unbiasedness/" + scheme.label() + "/T" +
                           std::to_string(len);
  const auto schedule = scheme.schedule(len);

  auto masked_table = [&](const masking::Mask& mask) {
    GradTable table;
    for (std::size_t t = 0; t < len; ++t) {
      if (!mask.bits[t]) continue;
      const double w = schedule ? inv_len / schedule->probs[t] : inv_len;
      grad_table_add(table, token_grads[t].key, token_grads[t].d_logits, w);
    }
    return table;
  };

  if (enumerable(scheme, len)) {
    GradTable expectation;
    for (const MaskOutcome& outcome : enumerate_mask_outcomes(scheme, len)) {
      const GradTable table = masked_table(outcome.mask);
      for (const auto& [key, row] : table) {
        grad_table_add(expectation, key, row, outcome.prob);
      }
    }
    const double worst = grad_table_max_abs_diff(expectation, full_grad);
    return make_report(name, "enumeration", worst, 0.0, kExactTolerance, 0,
                       negative_control);
  }

  // Monte-Carlo: per-component mean and standard error; report the largest
  // z-score against the full gradient.
  GradTable mean_table;
  GradTable sq_table;
  for (std::uint64_t i = 0; i < mc_replicates; ++i) {
    const masking::Mask mask =
        scheme.draw(len, rng::derive(seed, rng::kMask, i));
    const GradTable table = masked_table(mask);
    for (const auto& [key, row] : table) {
      grad_table_add(mean_table, key, row, 1.0);
      std::vector<double> squared(row.size());
      for (std::size_t v = 0; v < row.size(); ++v) squared[v] = row[v] * row[v];
      grad_table_add(sq_table, key, squared, 1.0);
    }
  }
  const double count = static_cast<double>(mc_replicates);
  double worst_z = 0.0;
  for (auto& [key, row] : mean_table) {
    const auto full_it = full_grad.find(key);
    const auto sq_it = sq_table.find(key);
    for (std::size_t v = 0; v < row.size(); ++v) {
      const double mean = row[v] / count;
      const double target =
          full_it == full_grad.end() ? 0.0 : full_it->second[v];
      const double var =
          std::max(0.0, sq_it->second[v] / count - mean * mean);
      const double se = std::sqrt(var / count) + 1e-15;
      worst_z = std::max(worst_z, std::abs(mean - target) / se);
    }
  }
  return make_report(name, "monte_carlo", worst_z, 0.0, 3.0, mc_replicates,
                     negative_control);
}

std::vector<TestReport> test_variance_formulas(
    std::span<const double> losses,
    std::span<const masking::SelectionScheme> designs) {
  const std::size_t n = losses.size();
  const double full_mean = util::kahan_total(losses) / static_cast<double>(n);
  std::vector<TestReport> reports;
  for (const masking::SelectionScheme& scheme : designs) {
    double closed_form = 0.0;
    switch (scheme.kind) {
      case masking::SchemeKind::full:
        closed_form = 0.0;
        break;
      case masking::SchemeKind::urs:
        closed_form =
            ht::independent_masking_variance(losses, *scheme.schedule(n));
        break;
      case masking::SchemeKind::rpc:
        closed_form = ht::rpc_stopping_time_variance(
            losses, masking::CutoffDistribution::uniform(n));
        break;
      case masking::SchemeKind::rpc_min_cutoff:
        closed_form = ht::rpc_stopping_time_variance(
            losses, masking::CutoffDistribution::uniform(
                        n, std::min(scheme.min_cutoff, n)));
        break;
      case masking::SchemeKind::det_trunc:
        throw std::invalid_argument(
            "deterministic truncation has no variance formula to check; it "
            "is a single fixed outcome");
    }
    // Independent route: enumerate every mask outcome and accumulate the
    // second central moment around the exact full mean.
    util::KahanSum var;
    for (const MaskOutcome& outcome : enumerate_mask_outcomes(scheme, n)) {
      const double est = scheme_estimate(losses, scheme, outcome.mask);
      var.add(outcome.prob * (est - full_mean) * (est - full_mean));
    }
    reports.push_back(make_report(
        "variance_formula/" + scheme.label() + "/T" + std::to_string(n),
        "enumeration", closed_form, var.value(), kExactTolerance, 0, false));
  }
  return reports;
}

namespace {

void battery_unbiasedness(const SuiteConfig& config,
                          std::vector<TestReport>& reports) {
  rng::SplitMix64 gen(rng::derive(config.seed, rng::kBattery, 1));
  const std::vector<masking::SelectionScheme> schemes = {
      masking::SelectionScheme::urs(0.25),
      masking::SelectionScheme::urs(0.5),
      masking::SelectionScheme::urs(0.75),
      masking::SelectionScheme::rpc(),
      masking::SelectionScheme::rpc_min_cutoff(3),
  };
  for (int rep = 0; rep < 8; ++rep) {
    const std::size_t n = 2 + gen.next_below(9);  // T in [2, 10]
    const std::vector<double> losses = random_losses(n, gen);
    for (const masking::SelectionScheme& scheme : schemes) {
      reports.push_back(
          test_ht_unbiasedness(losses, scheme, gen.next()));
    }
  }
  // Large-T Monte-Carlo spot check and the deterministic negative control.
  const std::vector<double> long_losses = random_losses(20, gen);
  reports.push_back(test_ht_unbiasedness(
      long_losses, masking::SelectionScheme::urs(0.3), gen.next()));
  const std::vector<double> control_losses = random_losses(6, gen, 0.5, 2.0);
  reports.push_back(test_ht_unbiasedness(
      control_losses, masking::SelectionScheme::det_trunc(0.5), gen.next()));
}

void battery_gradients(const SuiteConfig& config,
                       std::vector<TestReport>& reports) {
  rng::SplitMix64 gen(rng::derive(config.seed, rng::kBattery, 2));
  toy::TaskSpec task;
  task.vocab_size = 7;
  task.prompt_length = 2;
  task.max_response_length = 6;
  for (int rep = 0; rep < 6; ++rep) {
    toy::KGramPolicy policy = toy::KGramPolicy::make(task.vocab_size, 2);
    // Random logit table over a few contexts so gradients are non-trivial.
    for (int c = 0; c < 12; ++c) {
      toy::ContextKey key = {static_cast<toy::Token>(gen.next_below(6)),
                             static_cast<toy::Token>(gen.next_below(6))};
      std::vector<double>& row = policy.mutable_logit_row(key);
      for (double& v : row) v = 2.0 * gen.next_double() - 1.0;
    }
    reports.push_back(test_gradient_unbiasedness(
        policy, task, masking::SelectionScheme::rpc(), gen.next()));
    reports.push_back(test_gradient_unbiasedness(
        policy, task, masking::SelectionScheme::urs(1.0), gen.next()));
    if (rep == 0) {
      reports.push_back(test_gradient_unbiasedness(
          policy, task, masking::SelectionScheme::det_trunc(0.5), gen.next()));
    }
  }
}

void battery_variance(const SuiteConfig& config,
                      std::vector<TestReport>& reports) {
  rng::SplitMix64 gen(rng::derive(config.seed, rng::kBattery, 3));
  // The worked values: losses [2, 4] give variance 5 under independent
  // p = 0.5 masking and 4 under the uniform cutoff.
  const std::vector<double> worked = {2.0, 4.0};
  const std::vector<masking::SelectionScheme> worked_designs = {
      masking::SelectionScheme::urs(0.5), masking::SelectionScheme::rpc()};
  auto worked_reports = test_variance_formulas(worked, worked_designs);
  reports.push_back(make_report("variance_worked/urs_p0.5_L24", "enumeration",
                                worked_reports[0].statistic, 5.0,
                                kExactTolerance, 0, false));
  reports.push_back(make_report("variance_worked/rpc_uniform_L24",
                                "enumeration", worked_reports[1].statistic,
                                4.0, kExactTolerance, 0, false));
  for (auto& r : worked_reports) reports.push_back(std::move(r));

  for (int rep = 0; rep < 6; ++rep) {
    const std::size_t n = 2 + gen.next_below(5);  // T in [2, 6]
    const std::vector<double> losses = random_losses(n, gen);
    const std::vector<masking::SelectionScheme> designs = {
        masking::SelectionScheme::urs(0.25 + 0.5 * gen.next_double()),
        masking::SelectionScheme::urs(1.0),
        masking::SelectionScheme::rpc(),
        masking::SelectionScheme::rpc_min_cutoff(1 + gen.next_below(n)),
    };
    for (auto& r : test_variance_formulas(losses, designs)) {
      reports.push_back(std::move(r));
    }
  }
}

void battery_inflation(const SuiteConfig& config,
                       std::vector<TestReport>& reports) {
  rng::SplitMix64 gen(rng::derive(config.seed, rng::kBattery, 4));
  constexpr std::uint64_t kReplicates = 100000;
  for (double p : {0.25, 0.5, 1.0}) {
    // Second moment of a single reweighted unit score term: E[(m/p)^2] = 1/p.
    util::KahanSum sum;
    util::KahanSum sum_sq;
    for (std::uint64_t i = 0; i < kReplicates; ++i) {
      const double m = gen.next_double() < p ? 1.0 : 0.0;
      const double value = (m / p) * (m / p);
      sum.add(value);
      sum_sq.add(value * value);
    }
    const double count = static_cast<double>(kReplicates);
    const double mean = sum.value() / count;
    const double var = std::max(0.0, sum_sq.value() / count - mean * mean);
    const double se = std::sqrt(var / count);
    reports.push_back(make_report(
        "second_moment_inflation/p" + util::format_double(p), "monte_carlo",
        mean, ht::urs_second_moment_factor(p), 3.0 * se + 1e-12, kReplicates,
        false));
  }
}

void battery_covariance(const SuiteConfig& config,
                        std::vector<TestReport>& reports) {
  rng::SplitMix64 gen(rng::derive(config.seed, rng::kBattery, 5));
  // Enumeration route: exact pairwise covariance for small T.
  for (std::size_t n : {3, 5, 6}) {
    const auto scheme = masking::SelectionScheme::rpc();
    const masking::SurvivalSchedule schedule = *scheme.schedule(n);
    double worst = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t t = s; t < n; ++t) {
        util::KahanSum moment;
        for (const MaskOutcome& outcome : enumerate_mask_outcomes(scheme, n)) {
          moment.add(outcome.prob *
                     (outcome.mask.bits[s] - schedule.probs[s]) *
                     (outcome.mask.bits[t] - schedule.probs[t]));
        }
        worst = std::max(
            worst, std::abs(moment.value() -
                            masking::mask_covariance(schedule, s, t)));
      }
    }
    reports.push_back(make_report(
        "mask_covariance/enum/T" + std::to_string(n), "enumeration", worst,
        0.0, kExactTolerance, 0, false));
  }
  // Monte-Carlo route at T = 8: worst z-score over all pairs.
  constexpr std::size_t kLen = 8;
  constexpr std::uint64_t kReplicates = 100000;
  const auto scheme = masking::SelectionScheme::rpc();
  const masking::SurvivalSchedule schedule = *scheme.schedule(kLen);
  std::vector<util::KahanSum> sums(kLen * kLen);
  std::vector<util::KahanSum> sums_sq(kLen * kLen);
  for (std::uint64_t i = 0; i < kReplicates; ++i) {
    const masking::Mask mask =
        scheme.draw(kLen, rng::derive(config.seed, rng::kMask, i));
    for (std::size_t s = 0; s < kLen; ++s) {
      for (std::size_t t = s; t < kLen; ++t) {
        const double w = (mask.bits[s] - schedule.probs[s]) *
                         (mask.bits[t] - schedule.probs[t]);
        sums[s * kLen + t].add(w);
        sums_sq[s * kLen + t].add(w * w);
      }
    }
  }
  double worst_z = 0.0;
  const double count = static_cast<double>(kReplicates);
  for (std::size_t s = 0; s < kLen; ++s) {
    for (std::size_t t = s; t < kLen; ++t) {
      const double mean = sums[s * kLen + t].value() / count;
      const double var = std::max(
          0.0, sums_sq[s * kLen + t].value() / count - mean * mean);
      const double se = std::sqrt(var / count) + 1e-15;
      worst_z = std::max(
          worst_z,
          std::abs(mean - masking::mask_covariance(schedule, s, t)) / se);
    }
  }
  reports.push_back(make_report("mask_covariance/mc/T8", "monte_carlo",
                                worst_z, 0.0, 3.0, kReplicates, false));
}

}  // namespace

std::string SuiteResult::to_json() const {
  // A JSON array of reports; the exit code carries the suite verdict.
  nlohmann::json arr = nlohmann::json::array();
  for (const TestReport& r : reports) {
    arr.push_back(nlohmann::json::parse(r.to_json()));
  }
  return arr.dump(2);
}

SuiteResult run_suite(const SuiteConfig& config) {
  std::vector<TestReport> all;
  battery_unbiasedness(config, all);
  battery_gradients(config, all);
  battery_variance(config, all);
  battery_inflation(config, all);
  battery_covariance(config, all);

  SuiteResult result;
  for (TestReport& r : all) {
    if (!config.filter.empty() &&
        r.name.find(config.filter) == std::string::npos) {
      continue;
    }
    result.reports.push_back(std::move(r));
  }
  for (const TestReport& r : result.reports) {
    if (!r.acceptable()) result.ok = false;
  }
  return result;
}

}  // namespace nat::verify
