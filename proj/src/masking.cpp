// SPDX-License-Identifier: Apache-2.0

#include "nat/masking.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nat/rng.hpp"
#include "nat/util.hpp"

namespace nat::masking {

std::size_t Mask::popcount() const {
  std::size_t n = 0;
  for (std::uint8_t b : bits) n += b;
  return n;
}

void Mask::validate() const {
  for (std::uint8_t b : bits) {
    if (b > 1) throw std::invalid_argument("mask bits must be 0 or 1");
  }
  if (kind != MaskKind::independent) {
    for (std::size_t t = 1; t < bits.size(); ++t) {
      if (bits[t] > bits[t - 1]) {
        throw std::invalid_argument("prefix mask bits must be non-increasing");
      }
    }
  }
}

void SurvivalSchedule::validate() const {
  for (double p : probs) {
    if (!(p > 0.0) || p > 1.0) {
      throw std::invalid_argument(
          "survival probabilities must lie in (0, 1]");
    }
  }
  if (kind == MaskKind::prefix && !probs.empty()) {
    if (probs.front() != 1.0) {
      throw std::invalid_argument("prefix schedule must start at p = 1");
    }
    if (!util::is_non_increasing(probs)) {
      throw std::invalid_argument("prefix schedule must be non-increasing");
    }
  }
}

CutoffDistribution::CutoffDistribution(std::size_t length,
                                       std::size_t min_cutoff,
                                       std::vector<double> mass, bool uniform)
    : length_(length),
      min_cutoff_(min_cutoff),
      mass_(std::move(mass)),
      uniform_(uniform) {}

CutoffDistribution CutoffDistribution::uniform(std::size_t length,
                                               std::size_t min_cutoff) {
  if (length < 1) throw std::invalid_argument("cutoff length must be >= 1");
  if (min_cutoff < 1) throw std::invalid_argument("min cutoff must be >= 1");
  // Short sequences with a large configured floor degenerate to always
  // keeping everything.
  min_cutoff = std::min(min_cutoff, length);
  const std::size_t support = length - min_cutoff + 1;
  std::vector<double> mass(support, 1.0 / static_cast<double>(support));
  return CutoffDistribution(length, min_cutoff, std::move(mass), true);
}

CutoffDistribution CutoffDistribution::with_mass(std::size_t length,
                                                 std::size_t min_cutoff,
                                                 std::vector<double> mass) {
  if (length < 1) throw std::invalid_argument("cutoff length must be >= 1");
  if (min_cutoff < 1 || min_cutoff > length) {
    throw std::invalid_argument("min cutoff must lie in [1, length]");
  }
  if (mass.size() != length - min_cutoff + 1) {
    throw std::invalid_argument("mass size must equal length - min_cutoff + 1");
  }
  util::KahanSum total;
  for (double q : mass) {
    if (q < 0.0) throw std::invalid_argument("cutoff masses must be >= 0");
    total.add(q);
  }
  if (std::abs(total.value() - 1.0) > 1e-12) {
    throw std::invalid_argument("cutoff masses must sum to 1");
  }
  if (!(mass.back() > 0.0)) {
    throw std::invalid_argument(
        "the final cutoff needs positive mass, otherwise late positions have "
        "zero inclusion probability");
  }
  return CutoffDistribution(length, min_cutoff, std::move(mass), false);
}

double CutoffDistribution::mass(std::size_t cutoff) const {
  if (cutoff < min_cutoff_ || cutoff > length_) return 0.0;
  return mass_[cutoff - min_cutoff_];
}

SurvivalSchedule CutoffDistribution::survival() const {
  SurvivalSchedule schedule;
  schedule.kind = MaskKind::prefix;
  schedule.probs.resize(length_);
  // p_t = Pr(L >= t + 1): accumulate the tail sum backwards.
  util::KahanSum tail;
  for (std::size_t t = length_; t-- > 0;) {
    tail.add(mass(t + 1));
    schedule.probs[t] = std::min(1.0, tail.value());
  }
  // The tail sums satisfy p_0 = 1 and monotonicity exactly; keep summation
  // rounding from leaking into the schedule invariants.
  schedule.probs[0] = 1.0;
  for (std::size_t t = 1; t < length_; ++t) {
    schedule.probs[t] = std::min(schedule.probs[t], schedule.probs[t - 1]);
  }
  return schedule;
}

Mask urs_sample(std::size_t length, double p, std::uint64_t seed) {
  if (length < 1) throw std::invalid_argument("mask length must be >= 1");
  if (!(p > 0.0)) {
    throw std::invalid_argument(
        "inclusion probability must be positive; p = 0 gives tokens no chance "
        "of selection and cannot be reweighted");
  }
  if (p > 1.0) throw std::invalid_argument("inclusion probability must be <= 1");
  Mask mask;
  mask.kind = MaskKind::independent;
  mask.bits.resize(length);
  rng::SplitMix64 gen(seed);
  for (std::size_t t = 0; t < length; ++t) {
    mask.bits[t] = gen.next_double() < p ? 1 : 0;
  }
  return mask;
}

SurvivalSchedule urs_schedule(std::size_t length, double p) {
  if (length < 1) throw std::invalid_argument("schedule length must be >= 1");
  if (!(p > 0.0) || p > 1.0) {
    throw std::invalid_argument("inclusion probability must lie in (0, 1]");
  }
  SurvivalSchedule schedule;
  schedule.kind = MaskKind::independent;
  schedule.probs.assign(length, p);
  return schedule;
}

SurvivalSchedule rpc_survival_uniform(std::size_t length) {
  if (length < 1) throw std::invalid_argument("schedule length must be >= 1");
  SurvivalSchedule schedule;
  schedule.kind = MaskKind::prefix;
  schedule.probs.resize(length);
  const double T = static_cast<double>(length);
  for (std::size_t t = 0; t < length; ++t) {
    schedule.probs[t] = static_cast<double>(length - t) / T;
  }
  return schedule;
}

SurvivalSchedule rpc_survival_min_cutoff(std::size_t length,
                                         std::size_t min_cutoff) {
  if (length < 1) throw std::invalid_argument("schedule length must be >= 1");
  if (min_cutoff < 1) throw std::invalid_argument("min cutoff must be >= 1");
  min_cutoff = std::min(min_cutoff, length);  // degenerate full retention
  SurvivalSchedule schedule;
  schedule.kind = MaskKind::prefix;
  schedule.probs.resize(length);
  const double denom = static_cast<double>(length - min_cutoff + 1);
  for (std::size_t t = 0; t < length; ++t) {
    schedule.probs[t] =
        t < min_cutoff ? 1.0 : static_cast<double>(length - t) / denom;
  }
  return schedule;
}

RpcDraw rpc_sample(const CutoffDistribution& dist, std::uint64_t seed) {
  rng::SplitMix64 gen(seed);
  std::size_t cutoff = dist.length();
  if (dist.is_uniform()) {
    const std::size_t support = dist.length() - dist.min_cutoff() + 1;
    cutoff = dist.min_cutoff() + gen.next_below(support);
  } else {
    // Inverse-CDF walk over the explicit masses.
    const double u = gen.next_double();
    util::KahanSum cdf;
    for (std::size_t c = dist.min_cutoff(); c <= dist.length(); ++c) {
      cdf.add(dist.mass(c));
      if (u < cdf.value()) {
        cutoff = c;
        break;
      }
    }
  }
  RpcDraw draw;
  draw.cutoff = cutoff;
  draw.mask.kind = MaskKind::prefix;
  draw.mask.bits.resize(dist.length());
  for (std::size_t t = 0; t < dist.length(); ++t) {
    draw.mask.bits[t] = t < cutoff ? 1 : 0;
  }
  return draw;
}

Mask det_truncate(std::size_t length, double keep_fraction) {
  if (length < 1) throw std::invalid_argument("mask length must be >= 1");
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0) {
    throw std::invalid_argument("keep fraction must lie in (0, 1]");
  }
  const auto raw = static_cast<std::size_t>(
      std::floor(keep_fraction * static_cast<double>(length)));
  const std::size_t keep = std::max<std::size_t>(1, raw);
  Mask mask;
  mask.kind = MaskKind::deterministic_prefix;
  mask.bits.resize(length);
  for (std::size_t t = 0; t < length; ++t) {
    mask.bits[t] = t < keep ? 1 : 0;
  }
  return mask;
}

double expected_prefix_length(const CutoffDistribution& dist) {
  if (dist.is_uniform()) {
    return static_cast<double>(dist.min_cutoff() + dist.length()) / 2.0;
  }
  util::KahanSum sum;
  for (std::size_t c = dist.min_cutoff(); c <= dist.length(); ++c) {
    sum.add(static_cast<double>(c) * dist.mass(c));
  }
  return sum.value();
}

double mask_covariance(const SurvivalSchedule& schedule, std::size_t s,
                       std::size_t t) {
  if (schedule.kind != MaskKind::prefix) {
    throw std::invalid_argument(
        "mask covariance formula applies to prefix schedules only");
  }
  if (s > t || t >= schedule.size()) {
    throw std::out_of_range("require positions s <= t < schedule length");
  }
  return schedule.probs[t] * (1.0 - schedule.probs[s]);
}

// ---------------------------------------------------------------------------
// SelectionScheme
// ---------------------------------------------------------------------------

SelectionScheme SelectionScheme::full() {
  SelectionScheme s;
  s.kind = SchemeKind::full;
  return s;
}

SelectionScheme SelectionScheme::urs(double p) {
  SelectionScheme s;
  s.kind = SchemeKind::urs;
  s.p = p;
  return s;
}

SelectionScheme SelectionScheme::rpc() {
  SelectionScheme s;
  s.kind = SchemeKind::rpc;
  return s;
}

SelectionScheme SelectionScheme::rpc_min_cutoff(std::size_t min_cutoff) {
  SelectionScheme s;
  s.kind = SchemeKind::rpc_min_cutoff;
  s.min_cutoff = min_cutoff;
  return s;
}

SelectionScheme SelectionScheme::det_trunc(double keep_fraction) {
  SelectionScheme s;
  s.kind = SchemeKind::det_trunc;
  s.keep_fraction = keep_fraction;
  return s;
}

void SelectionScheme::validate() const {
  switch (kind) {
    case SchemeKind::full:
      break;
    case SchemeKind::urs:
      if (!(p > 0.0) || p > 1.0) {
        throw std::invalid_argument("urs requires p in (0, 1]");
      }
      break;
    case SchemeKind::rpc:
      break;
    case SchemeKind::rpc_min_cutoff:
      if (min_cutoff < 1) {
        throw std::invalid_argument("rpc min cutoff must be >= 1");
      }
      break;
    case SchemeKind::det_trunc:
      if (!(keep_fraction > 0.0) || keep_fraction > 1.0) {
        throw std::invalid_argument("det_trunc requires keep fraction in (0, 1]");
      }
      break;
  }
}

Mask SelectionScheme::draw(std::size_t length, std::uint64_t seed) const {
  switch (kind) {
    case SchemeKind::full: {
      Mask mask;
      mask.kind = MaskKind::independent;
      mask.bits.assign(length, 1);
      return mask;
    }
    case SchemeKind::urs:
      return urs_sample(length, p, seed);
    case SchemeKind::rpc:
      return rpc_sample(CutoffDistribution::uniform(length), seed).mask;
    case SchemeKind::rpc_min_cutoff:
      return rpc_sample(CutoffDistribution::uniform(length, min_cutoff), seed)
          .mask;
    case SchemeKind::det_trunc:
      return det_truncate(length, keep_fraction);
  }
  throw std::logic_error("unreachable scheme kind");
}

std::optional<SurvivalSchedule> SelectionScheme::schedule(
    std::size_t length) const {
  switch (kind) {
    case SchemeKind::full:
      return urs_schedule(length, 1.0);
    case SchemeKind::urs:
      return urs_schedule(length, p);
    case SchemeKind::rpc:
      return rpc_survival_uniform(length);
    case SchemeKind::rpc_min_cutoff:
      return rpc_survival_min_cutoff(length, min_cutoff);
    case SchemeKind::det_trunc:
      return std::nullopt;
  }
  throw std::logic_error("unreachable scheme kind");
}

bool SelectionScheme::prefix_structured() const {
  return kind == SchemeKind::rpc || kind == SchemeKind::rpc_min_cutoff ||
         kind == SchemeKind::det_trunc;
}

std::string SelectionScheme::label() const {
  switch (kind) {
    case SchemeKind::full:
      return "full";
    case SchemeKind::urs:
      return "urs(p=" + util::format_double(p) + ")";
    case SchemeKind::rpc:
      return "rpc";
    case SchemeKind::rpc_min_cutoff:
      return "rpc_min_cutoff(C=" + std::to_string(min_cutoff) + ")";
    case SchemeKind::det_trunc:
      return "det_trunc(keep=" + util::format_double(keep_fraction) + ")";
  }
  return "unknown";
}

SchemeKind scheme_kind_from_string(const std::string& name) {
  if (name == "full") return SchemeKind::full;
  if (name == "urs") return SchemeKind::urs;
  if (name == "rpc") return SchemeKind::rpc;
  if (name == "rpc_min_cutoff") return SchemeKind::rpc_min_cutoff;
  if (name == "det_trunc") return SchemeKind::det_trunc;
  throw std::invalid_argument("unknown scheme '" + name +
                              "'; expected full, urs, rpc, rpc_min_cutoff, or "
                              "det_trunc");
}

std::string to_string(SchemeKind kind) {
  switch (kind) {
    case SchemeKind::full:
      return "full";
    case SchemeKind::urs:
      return "urs";
    case SchemeKind::rpc:
      return "rpc";
    case SchemeKind::rpc_min_cutoff:
      return "rpc_min_cutoff";
    case SchemeKind::det_trunc:
      return "det_trunc";
  }
  return "unknown";
}

std::string to_bit_string(const Mask& mask) {
  std::string out;
  out.reserve(mask.size());
  for (std::uint8_t b : mask.bits) out += b ? '1' : '0';
  return out;
}

std::string schedule_to_json(const SurvivalSchedule& schedule) {
  std::string out = "[";
  for (std::size_t t = 0; t < schedule.size(); ++t) {
    if (t > 0) out += ',';
    out += util::format_double(schedule.probs[t]);
  }
  out += ']';
  return out;
}

}  // namespace nat::masking
