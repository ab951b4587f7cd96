// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstddef>
#include <cstdlib>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace nat::util {

/// Kahan compensated accumulator. Metric and Monte-Carlo reductions go through
/// this so that reduction order perturbs results by no more than ~1e-9.
class KahanSum {
 public:
  void add(double x) {
    const double y = x - compensation_;
    const double t = sum_ + y;
    compensation_ = (t - sum_) - y;
    sum_ = t;
  }

  double value() const { return sum_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

inline double kahan_total(std::span<const double> xs) {
  KahanSum s;
  for (double x : xs) s.add(x);
  return s.value();
}

inline double mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return kahan_total(xs) / static_cast<double>(xs.size());
}

inline bool is_non_increasing(std::span<const double> xs) {
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] > xs[i - 1]) return false;
  }
  return true;
}

/// Shortest round-trip decimal form of a double; stable across runs, used for
/// all CSV output.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// Worker cap for replicate fan-out. NAT_THREADS overrides; 0/unset means
/// hardware concurrency.
inline unsigned worker_threads() {
  if (const char* env = std::getenv("NAT_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

}  // namespace nat::util
