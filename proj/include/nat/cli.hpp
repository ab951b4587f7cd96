// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Command runners behind the `nat` executable: `verify`, `train`, and
 * `variance`. Every command writes its artifacts plus a manifest holding the
 * fully resolved configuration; re-running with the manifest's config and
 * seed reproduces the artifacts byte for byte. Exit codes: 0 success,
 * 1 test failure, 2 usage or configuration error.
 */

#include <cstdint>
#include <string>
#include <vector>

#include "nat/trainer.hpp"

namespace nat::cli {

inline constexpr const char* kToolVersion = "nat 0.1.0";

struct VerifyOptions {
  std::uint64_t seed = 20260808;
  std::string filter;
  std::string out;  // report path; empty prints to stdout only
};

struct TrainOptions {
  train::TrainConfig config;
  std::int32_t replicates = 1;  // replicate r runs with seed config.seed + r
  std::string out = "train_metrics.csv";
  std::string save_policy;  // optional final-policy checkpoint path
};

struct VarianceOptions {
  std::uint64_t seed = 20260808;
  std::vector<double> urs_p = {0.25, 0.5, 0.75, 1.0};
  std::vector<std::size_t> rpc_min_cutoffs = {1, 4};
  double det_keep = 0.5;
  std::size_t length = 12;        // token-loss vector length
  std::int32_t num_vectors = 3;   // seeded random loss vectors
  std::uint64_t replicates = 100000;
  bool budget_match = false;
  std::string out = "variance_sweep.csv";
  std::string json_out;  // optional JSON rows next to the CSV
};

/// Runs the verification suite; prints the JSON report array to stdout and
/// writes it to options.out when given.
int run_verify(const VerifyOptions& options);

/// Trains (options.replicates seeds, concurrently up to NAT_THREADS) and
/// writes the step-metrics CSV. Columns, in fixed order: scheme, seed, step,
/// mean_reward, entropy, grad_norm, selected_token_ratio,
/// forward_token_budget, forward_attention_proxy, backward_token_budget,
/// clip_fraction.
int run_train(const TrainOptions& options);

/// Sweeps token-selection designs over seeded random loss vectors and writes
/// bias/variance/mse rows. Columns: design, length, vector, replicates,
/// truth, mean, bias, variance, mse, se, budget_group.
int run_variance(const VarianceOptions& options);

/// TrainConfig <-> JSON (the `train --config` file format).
train::TrainConfig train_config_from_json_text(const std::string& text);
std::string train_config_to_json_text(const train::TrainConfig& config);

/// Config-file forms of the other commands' options; absent keys keep their
/// defaults.
VerifyOptions verify_options_from_json_text(const std::string& text);
VarianceOptions variance_options_from_json_text(const std::string& text);

/// Path of the manifest written next to an artifact.
std::string manifest_path_for(const std::string& out_path);

}  // namespace nat::cli
