// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "nat/cli.hpp"

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-efficient GRPO training and estimator verification"};
  app.require_subcommand(1);

  // --- verify ---
  nat::cli::VerifyOptions verify_options;
  std::string verify_config_path;
  CLI::App* verify = app.add_subcommand(
      "verify", "Run the estimator verification suite (JSON report)");
  verify->add_option("--config", verify_config_path,
                     "JSON options file; flags override its values");
  auto* vopt_seed = verify->add_option("--seed", verify_options.seed,
                                       "Suite seed");
  auto* vopt_filter =
      verify->add_option("--filter", verify_options.filter,
                         "Only run tests whose name contains this substring");
  auto* vopt_out =
      verify->add_option("--out", verify_options.out, "Report output path");

  // --- train ---
  nat::cli::TrainOptions train_options;
  std::string scheme_name = "full";
  std::string config_path;
  CLI::App* train = app.add_subcommand(
      "train", "Run desk-scale GRPO training (metrics CSV + manifest)");
  train->add_option("--config", config_path,
                    "JSON config file; flags override its values");
  auto* opt_scheme = train->add_option(
      "--scheme", scheme_name, "full | urs | rpc | rpc_min_cutoff | det_trunc");
  auto* opt_p =
      train->add_option("--p", train_options.config.scheme.p,
                        "Inclusion probability for urs");
  auto* opt_cutoff =
      train->add_option("--min-cutoff", train_options.config.scheme.min_cutoff,
                        "Minimum retained prefix for rpc_min_cutoff");
  auto* opt_keep =
      train->add_option("--keep", train_options.config.scheme.keep_fraction,
                        "Keep fraction for det_trunc");
  auto* opt_group =
      train->add_option("--group-size", train_options.config.group_size,
                        "Responses per prompt (G)");
  auto* opt_groups = train->add_option(
      "--groups-per-step", train_options.config.groups_per_step,
      "Prompts per optimizer step");
  auto* opt_steps =
      train->add_option("--steps", train_options.config.steps, "Train steps");
  auto* opt_lr = train->add_option(
      "--lr", train_options.config.learning_rate, "Learning rate");
  auto* opt_seed =
      train->add_option("--seed", train_options.config.seed, "Base seed");
  train->add_option("--replicates", train_options.replicates,
                    "Number of replicate seeds (seed, seed+1, ...)");
  train->add_option("--out", train_options.out, "Metrics CSV path");
  train->add_option("--save-policy", train_options.save_policy,
                    "Write the final policy checkpoint to this path");

  // --- variance ---
  nat::cli::VarianceOptions variance_options;
  std::string variance_config_path;
  CLI::App* variance = app.add_subcommand(
      "variance", "Bias/variance/mse sweep over token-selection designs");
  variance->add_option("--config", variance_config_path,
                       "JSON options file; flags override its values");
  auto* sopt_seed =
      variance->add_option("--seed", variance_options.seed, "Sweep seed");
  auto* sopt_p = variance->add_option("--p", variance_options.urs_p,
                                      "URS inclusion probabilities to sweep");
  auto* sopt_cutoffs =
      variance->add_option("--min-cutoff", variance_options.rpc_min_cutoffs,
                           "RPC minimum cutoffs to sweep (1 = plain uniform)");
  auto* sopt_keep =
      variance->add_option("--keep", variance_options.det_keep,
                           "Deterministic-truncation keep fraction");
  auto* sopt_length = variance->add_option(
      "--length", variance_options.length, "Token-loss vector length");
  auto* sopt_vectors =
      variance->add_option("--num-vectors", variance_options.num_vectors,
                           "Number of seeded random loss vectors");
  auto* sopt_reps =
      variance->add_option("--replicates", variance_options.replicates,
                           "Monte-Carlo replicates per design");
  auto* sopt_match = variance->add_flag(
      "--budget-match", variance_options.budget_match,
      "Pair each RPC design with a URS design of equal expected backward "
      "budget");
  auto* sopt_out =
      variance->add_option("--out", variance_options.out, "Sweep CSV path");
  auto* sopt_json =
      variance->add_option("--json", variance_options.json_out,
                           "Also write the rows as a JSON array to this path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (verify->parsed()) {
      if (!verify_config_path.empty()) {
        nat::cli::VerifyOptions base =
            nat::cli::verify_options_from_json_text(slurp(verify_config_path));
        if (!*vopt_seed) verify_options.seed = base.seed;
        if (!*vopt_filter) verify_options.filter = base.filter;
        if (!*vopt_out) verify_options.out = base.out;
      }
      return nat::cli::run_verify(verify_options);
    }
    if (train->parsed()) {
      if (!config_path.empty()) {
        nat::train::TrainConfig base =
            nat::cli::train_config_from_json_text(slurp(config_path));
        // Explicit flags win over config-file values.
        if (!*opt_scheme) scheme_name = nat::masking::to_string(base.scheme.kind);
        if (!*opt_p) train_options.config.scheme.p = base.scheme.p;
        if (!*opt_cutoff) {
          train_options.config.scheme.min_cutoff = base.scheme.min_cutoff;
        }
        if (!*opt_keep) {
          train_options.config.scheme.keep_fraction = base.scheme.keep_fraction;
        }
        if (!*opt_group) train_options.config.group_size = base.group_size;
        if (!*opt_groups) {
          train_options.config.groups_per_step = base.groups_per_step;
        }
        if (!*opt_steps) train_options.config.steps = base.steps;
        if (!*opt_lr) train_options.config.learning_rate = base.learning_rate;
        if (!*opt_seed) train_options.config.seed = base.seed;
        train_options.config.grad_clip_norm = base.grad_clip_norm;
        train_options.config.update_epochs = base.update_epochs;
        train_options.config.context_order = base.context_order;
        train_options.config.grpo = base.grpo;
        train_options.config.task = base.task;
      }
      train_options.config.scheme.kind =
          nat::masking::scheme_kind_from_string(scheme_name);
      // `--scheme rpc --min-cutoff C` is shorthand for the min-cutoff design.
      if (train_options.config.scheme.kind == nat::masking::SchemeKind::rpc &&
          *opt_cutoff && train_options.config.scheme.min_cutoff > 1) {
        train_options.config.scheme.kind =
            nat::masking::SchemeKind::rpc_min_cutoff;
      }
      return nat::cli::run_train(train_options);
    }
    if (variance->parsed()) {
      if (!variance_config_path.empty()) {
        nat::cli::VarianceOptions base =
            nat::cli::variance_options_from_json_text(
                slurp(variance_config_path));
        if (!*sopt_seed) variance_options.seed = base.seed;
        if (!*sopt_p) variance_options.urs_p = base.urs_p;
        if (!*sopt_cutoffs) variance_options.rpc_min_cutoffs = base.rpc_min_cutoffs;
        if (!*sopt_keep) variance_options.det_keep = base.det_keep;
        if (!*sopt_length) variance_options.length = base.length;
        if (!*sopt_vectors) variance_options.num_vectors = base.num_vectors;
        if (!*sopt_reps) variance_options.replicates = base.replicates;
        if (!*sopt_match) variance_options.budget_match = base.budget_match;
        if (!*sopt_out) variance_options.out = base.out;
        if (!*sopt_json) variance_options.json_out = base.json_out;
      }
      return nat::cli::run_variance(variance_options);
    }
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
