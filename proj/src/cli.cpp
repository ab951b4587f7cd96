// SPDX-License-Identifier: Apache-2.0

#include "nat/cli.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "nat/ht.hpp"
#include "nat/rng.hpp"
#include "nat/util.hpp"
#include "nat/verify.hpp"

namespace nat::cli {

namespace {

using nlohmann::json;

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open '" + path + "' for writing");
  }
  out << content;
}

json scheme_to_json(const masking::SelectionScheme& scheme) {
  json j;
  j["kind"] = masking::to_string(scheme.kind);
  j["p"] = scheme.p;
  j["min_cutoff"] = scheme.min_cutoff;
  j["keep_fraction"] = scheme.keep_fraction;
  return j;
}

json config_to_json(const train::TrainConfig& cfg) {
  json j;
  j["scheme"] = scheme_to_json(cfg.scheme);
  j["group_size"] = cfg.group_size;
  j["groups_per_step"] = cfg.groups_per_step;
  j["steps"] = cfg.steps;
  j["learning_rate"] = cfg.learning_rate;
  j["grad_clip_norm"] =
      cfg.grad_clip_norm ? json(*cfg.grad_clip_norm) : json(nullptr);
  j["update_epochs"] = cfg.update_epochs;
  j["context_order"] = cfg.context_order;
  j["grpo"] = {{"clip_eps", cfg.grpo.clip_eps},
               {"kl_beta", cfg.grpo.kl_beta},
               {"adv_eps", cfg.grpo.adv_eps}};
  j["seed"] = cfg.seed;
  j["task"] = {{"name", toy::to_string(cfg.task.name)},
               {"prompt_length", cfg.task.prompt_length},
               {"max_response_length", cfg.task.max_response_length},
               {"vocab_size", cfg.task.vocab_size}};
  return j;
}

train::TrainConfig config_from_json(const json& j) {
  train::TrainConfig cfg;
  if (j.contains("scheme")) {
    const json& s = j.at("scheme");
    if (s.is_string()) {
      cfg.scheme.kind = masking::scheme_kind_from_string(s.get<std::string>());
    } else {
      cfg.scheme.kind =
          masking::scheme_kind_from_string(s.at("kind").get<std::string>());
      if (s.contains("p")) cfg.scheme.p = s.at("p").get<double>();
      if (s.contains("min_cutoff")) {
        cfg.scheme.min_cutoff = s.at("min_cutoff").get<std::size_t>();
      }
      if (s.contains("keep_fraction")) {
        cfg.scheme.keep_fraction = s.at("keep_fraction").get<double>();
      }
    }
  }
  if (j.contains("group_size")) cfg.group_size = j.at("group_size");
  if (j.contains("groups_per_step")) cfg.groups_per_step = j.at("groups_per_step");
  if (j.contains("steps")) cfg.steps = j.at("steps");
  if (j.contains("learning_rate")) cfg.learning_rate = j.at("learning_rate");
  if (j.contains("grad_clip_norm") && !j.at("grad_clip_norm").is_null()) {
    cfg.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  }
  if (j.contains("update_epochs")) cfg.update_epochs = j.at("update_epochs");
  if (j.contains("context_order")) cfg.context_order = j.at("context_order");
  if (j.contains("grpo")) {
    const json& g = j.at("grpo");
    if (g.contains("clip_eps")) cfg.grpo.clip_eps = g.at("clip_eps");
    if (g.contains("kl_beta")) cfg.grpo.kl_beta = g.at("kl_beta");
    if (g.contains("adv_eps")) cfg.grpo.adv_eps = g.at("adv_eps");
  }
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("task")) {
    const json& t = j.at("task");
    if (t.contains("name")) {
      cfg.task.name = toy::task_name_from_string(t.at("name").get<std::string>());
    }
    if (t.contains("prompt_length")) cfg.task.prompt_length = t.at("prompt_length");
    if (t.contains("max_response_length")) {
      cfg.task.max_response_length = t.at("max_response_length");
    }
    if (t.contains("vocab_size")) cfg.task.vocab_size = t.at("vocab_size");
  }
  return cfg;
}

void write_manifest(const std::string& command, const json& config,
                    std::uint64_t seed,
                    const std::vector<std::string>& artifact_paths,
                    const std::string& out_path) {
  json manifest;
  manifest["command"] = command;
  manifest["config"] = config;
  manifest["seed"] = seed;
  manifest["artifact_paths"] = artifact_paths;
  manifest["tool_version"] = kToolVersion;
  write_file(manifest_path_for(out_path), manifest.dump(2) + "\n");
}

constexpr const char* kTrainCsvHeader =
    "scheme,seed,step,mean_reward,entropy,grad_norm,selected_token_ratio,"
    "forward_token_budget,forward_attention_proxy,backward_token_budget,"
    "clip_fraction\n";

void append_metrics_rows(std::string& csv, const std::string& scheme_name,
                         std::uint64_t seed,
                         const std::vector<train::StepMetrics>& metrics) {
  for (const train::StepMetrics& m : metrics) {
    csv += scheme_name;
    csv += ',';
    csv += std::to_string(seed);
    csv += ',';
    csv += std::to_string(m.step);
    csv += ',';
    csv += util::format_double(m.mean_reward);
    csv += ',';
    csv += util::format_double(m.entropy);
    csv += ',';
    csv += util::format_double(m.grad_norm);
    csv += ',';
    csv += util::format_double(m.selected_token_ratio);
    csv += ',';
    csv += std::to_string(m.forward_token_budget);
    csv += ',';
    csv += std::to_string(m.forward_attention_proxy);
    csv += ',';
    csv += std::to_string(m.backward_token_budget);
    csv += ',';
    csv += util::format_double(m.clip_fraction);
    csv += '\n';
  }
}

}  // namespace

std::string manifest_path_for(const std::string& out_path) {
  return out_path + ".manifest.json";
}

train::TrainConfig train_config_from_json_text(const std::string& text) {
  return config_from_json(json::parse(text));
}

std::string train_config_to_json_text(const train::TrainConfig& config) {
  return config_to_json(config).dump(2);
}

VerifyOptions verify_options_from_json_text(const std::string& text) {
  const json j = json::parse(text);
  VerifyOptions options;
  if (j.contains("seed")) options.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("filter")) options.filter = j.at("filter").get<std::string>();
  if (j.contains("out")) options.out = j.at("out").get<std::string>();
  return options;
}

VarianceOptions variance_options_from_json_text(const std::string& text) {
  const json j = json::parse(text);
  VarianceOptions options;
  if (j.contains("seed")) options.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("urs_p")) {
    options.urs_p = j.at("urs_p").get<std::vector<double>>();
  }
  if (j.contains("rpc_min_cutoffs")) {
    options.rpc_min_cutoffs =
        j.at("rpc_min_cutoffs").get<std::vector<std::size_t>>();
  }
  if (j.contains("det_keep")) options.det_keep = j.at("det_keep");
  if (j.contains("length")) options.length = j.at("length").get<std::size_t>();
  if (j.contains("num_vectors")) options.num_vectors = j.at("num_vectors");
  if (j.contains("replicates")) {
    options.replicates = j.at("replicates").get<std::uint64_t>();
  }
  if (j.contains("budget_match")) options.budget_match = j.at("budget_match");
  if (j.contains("out")) options.out = j.at("out").get<std::string>();
  if (j.contains("json")) options.json_out = j.at("json").get<std::string>();
  return options;
}

int run_verify(const VerifyOptions& options) {
  verify::SuiteConfig config;
  config.seed = options.seed;
  config.filter = options.filter;
  const verify::SuiteResult result = verify::run_suite(config);
  const std::string report = result.to_json() + "\n";
  std::fputs(report.c_str(), stdout);
  if (!options.out.empty()) {
    write_file(options.out, report);
    json cfg;
    cfg["seed"] = options.seed;
    cfg["filter"] = options.filter;
    write_manifest("verify", cfg, options.seed, {options.out}, options.out);
  }
  return result.ok ? 0 : 1;
}

int run_train(const TrainOptions& options) {
  if (options.replicates < 1) {
    throw std::invalid_argument("replicates must be >= 1");
  }
  options.config.validate();

  const std::size_t count = static_cast<std::size_t>(options.replicates);
  std::vector<train::TrainResult> results(count);
  std::vector<std::uint64_t> seeds(count);
  for (std::size_t r = 0; r < count; ++r) {
    seeds[r] = options.config.seed + r;
  }

  // Replicates are independent; fan them out and write once at the end.
  const unsigned workers =
      std::min<unsigned>(util::worker_threads(), static_cast<unsigned>(count));
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t r = next.fetch_add(1); r < count; r = next.fetch_add(1)) {
      train::TrainConfig cfg = options.config;
      cfg.seed = seeds[r];
      results[r] = train::run_training(cfg);
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  std::string csv = kTrainCsvHeader;
  const std::string scheme_name = masking::to_string(options.config.scheme.kind);
  for (std::size_t r = 0; r < count; ++r) {
    append_metrics_rows(csv, scheme_name, seeds[r], results[r].metrics);
  }
  write_file(options.out, csv);

  std::vector<std::string> artifacts = {options.out};
  if (!options.save_policy.empty()) {
    write_file(options.save_policy, results.back().policy.to_json() + "\n");
    artifacts.push_back(options.save_policy);
  }
  json cfg = config_to_json(options.config);
  cfg["replicates"] = options.replicates;
  cfg["seeds"] = seeds;
  json final_rewards = json::array();
  for (const train::TrainResult& r : results) {
    final_rewards.push_back(
        r.metrics.empty() ? 0.0 : r.metrics.back().mean_reward);
  }
  cfg["final_rewards"] = std::move(final_rewards);
  // Mask/schedule audit block for the configured selection design.
  const std::size_t audit_len = static_cast<std::size_t>(
      options.config.task.max_response_length);
  json audit;
  audit["sample_mask"] = masking::to_bit_string(
      options.config.scheme.draw(audit_len, options.config.seed));
  if (const auto schedule = options.config.scheme.schedule(audit_len)) {
    audit["survival_probs"] =
        json::parse(masking::schedule_to_json(*schedule));
  }
  cfg["scheme_audit"] = std::move(audit);
  write_manifest("train", cfg, options.config.seed, artifacts, options.out);
  return 0;
}

int run_variance(const VarianceOptions& options) {
  if (options.length < 2) {
    throw std::invalid_argument("loss vector length must be >= 2");
  }
  if (options.num_vectors < 1 || options.replicates < 2) {
    throw std::invalid_argument("need >= 1 vector and >= 2 replicates");
  }

  struct Design {
    masking::SelectionScheme scheme;
    std::string budget_group;
  };
  std::vector<Design> designs;
  for (double p : options.urs_p) {
    designs.push_back({masking::SelectionScheme::urs(p), ""});
  }
  for (std::size_t c : options.rpc_min_cutoffs) {
    const auto scheme = c <= 1 ? masking::SelectionScheme::rpc()
                               : masking::SelectionScheme::rpc_min_cutoff(c);
    std::string group;
    if (options.budget_match) {
      // Pair the prefix design with the independent design of equal expected
      // backward budget: p = E[L] / T.
      const auto dist = masking::CutoffDistribution::uniform(
          options.length, std::min(c < 1 ? std::size_t{1} : c, options.length));
      const double matched_p = masking::expected_prefix_length(dist) /
                               static_cast<double>(options.length);
      group = "match_" + scheme.label();
      designs.push_back({scheme, group});
      designs.push_back({masking::SelectionScheme::urs(matched_p), group});
    } else {
      designs.push_back({scheme, ""});
    }
  }
  designs.push_back({masking::SelectionScheme::det_trunc(options.det_keep), ""});

  std::string csv =
      "design,length,vector,replicates,truth,mean,bias,variance,mse,se,"
      "budget_group\n";
  std::string json_rows = "[";
  bool first_row = true;
  for (std::int32_t vec = 0; vec < options.num_vectors; ++vec) {
    rng::SplitMix64 gen(rng::derive(options.seed, rng::kBattery, vec));
    std::vector<double> losses(options.length);
    for (double& l : losses) l = -2.0 + 4.0 * gen.next_double();
    const double truth =
        util::kahan_total(losses) / static_cast<double>(options.length);
    for (const Design& design : designs) {
      std::vector<double> estimates;
      estimates.reserve(options.replicates);
      for (std::uint64_t i = 0; i < options.replicates; ++i) {
        const masking::Mask mask = design.scheme.draw(
            options.length,
            rng::derive(options.seed, rng::kReplicate, vec, i));
        estimates.push_back(
            verify::scheme_estimate(losses, design.scheme, mask));
      }
      const ht::VarianceReport report = ht::mse_decompose(estimates, truth);
      const double se =
          std::sqrt(report.variance / static_cast<double>(options.replicates));
      if (!first_row) json_rows += ',';
      first_row = false;
      json_rows += "{\"design\":\"" + design.scheme.label() +
                   "\",\"report\":" + report.to_json() + "}";
      csv += design.scheme.label();
      csv += ',';
      csv += std::to_string(options.length);
      csv += ',';
      csv += std::to_string(vec);
      csv += ',';
      csv += std::to_string(options.replicates);
      csv += ',';
      csv += util::format_double(truth);
      csv += ',';
      csv += util::format_double(report.mean);
      csv += ',';
      csv += util::format_double(report.bias);
      csv += ',';
      csv += util::format_double(report.variance);
      csv += ',';
      csv += util::format_double(report.mse);
      csv += ',';
      csv += util::format_double(se);
      csv += ',';
      csv += design.budget_group;
      csv += '\n';
    }
  }
  write_file(options.out, csv);
  json_rows += "]\n";
  std::vector<std::string> artifacts = {options.out};
  if (!options.json_out.empty()) {
    write_file(options.json_out, json_rows);
    artifacts.push_back(options.json_out);
  }

  json cfg;
  cfg["seed"] = options.seed;
  cfg["urs_p"] = options.urs_p;
  cfg["rpc_min_cutoffs"] = options.rpc_min_cutoffs;
  cfg["det_keep"] = options.det_keep;
  cfg["length"] = options.length;
  cfg["num_vectors"] = options.num_vectors;
  cfg["replicates"] = options.replicates;
  cfg["budget_match"] = options.budget_match;
  write_manifest("variance", cfg, options.seed, artifacts, options.out);
  return 0;
}

}  // namespace nat::cli
