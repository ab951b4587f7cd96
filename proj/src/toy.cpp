// SPDX-License-Identifier: Apache-2.0

#include "nat/toy.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "nat/rng.hpp"
#include "nat/util.hpp"

namespace nat::toy {

namespace {

/// Stable log-softmax denominator log(sum exp(z)).
double log_sum_exp(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  util::KahanSum s;
  for (double v : z) s.add(std::exp(v - m));
  return m + std::log(s.value());
}

std::string key_to_string(const ContextKey& key) {
  std::string out;
  for (std::size_t i = 0; i < key.size(); ++i) {
    if (i > 0) out += ',';
    out += std::to_string(key[i]);
  }
  return out;
}

ContextKey key_from_string(const std::string& text) {
  ContextKey key;
  if (text.empty()) return key;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    key.push_back(static_cast<Token>(std::stol(part)));
  }
  return key;
}

}  // namespace

KGramPolicy KGramPolicy::make(std::int32_t vocab_size,
                              std::int32_t context_order) {
  if (vocab_size < 2) throw std::invalid_argument("vocab size must be >= 2");
  if (context_order < 0) {
    throw std::invalid_argument("context order must be >= 0");
  }
  KGramPolicy policy;
  policy.vocab_size = vocab_size;
  policy.context_order = context_order;
  policy.eos_token = vocab_size - 1;
  return policy;
}

ContextKey KGramPolicy::context_key(std::span<const Token> context) const {
  const std::size_t k = static_cast<std::size_t>(context_order);
  const std::size_t take = std::min(k, context.size());
  return ContextKey(context.end() - static_cast<std::ptrdiff_t>(take),
                    context.end());
}

std::vector<double> KGramPolicy::logit_row(const ContextKey& key) const {
  const auto it = logits.find(key);
  if (it == logits.end()) {
    return std::vector<double>(static_cast<std::size_t>(vocab_size), 0.0);
  }
  return it->second;
}

std::vector<double>& KGramPolicy::mutable_logit_row(const ContextKey& key) {
  auto [it, inserted] = logits.try_emplace(
      key, std::vector<double>(static_cast<std::size_t>(vocab_size), 0.0));
  return it->second;
}

std::string KGramPolicy::to_json() const {
  nlohmann::json j;
  j["vocab_size"] = vocab_size;
  j["context_order"] = context_order;
  j["eos_token"] = eos_token;
  nlohmann::json table = nlohmann::json::object();
  for (const auto& [key, row] : logits) {
    table[key_to_string(key)] = row;
  }
  j["logits"] = std::move(table);
  return j.dump(2);
}

KGramPolicy KGramPolicy::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  KGramPolicy policy = make(j.at("vocab_size").get<std::int32_t>(),
                            j.at("context_order").get<std::int32_t>());
  policy.eos_token = j.at("eos_token").get<Token>();
  for (const auto& [key, row] : j.at("logits").items()) {
    std::vector<double> logits_row = row.get<std::vector<double>>();
    if (logits_row.size() != static_cast<std::size_t>(policy.vocab_size)) {
      throw std::invalid_argument("logit row size mismatch in checkpoint");
    }
    policy.logits[key_from_string(key)] = std::move(logits_row);
  }
  return policy;
}

void TaskSpec::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("vocab size must be >= 2");
  if (prompt_length < 1) {
    throw std::invalid_argument("prompt length must be >= 1");
  }
  if (max_response_length < 1) {
    throw std::invalid_argument("max response length must be >= 1");
  }
}

TaskName task_name_from_string(const std::string& name) {
  if (name == "sum_mod") return TaskName::sum_mod;
  if (name == "copy_last") return TaskName::copy_last;
  throw std::invalid_argument("unknown task '" + name +
                              "'; expected sum_mod or copy_last");
}

std::string to_string(TaskName name) {
  return name == TaskName::sum_mod ? "sum_mod" : "copy_last";
}

double logprob(const KGramPolicy& policy, std::span<const Token> context,
               Token token) {
  if (token < 0 || token >= policy.vocab_size) {
    throw std::invalid_argument("token id out of vocabulary range");
  }
  const std::vector<double> row = policy.logit_row(policy.context_key(context));
  return row[static_cast<std::size_t>(token)] - log_sum_exp(row);
}

LogitRowGrad logprob_grad(const KGramPolicy& policy,
                          std::span<const Token> context, Token token) {
  if (token < 0 || token >= policy.vocab_size) {
    throw std::invalid_argument("token id out of vocabulary range");
  }
  LogitRowGrad grad;
  grad.key = policy.context_key(context);
  const std::vector<double> row = policy.logit_row(grad.key);
  const double lse = log_sum_exp(row);
  grad.d_logits.resize(row.size());
  for (std::size_t v = 0; v < row.size(); ++v) {
    grad.d_logits[v] = -std::exp(row[v] - lse);
  }
  grad.d_logits[static_cast<std::size_t>(token)] += 1.0;
  return grad;
}

std::vector<double> next_token_probs(const KGramPolicy& policy,
                                     std::span<const Token> context) {
  const std::vector<double> row = policy.logit_row(policy.context_key(context));
  const double lse = log_sum_exp(row);
  std::vector<double> probs(row.size());
  for (std::size_t v = 0; v < row.size(); ++v) {
    probs[v] = std::exp(row[v] - lse);
  }
  return probs;
}

std::vector<Token> sample_prompt(const TaskSpec& task, std::uint64_t seed) {
  task.validate();
  rng::SplitMix64 gen(seed);
  std::vector<Token> prompt(static_cast<std::size_t>(task.prompt_length));
  const auto digits = static_cast<std::uint64_t>(task.vocab_size - 1);
  for (Token& t : prompt) {
    t = static_cast<Token>(gen.next_below(digits));
  }
  return prompt;
}

grpo::Trajectory rollout(const KGramPolicy& policy, const TaskSpec& task,
                         std::span<const Token> prompt, std::uint64_t seed) {
  task.validate();
  rng::SplitMix64 gen(seed);
  grpo::Trajectory traj;
  traj.prompt_tokens.assign(prompt.begin(), prompt.end());

  std::vector<Token> window(prompt.begin(), prompt.end());
  for (std::int32_t step = 0; step < task.max_response_length; ++step) {
    const std::vector<double> probs = next_token_probs(policy, window);
    const double u = gen.next_double();
    Token tok = policy.vocab_size - 1;
    util::KahanSum cdf;
    for (std::size_t v = 0; v < probs.size(); ++v) {
      cdf.add(probs[v]);
      if (u < cdf.value()) {
        tok = static_cast<Token>(v);
        break;
      }
    }
    traj.logp_behavior.push_back(logprob(policy, window, tok));
    traj.response_tokens.push_back(tok);
    window.push_back(tok);
    if (tok == policy.eos_token) break;
  }
  traj.reward = reward_eval(task, prompt, traj.response_tokens);
  return traj;
}

double reward_eval(const TaskSpec& task, std::span<const Token> prompt,
                   std::span<const Token> response) {
  task.validate();
  const Token eos = task.vocab_size - 1;
  Token last_non_eos = -1;
  for (Token t : response) {
    if (t != eos) last_non_eos = t;
  }
  if (last_non_eos < 0) return 0.0;

  if (task.name == TaskName::sum_mod) {
    std::int64_t sum = 0;
    for (Token t : prompt) sum += t;
    const auto target = static_cast<Token>(sum % (task.vocab_size - 1));
    return last_non_eos == target ? 1.0 : 0.0;
  }
  // copy_last
  if (prompt.empty()) return 0.0;
  return last_non_eos == prompt.back() ? 1.0 : 0.0;
}

double policy_entropy(const KGramPolicy& policy,
                      std::span<const std::vector<Token>> contexts) {
  if (contexts.empty()) {
    throw std::invalid_argument("policy entropy needs at least one context");
  }
  util::KahanSum total;
  for (const std::vector<Token>& ctx : contexts) {
    const std::vector<double> probs = next_token_probs(policy, ctx);
    util::KahanSum h;
    for (double p : probs) {
      if (p > 0.0) h.add(-p * std::log(p));
    }
    total.add(h.value());
  }
  return total.value() / static_cast<double>(contexts.size());
}

}  // namespace nat::toy
