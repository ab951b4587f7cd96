// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Desk-scale RL instance: a tabular k-gram softmax policy whose log-prob
 * gradients are available in closed form, and two verifiable-reward tasks
 * (sum_mod, copy_last) whose checker reads the full response.
 *
 * The tabular policy makes estimator-level claims testable as equalities:
 * every gradient is exact, so unbiasedness checks reduce to enumeration
 * rather than statistics.
 *
 * Policy evaluation is read-only and concurrently callable; updates require
 * exclusive access.
 */

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nat/grpo.hpp"

namespace nat::toy {

using Token = grpo::Token;

/// Conditioning key: the last min(k, available) tokens of prompt + partial
/// response. Unseen keys behave as a zero logit row (uniform next-token
/// distribution), so fresh policies are reproducible from the seed alone.
using ContextKey = std::vector<Token>;

struct KGramPolicy {
  std::int32_t vocab_size = 2;    // V >= 2
  std::int32_t context_order = 2; // k >= 0
  Token eos_token = 1;            // by convention V - 1
  std::map<ContextKey, std::vector<double>> logits;

  static KGramPolicy make(std::int32_t vocab_size, std::int32_t context_order);

  /// Key for the given full preceding sequence (prompt + response so far).
  ContextKey context_key(std::span<const Token> context) const;

  /// Logit row for a key; zeros when unseen. The mutable overload creates
  /// the row.
  std::vector<double> logit_row(const ContextKey& key) const;
  std::vector<double>& mutable_logit_row(const ContextKey& key);

  /// Serialization: JSON object mapping comma-joined context keys to logit
  /// arrays, e.g. {"3,4": [0.1, -0.2, ...]}.
  std::string to_json() const;
  static KGramPolicy from_json(const std::string& text);
};

enum class TaskName { sum_mod, copy_last };

/// A verifiable-reward task. Prompt tokens live in {0, ..., V-2}; V-1 is
/// reserved as eos.
struct TaskSpec {
  TaskName name = TaskName::sum_mod;
  std::int32_t prompt_length = 2;
  std::int32_t max_response_length = 8;  // T_max >= 1
  std::int32_t vocab_size = 11;

  void validate() const;
};

TaskName task_name_from_string(const std::string& name);
std::string to_string(TaskName name);

/// log pi(token | context) under the policy, numerically stable.
double logprob(const KGramPolicy& policy, std::span<const Token> context,
               Token token);

/// Exact gradient of logprob with respect to the context's logit row:
/// one_hot(token) - softmax(logits). Zero everywhere else.
struct LogitRowGrad {
  ContextKey key;
  std::vector<double> d_logits;
};
LogitRowGrad logprob_grad(const KGramPolicy& policy,
                          std::span<const Token> context, Token token);

/// Softmax probabilities of the next token for a context.
std::vector<double> next_token_probs(const KGramPolicy& policy,
                                     std::span<const Token> context);

/// Uniform prompt of task.prompt_length tokens from {0, ..., V-2}.
std::vector<Token> sample_prompt(const TaskSpec& task, std::uint64_t seed);

/// Autoregressive rollout until eos or T_max. Fills response_tokens,
/// logp_behavior (sampling-policy log-probs), and reward; logp_current and
/// logp_reference are left empty for the trainer to populate.
grpo::Trajectory rollout(const KGramPolicy& policy, const TaskSpec& task,
                         std::span<const Token> prompt, std::uint64_t seed);

/// 1.0 when the response verifies, else 0.0. sum_mod: the last non-eos
/// token must equal (sum of prompt tokens) mod (V-1). copy_last: it must
/// equal the last prompt token. Responses with no non-eos token score 0.
double reward_eval(const TaskSpec& task, std::span<const Token> prompt,
                   std::span<const Token> response);

/// Mean Shannon entropy (nats) of the next-token distributions over the
/// given contexts.
double policy_entropy(const KGramPolicy& policy,
                      std::span<const std::vector<Token>> contexts);

}  // namespace nat::toy
