#pragma once

// Tabular autoregressive softmax policy.
//
// The next-token distribution at step t of a response depends on
// StateKey{prompt_id, last min(k, t) tokens}, k = context_window, through
// softmax(logits / temperature). Every quantity here is exact and closed-form.

#include "calibrl/environment.hpp"
#include "calibrl/random.hpp"
#include "calibrl/types.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace calibrl {

/// State before emitting token `t` of `tokens`.
StateKey state_at(PromptId prompt_id, std::span<const Token> tokens, std::size_t t, int context_window);

/// One state per response token, in order.
std::vector<StateKey> visited_states(PromptId prompt_id, const TokenSeq& response, int context_window);

/// softmax(logits / temperature); uniform for an absent state.
std::vector<double> token_distribution(const PolicyParams& params, const StateKey& state,
                                       double temperature = 1.0);

/// log of token_distribution, computed stably.
std::vector<double> token_log_distribution(const PolicyParams& params, const StateKey& state,
                                           double temperature = 1.0);

/// Autoregressive sampling until EOS or max_len tokens. Reward and correctness come
/// from verify(); old_logprobs are the per-token log-probs under `params`.
Trajectory sample_trajectory(const PolicyParams& params, const TaskInstance& task, double temperature,
                             int max_len, Rng& rng, double format_bonus = 0.1);
Trajectory sample_trajectory(const PolicyParams& params, const TaskInstance& task, double temperature,
                             int max_len, std::uint64_t seed, double format_bonus = 0.1);

/// Per-token log-probabilities of `response`. Throws InputError for out-of-vocabulary tokens.
std::vector<double> token_logprobs(const PolicyParams& params, PromptId prompt_id,
                                   const TokenSeq& response, double temperature = 1.0);

double sequence_logprob(const PolicyParams& params, PromptId prompt_id, const TokenSeq& response,
                        double temperature = 1.0);
inline double sequence_logprob(const PolicyParams& params, const TaskInstance& task,
                               const TokenSeq& response, double temperature = 1.0) {
    return sequence_logprob(params, task.prompt_id, response, temperature);
}

double state_entropy(const PolicyParams& params, const StateKey& state, double temperature = 1.0);

/// Mean over `states` of the per-state entropy -sum_v p_v log p_v.
double mean_token_entropy(const PolicyParams& params, std::span<const StateKey> states,
                          double temperature = 1.0);

/// out += scale * d/dlogits sequence_logprob. At visited state s and token v the
/// unscaled entry is sum_{t: s_t = s} ([o_t = v] - p_v(s)) / temperature.
void accumulate_logprob_gradient(const PolicyParams& params, PromptId prompt_id,
                                 const TokenSeq& response, double temperature, double scale,
                                 Gradient& out);

Gradient logprob_gradient(const PolicyParams& params, PromptId prompt_id, const TokenSeq& response,
                          double temperature = 1.0);

/// out += scale * d/dlogits state_entropy(state).
void accumulate_entropy_gradient(const PolicyParams& params, const StateKey& state,
                                 double temperature, double scale, Gradient& out);

/// Ascent step: params += step * direction.
void apply_update(PolicyParams& params, const Gradient& direction, double step);

} // namespace calibrl
