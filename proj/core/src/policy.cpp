#include "calibrl/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace calibrl {

StateKey state_at(PromptId prompt_id, std::span<const Token> tokens, std::size_t t, int context_window) {
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(context_window), t);
    return StateKey{prompt_id, std::vector<Token>(tokens.begin() + static_cast<std::ptrdiff_t>(t - k),
                                                  tokens.begin() + static_cast<std::ptrdiff_t>(t))};
}

std::vector<StateKey> visited_states(PromptId prompt_id, const TokenSeq& response, int context_window) {
    std::vector<StateKey> states;
    states.reserve(response.size());
    for (std::size_t t = 0; t < response.size(); ++t)
        states.push_back(state_at(prompt_id, response.tokens, t, context_window));
    return states;
}

std::vector<double> token_log_distribution(const PolicyParams& params, const StateKey& state,
                                           double temperature) {
    const auto n = static_cast<std::size_t>(params.vocab_size);
    const auto* row = params.logits.find(state);
    if (!row) return std::vector<double>(n, -std::log(static_cast<double>(n)));

    std::vector<double> z(n);
    for (std::size_t v = 0; v < n; ++v) z[v] = (*row)[v] / temperature;
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double x : z) sum += std::exp(x - zmax);
    const double log_norm = zmax + std::log(sum);
    for (double& x : z) x -= log_norm;
    return z;
}

std::vector<double> token_distribution(const PolicyParams& params, const StateKey& state,
                                       double temperature) {
    const auto n = static_cast<std::size_t>(params.vocab_size);
    const auto* row = params.logits.find(state);
    if (!row) return std::vector<double>(n, 1.0 / static_cast<double>(n));

    std::vector<double> p(n);
    double zmax = -INFINITY;
    for (std::size_t v = 0; v < n; ++v) zmax = std::max(zmax, (*row)[v] / temperature);
    double sum = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
        p[v] = std::exp((*row)[v] / temperature - zmax);
        sum += p[v];
    }
    for (double& x : p) x /= sum;
    return p;
}

Trajectory sample_trajectory(const PolicyParams& params, const TaskInstance& task, double temperature,
                             int max_len, Rng& rng, double format_bonus) {
    if (max_len < 1) throw InputError("max_len must be >= 1");
    if (!(temperature > 0.0)) throw InputError("temperature must be > 0");
    const Token eos = task.vocab().eos();

    Trajectory traj;
    traj.prompt_id = task.prompt_id;
    for (int t = 0; t < max_len; ++t) {
        const StateKey s = state_at(task.prompt_id, traj.response.tokens,
                                    traj.response.size(), params.context_window);
        const auto logp = token_log_distribution(params, s, temperature);
        // inverse-CDF draw
        const double u = uniform01(rng);
        double cum = 0.0;
        Token tok = params.vocab_size - 1;
        for (std::size_t v = 0; v < logp.size(); ++v) {
            cum += std::exp(logp[v]);
            if (u < cum) {
                tok = static_cast<Token>(v);
                break;
            }
        }
        traj.response.tokens.push_back(tok);
        traj.old_logprobs.push_back(logp[static_cast<std::size_t>(tok)]);
        if (tok == eos) break;
    }
    const auto outcome = verify(task, traj.response, format_bonus);
    traj.reward = outcome.reward;
    traj.correct = outcome.correct;
    return traj;
}

Trajectory sample_trajectory(const PolicyParams& params, const TaskInstance& task, double temperature,
                             int max_len, std::uint64_t seed, double format_bonus) {
    Rng rng(mix_seed(seed));
    return sample_trajectory(params, task, temperature, max_len, rng, format_bonus);
}

std::vector<double> token_logprobs(const PolicyParams& params, PromptId prompt_id,
                                   const TokenSeq& response, double temperature) {
    std::vector<double> out;
    out.reserve(response.size());
    for (std::size_t t = 0; t < response.size(); ++t) {
        const Token tok = response[t];
        if (tok < 0 || tok >= params.vocab_size)
            throw InputError("token " + std::to_string(tok) + " outside vocabulary of size " +
                             std::to_string(params.vocab_size));
        const auto logp = token_log_distribution(
            params, state_at(prompt_id, response.tokens, t, params.context_window), temperature);
        out.push_back(logp[static_cast<std::size_t>(tok)]);
    }
    return out;
}

double sequence_logprob(const PolicyParams& params, PromptId prompt_id, const TokenSeq& response,
                        double temperature) {
    if (response.empty()) throw InputError("sequence_logprob requires a non-empty response");
    const auto lps = token_logprobs(params, prompt_id, response, temperature);
    return std::accumulate(lps.begin(), lps.end(), 0.0);
}

double state_entropy(const PolicyParams& params, const StateKey& state, double temperature) {
    const auto logp = token_log_distribution(params, state, temperature);
    double h = 0.0;
    for (double lp : logp) {
        const double p = std::exp(lp);
        if (p > 0.0) h -= p * lp;
    }
    return h;
}

double mean_token_entropy(const PolicyParams& params, std::span<const StateKey> states,
                          double temperature) {
    if (states.empty()) throw InputError("mean_token_entropy requires at least one state");
    double acc = 0.0;
    for (const auto& s : states) acc += state_entropy(params, s, temperature);
    return acc / static_cast<double>(states.size());
}

void accumulate_logprob_gradient(const PolicyParams& params, PromptId prompt_id,
                                 const TokenSeq& response, double temperature, double scale,
                                 Gradient& out) {
    const double c = scale / temperature;
    for (std::size_t t = 0; t < response.size(); ++t) {
        const StateKey s = state_at(prompt_id, response.tokens, t, params.context_window);
        const auto p = token_distribution(params, s, temperature);
        auto& g = out.row(s);
        for (std::size_t v = 0; v < p.size(); ++v) g[v] -= c * p[v];
        g[static_cast<std::size_t>(response[t])] += c;
    }
}

Gradient logprob_gradient(const PolicyParams& params, PromptId prompt_id, const TokenSeq& response,
                          double temperature) {
    if (response.empty()) throw InputError("logprob_gradient requires a non-empty response");
    Gradient g = params.zero_gradient();
    accumulate_logprob_gradient(params, prompt_id, response, temperature, 1.0, g);
    return g;
}

void accumulate_entropy_gradient(const PolicyParams& params, const StateKey& state,
                                 double temperature, double scale, Gradient& out) {
    // dH/dz_v = -p_v (log p_v + H) / T
    const auto logp = token_log_distribution(params, state, temperature);
    double h = 0.0;
    for (double lp : logp) h -= std::exp(lp) * lp;
    auto& g = out.row(state);
    for (std::size_t v = 0; v < logp.size(); ++v)
        g[v] -= scale * std::exp(logp[v]) * (logp[v] + h) / temperature;
}

void apply_update(PolicyParams& params, const Gradient& direction, double step) {
    params.logits.add_scaled(direction, step);
}

} // namespace calibrl
