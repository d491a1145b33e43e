#include "calibrl/objective.hpp"

#include "calibrl/advantage.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace calibrl {

namespace {

std::optional<double> g_leaky_derivative_fault;

const PolicyParams& require_reference(const PolicyParams* reference, const char* why) {
    if (!reference) throw InputError(std::string("a reference policy is required for ") + why);
    return *reference;
}

} // namespace

void ActivationSpec::validate() const {
    if (kind == ActivationKind::leaky_relu && !(alpha > 0.0 && alpha <= 1.0))
        throw ConfigError("leaky_relu requires alpha in (0, 1]");
}

ActivationValue activation_eval(const ActivationSpec& spec, double x) {
    switch (spec.kind) {
    case ActivationKind::leaky_relu:
        if (x >= 0.0) return {x, 1.0};
        return {spec.alpha * x, g_leaky_derivative_fault.value_or(spec.alpha)};
    case ActivationKind::relu:
        if (x >= 0.0) return {x, 1.0};
        return {0.0, 0.0};
    case ActivationKind::sigmoid: {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return {s, s * (1.0 - s)};
    }
    case ActivationKind::tanh: {
        const double t = std::tanh(x);
        return {t, 1.0 - t * t};
    }
    case ActivationKind::huber:
        if (std::abs(x) <= 1.0) return {0.5 * x * x, x};
        return {std::abs(x) - 0.5, x > 0.0 ? 1.0 : -1.0};
    }
    return {};
}

ScopedLeakyDerivativeFault::ScopedLeakyDerivativeFault(double derivative)
    : had_previous_(g_leaky_derivative_fault.has_value()),
      previous_(g_leaky_derivative_fault.value_or(0.0)) {
    g_leaky_derivative_fault = derivative;
}

ScopedLeakyDerivativeFault::~ScopedLeakyDerivativeFault() {
    if (had_previous_) g_leaky_derivative_fault = previous_;
    else g_leaky_derivative_fault.reset();
}

double delta_ell(const PolicyParams& params, PromptId prompt_id, const TokenSeq& policy_response,
                 const TokenSeq& expert_response, bool length_norm, double temperature) {
    double lp_policy = sequence_logprob(params, prompt_id, policy_response, temperature);
    double lp_expert = sequence_logprob(params, prompt_id, expert_response, temperature);
    if (length_norm) {
        lp_policy /= static_cast<double>(policy_response.size());
        lp_expert /= static_cast<double>(expert_response.size());
    }
    return lp_policy - lp_expert;
}

double delta_ell_reference(const PolicyParams& params, const PolicyParams& ref_params,
                           PromptId prompt_id, const TokenSeq& policy_response, bool length_norm,
                           double temperature) {
    double lp_policy = sequence_logprob(params, prompt_id, policy_response, temperature);
    double lp_ref = sequence_logprob(ref_params, prompt_id, policy_response, temperature);
    if (length_norm) {
        lp_policy /= static_cast<double>(policy_response.size());
        lp_ref /= static_cast<double>(policy_response.size());
    }
    return lp_policy - lp_ref;
}

double exploration_loss(double abs_adv, CorrectnessSignal s, double delta_ell, const ActivationSpec& spec) {
    if (!(abs_adv >= 0.0)) throw InputError("exploration_loss requires abs_adv >= 0");
    return abs_adv * activation_eval(spec, -s.as_double() * delta_ell).value;
}

ValueAndGradient grpo_surrogate(const PolicyParams& params, const RolloutGroup& group,
                                std::span<const double> advantages, double epsilon_clip,
                                double temperature) {
    if (static_cast<int>(advantages.size()) != group.size())
        throw InputError("one advantage per trajectory required");
    ValueAndGradient out{0.0, params.zero_gradient()};
    const double inv_g = 1.0 / static_cast<double>(group.size());

    for (std::size_t i = 0; i < group.trajectories().size(); ++i) {
        const auto& traj = group.trajectories()[i];
        const double adv = advantages[i];
        if (adv == 0.0) continue;
        for (std::size_t t = 0; t < traj.response.size(); ++t) {
            const StateKey s = state_at(traj.prompt_id, traj.response.tokens, t, params.context_window);
            const auto logp = token_log_distribution(params, s, temperature);
            const auto tok = static_cast<std::size_t>(traj.response[t]);
            const double ratio = std::exp(logp[tok] - traj.old_logprobs[t]);
            const double clipped = std::clamp(ratio, 1.0 - epsilon_clip, 1.0 + epsilon_clip);
            out.value += inv_g * std::min(ratio * adv, clipped * adv);

            const bool clip_active = (adv > 0.0 && ratio > 1.0 + epsilon_clip) ||
                                     (adv < 0.0 && ratio < 1.0 - epsilon_clip);
            if (clip_active) continue;
            // d(r A)/dz = A r (e_tok - p) / T
            const double c = inv_g * adv * ratio / temperature;
            auto& g = out.gradient.row(s);
            for (std::size_t v = 0; v < logp.size(); ++v) g[v] -= c * std::exp(logp[v]);
            g[tok] += c;
        }
    }
    return out;
}

ValueAndGradient kl_penalty(const PolicyParams& params, const PolicyParams& ref_params,
                            const RolloutGroup& group, double temperature) {
    ValueAndGradient out{0.0, params.zero_gradient()};
    std::size_t n_states = 0;
    for (const auto& traj : group.trajectories()) n_states += traj.response.size();
    if (n_states == 0) return out;
    const double inv_n = 1.0 / static_cast<double>(n_states);

    for (const auto& traj : group.trajectories()) {
        for (const auto& s : visited_states(traj.prompt_id, traj.response, params.context_window)) {
            const auto logp = token_log_distribution(params, s, temperature);
            const auto logq = token_log_distribution(ref_params, s, temperature);
            double kl = 0.0;
            for (std::size_t v = 0; v < logp.size(); ++v) kl += std::exp(logp[v]) * (logp[v] - logq[v]);
            out.value += inv_n * kl;
            // dKL/dz_v = p_v (log p_v - log q_v - KL) / T
            auto& g = out.gradient.row(s);
            for (std::size_t v = 0; v < logp.size(); ++v)
                g[v] += inv_n * std::exp(logp[v]) * (logp[v] - logq[v] - kl) / temperature;
        }
    }
    return out;
}

ValueAndGradient sft_nll_loss(const PolicyParams& params, const ExpertDemo& expert, double temperature) {
    if (expert.response.empty()) throw InputError("sft_nll_loss requires a non-empty expert response");
    ValueAndGradient out{-sequence_logprob(params, expert.prompt_id, expert.response, temperature),
                         params.zero_gradient()};
    accumulate_logprob_gradient(params, expert.prompt_id, expert.response, temperature, -1.0, out.gradient);
    return out;
}

ExplorationTerm exploration_term(const PolicyParams& params, const RolloutGroup& group,
                                 const TrainConfig& config, std::span<const double> advantages,
                                 const PolicyParams* reference, BaselineGradient baseline_gradient) {
    if (static_cast<int>(advantages.size()) != group.size())
        throw InputError("one advantage per trajectory required");
    const ActivationSpec spec{config.activation, config.alpha};
    const bool use_reference = config.baseline_mode == BaselineMode::reference_policy;
    const PolicyParams* ref = use_reference ? &require_reference(reference, "baseline_mode=reference_policy")
                                            : nullptr;
    const double T = config.temperature;
    const double inv_g = 1.0 / static_cast<double>(group.size());
    const TokenSeq& expert_response = group.expert().response;

    ExplorationTerm out;
    out.gradient = params.zero_gradient();
    for (std::size_t i = 0; i < group.trajectories().size(); ++i) {
        const auto& traj = group.trajectories()[i];
        const double dl = use_reference
                              ? delta_ell_reference(params, *ref, traj.prompt_id, traj.response,
                                                    config.length_norm, T)
                              : delta_ell(params, traj.prompt_id, traj.response, expert_response,
                                          config.length_norm, T);
        const double w = config.advantage_weighting ? std::abs(advantages[i]) : 1.0;
        const double s = make_correctness_signal(traj).as_double();
        const auto act = activation_eval(spec, -s * dl);

        out.delta_ell.push_back(dl);
        out.weights.push_back(w);
        out.value += inv_g * w * act.value;

        // dL_i = w * act'(-s dl) * (-s) * d(dl)
        const double coeff = inv_g * w * act.derivative * (-s);
        if (coeff == 0.0) continue;
        const double pol_norm = config.length_norm ? 1.0 / static_cast<double>(traj.response.size()) : 1.0;
        accumulate_logprob_gradient(params, traj.prompt_id, traj.response, T, coeff * pol_norm, out.gradient);
        if (baseline_gradient == BaselineGradient::attached && !use_reference) {
            const double exp_norm =
                config.length_norm ? 1.0 / static_cast<double>(expert_response.size()) : 1.0;
            accumulate_logprob_gradient(params, traj.prompt_id, expert_response, T, -coeff * exp_norm,
                                        out.gradient);
        }
    }
    return out;
}

ObjectiveBreakdown combined_objective(const PolicyParams& params, const RolloutGroup& group,
                                      const TrainConfig& config, const PolicyParams* reference) {
    const auto advantages = group_advantages(group.rewards(), config.advantage_mode);

    ObjectiveBreakdown out;
    auto grpo = grpo_surrogate(params, group, advantages, config.epsilon_clip, config.temperature);
    out.grpo_term = grpo.value;
    out.gradient = std::move(grpo.gradient);

    if (config.lambda != 0.0) {
        const auto expl = exploration_term(params, group, config, advantages, reference);
        out.exploration_term = expl.value;
        out.gradient.add_scaled(expl.gradient, -config.lambda);
    }
    if (config.beta_kl != 0.0) {
        const auto kl = kl_penalty(params, require_reference(reference, "beta_kl > 0"), group,
                                   config.temperature);
        out.kl_term = kl.value;
        out.gradient.add_scaled(kl.gradient, -config.beta_kl);
    }
    out.total = out.grpo_term - config.lambda * out.exploration_term - config.beta_kl * out.kl_term;
    return out;
}

} // namespace calibrl
