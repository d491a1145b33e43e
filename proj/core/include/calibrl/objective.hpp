#pragma once

// Loss terms and their exact gradients for one rollout group.
//
// Sign conventions: grpo_surrogate and combined_objective are objectives to be
// MAXIMIZED; exploration, kl and sft_nll are losses (minimized). All gradients
// are with respect to the policy logit table and are returned for the quantity
// named, so the ascent direction of the combined objective is
//
//     grad_grpo - lambda * grad_exploration - beta_kl * grad_kl.
//
// The old (rollout) policy enters only through Trajectory::old_logprobs.

#include "calibrl/policy.hpp"
#include "calibrl/types.hpp"

#include <array>
#include <span>
#include <string_view>
#include <vector>

namespace calibrl {

/// Every operation that returns a closed-form gradient. The verification suite
/// must hold a finite-difference twin for each name.
inline constexpr std::array<std::string_view, 7> kGradientOperations = {
    "logprob_gradient", "entropy_gradient", "sft_nll_loss",      "grpo_surrogate",
    "exploration_term", "kl_penalty",       "combined_objective"};

struct ActivationSpec {
    ActivationKind kind = ActivationKind::leaky_relu;
    double alpha = 0.5; ///< negative-side slope of leaky_relu

    /// Throws ConfigError when leaky_relu has alpha outside (0, 1].
    void validate() const;
};

struct ActivationValue {
    double value = 0.0;
    double derivative = 0.0;
};

/// leaky_relu: x (x >= 0) else alpha x, derivative 1 at x = 0
/// relu:       max(x, 0), derivative 1 at x = 0
/// sigmoid:    1 / (1 + e^-x)
/// tanh:       tanh(x)
/// huber:      x^2 / 2 for |x| <= 1, else |x| - 1/2
ActivationValue activation_eval(const ActivationSpec& spec, double x);

/// Test-only mutation hook: while an instance is alive, activation_eval reports
/// `derivative` for leaky_relu on the negative side instead of alpha. Not thread safe.
class ScopedLeakyDerivativeFault {
public:
    explicit ScopedLeakyDerivativeFault(double derivative);
    ~ScopedLeakyDerivativeFault();
    ScopedLeakyDerivativeFault(const ScopedLeakyDerivativeFault&) = delete;
    ScopedLeakyDerivativeFault& operator=(const ScopedLeakyDerivativeFault&) = delete;

private:
    bool had_previous_;
    double previous_;
};

/// log pi(policy_response) - log pi(expert_response) under the current params.
/// With length_norm each log-prob is divided by its own response length.
double delta_ell(const PolicyParams& params, PromptId prompt_id, const TokenSeq& policy_response,
                 const TokenSeq& expert_response, bool length_norm, double temperature = 1.0);

/// log pi(policy_response) - log pi_ref(policy_response); the reference is frozen.
double delta_ell_reference(const PolicyParams& params, const PolicyParams& ref_params,
                           PromptId prompt_id, const TokenSeq& policy_response, bool length_norm,
                           double temperature = 1.0);

/// abs_adv * activation(-s * delta_ell). One scalar per trajectory.
double exploration_loss(double abs_adv, CorrectnessSignal s, double delta_ell, const ActivationSpec& spec);

struct ValueAndGradient {
    double value = 0.0;
    Gradient gradient;
};

/// Clipped surrogate: mean over trajectories of sum over tokens of
/// min(r A_i, clip(r, 1-eps, 1+eps) A_i), r = exp(logp_new - logp_old).
/// A token contributes no gradient when the clipped branch is strictly active.
ValueAndGradient grpo_surrogate(const PolicyParams& params, const RolloutGroup& group,
                                std::span<const double> advantages, double epsilon_clip,
                                double temperature = 1.0);

/// Mean over visited token-states (with multiplicity) of KL(pi(.|s) || pi_ref(.|s)).
ValueAndGradient kl_penalty(const PolicyParams& params, const PolicyParams& ref_params,
                            const RolloutGroup& group, double temperature = 1.0);

/// -log pi(expert response), with its gradient.
ValueAndGradient sft_nll_loss(const PolicyParams& params, const ExpertDemo& expert,
                              double temperature = 1.0);

/// Whether the baseline log-prob inside delta_ell receives gradient. Training always
/// uses `detached`; `attached` exists so verification can show the difference.
enum class BaselineGradient { detached, attached };

struct ExplorationTerm {
    double value = 0.0;              ///< sum_i L_i / G
    Gradient gradient;               ///< gradient of `value`
    std::vector<double> delta_ell;   ///< per trajectory
    std::vector<double> weights;     ///< |A_i| (or 1 without advantage weighting)
};

/// Exploration loss averaged over the group. `advantages` come from the G on-policy
/// rewards. `reference` is required for BaselineMode::reference_policy.
ExplorationTerm exploration_term(const PolicyParams& params, const RolloutGroup& group,
                                 const TrainConfig& config, std::span<const double> advantages,
                                 const PolicyParams* reference = nullptr,
                                 BaselineGradient baseline_gradient = BaselineGradient::detached);

/// total = grpo - lambda * exploration - beta_kl * kl, with its ascent gradient.
/// `reference` is required when beta_kl > 0 or baseline_mode is reference_policy.
ObjectiveBreakdown combined_objective(const PolicyParams& params, const RolloutGroup& group,
                                      const TrainConfig& config,
                                      const PolicyParams* reference = nullptr);

} // namespace calibrl
