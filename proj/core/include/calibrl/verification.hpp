#pragma once

// Independent oracles for the closed-form machinery: central finite differences,
// exhaustive response enumeration, and an independent re-derivation of the
// exploration gradient. Nothing here is used by the trainer.

#include "calibrl/environment.hpp"
#include "calibrl/objective.hpp"
#include "calibrl/types.hpp"

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace calibrl {

using LossEvaluator = std::function<double(const PolicyParams&)>;

/// Central differences (f(theta + h e_k) - f(theta - h e_k)) / 2h over every column
/// of every row in `keys`. Detached terms must be frozen inside `f` (see
/// detached_objective_evaluator). Throws NumericalError naming the perturbed entry
/// when an evaluation is non-finite.
Gradient finite_diff_gradient(const LossEvaluator& f, const PolicyParams& params,
                              std::span<const StateKey> keys, double step_size = 1e-5);

struct GradientComparison {
    bool passed = true;
    double max_abs_error = 0.0;
    double max_rel_error = 0.0; ///< over entries above the absolute floor
    std::string worst_entry;
};

/// Entry (k, v) passes when |a - n| <= max(rel_tol * max(|a|, |n|), abs_floor).
/// Rows in `keys` absent from either map count as zeros.
GradientComparison compare_gradients(const Gradient& analytic, const Gradient& numeric,
                                     std::span<const StateKey> keys, double rel_tol = 1e-6,
                                     double abs_floor = 1e-9);

/// Every state visited by the group's trajectories and its expert, sorted, unique.
std::vector<StateKey> group_state_keys(const RolloutGroup& group, int context_window);

/// Value of combined_objective with the baseline log-probs in delta_ell frozen at `base`.
LossEvaluator detached_objective_evaluator(const PolicyParams& base, const RolloutGroup& group,
                                           const TrainConfig& config, const PolicyParams* reference);

/// Value of exploration_term with the baseline frozen at `base`.
LossEvaluator detached_exploration_evaluator(const PolicyParams& base, const RolloutGroup& group,
                                             const TrainConfig& config, const PolicyParams* reference);

/// Probability of every complete response (EOS-terminated, or truncated at max_len).
/// Throws InputError when vocab_size^max_len exceeds 1e7.
std::map<TokenSeq, double> enumerate_distribution(const PolicyParams& params, PromptId prompt_id,
                                                  Token eos, int max_len, double temperature = 1.0);

/// -sum p log p of an enumerated distribution.
double sequence_entropy(const std::map<TokenSeq, double>& dist);

struct ExplorationCheckReport {
    bool closed_form_ok = true;       ///< implemented == closed form within 1e-10
    double max_closed_form_error = 0.0;
    bool expert_rows_zero = true;     ///< no gradient on rows only the expert visits
    bool detachment_visible = false;  ///< attached variant differs on some entry
    double max_abs_contribution = 0.0; ///< max |lambda * exploration gradient|
    std::vector<std::string> failures;

    /// (a) and (b); (c) is statistical and judged across trials.
    bool passed() const { return closed_form_ok && expert_rows_zero; }
};

ExplorationCheckReport check_exploration_gradient(const PolicyParams& params, const RolloutGroup& group,
                                                  const TrainConfig& config,
                                                  const PolicyParams* reference = nullptr);

/// A small random (params, reference, group, config) instance for gradient checks.
struct RandomInstance {
    PolicyParams params;
    PolicyParams reference;
    TaskInstance task;
    RolloutGroup group;
    TrainConfig config;
};

struct RandomInstanceOptions {
    bool randomize_variants = true; ///< activation, baseline, length_norm, modes, beta
    int min_group_size = 2; ///< G is drawn uniformly from [min_group_size, max_group_size]
    int max_group_size = 6;
};

/// Deterministic in `seed`. Avoids kinks (clip boundaries, activation breakpoints)
/// by at least 1e-3 so that central differences are valid.
RandomInstance make_random_instance(std::uint64_t seed, const RandomInstanceOptions& opts = {});

struct CheckResult {
    std::string name;
    bool passed = false;
    int trials = 0;
    std::string detail;
};

struct SuiteReport {
    std::uint64_t seed = 0;
    std::vector<CheckResult> checks;

    bool passed() const;
    int failures() const;
    std::string to_text() const;
    std::string to_json() const;
};

SuiteReport run_check_suite(std::uint64_t seed);

} // namespace calibrl
