#pragma once

#include "calibrl/environment.hpp"
#include "calibrl/objective.hpp"
#include "calibrl/types.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace calibrl {

enum class TrainMode { grpo, sft_then_grpo, sft_mix, grpo_entropy_bonus, calibrl };

std::string to_string(TrainMode mode);
/// Throws ConfigError for an unknown mode name.
TrainMode parse_train_mode(const std::string& name);

/// Per-step compute accounting, in the units of a per-prompt cost table:
/// a forward is one sequence scored, a backward one sequence differentiated.
struct ComputeCounters {
    long forward = 0;
    long backward = 0;
    long reward_queries = 0;
    long expert_reward_queries = 0;
};

struct StepMetrics {
    int step = 0;
    double mean_reward = 0.0;
    double accuracy = 0.0; ///< fraction of correct rollouts
    double entropy = 0.0;  ///< mean per-state entropy over visited rollout states
    double delta_ell = 0.0;
    double resp_len = 0.0;
    double objective = 0.0;
    long fwd = 0;
    long bwd = 0;
    int zero_variance_groups = 0;

    bool operator==(const StepMetrics&) const = default;
};

inline constexpr const char* kMetricsHeader =
    "step,mean_reward,accuracy,entropy,delta_ell,resp_len,objective,fwd,bwd";

std::string metrics_csv_row(const StepMetrics& m);

/// One fixed demonstration per prompt, collected once before training.
using ExpertDataset = std::map<PromptId, ExpertDemo>;

ExpertDataset build_expert_dataset(std::span<const TaskInstance> tasks, const TrainConfig& config);

/// G sampled trajectories plus the prompt's expert demo for every task in `batch`.
/// Trajectories for batch slot j draw from stream_seed(stream, j). Adds G + 1
/// forwards and G reward queries per prompt to `counters`.
std::vector<RolloutGroup> collect_rollouts(const PolicyParams& params, std::span<const TaskInstance> batch,
                                           const ExpertDataset& experts, const TrainConfig& config,
                                           std::uint64_t stream, ComputeCounters& counters);

/// Objective of `mode` for one group at `params`, with its ascent gradient.
ValueAndGradient mode_objective(const PolicyParams& params, const RolloutGroup& group,
                                const TrainConfig& config, TrainMode mode,
                                const PolicyParams* reference);

struct StepResult {
    PolicyParams params;
    StepMetrics metrics;
};

/// One rollout batch consumed in config.minibatches gradient-ascent updates.
/// Metrics describe the pre-update rollouts. Throws NumericalError on a
/// non-finite gradient.
StepResult train_step(const PolicyParams& params, std::span<const RolloutGroup> groups,
                      const TrainConfig& config, TrainMode mode, const PolicyParams* reference,
                      ComputeCounters& counters);

/// Full-batch gradient descent on the mean expert NLL.
PolicyParams sft_pretrain(PolicyParams params, const ExpertDataset& experts, const TrainConfig& config,
                          int epochs);

struct ExactEval {
    double expected_reward = 0.0;
    double accuracy = 0.0;
};

/// Exact expected reward and probability of a correct response, averaged over tasks.
/// Throws InputError when vocab_size^max_len exceeds 1e7.
ExactEval exact_eval(const PolicyParams& params, std::span<const TaskInstance> tasks, int max_len,
                     double temperature, double format_bonus);
inline ExactEval exact_eval(const PolicyParams& params, std::span<const TaskInstance> tasks,
                            const TrainConfig& config) {
    return exact_eval(params, tasks, config.max_response_length, config.temperature, config.format_bonus);
}

struct ExperimentResult {
    PolicyParams params;
    std::vector<StepMetrics> metrics;
    std::vector<TaskInstance> tasks;
};

/// The task pool for a run; deterministic in config.seed.
std::vector<TaskInstance> experiment_tasks(const TrainConfig& config);

/// Runs config.steps steps. When `output_dir` is non-empty it receives
/// config_resolved.json, tasks.jsonl, metrics.csv and ckpt_step{N}.json files.
ExperimentResult run_experiment(const TrainConfig& config, TrainMode mode,
                                const std::filesystem::path& output_dir,
                                const std::function<void(const StepMetrics&)>& on_step = {});

} // namespace calibrl
