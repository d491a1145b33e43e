#include "calibrl/trainer.hpp"

#include "calibrl/advantage.hpp"
#include "calibrl/policy.hpp"
#include "calibrl/random.hpp"
#include "calibrl/serialization.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace calibrl {

namespace {

// stream tags
constexpr std::uint64_t kTaskStream = 0x7a5c;
constexpr std::uint64_t kExpertStream = 0xe8e7;
constexpr std::uint64_t kBatchStream = 0xba7c;
constexpr std::uint64_t kRolloutStream = 0x4011;

std::string diagnose_non_finite(const Gradient& g) {
    for (const auto& [key, values] : g) {
        for (std::size_t v = 0; v < values.size(); ++v) {
            if (!std::isfinite(values[v])) {
                std::string ctx;
                for (Token t : key.trailing) ctx += (ctx.empty() ? "" : " ") + std::to_string(t);
                return "non-finite gradient at prompt " + std::to_string(key.prompt_id) + " context [" +
                       ctx + "] token " + std::to_string(v);
            }
        }
    }
    return "non-finite gradient";
}

} // namespace

std::string to_string(TrainMode mode) {
    switch (mode) {
    case TrainMode::grpo: return "grpo";
    case TrainMode::sft_then_grpo: return "sft_then_grpo";
    case TrainMode::sft_mix: return "sft_mix";
    case TrainMode::grpo_entropy_bonus: return "grpo_entropy_bonus";
    case TrainMode::calibrl: return "calibrl";
    }
    return "?";
}

TrainMode parse_train_mode(const std::string& name) {
    for (auto m : {TrainMode::grpo, TrainMode::sft_then_grpo, TrainMode::sft_mix,
                   TrainMode::grpo_entropy_bonus, TrainMode::calibrl})
        if (to_string(m) == name) return m;
    throw ConfigError("unknown mode '" + name + "'");
}

std::string metrics_csv_row(const StepMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%ld,%ld", m.step,
                  m.mean_reward, m.accuracy, m.entropy, m.delta_ell, m.resp_len, m.objective, m.fwd,
                  m.bwd);
    return buf;
}

ExpertDataset build_expert_dataset(std::span<const TaskInstance> tasks, const TrainConfig& config) {
    ExpertDataset experts;
    for (const auto& task : tasks) {
        if (experts.contains(task.prompt_id)) continue;
        experts.emplace(task.prompt_id,
                        expert_demo(task, config.expert_error_rate, ThinkLengthDistribution{},
                                    stream_seed(config.seed, kExpertStream,
                                                static_cast<std::uint64_t>(task.prompt_id))));
    }
    return experts;
}

std::vector<RolloutGroup> collect_rollouts(const PolicyParams& params, std::span<const TaskInstance> batch,
                                           const ExpertDataset& experts, const TrainConfig& config,
                                           std::uint64_t stream, ComputeCounters& counters) {
    std::vector<RolloutGroup> groups;
    groups.reserve(batch.size());
    for (std::size_t j = 0; j < batch.size(); ++j) {
        const auto& task = batch[j];
        auto it = experts.find(task.prompt_id);
        if (it == experts.end())
            throw InputError("no expert demonstration for prompt " + std::to_string(task.prompt_id));
        Rng rng(stream_seed(stream, j));
        std::vector<Trajectory> trajs;
        trajs.reserve(static_cast<std::size_t>(config.G));
        for (int i = 0; i < config.G; ++i)
            trajs.push_back(sample_trajectory(params, task, config.temperature, config.max_response_length,
                                              rng, config.format_bonus));
        groups.emplace_back(task.prompt_id, std::move(trajs), it->second, config.G);
        // G rollouts scored plus one expert log-prob; only rollouts hit the verifier
        counters.forward += config.G + 1;
        counters.reward_queries += config.G;
    }
    return groups;
}

ValueAndGradient mode_objective(const PolicyParams& params, const RolloutGroup& group,
                                const TrainConfig& config, TrainMode mode, const PolicyParams* reference) {
    TrainConfig cfg = config;
    if (mode != TrainMode::calibrl) cfg.lambda = 0.0;
    auto breakdown = combined_objective(params, group, cfg, reference);
    ValueAndGradient out{breakdown.total, std::move(breakdown.gradient)};

    if (mode == TrainMode::sft_mix && config.sft_mix_weight != 0.0) {
        const auto nll = sft_nll_loss(params, group.expert(), config.temperature);
        out.value -= config.sft_mix_weight * nll.value;
        out.gradient.add_scaled(nll.gradient, -config.sft_mix_weight);
    } else if (mode == TrainMode::grpo_entropy_bonus && config.entropy_coef != 0.0) {
        std::vector<StateKey> states;
        for (const auto& traj : group.trajectories())
            for (auto& s : visited_states(traj.prompt_id, traj.response, params.context_window))
                states.push_back(std::move(s));
        if (!states.empty()) {
            out.value += config.entropy_coef * mean_token_entropy(params, states, config.temperature);
            const double scale = config.entropy_coef / static_cast<double>(states.size());
            for (const auto& s : states)
                accumulate_entropy_gradient(params, s, config.temperature, scale, out.gradient);
        }
    }
    return out;
}

StepResult train_step(const PolicyParams& params, std::span<const RolloutGroup> groups,
                       const TrainConfig& config, TrainMode mode, const PolicyParams* reference,
                       ComputeCounters& counters) {
    if (groups.empty()) throw InputError("train_step requires at least one group");
    StepResult result{params, {}};
    StepMetrics& m = result.metrics;

    // metrics on the pre-update rollouts
    std::vector<StateKey> states;
    long n_traj = 0, n_correct = 0;
    double reward_sum = 0.0, len_sum = 0.0, dl_sum = 0.0;
    for (const auto& g : groups) {
        const auto rewards = g.rewards();
        const auto adv = group_advantages(rewards, AdvantageMode::mean_centered);
        bool degenerate = true;
        for (double a : adv) degenerate = degenerate && a == 0.0;
        m.zero_variance_groups += degenerate ? 1 : 0;
        for (const auto& t : g.trajectories()) {
            ++n_traj;
            n_correct += t.correct ? 1 : 0;
            reward_sum += t.reward;
            len_sum += static_cast<double>(t.response.size());
            dl_sum += delta_ell(params, t.prompt_id, t.response, g.expert().response, false,
                                config.temperature);
            for (auto& s : visited_states(t.prompt_id, t.response, params.context_window))
                states.push_back(std::move(s));
        }
    }
    m.mean_reward = reward_sum / static_cast<double>(n_traj);
    m.accuracy = static_cast<double>(n_correct) / static_cast<double>(n_traj);
    m.resp_len = len_sum / static_cast<double>(n_traj);
    m.delta_ell = dl_sum / static_cast<double>(n_traj);
    m.entropy = mean_token_entropy(params, states, config.temperature);

    // minibatch updates; the first minibatch sees the pre-update params
    const std::size_t n_groups = groups.size();
    const auto n_mb = static_cast<std::size_t>(config.minibatches);
    double objective_sum = 0.0;
    for (std::size_t b = 0; b < n_mb; ++b) {
        const std::size_t lo = b * n_groups / n_mb;
        const std::size_t hi = (b + 1) * n_groups / n_mb;
        if (lo == hi) continue;
        Gradient direction = params.zero_gradient();
        for (std::size_t i = lo; i < hi; ++i) {
            auto vg = mode_objective(result.params, groups[i], config, mode, reference);
            direction.add_scaled(vg.gradient, 1.0);
            if (b == 0) objective_sum += vg.value;
            counters.backward += groups[i].size() + (mode == TrainMode::sft_mix ? 1 : 0);
        }
        if (!direction.all_finite()) throw NumericalError(diagnose_non_finite(direction));
        apply_update(result.params, direction, config.learning_rate / static_cast<double>(hi - lo));
    }
    if (n_mb > 1) {
        objective_sum = 0.0;
        for (const auto& g : groups) objective_sum += mode_objective(params, g, config, mode, reference).value;
    }
    m.objective = objective_sum / static_cast<double>(n_groups);
    return result;
}

PolicyParams sft_pretrain(PolicyParams params, const ExpertDataset& experts, const TrainConfig& config,
                          int epochs) {
    if (experts.empty()) return params;
    const double step = config.learning_rate / static_cast<double>(experts.size());
    for (int e = 0; e < epochs; ++e) {
        Gradient direction = params.zero_gradient();
        for (const auto& [pid, demo] : experts)
            direction.add_scaled(sft_nll_loss(params, demo, config.temperature).gradient, -1.0);
        if (!direction.all_finite()) throw NumericalError(diagnose_non_finite(direction));
        apply_update(params, direction, step);
    }
    return params;
}

ExactEval exact_eval(const PolicyParams& params, std::span<const TaskInstance> tasks, int max_len,
                     double temperature, double format_bonus) {
    if (tasks.empty()) throw InputError("exact_eval requires at least one task");
    if (std::pow(static_cast<double>(params.vocab_size), max_len) > 1e7)
        throw InputError("enumeration guard exceeded: vocab_size^max_len > 1e7");

    // Only THINK^n ANS d EOS responses carry reward; every other response has
    // reward 0 and so is skipped without changing either expectation.
    ExactEval out;
    for (const auto& task : tasks) {
        const Vocabulary vocab = task.vocab();
        if (vocab.size() != params.vocab_size) throw InputError("task vocabulary does not match policy");
        std::vector<Token> prefix;
        double prefix_mass = 1.0;
        for (int n = 0; n + 3 <= max_len; ++n) {
            const auto p_ans = token_distribution(
                params, state_at(task.prompt_id, prefix, prefix.size(), params.context_window), temperature);
            std::vector<Token> with_ans = prefix;
            with_ans.push_back(vocab.ans());
            const auto p_digit = token_distribution(
                params, state_at(task.prompt_id, with_ans, with_ans.size(), params.context_window),
                temperature);
            for (int d = 0; d < task.modulus; ++d) {
                std::vector<Token> with_digit = with_ans;
                with_digit.push_back(vocab.digit(d));
                const auto p_eos = token_distribution(
                    params, state_at(task.prompt_id, with_digit, with_digit.size(), params.context_window),
                    temperature);
                const double mass = prefix_mass * p_ans[static_cast<std::size_t>(vocab.ans())] *
                                    p_digit[static_cast<std::size_t>(d)] *
                                    p_eos[static_cast<std::size_t>(vocab.eos())];
                const bool correct = vocab.digit(d) == task.answer_token;
                out.expected_reward += mass * ((correct ? 1.0 : 0.0) + format_bonus);
                out.accuracy += correct ? mass : 0.0;
            }
            prefix_mass *= p_ans[static_cast<std::size_t>(vocab.think())];
            prefix.push_back(vocab.think());
        }
    }
    out.expected_reward /= static_cast<double>(tasks.size());
    out.accuracy /= static_cast<double>(tasks.size());
    return out;
}

std::vector<TaskInstance> experiment_tasks(const TrainConfig& config) {
    return generate_tasks(config.modulus, config.num_tasks, stream_seed(config.seed, kTaskStream));
}

ExperimentResult run_experiment(const TrainConfig& config, TrainMode mode,
                                const std::filesystem::path& output_dir,
                                const std::function<void(const StepMetrics&)>& on_step) {
    config.validate();
    ExperimentResult result;
    result.tasks = experiment_tasks(config);
    const ExpertDataset experts = build_expert_dataset(result.tasks, config);
    result.params = PolicyParams(config.vocab_size(), config.context_window);
    const PolicyParams reference = result.params;

    const bool write = !output_dir.empty();
    std::ofstream metrics_out;
    if (write) {
        std::error_code ec;
        std::filesystem::create_directories(output_dir, ec);
        if (ec) throw IoError("cannot create " + output_dir.string() + ": " + ec.message());
        json resolved = to_document(config);
        resolved["mode"] = to_string(mode);
        write_text_file(output_dir / "config_resolved.json", resolved.dump(2) + "\n");
        save_tasks(result.tasks, output_dir / "tasks.jsonl");
        metrics_out.open(output_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
        if (!metrics_out) throw IoError("cannot open " + (output_dir / "metrics.csv").string());
        metrics_out << kMetricsHeader << '\n';
    }
    auto checkpoint = [&](int step) {
        if (write)
            save_checkpoint(result.params, output_dir / ("ckpt_step" + std::to_string(step) + ".json"));
    };

    if (mode == TrainMode::sft_then_grpo)
        result.params = sft_pretrain(std::move(result.params), experts, config, config.sft_epochs);
    const TrainMode rl_mode = mode == TrainMode::sft_then_grpo ? TrainMode::grpo : mode;

    for (int step = 0; step < config.steps; ++step) {
        Rng batch_rng(stream_seed(config.seed, kBatchStream, static_cast<std::uint64_t>(step)));
        std::vector<TaskInstance> batch;
        for (int j = 0; j < config.prompts_per_step; ++j)
            batch.push_back(result.tasks[uniform_index(batch_rng, result.tasks.size())]);

        ComputeCounters counters;
        const auto groups =
            collect_rollouts(result.params, batch, experts, config,
                             stream_seed(config.seed, kRolloutStream, static_cast<std::uint64_t>(step)),
                             counters);
        StepResult sr;
        try {
            sr = train_step(result.params, groups, config, rl_mode, &reference, counters);
        } catch (const NumericalError& e) {
            if (write) {
                json dump = to_document(result.params);
                dump["step"] = step;
                dump["error"] = e.what();
                dump["groups"] = json::array();
                for (const auto& g : groups) dump["groups"].push_back(group_to_json(g));
                write_text_file(output_dir / "diagnostic_dump.json", dump.dump() + "\n");
            }
            throw NumericalError("step " + std::to_string(step) + ": " + e.what());
        }
        result.params = std::move(sr.params);
        sr.metrics.step = step;
        sr.metrics.fwd = counters.forward;
        sr.metrics.bwd = counters.backward;
        result.metrics.push_back(sr.metrics);
        if (write) {
            metrics_out << metrics_csv_row(sr.metrics) << '\n';
            if (!metrics_out) throw IoError("write failed for " + (output_dir / "metrics.csv").string());
        }
        if (on_step) on_step(sr.metrics);
        if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps)
            checkpoint(step + 1);
    }
    checkpoint(config.steps);
    return result;
}

} // namespace calibrl
