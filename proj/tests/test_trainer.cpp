#include "calibrl/trainer.hpp"

#include "calibrl/advantage.hpp"
#include "calibrl/random.hpp"
#include "calibrl/serialization.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace calibrl;

namespace {

TrainConfig small_config() {
    TrainConfig c;
    c.modulus = 4;
    c.num_tasks = 4;
    c.max_response_length = 5;
    c.context_window = 2;
    c.G = 6;
    c.prompts_per_step = 4;
    c.steps = 20;
    c.checkpoint_every = 5;
    c.learning_rate = 5.0;
    c.seed = 3;
    return c;
}

std::vector<RolloutGroup> rollouts(const TrainConfig& c, int prompts, std::uint64_t stream, ComputeCounters& counters,
                                   const PolicyParams* params = nullptr) {
    const auto tasks = experiment_tasks(c);
    const auto experts = build_expert_dataset(tasks, c);
    std::vector<TaskInstance> batch;
    for (int j = 0; j < prompts; ++j) batch.push_back(tasks[static_cast<std::size_t>(j) % tasks.size()]);
    const PolicyParams fresh(c.vocab_size(), c.context_window);
    return collect_rollouts(params ? *params : fresh, batch, experts, c, stream, counters);
}

// Most mass on ANS d EOS, so sampled groups mix correct, wrong and malformed answers.
PolicyParams answering_policy(const TrainConfig& c, std::uint64_t seed) {
    PolicyParams p(c.vocab_size(), c.context_window);
    const Vocabulary v{c.modulus};
    Rng rng(seed);
    for (const auto& t : experiment_tasks(c)) {
        for (double& x : p.logits.row({t.prompt_id, {}})) x = 0.1 * (uniform01(rng) - 0.5);
        p.logits.row({t.prompt_id, {}})[static_cast<std::size_t>(v.ans())] += 2.0;
        for (int d = 0; d < c.modulus; ++d) {
            auto& row = p.logits.row({t.prompt_id, {v.ans(), d}});
            for (double& x : row) x = 0.1 * (uniform01(rng) - 0.5);
            row[static_cast<std::size_t>(v.eos())] += 2.0;
        }
    }
    return p;
}

std::size_t count_lines(const std::string& text) {
    return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

} // namespace

TEST(TrainMode, NamesRoundTrip) {
    for (auto m : {TrainMode::grpo, TrainMode::sft_then_grpo, TrainMode::sft_mix, TrainMode::grpo_entropy_bonus,
                   TrainMode::calibrl})
        EXPECT_EQ(parse_train_mode(to_string(m)), m);
    EXPECT_THROW(parse_train_mode("ppo"), ConfigError);
}

TEST(ComputeCounters, CollectRolloutsChargesGPlusOneForwards) {
    auto c = small_config();
    c.G = 10;
    ComputeCounters counters;
    const auto groups = rollouts(c, 4, 1, counters);
    EXPECT_EQ(groups.size(), 4u);
    EXPECT_EQ(counters.forward, 44);
    EXPECT_EQ(counters.reward_queries, 40);
    EXPECT_EQ(counters.expert_reward_queries, 0);
}

TEST(ComputeCounters, StepCountsForTenPrompts) {
    auto c = small_config();
    c.G = 10;
    for (auto mode : {TrainMode::grpo, TrainMode::calibrl, TrainMode::grpo_entropy_bonus, TrainMode::sft_mix}) {
        ComputeCounters counters;
        const auto groups = rollouts(c, 10, 2, counters);
        const PolicyParams p(c.vocab_size(), c.context_window);
        train_step(p, groups, c, mode, &p, counters);
        EXPECT_EQ(counters.forward, 110) << to_string(mode);
        EXPECT_EQ(counters.backward, mode == TrainMode::sft_mix ? 110 : 100) << to_string(mode);
        EXPECT_EQ(counters.expert_reward_queries, 0);
    }
}

TEST(ComputeCounters, MetricsRowsCarryPerStepCounts) {
    auto c = small_config();
    c.steps = 3;
    const auto r = run_experiment(c, TrainMode::calibrl, {});
    for (const auto& m : r.metrics) {
        EXPECT_EQ(m.fwd, c.prompts_per_step * (c.G + 1));
        EXPECT_EQ(m.bwd, c.prompts_per_step * c.G);
    }
}

TEST(Rollouts, GroupsAreWellFormed) {
    const auto c = small_config();
    ComputeCounters counters;
    const auto groups = rollouts(c, 4, 9, counters);
    const auto tasks = experiment_tasks(c);
    for (std::size_t j = 0; j < groups.size(); ++j) {
        const auto& task = tasks[j % tasks.size()];
        EXPECT_EQ(groups[j].prompt_id(), task.prompt_id);
        EXPECT_EQ(groups[j].size(), c.G);
        for (const auto& t : groups[j].trajectories()) {
            EXPECT_LE(t.response.size(), static_cast<std::size_t>(c.max_response_length));
            EXPECT_EQ(t.old_logprobs.size(), t.response.size());
            const auto outcome = verify(task, t.response, c.format_bonus);
            EXPECT_EQ(t.reward, outcome.reward);
            EXPECT_EQ(t.correct, outcome.correct);
        }
    }
    EXPECT_THROW(collect_rollouts(PolicyParams(c.vocab_size(), 2), tasks, ExpertDataset{}, c, 0, counters),
                 InputError);
}

TEST(Experiment, DeterministicInSeed) {
    const auto c = small_config();
    const auto a = run_experiment(c, TrainMode::calibrl, {});
    const auto b = run_experiment(c, TrainMode::calibrl, {});
    EXPECT_EQ(a.metrics, b.metrics);
    EXPECT_EQ(a.params, b.params);
    auto other = c;
    other.seed = 4;
    EXPECT_NE(run_experiment(other, TrainMode::calibrl, {}).params, a.params);
}

TEST(Experiment, CalibrlWithZeroLambdaMatchesGrpo) {
    auto c = small_config();
    c.lambda = 0.0;
    const auto a = run_experiment(c, TrainMode::calibrl, {});
    const auto b = run_experiment(c, TrainMode::grpo, {});
    EXPECT_EQ(a.metrics, b.metrics);
    EXPECT_EQ(a.params, b.params);
}

TEST(Experiment, ZeroStepsWritesHeaderAndInitialCheckpoint) {
    oracle::TempDir dir("zero");
    auto c = small_config();
    c.steps = 0;
    const auto r = run_experiment(c, TrainMode::grpo, dir.path());
    EXPECT_TRUE(r.metrics.empty());
    EXPECT_EQ(oracle::slurp(dir.path() / "metrics.csv"), std::string(kMetricsHeader) + "\n");
    EXPECT_EQ(load_checkpoint(dir.path() / "ckpt_step0.json"), PolicyParams(c.vocab_size(), c.context_window));
}

TEST(Experiment, WritesArtifacts) {
    oracle::TempDir dir("artifacts");
    const auto c = small_config();
    const auto r = run_experiment(c, TrainMode::calibrl, dir.path());
    const std::string csv = oracle::slurp(dir.path() / "metrics.csv");
    EXPECT_EQ(count_lines(csv), static_cast<std::size_t>(c.steps) + 1);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);
    EXPECT_NE(csv.find("\n" + metrics_csv_row(r.metrics.back()) + "\n"), std::string::npos);

    const json resolved = read_json_file(dir.path() / "config_resolved.json");
    EXPECT_EQ(resolved.at("mode"), "calibrl");
    json without_mode = resolved;
    without_mode.erase("mode");
    EXPECT_EQ(without_mode.get<TrainConfig>(), c);
    EXPECT_EQ(load_tasks(dir.path() / "tasks.jsonl"), r.tasks);

    for (int s : {5, 10, 15, 20}) EXPECT_TRUE(std::filesystem::exists(dir.path() / ("ckpt_step" + std::to_string(s) + ".json"))) << s;
    EXPECT_FALSE(std::filesystem::exists(dir.path() / "ckpt_step0.json"));
    EXPECT_EQ(load_checkpoint(dir.path() / "ckpt_step20.json"), r.params);
}

TEST(Experiment, CallbackSeesEveryStep) {
    const auto c = small_config();
    std::vector<int> seen;
    run_experiment(c, TrainMode::grpo, {}, [&](const StepMetrics& m) { seen.push_back(m.step); });
    ASSERT_EQ(seen.size(), static_cast<std::size_t>(c.steps));
    for (int i = 0; i < c.steps; ++i) EXPECT_EQ(seen[static_cast<std::size_t>(i)], i);
}

TEST(Experiment, TrainingImprovesExactAccuracy) {
    auto c = small_config();
    c.steps = 150;
    const auto r = run_experiment(c, TrainMode::grpo, {});
    const double before = exact_eval(PolicyParams(c.vocab_size(), c.context_window), r.tasks, c).accuracy;
    const double after = exact_eval(r.params, r.tasks, c).accuracy;
    EXPECT_GT(after, before + 0.3);
}

TEST(TrainStep, MetricsDescribeTheRollouts) {
    const auto c = small_config();
    ComputeCounters counters;
    const auto groups = rollouts(c, 4, 5, counters);
    const PolicyParams p(c.vocab_size(), c.context_window);
    const auto r = train_step(p, groups, c, TrainMode::grpo, &p, counters);
    double reward = 0.0, len = 0.0;
    int correct = 0, n = 0;
    for (const auto& g : groups)
        for (const auto& t : g.trajectories()) {
            reward += t.reward;
            len += static_cast<double>(t.response.size());
            correct += t.correct ? 1 : 0;
            ++n;
        }
    EXPECT_NEAR(r.metrics.mean_reward, reward / n, 1e-12);
    EXPECT_NEAR(r.metrics.resp_len, len / n, 1e-12);
    EXPECT_NEAR(r.metrics.accuracy, static_cast<double>(correct) / n, 1e-12);
    // uniform policy: every state has entropy log V
    EXPECT_NEAR(r.metrics.entropy, std::log(static_cast<double>(c.vocab_size())), 1e-12);
}

TEST(TrainStep, UpdateFollowsTheMeanGradient) {
    auto c = small_config();
    ComputeCounters counters;
    const auto groups = rollouts(c, 4, 6, counters);
    const PolicyParams p(c.vocab_size(), c.context_window);
    const auto r = train_step(p, groups, c, TrainMode::calibrl, &p, counters);
    PolicyParams expected = p;
    Gradient sum = p.zero_gradient();
    for (const auto& g : groups) sum.add_scaled(combined_objective(p, g, c, &p).gradient, 1.0);
    apply_update(expected, sum, c.learning_rate / 4.0);
    for (const auto& [key, row] : expected.logits)
        for (int v = 0; v < c.vocab_size(); ++v) EXPECT_NEAR(r.params.logits.get(key, v), row[static_cast<std::size_t>(v)], 1e-12);
}

TEST(TrainStep, SmallStepsIncreaseTheObjective) {
    auto c = small_config();
    ComputeCounters counters;
    const PolicyParams p = answering_policy(c, 8);
    const auto groups = rollouts(c, 4, 7, counters, &p);
    auto total = [&](const PolicyParams& q) {
        double v = 0.0;
        for (const auto& g : groups) v += combined_objective(q, g, c, &p).total;
        return v;
    };
    Gradient dir = p.zero_gradient();
    for (const auto& g : groups) dir.add_scaled(combined_objective(p, g, c, &p).gradient, 1.0);
    ASSERT_GT(dir.max_abs(), 0.0);
    const double base = total(p);
    for (double eta : {1e-3, 1e-4, 1e-5}) {
        PolicyParams q = p;
        apply_update(q, dir, eta);
        const double gain = total(q) - base;
        EXPECT_GT(gain, 0.0) << eta;
        // first-order prediction
        EXPECT_NEAR(gain / (eta * dir.dot(dir)), 1.0, 0.05) << eta;
    }
}

TEST(TrainStep, GroupOrderDoesNotMatter) {
    const auto c = small_config();
    ComputeCounters counters;
    auto groups = rollouts(c, 4, 10, counters);
    const PolicyParams p(c.vocab_size(), c.context_window);
    const auto a = train_step(p, groups, c, TrainMode::calibrl, &p, counters);
    std::reverse(groups.begin(), groups.end());
    const auto b = train_step(p, groups, c, TrainMode::calibrl, &p, counters);
    for (const auto& [key, row] : a.params.logits)
        for (int v = 0; v < c.vocab_size(); ++v) EXPECT_NEAR(b.params.logits.get(key, v), row[static_cast<std::size_t>(v)], 1e-12);
    EXPECT_NEAR(a.metrics.objective, b.metrics.objective, 1e-12);
    EXPECT_NEAR(a.metrics.entropy, b.metrics.entropy, 1e-12);
}

TEST(TrainStep, NonFiniteGradientIsReported) {
    const auto c = small_config();
    ComputeCounters counters;
    PolicyParams p = answering_policy(c, 11);
    const auto groups = rollouts(c, 4, 11, counters, &p);
    p.logits.row({groups[0].prompt_id(), {}})[0] = std::nan("");
    try {
        train_step(p, groups, c, TrainMode::grpo, &p, counters);
        FAIL() << "no NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite gradient at prompt"), std::string::npos) << e.what();
    }
    EXPECT_THROW(train_step(p, std::vector<RolloutGroup>{}, c, TrainMode::grpo, &p, counters), InputError);
}

TEST(SftPretrain, RaisesExpertLikelihood) {
    const auto c = small_config();
    const auto tasks = experiment_tasks(c);
    const auto experts = build_expert_dataset(tasks, c);
    const PolicyParams p(c.vocab_size(), c.context_window);
    const auto q = sft_pretrain(p, experts, c, 20);
    for (const auto& [pid, demo] : experts)
        EXPECT_GT(sequence_logprob(q, pid, demo.response), sequence_logprob(p, pid, demo.response) + 1.0);
}

TEST(ExpertDataset, OneFixedDemoPerPrompt) {
    const auto c = small_config();
    const auto tasks = experiment_tasks(c);
    const auto experts = build_expert_dataset(tasks, c);
    for (const auto& t : tasks) ASSERT_TRUE(experts.contains(t.prompt_id));
    EXPECT_EQ(build_expert_dataset(tasks, c), experts);
}

TEST(ExactEval, MatchesMonteCarlo) {
    const auto task_a = make_task(5, 1, 2);
    const auto task_b = make_task(5, 4, 4);
    const std::vector<TaskInstance> tasks{task_a, task_b};
    PolicyParams p(8, 2);
    Rng rng(21);
    // random logits on every reachable state with at most 2 trailing tokens
    for (const auto& t : tasks) {
        for (double& x : p.logits.row({t.prompt_id, {}})) x = 2.0 * (uniform01(rng) - 0.5);
        for (int a = 0; a < 8; ++a) {
            for (double& x : p.logits.row({t.prompt_id, {a}})) x = 2.0 * (uniform01(rng) - 0.5);
            for (int b = 0; b < 8; ++b)
                for (double& x : p.logits.row({t.prompt_id, {a, b}})) x = 2.0 * (uniform01(rng) - 0.5);
        }
        // make the rewarded path likely enough to matter
        p.logits.row({t.prompt_id, {}})[6] += 3.0;
        p.logits.row({t.prompt_id, {6}})[static_cast<std::size_t>(t.answer_token)] += 2.0;
        p.logits.row({t.prompt_id, {6, t.answer_token}})[7] += 3.0;
    }
    const auto exact = exact_eval(p, tasks, 3, 1.0, 0.1);
    ASSERT_GT(exact.accuracy, 0.05);

    const int n = 100000;
    double reward = 0.0;
    int correct = 0;
    Rng sampler(5);
    for (int i = 0; i < n; ++i) {
        const auto traj = sample_trajectory(p, tasks[static_cast<std::size_t>(i % 2)], 1.0, 3, sampler, 0.1);
        reward += traj.reward;
        correct += traj.correct ? 1 : 0;
    }
    EXPECT_NEAR(exact.expected_reward, reward / n, 0.01);
    EXPECT_NEAR(exact.accuracy, static_cast<double>(correct) / n, 0.01);
}

TEST(ExactEval, UniformPolicyClosedForm) {
    // max_len 3 admits only ANS d EOS
    const auto task = make_task(4, 1, 1);
    const std::vector<TaskInstance> tasks{task};
    const auto e = exact_eval(PolicyParams(7, 3), tasks, 3, 1.0, 0.1);
    const double path = 1.0 / (7.0 * 7.0 * 7.0);
    EXPECT_NEAR(e.accuracy, path, 1e-15);
    EXPECT_NEAR(e.expected_reward, path * 1.0 + 4.0 * path * 0.1, 1e-15);
}

TEST(ExactEval, ConcentratedPolicyIsAlwaysRight) {
    const auto task = make_task(8, 3, 7);
    const Vocabulary v = task.vocab();
    PolicyParams p(v.size(), 3);
    p.logits.row({task.prompt_id, {}})[static_cast<std::size_t>(v.ans())] = 60.0;
    p.logits.row({task.prompt_id, {v.ans()}})[static_cast<std::size_t>(task.answer_token)] = 60.0;
    p.logits.row({task.prompt_id, {v.ans(), task.answer_token}})[static_cast<std::size_t>(v.eos())] = 60.0;
    const std::vector<TaskInstance> tasks{task};
    const auto e = exact_eval(p, tasks, 6, 1.0, 0.1);
    EXPECT_NEAR(e.accuracy, 1.0, 1e-12);
    EXPECT_NEAR(e.expected_reward, 1.1, 1e-12);
}

TEST(ExactEval, GuardsAndErrors) {
    const auto task = make_task(8, 1, 1);
    const std::vector<TaskInstance> tasks{task};
    EXPECT_THROW(exact_eval(PolicyParams(11, 3), tasks, 7, 1.0, 0.1), InputError);
    EXPECT_THROW(exact_eval(PolicyParams(11, 3), std::vector<TaskInstance>{}, 3, 1.0, 0.1), InputError);
    EXPECT_THROW(exact_eval(PolicyParams(9, 3), tasks, 3, 1.0, 0.1), InputError);
}

TEST(Metrics, CsvRowFormat) {
    StepMetrics m;
    m.step = 7;
    m.mean_reward = 0.5;
    m.accuracy = 0.25;
    m.entropy = 1.5;
    m.delta_ell = -2.0;
    m.resp_len = 3.0;
    m.objective = 0.125;
    m.fwd = 44;
    m.bwd = 40;
    EXPECT_EQ(metrics_csv_row(m), "7,0.5,0.25,1.5,-2,3,0.125,44,40");
}

TEST(TrainStep, RepeatedStepsOnOneGroupClimbTheSurrogate) {
    auto c = small_config();
    c.lambda = 0.0;
    c.beta_kl = 0.0;
    c.epsilon_clip = 1e9; // clipping never active
    c.learning_rate = 0.5;
    ComputeCounters counters;
    const PolicyParams start = answering_policy(c, 14);
    const auto groups = rollouts(c, 1, 15, counters, &start);
    const auto adv = group_advantages(groups[0].rewards(), c.advantage_mode);
    ASSERT_GT(*std::max_element(adv.begin(), adv.end()), 0.0);

    PolicyParams p = start;
    double previous = grpo_surrogate(p, groups[0], adv, c.epsilon_clip).value;
    for (int step = 0; step < 30; ++step) {
        p = train_step(p, groups, c, TrainMode::grpo, &start, counters).params;
        const double value = grpo_surrogate(p, groups[0], adv, c.epsilon_clip).value;
        EXPECT_GT(value, previous) << "step " << step;
        previous = value;
    }
}
