#include "calibrl/objective.hpp"
#include "calibrl/random.hpp"
#include "calibrl/trainer.hpp"

#include <benchmark/benchmark.h>

using namespace calibrl;

namespace {

// A policy that has seen some training, so the benchmarks touch realistic rows.
struct Trained {
    TrainConfig config;
    ExperimentResult result;
    ExpertDataset experts;

    explicit Trained(int steps) {
        config.steps = steps;
        result = run_experiment(config, TrainMode::calibrl, {});
        experts = build_expert_dataset(result.tasks, config);
    }
};

const Trained& trained() {
    static const Trained t(100);
    return t;
}

void BM_SampleTrajectory(benchmark::State& state) {
    const auto& t = trained();
    Rng rng(1);
    std::size_t i = 0;
    for (auto _ : state) {
        const auto& task = t.result.tasks[i++ % t.result.tasks.size()];
        benchmark::DoNotOptimize(sample_trajectory(t.result.params, task, 1.0, t.config.max_response_length, rng,
                                                   t.config.format_bonus));
    }
}
BENCHMARK(BM_SampleTrajectory);

void BM_CollectRollouts(benchmark::State& state) {
    const auto& t = trained();
    TrainConfig c = t.config;
    c.G = static_cast<int>(state.range(0));
    std::uint64_t stream = 0;
    for (auto _ : state) {
        ComputeCounters counters;
        benchmark::DoNotOptimize(collect_rollouts(t.result.params, t.result.tasks, t.experts, c, stream++, counters));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<long>(t.result.tasks.size()) * c.G);
}
BENCHMARK(BM_CollectRollouts)->Arg(4)->Arg(10)->Arg(32);

void BM_CombinedObjective(benchmark::State& state) {
    const auto& t = trained();
    TrainConfig c = t.config;
    c.G = static_cast<int>(state.range(0));
    ComputeCounters counters;
    const auto groups = collect_rollouts(t.result.params, t.result.tasks, t.experts, c, 7, counters);
    std::size_t i = 0;
    for (auto _ : state) benchmark::DoNotOptimize(combined_objective(t.result.params, groups[i++ % groups.size()], c));
}
BENCHMARK(BM_CombinedObjective)->Arg(4)->Arg(10)->Arg(32);

void BM_TrainStep(benchmark::State& state) {
    const auto& t = trained();
    const TrainMode mode = state.range(0) ? TrainMode::calibrl : TrainMode::grpo;
    ComputeCounters counters;
    std::vector<TaskInstance> batch;
    for (int j = 0; j < t.config.prompts_per_step; ++j) batch.push_back(t.result.tasks[static_cast<std::size_t>(j) % t.result.tasks.size()]);
    const auto groups = collect_rollouts(t.result.params, batch, t.experts, t.config, 3, counters);
    const PolicyParams reference(t.config.vocab_size(), t.config.context_window);
    for (auto _ : state) benchmark::DoNotOptimize(train_step(t.result.params, groups, t.config, mode, &reference, counters));
    state.SetLabel(to_string(mode));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1);

void BM_ExactEval(benchmark::State& state) {
    const auto& t = trained();
    const int max_len = static_cast<int>(state.range(0));
    for (auto _ : state)
        benchmark::DoNotOptimize(exact_eval(t.result.params, t.result.tasks, max_len, 1.0, t.config.format_bonus));
}
BENCHMARK(BM_ExactEval)->Arg(3)->Arg(6);

} // namespace

BENCHMARK_MAIN();
