#include "calibrl/objective.hpp"

#include "calibrl/advantage.hpp"
#include "calibrl/verification.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace calibrl;

namespace {

struct Fixture {
    TaskInstance task;
    PolicyParams params;
    PolicyParams old_params;
    RolloutGroup group;
};

Trajectory traj_under(const PolicyParams& old, const TaskInstance& task, TokenSeq r) {
    Trajectory t;
    t.prompt_id = task.prompt_id;
    t.old_logprobs = token_logprobs(old, task.prompt_id, r);
    const auto outcome = verify(task, r, 0.1);
    t.reward = outcome.reward;
    t.correct = outcome.correct;
    t.response = std::move(r);
    return t;
}

// Modulus 3, window 2: a correct short answer, a correct long answer, a wrong
// answer and a malformed response; the expert thinks twice so it has rows of
// its own.
Fixture make_fixture(std::uint64_t seed, bool perturb_old = true) {
    Fixture f;
    f.task = make_task(3, 1, 1);
    const Vocabulary v = f.task.vocab();
    const Token THINK = v.think(), ANS = v.ans(), EOS = v.eos(), ans = f.task.answer_token;
    const Token wrong = (ans + 1) % 3;
    f.params = PolicyParams(v.size(), 2);
    Rng rng(seed);
    const std::vector<TokenSeq> responses{
        {ANS, ans, EOS}, {THINK, ANS, ans, EOS}, {ANS, wrong, EOS}, {0, 1, EOS}};
    ExpertDemo expert{f.task.prompt_id, TokenSeq{THINK, THINK, ANS, ans, EOS}, true};
    std::vector<StateKey> rows;
    for (const auto& r : responses)
        for (auto& s : visited_states(f.task.prompt_id, r, 2)) rows.push_back(s);
    for (auto& s : visited_states(f.task.prompt_id, expert.response, 2)) rows.push_back(s);
    for (const auto& s : rows)
        for (double& x : f.params.logits.row(s)) x = 2.0 * (uniform01(rng) - 0.5);
    f.old_params = f.params;
    if (perturb_old)
        for (const auto& s : rows)
            for (double& x : f.old_params.logits.row(s)) x += 0.1 * (uniform01(rng) - 0.5);
    std::vector<Trajectory> trajs;
    for (const auto& r : responses) trajs.push_back(traj_under(f.old_params, f.task, r));
    f.group = RolloutGroup(f.task.prompt_id, std::move(trajs), expert, 4);
    return f;
}

TrainConfig config_for(const Fixture& f) {
    TrainConfig c;
    c.G = f.group.size();
    c.modulus = f.task.modulus;
    c.context_window = f.params.context_window;
    return c;
}

} // namespace

TEST(Activation, DocumentedExamples) {
    const ActivationSpec leaky{ActivationKind::leaky_relu, 0.5};
    EXPECT_EQ(activation_eval(leaky, -2.0).value, -1.0);
    EXPECT_EQ(activation_eval(leaky, -2.0).derivative, 0.5);
    for (double a : {0.1, 0.5, 1.0}) {
        const auto v = activation_eval({ActivationKind::leaky_relu, a}, 3.0);
        EXPECT_EQ(v.value, 3.0);
        EXPECT_EQ(v.derivative, 1.0);
    }
    const auto r = activation_eval({ActivationKind::relu, 0.5}, -2.0);
    EXPECT_EQ(r.value, 0.0);
    EXPECT_EQ(r.derivative, 0.0);
}

TEST(Activation, ClosedFormsAtProbePoints) {
    for (double x = -3.0; x <= 3.0; x += 0.37) {
        const double sig = 1.0 / (1.0 + std::exp(-x));
        EXPECT_NEAR(activation_eval({ActivationKind::sigmoid, 0.5}, x).value, sig, 1e-15);
        EXPECT_NEAR(activation_eval({ActivationKind::sigmoid, 0.5}, x).derivative, sig * (1 - sig), 1e-15);
        EXPECT_NEAR(activation_eval({ActivationKind::tanh, 0.5}, x).value, std::tanh(x), 1e-15);
        EXPECT_NEAR(activation_eval({ActivationKind::tanh, 0.5}, x).derivative,
                    1.0 / (std::cosh(x) * std::cosh(x)), 1e-14);
        const double hub = std::abs(x) <= 1 ? x * x / 2 : std::abs(x) - 0.5;
        EXPECT_NEAR(activation_eval({ActivationKind::huber, 0.5}, x).value, hub, 1e-15);
        EXPECT_NEAR(activation_eval({ActivationKind::huber, 0.5}, x).derivative, std::clamp(x, -1.0, 1.0), 1e-15);
    }
}

TEST(Activation, DerivativesMatchFiniteDifferencesAwayFromKinks) {
    const double h = 1e-6;
    for (auto kind : {ActivationKind::leaky_relu, ActivationKind::relu, ActivationKind::sigmoid, ActivationKind::tanh,
                      ActivationKind::huber}) {
        const ActivationSpec spec{kind, 0.3};
        for (double x : {-2.7, -1.3, -0.4, 0.25, 0.8, 1.9}) {
            const double fd = (activation_eval(spec, x + h).value - activation_eval(spec, x - h).value) / (2 * h);
            EXPECT_NEAR(activation_eval(spec, x).derivative, fd, 1e-7) << to_string(kind) << " at " << x;
        }
    }
}

TEST(Activation, KinkConventionAtZero) {
    EXPECT_EQ(activation_eval({ActivationKind::leaky_relu, 0.5}, 0.0).derivative, 1.0);
    EXPECT_EQ(activation_eval({ActivationKind::relu, 0.5}, 0.0).derivative, 1.0);
    EXPECT_EQ(activation_eval({ActivationKind::huber, 0.5}, 0.0).derivative, 0.0);
}

TEST(Activation, LeakyWithUnitSlopeIsLinear) {
    for (double x = -5.0; x <= 5.0; x += 0.5) {
        const auto v = activation_eval({ActivationKind::leaky_relu, 1.0}, x);
        EXPECT_EQ(v.value, x);
        EXPECT_EQ(v.derivative, 1.0);
    }
}

TEST(Activation, SpecValidation) {
    EXPECT_THROW((ActivationSpec{ActivationKind::leaky_relu, 0.0}).validate(), ConfigError);
    EXPECT_THROW((ActivationSpec{ActivationKind::leaky_relu, 1.2}).validate(), ConfigError);
    EXPECT_NO_THROW((ActivationSpec{ActivationKind::relu, 0.0}).validate());
}

TEST(Activation, FaultHookIsScoped) {
    const ActivationSpec leaky{ActivationKind::leaky_relu, 0.5};
    {
        ScopedLeakyDerivativeFault fault(0.9);
        EXPECT_EQ(activation_eval(leaky, -1.0).derivative, 0.9);
        EXPECT_EQ(activation_eval(leaky, 1.0).derivative, 1.0);
    }
    EXPECT_EQ(activation_eval(leaky, -1.0).derivative, 0.5);
}

TEST(ExplorationLoss, DocumentedExamples) {
    const ActivationSpec leaky{ActivationKind::leaky_relu, 0.5};
    EXPECT_NEAR(exploration_loss(0.75, CorrectnessSignal{1}, -0.8, leaky), 0.6, 1e-15);
    EXPECT_NEAR(exploration_loss(0.75, CorrectnessSignal{1}, 0.5, leaky), -0.1875, 1e-15);
    for (auto kind : {ActivationKind::leaky_relu, ActivationKind::relu, ActivationKind::tanh, ActivationKind::huber})
        for (int s : {-1, 1}) EXPECT_EQ(exploration_loss(0.3, CorrectnessSignal{s}, 0.0, {kind, 0.5}), 0.0);
    EXPECT_THROW(exploration_loss(-0.1, CorrectnessSignal{1}, 0.0, leaky), InputError);
}

TEST(DeltaEll, DocumentedExamples) {
    const PolicyParams uniform(8, 3);
    const TokenSeq a{1, 2, 3};
    EXPECT_EQ(delta_ell(uniform, 0, a, a, false), 0.0);
    const TokenSeq two{1, 2}, three{4, 5, 6};
    EXPECT_NEAR(delta_ell(uniform, 0, two, three, false), std::log(8.0), 1e-12);
    EXPECT_NEAR(delta_ell(uniform, 0, two, three, true), 0.0, 1e-15);
}

TEST(DeltaEll, ReferenceBaseline) {
    const auto f = make_fixture(1);
    const auto& r = f.group.trajectories()[0].response;
    EXPECT_EQ(delta_ell_reference(f.params, f.params, f.task.prompt_id, r, false), 0.0);

    const PolicyParams uniform(f.params.vocab_size, 2);
    PolicyParams concentrated = uniform;
    for (std::size_t t = 0; t < r.size(); ++t)
        concentrated.logits.row(state_at(f.task.prompt_id, r.tokens, t, 2))[static_cast<std::size_t>(r[t])] = 4.0;
    EXPECT_GT(delta_ell_reference(concentrated, uniform, f.task.prompt_id, r, false), 0.0);

    for (const auto& t : f.group.trajectories()) {
        const double expected = oracle::sequence_logprob(f.params, f.task.prompt_id, t.response.tokens) -
                                oracle::sequence_logprob(f.old_params, f.task.prompt_id, t.response.tokens);
        EXPECT_NEAR(delta_ell_reference(f.params, f.old_params, f.task.prompt_id, t.response, false), expected, 1e-12);
    }
}

TEST(GrpoSurrogate, RatioOneIdentity) {
    const auto f = make_fixture(2, false);
    const std::vector<double> adv{0.6, -0.2, 0.1, -0.5};
    const auto out = grpo_surrogate(f.params, f.group, adv, 0.2);
    double value = 0.0;
    Gradient expected = f.params.zero_gradient();
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& t = f.group.trajectories()[i];
        value += adv[i] * static_cast<double>(t.response.size()) / 4.0;
        expected.add_scaled(logprob_gradient(f.params, t.prompt_id, t.response), adv[i] / 4.0);
    }
    EXPECT_NEAR(out.value, value, 1e-12);
    for (const auto& [key, row] : expected)
        for (int v = 0; v < f.params.vocab_size; ++v) EXPECT_NEAR(out.gradient.get(key, v), row[static_cast<std::size_t>(v)], 1e-12);
}

TEST(GrpoSurrogate, ZeroAdvantagesGiveNothing) {
    const auto f = make_fixture(3);
    const std::vector<double> zeros(4, 0.0);
    const auto out = grpo_surrogate(f.params, f.group, zeros, 0.2);
    EXPECT_EQ(out.value, 0.0);
    EXPECT_EQ(out.gradient.max_abs(), 0.0);
    EXPECT_THROW(grpo_surrogate(f.params, f.group, std::vector<double>(3, 0.0), 0.2), InputError);
}

TEST(GrpoSurrogate, ActiveClipBlocksGradient) {
    // one-token group: old policy uniform, new policy strongly favours the token
    const auto task = make_task(3, 0, 0);
    PolicyParams old(task.vocab().size(), 1);
    PolicyParams p = old;
    p.logits.row({task.prompt_id, {}})[1] = 3.0; // ratio well above 1.2
    const Trajectory t1 = traj_under(old, task, TokenSeq{1});
    const Trajectory t2 = traj_under(old, task, TokenSeq{2});
    const RolloutGroup g(task.prompt_id, {t1, t2}, ExpertDemo{task.prompt_id, TokenSeq{task.vocab().eos()}, true}, 2);
    const double r = std::exp(sequence_logprob(p, task.prompt_id, t1.response) - t1.old_logprobs[0]);
    ASSERT_GT(r, 1.2);

    // A > 0 on the favoured token: clipped, no gradient from it
    const auto pos = grpo_surrogate(p, g, std::vector<double>{1.0, 0.0}, 0.2);
    EXPECT_EQ(pos.gradient.max_abs(), 0.0);
    EXPECT_NEAR(pos.value, 0.5 * 1.2, 1e-12);
    // A < 0 on the same token: min picks the unclipped branch, gradient flows
    const auto neg = grpo_surrogate(p, g, std::vector<double>{-1.0, 0.0}, 0.2);
    EXPECT_GT(neg.gradient.max_abs(), 0.0);
    EXPECT_NEAR(neg.value, -0.5 * r, 1e-12);
}

TEST(GrpoSurrogate, MatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto f = make_fixture(seed);
        const auto adv = group_advantages(f.group.rewards(), AdvantageMode::mean_centered);
        const auto keys = group_state_keys(f.group, 2);
        const auto fd = finite_diff_gradient(
            [&](const PolicyParams& q) { return grpo_surrogate(q, f.group, adv, 0.2).value; }, f.params, keys);
        const auto cmp = compare_gradients(grpo_surrogate(f.params, f.group, adv, 0.2).gradient, fd, keys);
        EXPECT_TRUE(cmp.passed) << "seed " << seed << " " << cmp.worst_entry;
    }
}

TEST(KlPenalty, ZeroAtReferenceAndPositiveElsewhere) {
    const auto f = make_fixture(4);
    const auto same = kl_penalty(f.params, f.params, f.group);
    EXPECT_EQ(same.value, 0.0);
    EXPECT_LT(same.gradient.max_abs(), 1e-15);
    EXPECT_GT(kl_penalty(f.params, f.old_params, f.group).value, 0.0);
}

TEST(KlPenalty, MatchesFiniteDifferences) {
    const auto f = make_fixture(5);
    const auto keys = group_state_keys(f.group, 2);
    const auto fd = finite_diff_gradient(
        [&](const PolicyParams& q) { return kl_penalty(q, f.old_params, f.group, 1.3).value; }, f.params, keys);
    EXPECT_TRUE(compare_gradients(kl_penalty(f.params, f.old_params, f.group, 1.3).gradient, fd, keys).passed);
}

TEST(SftNll, UniformValueAndDescentDirection) {
    const PolicyParams uniform(8, 3);
    const ExpertDemo e{0, TokenSeq{1, 2, 7}, true};
    EXPECT_NEAR(sft_nll_loss(uniform, e).value, 3.0 * std::log(8.0), 1e-12);
    EXPECT_NEAR(3.0 * std::log(8.0), 6.2383, 1e-4);

    const auto f = make_fixture(6);
    const auto& expert = f.group.expert();
    const auto loss = sft_nll_loss(f.params, expert);
    PolicyParams stepped = f.params;
    apply_update(stepped, loss.gradient, -1e-3); // descent
    EXPECT_GT(sequence_logprob(stepped, expert.prompt_id, expert.response),
              sequence_logprob(f.params, expert.prompt_id, expert.response));
    EXPECT_THROW(sft_nll_loss(f.params, ExpertDemo{0, TokenSeq{}, true}), InputError);
}

TEST(CombinedObjective, LambdaZeroIsPureGrpo) {
    const auto f = make_fixture(7);
    auto c = config_for(f);
    c.lambda = 0.0;
    const auto out = combined_objective(f.params, f.group, c);
    const auto adv = group_advantages(f.group.rewards(), c.advantage_mode);
    const auto grpo = grpo_surrogate(f.params, f.group, adv, c.epsilon_clip);
    EXPECT_EQ(out.total, grpo.value);
    EXPECT_EQ(out.gradient, grpo.gradient);
    EXPECT_EQ(out.exploration_term, 0.0);
}

TEST(CombinedObjective, AdditiveDecomposition) {
    const auto f = make_fixture(8);
    auto c = config_for(f);
    c.lambda = 0.3;
    c.beta_kl = 0.2;
    const auto out = combined_objective(f.params, f.group, c, &f.old_params);
    const auto adv = group_advantages(f.group.rewards(), c.advantage_mode);
    const auto grpo = grpo_surrogate(f.params, f.group, adv, c.epsilon_clip);
    const auto expl = exploration_term(f.params, f.group, c, adv);
    const auto kl = kl_penalty(f.params, f.old_params, f.group);
    EXPECT_NEAR(out.total, grpo.value - 0.3 * expl.value - 0.2 * kl.value, 1e-14);
    Gradient sum = grpo.gradient;
    sum.add_scaled(expl.gradient, -0.3);
    sum.add_scaled(kl.gradient, -0.2);
    for (const auto& key : group_state_keys(f.group, 2))
        for (int v = 0; v < f.params.vocab_size; ++v) EXPECT_NEAR(out.gradient.get(key, v), sum.get(key, v), 1e-14);
}

TEST(CombinedObjective, RequiresReferenceWhenNeeded) {
    const auto f = make_fixture(9);
    auto c = config_for(f);
    c.beta_kl = 0.1;
    EXPECT_THROW(combined_objective(f.params, f.group, c), InputError);
    c.beta_kl = 0.0;
    c.baseline_mode = BaselineMode::reference_policy;
    EXPECT_THROW(combined_objective(f.params, f.group, c), InputError);
    EXPECT_NO_THROW(combined_objective(f.params, f.group, c, &f.old_params));
}

TEST(CombinedObjective, MatchesDetachedFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto f = make_fixture(seed + 20);
        auto c = config_for(f);
        c.lambda = 0.7;
        c.beta_kl = seed % 2 ? 0.15 : 0.0;
        c.length_norm = seed % 3 == 0;
        const auto keys = group_state_keys(f.group, 2);
        const auto fd = finite_diff_gradient(detached_objective_evaluator(f.params, f.group, c, &f.old_params),
                                             f.params, keys);
        const auto cmp = compare_gradients(combined_objective(f.params, f.group, c, &f.old_params).gradient, fd, keys);
        EXPECT_TRUE(cmp.passed) << "seed " << seed << " " << cmp.worst_entry;
    }
}

TEST(ExplorationGradient, ExpertOnlyRowsAreDetached) {
    const auto f = make_fixture(10);
    const auto c = config_for(f);
    const auto adv = group_advantages(f.group.rewards(), c.advantage_mode);
    const auto expl = exploration_term(f.params, f.group, c, adv);
    // THINK THINK is visited only by the expert
    const StateKey expert_only{f.task.prompt_id, {f.task.vocab().think(), f.task.vocab().think()}};
    ASSERT_NE(f.params.logits.find(expert_only), nullptr);
    EXPECT_EQ(expl.gradient.find(expert_only), nullptr);

    // perturbing that row moves the value but leaves the gradient unchanged
    PolicyParams moved = f.params;
    moved.logits.row(expert_only)[static_cast<std::size_t>(f.task.vocab().ans())] += 1.5;
    const auto expl2 = exploration_term(moved, f.group, c, adv);
    EXPECT_NE(expl2.value, expl.value);
    EXPECT_EQ(expl2.gradient.find(expert_only), nullptr);
    EXPECT_EQ(expl2.gradient, expl.gradient);

    const auto attached = exploration_term(f.params, f.group, c, adv, nullptr, BaselineGradient::attached);
    EXPECT_NE(attached.gradient.find(expert_only), nullptr);
}

TEST(ExplorationGradient, SignCorrectness) {
    // s = +1, dl < 0 must raise log pi(tau); s = -1, dl > 0 must lower it
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto f = make_fixture(seed + 40);
        const auto c = config_for(f);
        const auto adv = group_advantages(f.group.rewards(), c.advantage_mode);
        for (std::size_t i = 0; i < 4; ++i) {
            const auto& t = f.group.trajectories()[i];
            if (adv[i] == 0.0) continue;
            // isolate member i by zeroing every other weight
            std::vector<double> only(4, 0.0);
            only[i] = adv[i];
            const auto e = exploration_term(f.params, f.group, c, only);
            const double dl = e.delta_ell[i];
            const double inner = -e.gradient.dot(logprob_gradient(f.params, t.prompt_id, t.response));
            if (t.correct && dl < 0) EXPECT_GT(inner, 0.0);
            if (!t.correct && dl > 0) EXPECT_LT(inner, 0.0);
        }
    }
}

TEST(ExplorationGradient, LeakScaling) {
    // the same member on either side of the baseline: gradient ratio alpha
    const auto task = make_task(3, 2, 0);
    const Vocabulary v = task.vocab();
    const TokenSeq correct{v.ans(), task.answer_token, v.eos()};
    const PolicyParams old(v.size(), 1);
    const Trajectory good = traj_under(old, task, correct);
    const Trajectory bad = traj_under(old, task, TokenSeq{0, 0, 0});
    TrainConfig c;
    c.G = 2;
    c.modulus = 3;
    c.context_window = 1;
    c.alpha = 0.35;

    // expert longer than the policy response: dl = +ln V, leak side for s = +1
    const RolloutGroup above(task.prompt_id, {good, bad},
                             ExpertDemo{task.prompt_id, TokenSeq{v.think(), v.ans(), task.answer_token, v.eos()}, true}, 2);
    // expert shorter: dl = -ln V, full-slope side
    const RolloutGroup below(task.prompt_id, {good, bad}, ExpertDemo{task.prompt_id, TokenSeq{v.ans(), v.eos()}, true}, 2);
    std::vector<double> only_good{0.5, 0.0};
    const auto ga = exploration_term(old, above, c, only_good);
    const auto gb = exploration_term(old, below, c, only_good);
    ASSERT_GT(ga.delta_ell[0], 0.0);
    ASSERT_LT(gb.delta_ell[0], 0.0);
    for (const auto& [key, row] : gb.gradient)
        for (int t = 0; t < v.size(); ++t)
            EXPECT_NEAR(ga.gradient.get(key, t), 0.35 * row[static_cast<std::size_t>(t)], 1e-15);
}

TEST(ExplorationGradient, VanishesWithZeroLambdaOrZeroAdvantage) {
    const auto f = make_fixture(11);
    auto c = config_for(f);
    const std::vector<double> zeros(4, 0.0);
    EXPECT_EQ(exploration_term(f.params, f.group, c, zeros).gradient.max_abs(), 0.0);
    c.lambda = 0.0;
    const auto out = combined_objective(f.params, f.group, c);
    const auto adv = group_advantages(f.group.rewards(), c.advantage_mode);
    EXPECT_EQ(out.gradient, grpo_surrogate(f.params, f.group, adv, c.epsilon_clip).gradient);
}

TEST(ExplorationGradient, WithoutAdvantageWeightingEveryMemberCounts) {
    const auto f = make_fixture(12);
    auto c = config_for(f);
    c.advantage_weighting = false;
    const std::vector<double> zeros(4, 0.0);
    const auto e = exploration_term(f.params, f.group, c, zeros);
    EXPECT_EQ(e.weights, std::vector<double>(4, 1.0));
    EXPECT_GT(e.gradient.max_abs(), 0.0);
}
