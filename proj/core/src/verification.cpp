#include "calibrl/verification.hpp"

#include "calibrl/advantage.hpp"
#include "calibrl/policy.hpp"
#include "calibrl/random.hpp"
#include "calibrl/serialization.hpp"
#include "calibrl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace calibrl {

namespace {

std::string describe(const StateKey& key, std::size_t column) {
    std::string ctx;
    for (Token t : key.trailing) ctx += (ctx.empty() ? "" : " ") + std::to_string(t);
    return "prompt " + std::to_string(key.prompt_id) + " context [" + ctx + "] token " +
           std::to_string(column);
}

std::string fmt(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

// Written independently of activation_eval so that a fault there is visible.
double closed_form_derivative(ActivationKind kind, double alpha, double x) {
    switch (kind) {
    case ActivationKind::leaky_relu: return x < 0.0 ? alpha : 1.0;
    case ActivationKind::relu: return x < 0.0 ? 0.0 : 1.0;
    case ActivationKind::sigmoid: {
        const double e = std::exp(-x);
        return e / ((1.0 + e) * (1.0 + e));
    }
    case ActivationKind::tanh: {
        const double c = std::cosh(x);
        return 1.0 / (c * c);
    }
    case ActivationKind::huber: return std::clamp(x, -1.0, 1.0);
    }
    return 0.0;
}

// Frozen baseline log-probs of each trajectory's delta_ell at `base`, already length-normalized.
std::vector<double> frozen_baselines(const PolicyParams& base, const RolloutGroup& group,
                                     const TrainConfig& config, const PolicyParams* reference) {
    std::vector<double> out;
    const double T = config.temperature;
    for (const auto& traj : group.trajectories()) {
        double lp;
        std::size_t len;
        if (config.baseline_mode == BaselineMode::reference_policy) {
            if (!reference) throw InputError("reference policy required");
            lp = sequence_logprob(*reference, traj.prompt_id, traj.response, T);
            len = traj.response.size();
        } else {
            lp = sequence_logprob(base, traj.prompt_id, group.expert().response, T);
            len = group.expert().response.size();
        }
        out.push_back(config.length_norm ? lp / static_cast<double>(len) : lp);
    }
    return out;
}

double frozen_exploration_value(const PolicyParams& p, const RolloutGroup& group, const TrainConfig& config,
                                const std::vector<double>& advantages, const std::vector<double>& frozen) {
    const ActivationSpec spec{config.activation, config.alpha};
    double acc = 0.0;
    for (std::size_t i = 0; i < group.trajectories().size(); ++i) {
        const auto& traj = group.trajectories()[i];
        double lp = sequence_logprob(p, traj.prompt_id, traj.response, config.temperature);
        if (config.length_norm) lp /= static_cast<double>(traj.response.size());
        const double dl = lp - frozen[i];
        const double w = config.advantage_weighting ? std::abs(advantages[i]) : 1.0;
        acc += w * activation_eval(spec, -make_correctness_signal(traj).as_double() * dl).value;
    }
    return acc / static_cast<double>(group.size());
}

bool row_nonzero(const Gradient& g, const StateKey& key, double tol) {
    const auto* row = g.find(key);
    if (!row) return false;
    for (double x : *row)
        if (std::abs(x) > tol) return true;
    return false;
}

} // namespace

// *******************************************************
// Finite differences
// *******************************************************

Gradient finite_diff_gradient(const LossEvaluator& f, const PolicyParams& params,
                              std::span<const StateKey> keys, double step_size) {
    if (!(step_size > 0.0)) throw InputError("finite difference step must be > 0");
    PolicyParams work = params;
    Gradient out = params.zero_gradient();
    for (const auto& key : keys) {
        // a materialized all-zero row reads the same as an absent one
        auto& grow = out.row(key);
        for (std::size_t v = 0; v < static_cast<std::size_t>(params.vocab_size); ++v) {
            auto& row = work.logits.row(key);
            const double orig = row[v];
            row[v] = orig + step_size;
            const double fp = f(work);
            work.logits.row(key)[v] = orig - step_size;
            const double fm = f(work);
            work.logits.row(key)[v] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericalError("non-finite evaluation perturbing " + describe(key, v));
            grow[v] = (fp - fm) / (2.0 * step_size);
        }
    }
    return out;
}

GradientComparison compare_gradients(const Gradient& analytic, const Gradient& numeric,
                                     std::span<const StateKey> keys, double rel_tol, double abs_floor) {
    GradientComparison out;
    const auto width = static_cast<std::size_t>(std::max(analytic.width(), numeric.width()));
    for (const auto& key : keys) {
        for (std::size_t v = 0; v < width; ++v) {
            const double a = analytic.get(key, static_cast<int>(v));
            const double n = numeric.get(key, static_cast<int>(v));
            const double err = std::abs(a - n);
            const double scale = std::max(std::abs(a), std::abs(n));
            out.max_abs_error = std::max(out.max_abs_error, err);
            if (scale > abs_floor) out.max_rel_error = std::max(out.max_rel_error, err / scale);
            if (err > std::max(rel_tol * scale, abs_floor) && out.passed) {
                out.passed = false;
                out.worst_entry = describe(key, v) + ": analytic " + fmt(a) + " numeric " + fmt(n);
            }
        }
    }
    return out;
}

std::vector<StateKey> group_state_keys(const RolloutGroup& group, int context_window) {
    std::set<StateKey> keys;
    for (const auto& traj : group.trajectories())
        for (auto& s : visited_states(traj.prompt_id, traj.response, context_window)) keys.insert(std::move(s));
    for (auto& s : visited_states(group.prompt_id(), group.expert().response, context_window))
        keys.insert(std::move(s));
    return {keys.begin(), keys.end()};
}

LossEvaluator detached_exploration_evaluator(const PolicyParams& base, const RolloutGroup& group,
                                             const TrainConfig& config, const PolicyParams* reference) {
    auto advantages = group_advantages(group.rewards(), config.advantage_mode);
    auto frozen = frozen_baselines(base, group, config, reference);
    return [&group, config, advantages, frozen](const PolicyParams& p) {
        return frozen_exploration_value(p, group, config, advantages, frozen);
    };
}

LossEvaluator detached_objective_evaluator(const PolicyParams& base, const RolloutGroup& group,
                                           const TrainConfig& config, const PolicyParams* reference) {
    auto advantages = group_advantages(group.rewards(), config.advantage_mode);
    auto frozen = frozen_baselines(base, group, config, reference);
    if (config.beta_kl != 0.0 && !reference) throw InputError("reference policy required");
    return [&group, config, advantages, frozen, reference](const PolicyParams& p) {
        double v = grpo_surrogate(p, group, advantages, config.epsilon_clip, config.temperature).value;
        if (config.lambda != 0.0)
            v -= config.lambda * frozen_exploration_value(p, group, config, advantages, frozen);
        if (config.beta_kl != 0.0) v -= config.beta_kl * kl_penalty(p, *reference, group, config.temperature).value;
        return v;
    };
}

// *******************************************************
// Enumeration
// *******************************************************

std::map<TokenSeq, double> enumerate_distribution(const PolicyParams& params, PromptId prompt_id, Token eos,
                                                  int max_len, double temperature) {
    if (max_len < 1) throw InputError("max_len must be >= 1");
    if (std::pow(static_cast<double>(params.vocab_size), max_len) > 1e7)
        throw InputError("enumeration guard exceeded: vocab_size^max_len > 1e7");
    std::map<TokenSeq, double> dist;
    std::vector<Token> prefix;
    // explicit recursion over the response tree
    auto visit = [&](auto&& self, double mass) -> void {
        if (static_cast<int>(prefix.size()) == max_len) {
            dist[TokenSeq(prefix)] += mass;
            return;
        }
        const auto p = token_distribution(
            params, state_at(prompt_id, prefix, prefix.size(), params.context_window), temperature);
        for (std::size_t v = 0; v < p.size(); ++v) {
            prefix.push_back(static_cast<Token>(v));
            if (static_cast<Token>(v) == eos) dist[TokenSeq(prefix)] += mass * p[v];
            else self(self, mass * p[v]);
            prefix.pop_back();
        }
    };
    visit(visit, 1.0);
    return dist;
}

double sequence_entropy(const std::map<TokenSeq, double>& dist) {
    double h = 0.0;
    for (const auto& [seq, p] : dist)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

// *******************************************************
// Exploration gradient cross-check
// *******************************************************

ExplorationCheckReport check_exploration_gradient(const PolicyParams& params, const RolloutGroup& group,
                                                  const TrainConfig& config, const PolicyParams* reference) {
    ExplorationCheckReport report;
    const auto advantages = group_advantages(group.rewards(), config.advantage_mode);
    const auto implemented = exploration_term(params, group, config, advantages, reference);
    const auto attached =
        exploration_term(params, group, config, advantages, reference, BaselineGradient::attached);

    // closed form: |A_i| * act'(-s_i dl_i) * (-s_i) * grad log pi(tau_i), averaged over G
    const double T = config.temperature;
    const auto frozen = frozen_baselines(params, group, config, reference);
    Gradient closed = params.zero_gradient();
    for (std::size_t i = 0; i < group.trajectories().size(); ++i) {
        const auto& traj = group.trajectories()[i];
        double lp = sequence_logprob(params, traj.prompt_id, traj.response, T);
        const double norm = config.length_norm ? 1.0 / static_cast<double>(traj.response.size()) : 1.0;
        const double dl = lp * norm - frozen[i];
        const double s = traj.correct ? 1.0 : -1.0;
        const double w = config.advantage_weighting ? std::abs(advantages[i]) : 1.0;
        const double coeff = w * closed_form_derivative(config.activation, config.alpha, -s * dl) * (-s) * norm /
                             static_cast<double>(group.size());
        closed.add_scaled(logprob_gradient(params, traj.prompt_id, traj.response, T), coeff);
    }

    const auto keys = group_state_keys(group, params.context_window);
    for (const auto& key : keys) {
        for (int v = 0; v < params.vocab_size; ++v) {
            const double err = std::abs(implemented.gradient.get(key, v) - closed.get(key, v));
            report.max_closed_form_error = std::max(report.max_closed_form_error, err);
            if (err > 1e-10 && report.closed_form_ok) {
                report.closed_form_ok = false;
                report.failures.push_back("closed form mismatch at " + describe(key, static_cast<std::size_t>(v)));
            }
            report.max_abs_contribution =
                std::max(report.max_abs_contribution, std::abs(config.lambda * implemented.gradient.get(key, v)));
            if (std::abs(attached.gradient.get(key, v) - implemented.gradient.get(key, v)) > 1e-12)
                report.detachment_visible = true;
        }
    }

    std::set<StateKey> policy_rows;
    for (const auto& traj : group.trajectories())
        for (auto& s : visited_states(traj.prompt_id, traj.response, params.context_window))
            policy_rows.insert(std::move(s));
    for (const auto& s : visited_states(group.prompt_id(), group.expert().response, params.context_window)) {
        if (policy_rows.contains(s)) continue;
        if (row_nonzero(implemented.gradient, s, 0.0)) {
            report.expert_rows_zero = false;
            report.failures.push_back("gradient on expert-only row " + describe(s, 0));
            break;
        }
    }
    return report;
}

// *******************************************************
// Random instances
// *******************************************************

RandomInstance make_random_instance(std::uint64_t seed, const RandomInstanceOptions& opts) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng(stream_seed(seed, 0x1257, attempt));
        auto uni = [&](double lo, double hi) { return lo + (hi - lo) * uniform01(rng); };
        auto pick = [&](std::uint64_t n) { return static_cast<int>(uniform_index(rng, n)); };

        const int modulus = 3;
        const Vocabulary vocab{modulus};
        const int window = 1 + pick(3);
        const int min_g = std::max(opts.min_group_size, 2);
        const int max_g = std::max(opts.max_group_size, min_g);
        const int G = min_g + pick(static_cast<std::uint64_t>(max_g - min_g + 1));
        const int max_len = 5;

        TrainConfig cfg;
        cfg.G = G;
        cfg.modulus = modulus;
        cfg.max_response_length = max_len;
        cfg.context_window = window;
        cfg.lambda = uni(0.05, 1.0);
        cfg.alpha = uni(0.1, 1.0);
        cfg.epsilon_clip = 0.2;
        if (opts.randomize_variants) {
            cfg.activation = static_cast<ActivationKind>(pick(5));
            cfg.baseline_mode = pick(4) == 0 ? BaselineMode::reference_policy : BaselineMode::expert;
            cfg.length_norm = pick(3) == 0;
            cfg.advantage_mode = pick(3) == 0 ? AdvantageMode::std_normalized : AdvantageMode::mean_centered;
            cfg.advantage_weighting = pick(5) != 0;
            cfg.beta_kl = pick(2) == 0 ? 0.0 : uni(0.05, 0.5);
            const double temps[] = {1.0, 0.8, 1.3};
            cfg.temperature = temps[pick(3)];
        }

        const TaskInstance task = make_task(modulus, pick(modulus), pick(modulus));
        std::vector<TokenSeq> responses;
        for (int i = 0; i < G; ++i) {
            TokenSeq r;
            const bool force_correct = i == 0;
            if (force_correct || uniform01(rng) < 0.6) {
                for (int n = pick(2); n > 0; --n) r.tokens.push_back(vocab.think());
                r.tokens.push_back(vocab.ans());
                r.tokens.push_back(force_correct ? task.answer_token : vocab.digit(pick(modulus)));
                r.tokens.push_back(vocab.eos());
            } else {
                const int len = 1 + pick(static_cast<std::uint64_t>(max_len));
                for (int t = 0; t < len; ++t) r.tokens.push_back(static_cast<Token>(pick(vocab.size())));
            }
            responses.push_back(std::move(r));
        }
        ExpertDemo expert;
        expert.prompt_id = task.prompt_id;
        for (int n = pick(3); n > 0; --n) expert.response.tokens.push_back(vocab.think());
        expert.response.tokens.push_back(vocab.ans());
        expert.response.tokens.push_back(task.answer_token);
        expert.response.tokens.push_back(vocab.eos());

        // logits on most visited rows; a few stay absent (uniform)
        PolicyParams params(vocab.size(), window);
        std::set<StateKey> rows;
        for (const auto& r : responses)
            for (auto& s : visited_states(task.prompt_id, r, window)) rows.insert(std::move(s));
        for (auto& s : visited_states(task.prompt_id, expert.response, window)) rows.insert(std::move(s));
        for (const auto& s : rows) {
            if (uniform01(rng) < 0.15) continue;
            auto& row = params.logits.row(s);
            for (double& x : row) x = uni(-2.0, 2.0);
        }
        PolicyParams old = params;
        PolicyParams reference = params;
        for (const auto& s : rows) {
            for (double& x : old.logits.row(s)) x += uni(-0.4, 0.4);
            for (double& x : reference.logits.row(s)) x += uni(-1.0, 1.0);
        }

        std::vector<Trajectory> trajs;
        for (auto& r : responses) {
            Trajectory t;
            t.prompt_id = task.prompt_id;
            t.old_logprobs = token_logprobs(old, task.prompt_id, r, cfg.temperature);
            const auto outcome = verify(task, r, cfg.format_bonus);
            t.reward = outcome.reward;
            t.correct = outcome.correct;
            t.response = std::move(r);
            trajs.push_back(std::move(t));
        }
        RolloutGroup group(task.prompt_id, std::move(trajs), expert, G);

        // a constant-reward group has zero advantages and checks nothing
        const auto rewards = group.rewards();
        if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards.front(); })) continue;

        // reject instances within 1e-3 of a kink
        bool near_kink = false;
        for (const auto& t : group.trajectories()) {
            const auto lps = token_logprobs(params, t.prompt_id, t.response, cfg.temperature);
            for (std::size_t k = 0; k < lps.size(); ++k) {
                const double r = std::exp(lps[k] - t.old_logprobs[k]);
                if (std::abs(r - (1.0 + cfg.epsilon_clip)) < 1e-3 || std::abs(r - (1.0 - cfg.epsilon_clip)) < 1e-3)
                    near_kink = true;
            }
            // both baselines: checks may switch the instance to either one
            for (const double dl :
                 {delta_ell_reference(params, reference, t.prompt_id, t.response, cfg.length_norm, cfg.temperature),
                  delta_ell(params, t.prompt_id, t.response, expert.response, cfg.length_norm, cfg.temperature)})
                if (std::abs(dl) < 1e-3 || std::abs(std::abs(dl) - 1.0) < 1e-3) near_kink = true;
        }
        if (near_kink) continue;
        return RandomInstance{std::move(params), std::move(reference), task, std::move(group), cfg};
    }
}

// *******************************************************
// Suite
// *******************************************************

bool SuiteReport::passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

int SuiteReport::failures() const {
    return static_cast<int>(std::count_if(checks.begin(), checks.end(), [](const CheckResult& c) { return !c.passed; }));
}

std::string SuiteReport::to_text() const {
    std::ostringstream out;
    out << "check suite (seed " << seed << ")\n";
    for (const auto& c : checks)
        out << (c.passed ? "PASS " : "FAIL ") << c.name << " [" << c.trials << " trials] " << c.detail << '\n';
    out << (checks.size() - static_cast<std::size_t>(failures())) << "/" << checks.size() << " checks passed\n";
    return out.str();
}

std::string SuiteReport::to_json() const {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["seed"] = seed;
    j["passed"] = passed();
    j["checks"] = json::array();
    for (const auto& c : checks)
        j["checks"].push_back(json{{"name", c.name}, {"passed", c.passed}, {"trials", c.trials}, {"detail", c.detail}});
    return j.dump(2);
}

namespace {

using TwinFn = std::function<GradientComparison(const RandomInstance&)>;

// Finite-difference twins, one per name in kGradientOperations.
std::vector<std::pair<std::string, TwinFn>> gradient_twins() {
    std::vector<std::pair<std::string, TwinFn>> twins;
    auto keys_of = [](const RandomInstance& in) {
        auto keys = group_state_keys(in.group, in.params.context_window);
        // one row no response visits: every gradient must vanish there
        keys.push_back(StateKey{in.task.prompt_id + 1000, {}});
        return keys;
    };
    twins.emplace_back("logprob_gradient", [keys_of](const RandomInstance& in) {
        const auto& traj = in.group.trajectories().front();
        const double T = in.config.temperature;
        const auto keys = keys_of(in);
        auto f = [&](const PolicyParams& p) { return sequence_logprob(p, traj.prompt_id, traj.response, T); };
        return compare_gradients(logprob_gradient(in.params, traj.prompt_id, traj.response, T),
                                 finite_diff_gradient(f, in.params, keys), keys);
    });
    twins.emplace_back("entropy_gradient", [keys_of](const RandomInstance& in) {
        const auto states = visited_states(in.task.prompt_id, in.group.trajectories().front().response,
                                           in.params.context_window);
        const double T = in.config.temperature;
        const auto keys = keys_of(in);
        Gradient analytic = in.params.zero_gradient();
        for (const auto& s : states) accumulate_entropy_gradient(in.params, s, T, 1.0, analytic);
        auto f = [&](const PolicyParams& p) {
            double h = 0.0;
            for (const auto& s : states) h += state_entropy(p, s, T);
            return h;
        };
        return compare_gradients(analytic, finite_diff_gradient(f, in.params, keys), keys);
    });
    twins.emplace_back("sft_nll_loss", [keys_of](const RandomInstance& in) {
        const auto keys = keys_of(in);
        const double T = in.config.temperature;
        auto f = [&](const PolicyParams& p) { return sft_nll_loss(p, in.group.expert(), T).value; };
        return compare_gradients(sft_nll_loss(in.params, in.group.expert(), T).gradient,
                                 finite_diff_gradient(f, in.params, keys), keys);
    });
    twins.emplace_back("grpo_surrogate", [keys_of](const RandomInstance& in) {
        const auto keys = keys_of(in);
        const auto adv = group_advantages(in.group.rewards(), in.config.advantage_mode);
        const double eps = in.config.epsilon_clip, T = in.config.temperature;
        auto f = [&](const PolicyParams& p) { return grpo_surrogate(p, in.group, adv, eps, T).value; };
        return compare_gradients(grpo_surrogate(in.params, in.group, adv, eps, T).gradient,
                                 finite_diff_gradient(f, in.params, keys), keys);
    });
    twins.emplace_back("exploration_term", [keys_of](const RandomInstance& in) {
        const auto keys = keys_of(in);
        const auto adv = group_advantages(in.group.rewards(), in.config.advantage_mode);
        auto f = detached_exploration_evaluator(in.params, in.group, in.config, &in.reference);
        return compare_gradients(exploration_term(in.params, in.group, in.config, adv, &in.reference).gradient,
                                 finite_diff_gradient(f, in.params, keys), keys);
    });
    twins.emplace_back("kl_penalty", [keys_of](const RandomInstance& in) {
        const auto keys = keys_of(in);
        const double T = in.config.temperature;
        auto f = [&](const PolicyParams& p) { return kl_penalty(p, in.reference, in.group, T).value; };
        return compare_gradients(kl_penalty(in.params, in.reference, in.group, T).gradient,
                                 finite_diff_gradient(f, in.params, keys), keys);
    });
    twins.emplace_back("combined_objective", [keys_of](const RandomInstance& in) {
        const auto keys = keys_of(in);
        auto f = detached_objective_evaluator(in.params, in.group, in.config, &in.reference);
        return compare_gradients(combined_objective(in.params, in.group, in.config, &in.reference).gradient,
                                 finite_diff_gradient(f, in.params, keys), keys);
    });
    return twins;
}

CheckResult make_result(std::string name, bool passed, int trials, std::string detail) {
    return CheckResult{std::move(name), passed, trials, std::move(detail)};
}

} // namespace

SuiteReport run_check_suite(std::uint64_t seed) {
    SuiteReport report;
    report.seed = seed;
    constexpr int kGradientTrials = 50;

    // quadratic sanity of the differencing itself
    {
        PolicyParams p(4, 1);
        Rng rng(stream_seed(seed, 0xf00d));
        std::vector<StateKey> keys{{0, {}}, {0, {1}}, {0, {2}}};
        for (const auto& k : keys)
            for (double& x : p.logits.row(k)) x = -5.0 + 10.0 * uniform01(rng);
        auto f = [](const PolicyParams& q) {
            double s = 0.0;
            for (const auto& [k, row] : q.logits)
                for (double x : row) s += x * x;
            return s;
        };
        Gradient exact = p.logits;
        exact.scale(2.0);
        const auto cmp = compare_gradients(exact, finite_diff_gradient(f, p, keys), keys);
        report.checks.push_back(make_result("fd_quadratic", cmp.passed, 1, "max_abs=" + fmt(cmp.max_abs_error)));
    }

    // finite-difference twins
    const auto twins = gradient_twins();
    {
        std::set<std::string> have;
        for (const auto& [name, fn] : twins) have.insert(name);
        std::string missing;
        for (auto op : kGradientOperations)
            if (!have.contains(std::string(op))) missing += std::string(missing.empty() ? "" : ",") + std::string(op);
        report.checks.push_back(make_result("gradient_registry_complete", missing.empty(),
                                            static_cast<int>(kGradientOperations.size()),
                                            missing.empty() ? "all operations have twins" : "missing: " + missing));
    }
    for (std::size_t k = 0; k < twins.size(); ++k) {
        const auto& [name, fn] = twins[k];
        bool ok = true;
        double worst_rel = 0.0;
        std::string first_failure;
        for (int trial = 0; trial < kGradientTrials; ++trial) {
            const auto inst = make_random_instance(stream_seed(seed, 0x9a0 + k, static_cast<std::uint64_t>(trial)));
            const auto cmp = fn(inst);
            worst_rel = std::max(worst_rel, cmp.max_rel_error);
            if (!cmp.passed && ok) {
                ok = false;
                first_failure = " first failure (trial " + std::to_string(trial) + "): " + cmp.worst_entry;
            }
        }
        report.checks.push_back(
            make_result("fd_" + name, ok, kGradientTrials, "max_rel=" + fmt(worst_rel) + first_failure));
    }

    // exploration closed form and expert-row detachment, over every variant
    {
        constexpr int kTrials = 100;
        int closed_ok = 0, rows_ok = 0;
        double worst = 0.0;
        for (int trial = 0; trial < kTrials; ++trial) {
            const auto inst = make_random_instance(stream_seed(seed, 0xe991, static_cast<std::uint64_t>(trial)));
            TrainConfig cfg = inst.config;
            cfg.baseline_mode = BaselineMode::expert;
            const auto r = check_exploration_gradient(inst.params, inst.group, cfg, &inst.reference);
            closed_ok += r.closed_form_ok;
            rows_ok += r.expert_rows_zero;
            worst = std::max(worst, r.max_closed_form_error);
        }
        report.checks.push_back(make_result("exploration_closed_form", closed_ok == kTrials, kTrials,
                                            "max_err=" + fmt(worst)));
        report.checks.push_back(make_result("exploration_expert_rows_zero", rows_ok == kTrials, kTrials,
                                            std::to_string(rows_ok) + "/" + std::to_string(kTrials)));
    }

    // The attached baseline adds sum_i w_i act'_i s_i grad log pi(expert) / G. With
    // mean-centered weights that sum is zero whenever every gate is equal (in
    // particular for G = 2 and for relu groups gated entirely shut), so visibility
    // is measured with the default leaky gate and group size, where all ten gates
    // coincide with probability around 2^-9.
    {
        constexpr int kTrials = 100;
        int visible = 0;
        RandomInstanceOptions opts;
        opts.min_group_size = 10;
        opts.max_group_size = 10;
        for (int trial = 0; trial < kTrials; ++trial) {
            const auto inst =
                make_random_instance(stream_seed(seed, 0xde7a, static_cast<std::uint64_t>(trial)), opts);
            TrainConfig cfg = inst.config;
            cfg.baseline_mode = BaselineMode::expert;
            cfg.activation = ActivationKind::leaky_relu;
            visible += check_exploration_gradient(inst.params, inst.group, cfg, &inst.reference).detachment_visible;
        }
        report.checks.push_back(make_result("exploration_detachment_visible", visible >= 95, kTrials,
                                            std::to_string(visible) + "/" + std::to_string(kTrials) +
                                                " trials differ from the attached variant"));
    }

    // mutation: a corrupted leaky derivative must be caught
    {
        constexpr int kTrials = 20;
        int caught = 0;
        {
            ScopedLeakyDerivativeFault fault(0.987654);
            for (int trial = 0; trial < kTrials; ++trial) {
                auto inst = make_random_instance(stream_seed(seed, 0x3e7, static_cast<std::uint64_t>(trial)));
                TrainConfig cfg = inst.config;
                cfg.activation = ActivationKind::leaky_relu;
                cfg.baseline_mode = BaselineMode::expert;
                cfg.advantage_weighting = true;
                caught += !check_exploration_gradient(inst.params, inst.group, cfg, &inst.reference).closed_form_ok;
            }
        }
        report.checks.push_back(make_result("mutation_leaky_derivative_detected", caught > 0, kTrials,
                                            std::to_string(caught) + "/" + std::to_string(kTrials) +
                                                " corrupted trials flagged"));
    }

    // enumeration: masses, log-prob agreement, exact_eval agreement
    {
        constexpr int kTrials = 10;
        bool ok = true;
        double worst = 0.0;
        for (int trial = 0; trial < kTrials; ++trial) {
            const auto inst = make_random_instance(stream_seed(seed, 0xe0e, static_cast<std::uint64_t>(trial)));
            const Vocabulary vocab = inst.task.vocab();
            const int max_len = 5;
            const double T = inst.config.temperature;
            const auto dist = enumerate_distribution(inst.params, inst.task.prompt_id, vocab.eos(), max_len, T);
            double total = 0.0, reward = 0.0, correct = 0.0;
            for (const auto& [seq, p] : dist) {
                if (p < 0.0) ok = false;
                total += p;
                worst = std::max(worst, std::abs(std::exp(sequence_logprob(inst.params, inst.task, seq, T)) - p));
                const auto o = verify(inst.task, seq, inst.config.format_bonus);
                reward += p * o.reward;
                correct += o.correct ? p : 0.0;
            }
            const std::vector<TaskInstance> one{inst.task};
            const auto ex = exact_eval(inst.params, one, max_len, T, inst.config.format_bonus);
            worst = std::max({worst, std::abs(total - 1.0), std::abs(ex.expected_reward - reward),
                              std::abs(ex.accuracy - correct)});
        }
        ok = ok && worst <= 1e-9;
        report.checks.push_back(make_result("enumeration_consistency", ok, kTrials, "max_err=" + fmt(worst)));
    }

    // advantages: rarity arithmetic, noise robustness, monotonicity
    {
        const std::vector<double> g1{0, 1, 1, 1}, g2{1, 0, 0, 0};
        const auto a1 = group_advantages(g1, AdvantageMode::mean_centered);
        const auto a2 = group_advantages(g2, AdvantageMode::mean_centered);
        const std::vector<double> expected{0.75, 0.25, 0.25, 0.25};
        bool ok = true;
        for (std::size_t i = 0; i < 4; ++i) ok = ok && std::abs(a1[i]) == expected[i] && std::abs(a2[i]) == expected[i];
        report.checks.push_back(make_result("advantage_rarity_examples", ok, 2, "|A| = [0.75, 0.25, 0.25, 0.25]"));
    }
    {
        constexpr int kGroups = 1000;
        Rng rng(stream_seed(seed, 0x7015e));
        double worst = 0.0;
        for (int trial = 0; trial < kGroups; ++trial) {
            std::vector<double> r(10), shifted(10), noisy(10), delta(10);
            const double c = -0.5 + uniform01(rng);
            double dmean = 0.0;
            for (int i = 0; i < 10; ++i) {
                r[i] = uniform01(rng) < 0.5 ? 1.0 : 0.0;
                if (uniform01(rng) < 0.5) r[i] += 0.1;
                delta[i] = -0.05 + 0.1 * uniform01(rng);
                dmean += delta[i] / 10.0;
                shifted[i] = r[i] + c;
                noisy[i] = r[i] + delta[i];
            }
            const auto a = group_advantages(r, AdvantageMode::mean_centered);
            const auto as = group_advantages(shifted, AdvantageMode::mean_centered);
            const auto an = group_advantages(noisy, AdvantageMode::mean_centered);
            for (int i = 0; i < 10; ++i) {
                worst = std::max(worst, std::abs(as[i] - a[i]));
                worst = std::max(worst, std::abs((an[i] - a[i]) - (delta[i] - dmean)));
            }
        }
        report.checks.push_back(make_result("advantage_noise_robustness", worst <= 1e-12, kGroups, "max_dev=" + fmt(worst)));
    }
    {
        const auto curve = rarity_curve(10);
        bool ok = true;
        for (int k = 1; k < 4; ++k) ok = ok && curve[k].minority_abs_adv < curve[k - 1].minority_abs_adv;
        for (int k = 1; k < 10; ++k) {
            const auto& a = curve[static_cast<std::size_t>(k - 1)];
            const auto& b = curve[static_cast<std::size_t>(10 - k - 1)];
            ok = ok && a.minority_abs_adv == b.minority_abs_adv && a.majority_abs_adv == b.majority_abs_adv;
        }
        report.checks.push_back(make_result("rarity_monotone_symmetric", ok, 9, "G=10"));
    }
    return report;
}

} // namespace calibrl
