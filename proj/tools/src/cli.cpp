#include "calibrl/cli.hpp"

#include "calibrl/advantage.hpp"
#include "calibrl/config_file.hpp"
#include "calibrl/environment.hpp"
#include "calibrl/serialization.hpp"
#include "calibrl/trainer.hpp"
#include "calibrl/verification.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

namespace calibrl::cli {

namespace {

const std::vector<std::string> kModes = {"grpo", "sft_then_grpo", "sft_mix", "grpo_entropy_bonus", "calibrl"};

struct Globals {
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

struct ConfigArgs {
    std::string config_path;
    std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args, bool required) {
    auto* opt = cmd->add_option("--config", args.config_path, "Config file (key = value lines)");
    if (required) opt->required();
    cmd->add_option("--set", args.overrides, "Override one config key, e.g. --set steps=100")
        ->allow_extra_args(false);
}

// File values first, then --set flags, then the global --seed.
TrainConfig resolve_config(const ConfigArgs& args, const Globals& globals) {
    TrainConfig config = args.config_path.empty() ? TrainConfig{} : load_config_file(args.config_path);
    for (const auto& kv : args.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (globals.seed) config.seed = *globals.seed;
    config.validate();
    return config;
}

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

struct RunSummary {
    double final_accuracy = 0.0;
    double final_entropy = 0.0;
    double mean_reward = 0.0;
};

// Accuracy is exact; entropy and reward average the final 20% of steps.
RunSummary summarize(const ExperimentResult& result, const TrainConfig& config) {
    RunSummary s;
    s.final_accuracy = exact_eval(result.params, result.tasks, config).accuracy;
    const std::size_t n = result.metrics.size();
    if (n == 0) return s;
    const std::size_t from = n - std::max<std::size_t>(1, n / 5);
    for (std::size_t i = from; i < n; ++i) {
        s.final_entropy += result.metrics[i].entropy;
        s.mean_reward += result.metrics[i].mean_reward;
    }
    s.final_entropy /= static_cast<double>(n - from);
    s.mean_reward /= static_cast<double>(n - from);
    return s;
}

int cmd_train(const ConfigArgs& cargs, const std::string& mode_name, const std::string& out_dir,
              const Globals& globals, std::ostream& out) {
    const TrainConfig config = resolve_config(cargs, globals);
    const TrainMode mode = parse_train_mode(mode_name);
    const int every = std::max(1, config.steps / 10);
    auto progress = [&](const StepMetrics& m) {
        if (!globals.quiet && (m.step + 1) % every == 0)
            out << "step " << m.step + 1 << "/" << config.steps << " reward " << fmt(m.mean_reward)
                << " accuracy " << fmt(m.accuracy) << " entropy " << fmt(m.entropy) << '\n';
    };
    const ExperimentResult result = run_experiment(config, mode, out_dir, progress);
    out << kMetricsHeader << '\n';
    if (!result.metrics.empty()) out << metrics_csv_row(result.metrics.back()) << '\n';
    return kExitOk;
}

std::string directory_safe(std::string s) {
    for (char& c : s)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_')) c = '_';
    return s;
}

int cmd_sweep(const ConfigArgs& cargs, const std::string& axis, const std::vector<std::string>& values,
              const std::string& mode_name, const std::string& out_dir, int parallel, const Globals& globals,
              std::ostream& out) {
    const TrainConfig base = resolve_config(cargs, globals);
    const TrainMode mode = parse_train_mode(mode_name);
    if (values.empty()) throw ConfigError("sweep needs at least one value");

    // Validate every point before launching anything.
    std::vector<TrainConfig> configs;
    for (const auto& v : values) {
        TrainConfig c = base;
        apply_config_value(c, axis, v);
        c.validate();
        configs.push_back(c);
    }

    const std::filesystem::path root(out_dir);
    std::filesystem::create_directories(root);
    std::vector<RunSummary> summaries(configs.size());
    std::vector<std::exception_ptr> errors(configs.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;

    auto worker = [&] {
        for (std::size_t i = next++; i < configs.size(); i = next++) {
            try {
                const auto dir = root / (axis + "_" + directory_safe(values[i]));
                const auto result = run_experiment(configs[i], mode, dir);
                summaries[i] = summarize(result, configs[i]);
                if (!globals.quiet) {
                    std::lock_guard lock(log_mutex);
                    out << axis << "=" << values[i] << " accuracy " << fmt(summaries[i].final_accuracy)
                        << " entropy " << fmt(summaries[i].final_entropy) << '\n';
                }
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const int threads = std::clamp(parallel, 1, static_cast<int>(configs.size()));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::ostringstream csv;
    csv << "value,final_accuracy,final_entropy,mean_reward\n";
    for (std::size_t i = 0; i < configs.size(); ++i)
        csv << values[i] << ',' << fmt(summaries[i].final_accuracy) << ',' << fmt(summaries[i].final_entropy)
            << ',' << fmt(summaries[i].mean_reward) << '\n';
    write_text_file(root / "sweep_summary.csv", csv.str());
    if (!globals.quiet) out << csv.str();
    return kExitOk;
}

int cmd_check(bool as_json, const Globals& globals, std::ostream& out) {
    const SuiteReport report = run_check_suite(globals.seed.value_or(0));
    if (as_json)
        out << report.to_json() << '\n';
    else if (!globals.quiet || !report.passed())
        out << report.to_text();
    return report.passed() ? kExitOk : kExitRuntime;
}

int cmd_rarity(int G, const std::string& out_path, std::ostream& out) {
    if (G < 2) throw ConfigError("--G must be at least 2");
    const auto curve = rarity_curve(G);
    if (out_path.empty()) {
        write_rarity_csv(curve, out);
        return kExitOk;
    }
    std::ostringstream csv;
    write_rarity_csv(curve, csv);
    write_text_file(out_path, csv.str());
    return kExitOk;
}

int cmd_eval(const ConfigArgs& cargs, const std::string& checkpoint, const std::string& tasks_path,
             const Globals& globals, std::ostream& out) {
    const TrainConfig config = resolve_config(cargs, globals);
    const PolicyParams params = load_checkpoint(checkpoint);
    const auto tasks = load_tasks(tasks_path);
    if (tasks.empty()) throw InputError("task file " + tasks_path + " is empty");
    if (params.vocab_size != tasks.front().modulus + 3)
        throw InputError("checkpoint vocabulary does not match the task modulus");
    const ExactEval e = exact_eval(params, tasks, config.max_response_length, config.temperature,
                                   config.format_bonus);
    out << "expected_reward,accuracy\n" << fmt(e.expected_reward) << ',' << fmt(e.accuracy) << '\n';
    return kExitOk;
}

} // namespace

const std::vector<std::string>& sweep_axes() {
    static const std::vector<std::string> axes{"alpha",  "lambda",           "activation",
                                               "baseline_mode", "length_norm", "expert_error_rate",
                                               "advantage_weighting"};
    return axes;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Tabular GRPO / expert-calibrated exploration experiments", "calibrl"};
    app.require_subcommand(1);
    Globals globals;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Override the seed of every subcommand");
    app.add_flag("--quiet", globals.quiet, "Suppress progress output");

    ConfigArgs train_cfg, sweep_cfg, eval_cfg;
    std::string mode = "calibrl", out_dir, axis, checkpoint, tasks_path, rarity_out;
    std::vector<std::string> values;
    int parallel = 1, G = 10;
    bool as_json = false;

    auto* train = app.add_subcommand("train", "Run one experiment");
    add_config_options(train, train_cfg, true);
    train->add_option("--mode", mode, "Training mode")->required()->check(CLI::IsMember(kModes));
    train->add_option("--out", out_dir, "Output directory")->required();

    auto* sweep = app.add_subcommand("sweep", "One run per value of an ablation axis");
    add_config_options(sweep, sweep_cfg, true);
    sweep->add_option("--axis", axis, "Ablation axis")->required()->check(CLI::IsMember(sweep_axes()));
    sweep->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
    sweep->add_option("--mode", mode, "Training mode")->check(CLI::IsMember(kModes));
    sweep->add_option("--out", out_dir, "Output directory")->required();
    sweep->add_option("--parallel", parallel, "Concurrent runs")->check(CLI::PositiveNumber);

    auto* check = app.add_subcommand("check", "Run the gradient and oracle verification suite");
    check->add_flag("--json", as_json, "Machine-readable report");

    auto* rarity = app.add_subcommand("rarity-curve", "Write |A| per class against minority count");
    rarity->add_option("--G", G, "Group size");
    rarity->add_option("--out", rarity_out, "CSV path (stdout when omitted)");

    auto* eval = app.add_subcommand("eval", "Exact accuracy of a checkpoint on a task file");
    add_config_options(eval, eval_cfg, false);
    eval->add_option("--checkpoint", checkpoint, "Checkpoint JSON")->required();
    eval->add_option("--tasks", tasks_path, "Task file (JSON lines)")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const CLI::App* failed = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << failed->help();
        return kExitUsage;
    }
    if (seed_opt->count() > 0) globals.seed = seed;

    try {
        if (train->parsed()) return cmd_train(train_cfg, mode, out_dir, globals, out);
        if (sweep->parsed()) return cmd_sweep(sweep_cfg, axis, values, mode, out_dir, parallel, globals, out);
        if (check->parsed()) return cmd_check(as_json, globals, out);
        if (rarity->parsed()) return cmd_rarity(G, rarity_out, out);
        if (eval->parsed()) return cmd_eval(eval_cfg, checkpoint, tasks_path, globals, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

} // namespace calibrl::cli
