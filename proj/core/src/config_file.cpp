#include "calibrl/config_file.hpp"

#include <charconv>
#include <cstdlib>
#include <type_traits>
#include <cstdio>
#include <fstream>
#include <istream>
#include <sstream>

namespace calibrl {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
    if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front())
        return s.substr(1, s.size() - 2);
    return s;
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    if constexpr (std::is_floating_point_v<T>) {
        // from_chars for double is unavailable on some toolchains
        char* end = nullptr;
        out = std::strtod(first, &end);
        if (value.empty() || end != last) throw ConfigError("config key '" + key + "': not a number: " + value);
    } else {
        auto [ptr, ec] = std::from_chars(first, last, out);
        if (ec != std::errc() || ptr != last)
            throw ConfigError("config key '" + key + "': not an integer: " + value);
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config key '" + key + "': not a boolean: " + value);
}

// Shortest of %.15g / %.17g that reads back to the same double.
std::string num(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.15g", x);
    if (std::strtod(buf, nullptr) != x) std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

} // namespace

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys{
        "G", "lambda", "alpha", "epsilon_clip", "beta_kl", "temperature", "learning_rate", "activation",
        "advantage_mode", "baseline_mode", "length_norm", "advantage_weighting", "modulus", "num_tasks",
        "format_bonus", "expert_error_rate", "max_response_length", "context_window", "seed", "steps",
        "prompts_per_step", "minibatches", "checkpoint_every", "sft_epochs", "sft_mix_weight", "entropy_coef"};
    return keys;
}

void apply_config_value(TrainConfig& c, const std::string& key, const std::string& raw) {
    const std::string v = unquote(trim(raw));
    try {
        if (key == "G") c.G = parse_number<int>(key, v);
        else if (key == "lambda") c.lambda = parse_number<double>(key, v);
        else if (key == "alpha") c.alpha = parse_number<double>(key, v);
        else if (key == "epsilon_clip") c.epsilon_clip = parse_number<double>(key, v);
        else if (key == "beta_kl") c.beta_kl = parse_number<double>(key, v);
        else if (key == "temperature") c.temperature = parse_number<double>(key, v);
        else if (key == "learning_rate") c.learning_rate = parse_number<double>(key, v);
        else if (key == "activation") c.activation = parse_activation(v);
        else if (key == "advantage_mode") c.advantage_mode = parse_advantage_mode(v);
        else if (key == "baseline_mode") c.baseline_mode = parse_baseline_mode(v);
        else if (key == "length_norm") c.length_norm = parse_bool(key, v);
        else if (key == "advantage_weighting") c.advantage_weighting = parse_bool(key, v);
        else if (key == "modulus") c.modulus = parse_number<int>(key, v);
        else if (key == "num_tasks") c.num_tasks = parse_number<int>(key, v);
        else if (key == "format_bonus") c.format_bonus = parse_number<double>(key, v);
        else if (key == "expert_error_rate") c.expert_error_rate = parse_number<double>(key, v);
        else if (key == "max_response_length") c.max_response_length = parse_number<int>(key, v);
        else if (key == "context_window") c.context_window = parse_number<int>(key, v);
        else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
        else if (key == "steps") c.steps = parse_number<int>(key, v);
        else if (key == "prompts_per_step") c.prompts_per_step = parse_number<int>(key, v);
        else if (key == "minibatches") c.minibatches = parse_number<int>(key, v);
        else if (key == "checkpoint_every") c.checkpoint_every = parse_number<int>(key, v);
        else if (key == "sft_epochs") c.sft_epochs = parse_number<int>(key, v);
        else if (key == "sft_mix_weight") c.sft_mix_weight = parse_number<double>(key, v);
        else if (key == "entropy_coef") c.entropy_coef = parse_number<double>(key, v);
        else throw ConfigError("unknown config key '" + key + "'");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        if (msg.find("'" + key + "'") != std::string::npos) throw;
        throw ConfigError("config key '" + key + "': " + msg);
    }
}

void parse_config(std::istream& in, TrainConfig& config) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        // strip comments outside quotes
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') quoted = !quoted;
            if (line[i] == '#' && !quoted) {
                line.resize(i);
                break;
            }
        }
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        apply_config_value(config, trim(line.substr(0, eq)), line.substr(eq + 1));
    }
}

TrainConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    TrainConfig config;
    parse_config(in, config);
    return config;
}

std::string format_config(const TrainConfig& c) {
    std::ostringstream out;
    auto b = [](bool x) { return x ? "true" : "false"; };
    out << "G = " << c.G << '\n'
        << "lambda = " << num(c.lambda) << '\n'
        << "alpha = " << num(c.alpha) << '\n'
        << "epsilon_clip = " << num(c.epsilon_clip) << '\n'
        << "beta_kl = " << num(c.beta_kl) << '\n'
        << "temperature = " << num(c.temperature) << '\n'
        << "learning_rate = " << num(c.learning_rate) << '\n'
        << "activation = \"" << to_string(c.activation) << "\"\n"
        << "advantage_mode = \"" << to_string(c.advantage_mode) << "\"\n"
        << "baseline_mode = \"" << to_string(c.baseline_mode) << "\"\n"
        << "length_norm = " << b(c.length_norm) << '\n'
        << "advantage_weighting = " << b(c.advantage_weighting) << '\n'
        << "modulus = " << c.modulus << '\n'
        << "num_tasks = " << c.num_tasks << '\n'
        << "format_bonus = " << num(c.format_bonus) << '\n'
        << "expert_error_rate = " << num(c.expert_error_rate) << '\n'
        << "max_response_length = " << c.max_response_length << '\n'
        << "context_window = " << c.context_window << '\n'
        << "seed = " << c.seed << '\n'
        << "steps = " << c.steps << '\n'
        << "prompts_per_step = " << c.prompts_per_step << '\n'
        << "minibatches = " << c.minibatches << '\n'
        << "checkpoint_every = " << c.checkpoint_every << '\n'
        << "sft_epochs = " << c.sft_epochs << '\n'
        << "sft_mix_weight = " << num(c.sft_mix_weight) << '\n'
        << "entropy_coef = " << num(c.entropy_coef) << '\n';
    return out.str();
}

} // namespace calibrl
