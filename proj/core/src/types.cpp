#include "calibrl/types.hpp"

#include <algorithm>
#include <cmath>

namespace calibrl {

void TokenSeq::validate(int vocab_size, std::size_t max_length) const {
    if (tokens.size() > max_length)
        throw InputError("response length " + std::to_string(tokens.size()) +
                         " exceeds max_response_length " + std::to_string(max_length));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= vocab_size)
            throw InputError("token " + std::to_string(tokens[i]) + " at position " +
                             std::to_string(i) + " outside vocabulary of size " +
                             std::to_string(vocab_size));
    }
}

void Trajectory::validate() const {
    if (old_logprobs.size() != response.size())
        throw InputError("old_logprobs length " + std::to_string(old_logprobs.size()) +
                         " != response length " + std::to_string(response.size()));
    for (double lp : old_logprobs)
        if (!(lp <= 0.0)) throw InputError("old_logprob must be <= 0");
    if (!(reward >= 0.0)) throw InputError("reward must be >= 0");
}

void ExpertDemo::validate(Token eos) const {
    if (response.empty() || response.tokens.back() != eos)
        throw InputError("expert response must end with EOS");
}

RolloutGroup::RolloutGroup(PromptId prompt_id, std::vector<Trajectory> trajectories,
                           ExpertDemo expert, int expected_size)
    : prompt_id_(prompt_id), trajectories_(std::move(trajectories)), expert_(std::move(expert)) {
    if (static_cast<int>(trajectories_.size()) != expected_size)
        throw InputError("rollout group has " + std::to_string(trajectories_.size()) +
                         " trajectories, expected G=" + std::to_string(expected_size));
    if (expert_.prompt_id != prompt_id_)
        throw InputError("expert prompt_id does not match group prompt_id");
    for (const auto& t : trajectories_) {
        if (t.prompt_id != prompt_id_)
            throw InputError("trajectory prompt_id does not match group prompt_id");
        t.validate();
    }
}

std::vector<double> RolloutGroup::rewards() const {
    std::vector<double> r;
    r.reserve(trajectories_.size());
    for (const auto& t : trajectories_) r.push_back(t.reward);
    return r;
}

CorrectnessSignal make_correctness_signal(const Trajectory& traj) {
    return CorrectnessSignal{traj.correct ? +1 : -1};
}

// *******************************************************
// ParamMap
// *******************************************************

const std::vector<double>* ParamMap::find(const StateKey& key) const {
    auto it = table_.find(key);
    return it == table_.end() ? nullptr : &it->second;
}

std::vector<double>& ParamMap::row(const StateKey& key) {
    auto it = table_.find(key);
    if (it != table_.end()) return it->second;
    return table_.emplace(key, std::vector<double>(static_cast<std::size_t>(width_), 0.0))
        .first->second;
}

double ParamMap::get(const StateKey& key, int column) const {
    const auto* r = find(key);
    return r ? (*r)[static_cast<std::size_t>(column)] : 0.0;
}

void ParamMap::add_scaled(const ParamMap& other, double scale) {
    if (other.width_ != width_) throw InputError("ParamMap width mismatch");
    for (const auto& [key, values] : other.table_) {
        auto& dst = row(key);
        for (std::size_t v = 0; v < values.size(); ++v) dst[v] += scale * values[v];
    }
}

void ParamMap::scale(double factor) {
    for (auto& [key, values] : table_)
        for (double& x : values) x *= factor;
}

double ParamMap::dot(const ParamMap& other) const {
    double acc = 0.0;
    for (const auto& [key, values] : table_) {
        const auto* o = other.find(key);
        if (!o) continue;
        for (std::size_t v = 0; v < values.size(); ++v) acc += values[v] * (*o)[v];
    }
    return acc;
}

double ParamMap::max_abs() const {
    double m = 0.0;
    for (const auto& [key, values] : table_)
        for (double x : values) m = std::max(m, std::abs(x));
    return m;
}

bool ParamMap::all_finite() const {
    for (const auto& [key, values] : table_)
        for (double x : values)
            if (!std::isfinite(x)) return false;
    return true;
}

// *******************************************************
// Enums and configuration
// *******************************************************

std::string to_string(ActivationKind k) {
    switch (k) {
    case ActivationKind::leaky_relu: return "leaky_relu";
    case ActivationKind::relu: return "relu";
    case ActivationKind::sigmoid: return "sigmoid";
    case ActivationKind::tanh: return "tanh";
    case ActivationKind::huber: return "huber";
    }
    return "?";
}

std::string to_string(AdvantageMode m) {
    return m == AdvantageMode::mean_centered ? "mean_centered" : "std_normalized";
}

std::string to_string(BaselineMode m) {
    return m == BaselineMode::expert ? "expert" : "reference_policy";
}

ActivationKind parse_activation(const std::string& s) {
    if (s == "leaky_relu") return ActivationKind::leaky_relu;
    if (s == "relu") return ActivationKind::relu;
    if (s == "sigmoid") return ActivationKind::sigmoid;
    if (s == "tanh") return ActivationKind::tanh;
    if (s == "huber") return ActivationKind::huber;
    throw ConfigError("unknown activation '" + s + "'");
}

AdvantageMode parse_advantage_mode(const std::string& s) {
    if (s == "mean_centered") return AdvantageMode::mean_centered;
    if (s == "std_normalized") return AdvantageMode::std_normalized;
    throw ConfigError("unknown advantage_mode '" + s + "'");
}

BaselineMode parse_baseline_mode(const std::string& s) {
    if (s == "expert") return BaselineMode::expert;
    if (s == "reference_policy") return BaselineMode::reference_policy;
    throw ConfigError("unknown baseline_mode '" + s + "'");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (G < 2) fail("G must be >= 2");
    if (!(lambda >= 0.0)) fail("lambda must be >= 0");
    if (!(alpha > 0.0 && alpha <= 1.0)) fail("alpha must be in (0, 1]");
    if (!(epsilon_clip > 0.0)) fail("epsilon_clip must be > 0");
    if (!(beta_kl >= 0.0)) fail("beta_kl must be >= 0");
    if (!(temperature > 0.0)) fail("temperature must be > 0");
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (modulus < 2) fail("modulus must be >= 2");
    if (num_tasks < 1) fail("num_tasks must be >= 1");
    if (!(format_bonus >= 0.0)) fail("format_bonus must be >= 0");
    if (!(expert_error_rate >= 0.0 && expert_error_rate <= 1.0))
        fail("expert_error_rate must be in [0, 1]");
    if (max_response_length < 3) fail("max_response_length must be >= 3");
    if (context_window < 0) fail("context_window must be >= 0");
    if (steps < 0) fail("steps must be >= 0");
    if (prompts_per_step < 1) fail("prompts_per_step must be >= 1");
    if (minibatches < 1 || minibatches > prompts_per_step)
        fail("minibatches must be in [1, prompts_per_step]");
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
    if (sft_epochs < 0) fail("sft_epochs must be >= 0");
    if (!(sft_mix_weight >= 0.0)) fail("sft_mix_weight must be >= 0");
    if (!(entropy_coef >= 0.0)) fail("entropy_coef must be >= 0");
}

} // namespace calibrl
