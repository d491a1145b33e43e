#include "calibrl/serialization.hpp"

#include <fstream>
#include <sstream>

namespace calibrl {

void to_json(json& j, const TokenSeq& s) { j = s.tokens; }
void from_json(const json& j, TokenSeq& s) { s.tokens = j.get<std::vector<Token>>(); }

void to_json(json& j, const StateKey& k) {
    j = json{{"prompt_id", k.prompt_id}, {"trailing", k.trailing}};
}

void from_json(const json& j, StateKey& k) {
    k.prompt_id = j.at("prompt_id").get<PromptId>();
    k.trailing = j.at("trailing").get<std::vector<Token>>();
}

void to_json(json& j, const Trajectory& t) {
    j = json{{"prompt_id", t.prompt_id},
             {"response", t.response},
             {"old_logprobs", t.old_logprobs},
             {"reward", t.reward},
             {"correct", t.correct}};
}

void from_json(const json& j, Trajectory& t) {
    t.prompt_id = j.at("prompt_id").get<PromptId>();
    t.response = j.at("response").get<TokenSeq>();
    t.old_logprobs = j.at("old_logprobs").get<std::vector<double>>();
    t.reward = j.at("reward").get<double>();
    t.correct = j.at("correct").get<bool>();
    t.validate();
}

void to_json(json& j, const ExpertDemo& e) {
    j = json{{"prompt_id", e.prompt_id},
             {"response", e.response},
             {"intended_correct", e.intended_correct}};
}

void from_json(const json& j, ExpertDemo& e) {
    e.prompt_id = j.at("prompt_id").get<PromptId>();
    e.response = j.at("response").get<TokenSeq>();
    e.intended_correct = j.at("intended_correct").get<bool>();
}

void to_json(json& j, const CorrectnessSignal& s) { j = s.value; }

void from_json(const json& j, CorrectnessSignal& s) {
    int v = j.get<int>();
    if (v != 1 && v != -1) throw InputError("correctness signal must be +1 or -1");
    s.value = v;
}

void to_json(json& j, const ParamMap& m) {
    j = json::array();
    for (const auto& [key, values] : m) j.push_back(json{{"state_key", key}, {"values", values}});
}

void to_json(json& j, const PolicyParams& p) {
    json entries = json::array();
    for (const auto& [key, logits] : p.logits)
        entries.push_back(json{{"state_key", key}, {"logits", logits}});
    j = json{{"vocab_size", p.vocab_size},
             {"context_window", p.context_window},
             {"entries", std::move(entries)}};
}

void from_json(const json& j, PolicyParams& p) {
    p = PolicyParams(j.at("vocab_size").get<int>(), j.at("context_window").get<int>());
    for (const auto& e : j.at("entries")) {
        auto key = e.at("state_key").get<StateKey>();
        auto logits = e.at("logits").get<std::vector<double>>();
        if (static_cast<int>(logits.size()) != p.vocab_size)
            throw InputError("checkpoint logit row has length " + std::to_string(logits.size()) +
                             ", expected " + std::to_string(p.vocab_size));
        if (static_cast<int>(key.trailing.size()) > p.context_window)
            throw InputError("checkpoint state key longer than context_window");
        p.logits.row(key) = std::move(logits);
    }
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"G", c.G},
             {"lambda", c.lambda},
             {"alpha", c.alpha},
             {"epsilon_clip", c.epsilon_clip},
             {"beta_kl", c.beta_kl},
             {"temperature", c.temperature},
             {"learning_rate", c.learning_rate},
             {"activation", to_string(c.activation)},
             {"advantage_mode", to_string(c.advantage_mode)},
             {"baseline_mode", to_string(c.baseline_mode)},
             {"length_norm", c.length_norm},
             {"advantage_weighting", c.advantage_weighting},
             {"modulus", c.modulus},
             {"num_tasks", c.num_tasks},
             {"format_bonus", c.format_bonus},
             {"expert_error_rate", c.expert_error_rate},
             {"max_response_length", c.max_response_length},
             {"context_window", c.context_window},
             {"seed", c.seed},
             {"steps", c.steps},
             {"prompts_per_step", c.prompts_per_step},
             {"minibatches", c.minibatches},
             {"checkpoint_every", c.checkpoint_every},
             {"sft_epochs", c.sft_epochs},
             {"sft_mix_weight", c.sft_mix_weight},
             {"entropy_coef", c.entropy_coef}};
}

void from_json(const json& j, TrainConfig& c) {
    TrainConfig d;
    for (const auto& [key, value] : j.items()) {
        if (key == "schema_version") continue;
        if (key == "G") d.G = value.get<int>();
        else if (key == "lambda") d.lambda = value.get<double>();
        else if (key == "alpha") d.alpha = value.get<double>();
        else if (key == "epsilon_clip") d.epsilon_clip = value.get<double>();
        else if (key == "beta_kl") d.beta_kl = value.get<double>();
        else if (key == "temperature") d.temperature = value.get<double>();
        else if (key == "learning_rate") d.learning_rate = value.get<double>();
        else if (key == "activation") d.activation = parse_activation(value.get<std::string>());
        else if (key == "advantage_mode")
            d.advantage_mode = parse_advantage_mode(value.get<std::string>());
        else if (key == "baseline_mode")
            d.baseline_mode = parse_baseline_mode(value.get<std::string>());
        else if (key == "length_norm") d.length_norm = value.get<bool>();
        else if (key == "advantage_weighting") d.advantage_weighting = value.get<bool>();
        else if (key == "modulus") d.modulus = value.get<int>();
        else if (key == "num_tasks") d.num_tasks = value.get<int>();
        else if (key == "format_bonus") d.format_bonus = value.get<double>();
        else if (key == "expert_error_rate") d.expert_error_rate = value.get<double>();
        else if (key == "max_response_length") d.max_response_length = value.get<int>();
        else if (key == "context_window") d.context_window = value.get<int>();
        else if (key == "seed") d.seed = value.get<std::uint64_t>();
        else if (key == "steps") d.steps = value.get<int>();
        else if (key == "prompts_per_step") d.prompts_per_step = value.get<int>();
        else if (key == "minibatches") d.minibatches = value.get<int>();
        else if (key == "checkpoint_every") d.checkpoint_every = value.get<int>();
        else if (key == "sft_epochs") d.sft_epochs = value.get<int>();
        else if (key == "sft_mix_weight") d.sft_mix_weight = value.get<double>();
        else if (key == "entropy_coef") d.entropy_coef = value.get<double>();
        else throw ConfigError("unknown config key '" + key + "'");
    }
    c = d;
}

void to_json(json& j, const ObjectiveBreakdown& b) {
    j = json{{"grpo_term", b.grpo_term},
             {"exploration_term", b.exploration_term},
             {"kl_term", b.kl_term},
             {"total", b.total},
             {"gradient_width", b.gradient.width()},
             {"gradient", b.gradient}};
}

void from_json(const json& j, ObjectiveBreakdown& b) {
    b.grpo_term = j.at("grpo_term").get<double>();
    b.exploration_term = j.at("exploration_term").get<double>();
    b.kl_term = j.at("kl_term").get<double>();
    b.total = j.at("total").get<double>();
    b.gradient = Gradient(j.at("gradient_width").get<int>());
    for (const auto& e : j.at("gradient"))
        b.gradient.row(e.at("state_key").get<StateKey>()) =
            e.at("values").get<std::vector<double>>();
}

json group_to_json(const RolloutGroup& g) {
    return json{{"prompt_id", g.prompt_id()},
                {"trajectories", g.trajectories()},
                {"expert", g.expert()}};
}

RolloutGroup group_from_json(const json& j, int expected_size) {
    return RolloutGroup(j.at("prompt_id").get<PromptId>(),
                        j.at("trajectories").get<std::vector<Trajectory>>(),
                        j.at("expert").get<ExpertDemo>(), expected_size);
}

void check_schema_version(const json& j) {
    if (!j.is_object() || !j.contains("schema_version"))
        throw InputError("document has no schema_version");
    int v = j.at("schema_version").get<int>();
    if (v != kSchemaVersion)
        throw InputError("unsupported schema_version " + std::to_string(v) + " (expected " +
                         std::to_string(kSchemaVersion) + ")");
}

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path) {
    // dump(-1) prints doubles with round-trip precision
    write_text_file(path, to_document(params).dump() + "\n");
}

PolicyParams load_checkpoint(const std::filesystem::path& path) {
    json j = read_json_file(path);
    check_schema_version(j);
    return j.get<PolicyParams>();
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << content;
    if (!out) throw IoError("write failed for " + path.string());
}

} // namespace calibrl
