#include "calibrl/environment.hpp"

#include "calibrl/serialization.hpp"

#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>

namespace calibrl {

TaskInstance make_task(int modulus, int a, int b) {
    if (modulus < 2) throw ConfigError("modulus must be >= 2, got " + std::to_string(modulus));
    if (a < 0 || a >= modulus || b < 0 || b >= modulus)
        throw InputError("operands must lie in [0, modulus)");
    TaskInstance t;
    t.prompt_id = static_cast<PromptId>(a) * modulus + b;
    t.a = a;
    t.b = b;
    t.modulus = modulus;
    t.answer_token = Vocabulary{modulus}.digit((a + b) % modulus);
    return t;
}

std::vector<TaskInstance> generate_tasks(int modulus, int count, std::uint64_t seed) {
    if (modulus < 2) throw ConfigError("modulus must be >= 2, got " + std::to_string(modulus));
    if (count < 1) throw InputError("task count must be >= 1");
    Rng rng(mix_seed(seed));
    std::vector<TaskInstance> tasks;
    tasks.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        int a = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(modulus)));
        int b = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(modulus)));
        tasks.push_back(make_task(modulus, a, b));
    }
    return tasks;
}

VerifierOutcome verify(const TaskInstance& task, const TokenSeq& response, double format_bonus) {
    const Vocabulary vocab = task.vocab();
    VerifierOutcome out;
    std::size_t i = 0;
    while (i < response.size() && response[i] == vocab.think()) ++i;
    // remaining must be exactly ANS d EOS
    if (response.size() - i == 3 && response[i] == vocab.ans() && vocab.is_digit(response[i + 1]) &&
        response[i + 2] == vocab.eos()) {
        out.format_ok = true;
        out.correct = response[i + 1] == task.answer_token;
    }
    out.reward = (out.correct ? 1.0 : 0.0) + (out.format_ok ? format_bonus : 0.0);
    return out;
}

int ThinkLengthDistribution::sample(Rng& rng) const {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (weights.empty() || !(total > 0.0)) throw InputError("think length weights must be positive");
    double u = uniform01(rng) * total;
    for (std::size_t n = 0; n < weights.size(); ++n) {
        if (u < weights[n]) return static_cast<int>(n);
        u -= weights[n];
    }
    return static_cast<int>(weights.size()) - 1;
}

ExpertDemo expert_demo(const TaskInstance& task, double expert_error_rate,
                       const ThinkLengthDistribution& think_lengths, std::uint64_t seed) {
    if (!(expert_error_rate >= 0.0 && expert_error_rate <= 1.0))
        throw InputError("expert_error_rate must be in [0, 1]");
    const Vocabulary vocab = task.vocab();
    Rng rng(mix_seed(seed ^ 0x5eedULL));

    ExpertDemo demo;
    demo.prompt_id = task.prompt_id;
    const int n_think = think_lengths.sample(rng);
    for (int i = 0; i < n_think; ++i) demo.response.tokens.push_back(vocab.think());
    demo.response.tokens.push_back(vocab.ans());

    const bool wrong = uniform01(rng) < expert_error_rate;
    Token digit = task.answer_token;
    if (wrong) {
        // uniform over the modulus - 1 wrong digits
        int offset = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(task.modulus - 1)));
        digit = vocab.digit((task.answer_token + offset) % task.modulus);
    }
    demo.response.tokens.push_back(digit);
    demo.response.tokens.push_back(vocab.eos());
    demo.intended_correct = !wrong;
    return demo;
}

namespace {

json task_to_json(const TaskInstance& t) {
    return json{{"prompt_id", t.prompt_id}, {"a", t.a},       {"b", t.b},
                {"modulus", t.modulus},     {"answer_token", t.answer_token}};
}

TaskInstance task_from_json(const json& j) {
    TaskInstance t = make_task(j.at("modulus").get<int>(), j.at("a").get<int>(), j.at("b").get<int>());
    if (j.contains("prompt_id")) t.prompt_id = j.at("prompt_id").get<PromptId>();
    if (j.contains("answer_token") && j.at("answer_token").get<Token>() != t.answer_token)
        throw InputError("task answer_token inconsistent with operands");
    return t;
}

} // namespace

void write_tasks_jsonl(const std::vector<TaskInstance>& tasks, std::ostream& out) {
    for (const auto& t : tasks) out << task_to_json(t).dump() << '\n';
}

std::vector<TaskInstance> read_tasks_jsonl(std::istream& in) {
    std::vector<TaskInstance> tasks;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            tasks.push_back(task_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw InputError("task line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return tasks;
}

void save_tasks(const std::vector<TaskInstance>& tasks, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_tasks_jsonl(tasks, out);
}

std::vector<TaskInstance> load_tasks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return read_tasks_jsonl(in);
}

} // namespace calibrl
