#pragma once

// Synthetic verifiable task family: modular addition a + b (mod m).
//
// Vocabulary layout for modulus m:
//   0 .. m-1   digit tokens
//   m          THINK filler
//   m + 1      ANS marker
//   m + 2      EOS
//
// A well-formed response is THINK* ANS d EOS.

#include "calibrl/random.hpp"
#include "calibrl/types.hpp"

#include <filesystem>
#include <iosfwd>
#include <vector>

namespace calibrl {

struct Vocabulary {
    int modulus = 8;

    Token digit(int d) const { return d; }
    Token think() const { return modulus; }
    Token ans() const { return modulus + 1; }
    Token eos() const { return modulus + 2; }
    int size() const { return modulus + 3; }
    bool is_digit(Token t) const { return t >= 0 && t < modulus; }
};

struct TaskInstance {
    PromptId prompt_id = 0;
    int a = 0;
    int b = 0;
    int modulus = 2;
    Token answer_token = 0;

    Vocabulary vocab() const { return Vocabulary{modulus}; }
    bool operator==(const TaskInstance&) const = default;
};

/// Builds the task for operands (a, b). The prompt id is the canonical pair index a*m + b,
/// so repeated draws of the same pair share policy rows.
TaskInstance make_task(int modulus, int a, int b);

struct VerifierOutcome {
    bool correct = false;
    bool format_ok = false;
    double reward = 0.0;
};

/// Operand pairs drawn uniformly with replacement. Throws ConfigError for modulus < 2
/// and InputError for count < 1.
std::vector<TaskInstance> generate_tasks(int modulus, int count, std::uint64_t seed);

/// Reward = 1[correct] + format_bonus * 1[format_ok]; correctness requires the format.
VerifierOutcome verify(const TaskInstance& task, const TokenSeq& response, double format_bonus);

/// Distribution over the number of THINK tokens emitted by the expert.
struct ThinkLengthDistribution {
    std::vector<double> weights{1.0, 1.0, 1.0}; ///< weights[n] for n THINK tokens

    int sample(Rng& rng) const;
};

ExpertDemo expert_demo(const TaskInstance& task, double expert_error_rate,
                       const ThinkLengthDistribution& think_lengths, std::uint64_t seed);

/// JSON lines, one TaskInstance object per line.
void write_tasks_jsonl(const std::vector<TaskInstance>& tasks, std::ostream& out);
std::vector<TaskInstance> read_tasks_jsonl(std::istream& in);
void save_tasks(const std::vector<TaskInstance>& tasks, const std::filesystem::path& path);
std::vector<TaskInstance> load_tasks(const std::filesystem::path& path);

} // namespace calibrl
