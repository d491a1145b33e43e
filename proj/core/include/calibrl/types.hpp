#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace calibrl {

using Token = int;
using PromptId = std::int64_t;

// *******************************************************
// Errors
// *******************************************************

/// Invalid configuration value or unknown configuration key.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Structurally invalid input to an operation (bad token, wrong group size, ...).
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values produced during optimization.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File system failures; the message carries the offending path.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// *******************************************************
// Sequences and trajectories
// *******************************************************

/// A response: token ids in [0, vocab_size).
struct TokenSeq {
    std::vector<Token> tokens;

    TokenSeq() = default;
    TokenSeq(std::initializer_list<Token> init) : tokens(init) {}
    explicit TokenSeq(std::vector<Token> t) : tokens(std::move(t)) {}

    std::size_t size() const { return tokens.size(); }
    bool empty() const { return tokens.empty(); }
    Token operator[](std::size_t i) const { return tokens[i]; }
    auto begin() const { return tokens.begin(); }
    auto end() const { return tokens.end(); }

    /// Throws InputError when a token is out of range or the sequence is too long.
    void validate(int vocab_size, std::size_t max_length) const;

    auto operator<=>(const TokenSeq&) const = default;
};

/// One sampled response together with its sampling-time log-probabilities.
struct Trajectory {
    PromptId prompt_id = 0;
    TokenSeq response;
    std::vector<double> old_logprobs; ///< natural log, one per response token
    double reward = 0.0;
    bool correct = false;

    void validate() const;

    bool operator==(const Trajectory&) const = default;
};

struct ExpertDemo {
    PromptId prompt_id = 0;
    TokenSeq response;
    bool intended_correct = true;

    /// Requires a non-empty response terminated by `eos`.
    void validate(Token eos) const;

    bool operator==(const ExpertDemo&) const = default;
};

/// G on-policy trajectories for one prompt plus the (gradient-free) expert demonstration.
class RolloutGroup {
public:
    RolloutGroup() = default;
    /// Throws InputError unless trajectories.size() == expected_size and all prompt ids agree.
    RolloutGroup(PromptId prompt_id, std::vector<Trajectory> trajectories, ExpertDemo expert,
                 int expected_size);

    PromptId prompt_id() const { return prompt_id_; }
    const std::vector<Trajectory>& trajectories() const { return trajectories_; }
    const ExpertDemo& expert() const { return expert_; }
    int size() const { return static_cast<int>(trajectories_.size()); }
    std::vector<double> rewards() const;

    bool operator==(const RolloutGroup&) const = default;

private:
    PromptId prompt_id_ = 0;
    std::vector<Trajectory> trajectories_;
    ExpertDemo expert_;
};

/// +1 for a correct trajectory, -1 otherwise. Carried separately from the reward
/// because format bonuses push the reward outside [0, 1].
struct CorrectnessSignal {
    int value = -1;

    double as_double() const { return static_cast<double>(value); }
    bool operator==(const CorrectnessSignal&) const = default;
};

CorrectnessSignal make_correctness_signal(const Trajectory& traj);

// *******************************************************
// Policy parameters
// *******************************************************

/// Context for the next-token distribution: prompt plus the most recent tokens.
struct StateKey {
    PromptId prompt_id = 0;
    std::vector<Token> trailing;

    auto operator<=>(const StateKey&) const = default;
};

/// Sparse table of per-state vectors of length `width`. Absent rows read as zeros.
/// Used both for logits and for gradients.
class ParamMap {
public:
    using Table = std::map<StateKey, std::vector<double>>;

    ParamMap() = default;
    explicit ParamMap(int width) : width_(width) {}

    int width() const { return width_; }
    std::size_t rows() const { return table_.size(); }
    bool empty() const { return table_.empty(); }

    /// Returns nullptr for an absent row.
    const std::vector<double>* find(const StateKey& key) const;
    /// Materializes a zero row if absent.
    std::vector<double>& row(const StateKey& key);
    double get(const StateKey& key, int column) const;

    /// this += scale * other
    void add_scaled(const ParamMap& other, double scale);
    void scale(double factor);
    double dot(const ParamMap& other) const;
    double max_abs() const;
    bool all_finite() const;

    const Table& table() const { return table_; }
    auto begin() const { return table_.begin(); }
    auto end() const { return table_.end(); }

    bool operator==(const ParamMap&) const = default;

private:
    int width_ = 0;
    Table table_;
};

using Gradient = ParamMap;

/// Tabular autoregressive softmax policy: one logit row per StateKey.
struct PolicyParams {
    int vocab_size = 0;
    int context_window = 3;
    ParamMap logits;

    PolicyParams() = default;
    PolicyParams(int vocab, int window) : vocab_size(vocab), context_window(window), logits(vocab) {
        if (vocab < 2) throw InputError("vocab_size must be >= 2");
        if (window < 0) throw InputError("context_window must be >= 0");
    }

    Gradient zero_gradient() const { return Gradient(vocab_size); }

    bool operator==(const PolicyParams&) const = default;
};

// *******************************************************
// Configuration
// *******************************************************

enum class ActivationKind { leaky_relu, relu, sigmoid, tanh, huber };
enum class AdvantageMode { mean_centered, std_normalized };
enum class BaselineMode { expert, reference_policy };

std::string to_string(ActivationKind k);
std::string to_string(AdvantageMode m);
std::string to_string(BaselineMode m);
ActivationKind parse_activation(const std::string& s);
AdvantageMode parse_advantage_mode(const std::string& s);
BaselineMode parse_baseline_mode(const std::string& s);

/// Every hyperparameter and variant switch of a run.
struct TrainConfig {
    // objective
    int G = 10;
    double lambda = 0.1;
    double alpha = 0.5;
    double epsilon_clip = 0.2;
    double beta_kl = 0.0;
    double temperature = 1.0;
    double learning_rate = 10.0;
    ActivationKind activation = ActivationKind::leaky_relu;
    AdvantageMode advantage_mode = AdvantageMode::mean_centered;
    BaselineMode baseline_mode = BaselineMode::expert;
    bool length_norm = false;
    bool advantage_weighting = true; ///< false replaces |A| by 1 in the exploration loss

    // environment
    int modulus = 8;
    int num_tasks = 8;
    double format_bonus = 0.1;
    double expert_error_rate = 0.0;
    int max_response_length = 6;
    int context_window = 3;

    // schedule
    std::uint64_t seed = 0;
    int steps = 600;
    int prompts_per_step = 16;
    int minibatches = 1;        ///< updates per rollout batch
    int checkpoint_every = 200; ///< 0 disables periodic checkpoints

    // baselines
    int sft_epochs = 50;           ///< NLL epochs before GRPO in sft_then_grpo
    double sft_mix_weight = 1.0;   ///< weight of expert NLL in sft_mix
    double entropy_coef = 0.01;    ///< entropy bonus in grpo_entropy_bonus

    int vocab_size() const { return modulus + 3; }

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;

    bool operator==(const TrainConfig&) const = default;
};

/// Values and gradient of the combined objective (to be maximized):
/// total = grpo_term - lambda * exploration_term - beta_kl * kl_term.
struct ObjectiveBreakdown {
    double grpo_term = 0.0;
    double exploration_term = 0.0;
    double kl_term = 0.0;
    double total = 0.0;
    Gradient gradient;
};

} // namespace calibrl
