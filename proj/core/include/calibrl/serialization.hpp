#pragma once

// JSON schema (schema_version 1) for the shared domain types.
//
// Every standalone document carries a top-level "schema_version": 1. Nested
// values (e.g. trajectories inside a group) do not repeat it.
//
//   StateKey         {"prompt_id": int, "trailing": [int...]}
//   Trajectory       {"prompt_id", "response": [int...], "old_logprobs": [real...],
//                     "reward": real, "correct": bool}
//   ExpertDemo       {"prompt_id", "response": [int...], "intended_correct": bool}
//   RolloutGroup     {"prompt_id", "trajectories": [Trajectory...], "expert": ExpertDemo}
//   PolicyParams     {"vocab_size", "context_window",
//                     "entries": [{"state_key": StateKey, "logits": [real...]}...]}
//   TrainConfig      flat object, one member per TrainConfig field; enums as strings
//   ObjectiveBreakdown {"grpo_term", "exploration_term", "kl_term", "total",
//                       "gradient": [{"state_key", "values"}...]}

#include "calibrl/types.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>

namespace calibrl {

inline constexpr int kSchemaVersion = 1;

using nlohmann::json;

void to_json(json& j, const TokenSeq& s);
void from_json(const json& j, TokenSeq& s);
void to_json(json& j, const StateKey& k);
void from_json(const json& j, StateKey& k);
void to_json(json& j, const Trajectory& t);
void from_json(const json& j, Trajectory& t);
void to_json(json& j, const ExpertDemo& e);
void from_json(const json& j, ExpertDemo& e);
void to_json(json& j, const CorrectnessSignal& s);
void from_json(const json& j, CorrectnessSignal& s);
void to_json(json& j, const ParamMap& m);
void to_json(json& j, const PolicyParams& p);
void from_json(const json& j, PolicyParams& p);
void to_json(json& j, const TrainConfig& c);
void from_json(const json& j, TrainConfig& c);
void to_json(json& j, const ObjectiveBreakdown& b);
void from_json(const json& j, ObjectiveBreakdown& b);

json group_to_json(const RolloutGroup& g);
RolloutGroup group_from_json(const json& j, int expected_size);

/// Wraps a value as a versioned document.
template <typename T>
json to_document(const T& value) {
    json j = value;
    j["schema_version"] = kSchemaVersion;
    return j;
}

/// Throws InputError when the document's schema_version is missing or unsupported.
void check_schema_version(const json& j);

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_checkpoint(const std::filesystem::path& path);

json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& content);

} // namespace calibrl
