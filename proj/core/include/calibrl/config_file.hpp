#pragma once

// Flat "key = value" configuration files (a TOML-compatible subset):
//
//   # comment
//   G = 10
//   lambda = 0.1
//   activation = "leaky_relu"
//   length_norm = false
//
// Every key is a TrainConfig field name. Unknown keys and malformed values are
// rejected with a ConfigError that names the key.

#include "calibrl/types.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace calibrl {

/// All recognized keys, in file order.
const std::vector<std::string>& config_keys();

/// Sets one field from its textual value.
void apply_config_value(TrainConfig& config, const std::string& key, const std::string& value);

/// Applies every assignment in `in` on top of `config`.
void parse_config(std::istream& in, TrainConfig& config);

TrainConfig load_config_file(const std::filesystem::path& path);

/// Canonical file text for `config` (round-trips through parse_config).
std::string format_config(const TrainConfig& config);

} // namespace calibrl
