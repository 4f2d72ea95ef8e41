#pragma once

// Plain-text `key = value` configuration files. Blank lines and `#` comments are ignored;
// unknown keys are rejected.

#include <filesystem>
#include <map>
#include <string>

#include "ldkl/models.hpp"
#include "ldkl/training.hpp"

namespace ldkl::cfg {

using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text, const std::string& origin = "<config>");
KeyValues read_config_file(const std::filesystem::path& path);

/// Applies recognized keys to the model and training settings. Throws ConfigError naming the
/// first unknown key or unparsable value.
void apply(const KeyValues& kv, model::ModelConfig& model, train::TrainConfig& train);

/// Recognized keys with their current values, for help text.
KeyValues describe(const model::ModelConfig& model, const train::TrainConfig& train);

}  // namespace ldkl::cfg
