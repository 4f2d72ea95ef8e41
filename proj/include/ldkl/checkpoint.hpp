#pragma once

// Model checkpoints, little-endian:
//
//   "LDKC" | u16 version | ModelConfig snapshot | u64 record count
//   then per parameter: u32 name length | name bytes | u32 rank | u64 extents | f64 payload
//
// Records follow the parameter store's registration order, so re-saving a loaded model
// reproduces the file byte for byte.

#include <cstdint>
#include <filesystem>

#include "ldkl/models.hpp"

namespace ldkl::model {

inline constexpr char kCheckpointMagic[4] = {'L', 'D', 'K', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Writes to a temporary sibling file and renames it over `path`.
void save_checkpoint(const LatentModel& model, const std::filesystem::path& path);

/// Reads only the configuration snapshot.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

/// Loads into a model built from `cfg`. Throws ConfigError if the stored configuration or any
/// parameter name or shape disagrees with `cfg`.
LatentModel load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg);

/// Loads using the stored configuration.
LatentModel load_checkpoint(const std::filesystem::path& path);

}  // namespace ldkl::model
