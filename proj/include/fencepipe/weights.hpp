#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "fencepipe/models.hpp"

namespace fencepipe {

inline constexpr std::uint32_t kWeightsVersion = 1;

nlohmann::json to_json(const ModelConfig& config);
/// Throws ConfigError on unknown kinds or bad fields.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Layout (little endian):
///   "WFPV" | u32 version | u32 n + n bytes config JSON
///   | u32 tensor count | per tensor: u32 name length, name, u32 rank,
///     u64 dims[rank], f64 values | u32 CRC-32 of everything before it.
/// The config JSON records kind, architecture, seed and epoch.
std::string serialize_weights(const ModelGraph& model);
/// Checks magic, then CRC, then version. Throws CorruptionError or
/// VersionError; nothing is returned on failure.
ModelGraph deserialize_weights(const std::string& bytes);

void save_weights(const std::filesystem::path& path, const ModelGraph& model);
ModelGraph load_weights(const std::filesystem::path& path);

}  // namespace fencepipe
