#pragma once

// Model checkpoint container.
//
// Little-endian binary layout:
//
//   8 bytes   magic "CYFMCKPT"
//   u32       format version (kCheckpointVersion)
//   u32       scalar width in bytes (4 = float32, 8 = float64)
//   u64       N, then N bytes of UTF-8 JSON:
//               {"format_version": 1, "model": {ModelConfig fields}, "extra": {...}}
//   u32       parameter count P, then P records of
//               u32 name length, name bytes,
//               u32 rank, rank x u64 dims,
//               prod(dims) IEEE-754 scalars
//
// Parameters are stored in CyFormer::parameters() order; loading matches them
// by name and shape.

#include <string>

#include "json.hpp"

#include "cyformer/model.hpp"

namespace cyformer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json model_config_to_json(const ModelConfig& config);
// Missing keys keep their defaults; unknown keys are a ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename T>
struct LoadedCheckpoint {
  CyFormer<T> model;
  nlohmann::json extra;
};

template <typename T>
std::string serialize_checkpoint(const CyFormer<T>& model, const nlohmann::json& extra = {});
template <typename T>
LoadedCheckpoint<T> deserialize_checkpoint(const std::string& bytes);

template <typename T>
void save_checkpoint(const std::string& path, const CyFormer<T>& model,
                     const nlohmann::json& extra = {});
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path);

} // namespace cyformer
