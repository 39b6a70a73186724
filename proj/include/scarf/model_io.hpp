#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "scarf/model.hpp"

namespace scarf {

inline constexpr std::uint32_t kModelFormatVersion = 1;

/// Model file layout, all little-endian:
///   "SCRF", u32 version, config (9 x u32, 2 x u8), u32 scene count
///   shared block: every shared tensor in parameter order as f32
///   per scene: id and source (u32 length + bytes), noise, coefficients and
///   direct SSWMs as f32, then the frusta (u32 view count, per view 15 f64
///   pose/intrinsics + 2 u32 size, f64 near/far, u8 background flag)
std::string serialize_model(const FactorizedModel& model);
FactorizedModel deserialize_model(std::string_view bytes);

/// Writes to a sibling temporary file and renames it over `path`.
void save_model(const FactorizedModel& model, const std::filesystem::path& path);
FactorizedModel load_model(const std::filesystem::path& path);

struct SceneStorage {
  std::string id;
  std::size_t parameter_bytes = 0;  // noise, coefficients, SSWMs
  std::size_t record_bytes = 0;  // whole record including id and frusta
};

/// Byte sizes as laid out in the model file; total_bytes equals the file size.
struct StorageReport {
  std::size_t header_bytes = 0;
  std::size_t shared_bytes = 0;
  std::vector<SceneStorage> scenes;
  std::size_t per_scene_parameter_bytes = 0;  // L (Z + K^2) at 32 bits
  std::size_t total_bytes = 0;

  /// File size with `scene_count` scenes, repeating the last record (or a
  /// parameter-only record when there is none) beyond the stored ones.
  std::size_t extrapolate(std::size_t scene_count) const;
  std::string to_json() const;
};

StorageReport storage_report(const FactorizedModel& model);

}  // namespace scarf
