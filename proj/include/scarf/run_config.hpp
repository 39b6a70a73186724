#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "scarf/model.hpp"
#include "scarf/scenes.hpp"
#include "scarf/trainer.hpp"

namespace scarf {

/// Everything a CLI run needs. Defaults are the desk presets.
struct RunConfig {
  std::string preset = "desk";
  ModelConfig model = ModelConfig::desk();
  TrainConfig train = TrainConfig::desk();
  DatasetOptions data;
  std::uint64_t seed = 0;
  std::size_t render_samples = 64;
  std::string model_path;
  std::string data_path;

  /// Applies one key=value assignment. Throws ContractError naming the key
  /// when it is unknown or the value does not parse.
  void set(std::string_view key, std::string_view value);

  /// Parses "key = value" lines; '#' starts a comment. A preset key is
  /// applied before any other key regardless of its position.
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);

  /// Every key with its current value, one per line, loadable by parse().
  std::string dump() const;
  static std::vector<std::string> keys();

  /// Validates the model and training sections together.
  void validate() const;
};

}  // namespace scarf
