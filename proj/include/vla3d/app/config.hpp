#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "vla3d/model/model.hpp"
#include "vla3d/scene/scene.hpp"

namespace vla3d::app {

using nlohmann::json;

/// Invalid configuration value or key; the message starts with the dotted key.
class config_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int scenes = 8;
  scene::SceneSpec scene;
  model::ModelConfig model;
  model::TrainConfig stage1;
  model::TrainConfig stage2 = model::TrainConfig::stage2();

  /// Checks every value against the module preconditions; throws config_error.
  void validate() const;
  json to_json() const;
};

/// Named defaults: "desk" (the toy-scale defaults) or "full".
RunConfig preset(const std::string& name);

/// Strict parse: every key must be known, values are applied on top of `base`.
RunConfig config_from_json(const json& j, const RunConfig& base);

/// Sets one dotted key ("model.mask_ratio=1.1"); the value is parsed as JSON
/// and falls back to a string.
void apply_override(json& j, const std::string& assignment);

/// Preset, then an optional JSON file (merged), then overrides; validated.
RunConfig resolve_config(const std::string& preset_name, const std::filesystem::path* file,
                         const std::vector<std::string>& overrides);

json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const json& j);

}  // namespace vla3d::app
