#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "boxseg/model.hpp"
#include "boxseg/scene.hpp"
#include "boxseg/training.hpp"

namespace boxseg {

// Union of all tunables; every field holds a value after resolution
// (defaults, then config file, then command-line flags).
struct RunConfig {
  SceneConfig scene;
  ModelConfig model;
  TrainConfig train;

  void validate() const;
};

// Defaults overlaid with the optional JSON file. Unknown keys are
// rejected so typos do not silently fall back to defaults.
RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file);

// Materialized config; reading it back reproduces the run bit-exactly.
void write_resolved_config(const RunConfig& config, const std::filesystem::path& path);

}  // namespace boxseg
