#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "sgma/backbone.hpp"

namespace sgma {

struct Checkpoint {
  nlohmann::json config;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
};

/// Writes one tensor blob per parameter plus `manifest.json` (names, shapes,
/// config). The manifest is written last via rename.
void save_checkpoint(const std::filesystem::path& dir, const ParameterList& params, const nlohmann::json& config);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace sgma
