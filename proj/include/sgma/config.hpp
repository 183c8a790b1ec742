#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgma/inference.hpp"
#include "sgma/json_fields.hpp"
#include "sgma/model.hpp"
#include "sgma/synth.hpp"
#include "sgma/train.hpp"

namespace sgma {

struct PathsConfig {
  std::string dataset;
  std::string checkpoint;
  std::string out;
};

/// Every tunable of a run. Resolution order: built-in defaults, then the
/// config file, then command-line flags.
struct RunConfig {
  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  InferenceConfig inference;
  std::vector<double> betas{1.0};       // fusion weights evaluated by `eval`
  std::vector<std::string> ablations;   // applied on top of `model`
  PathsConfig paths;

  /// Raises ConfigError on the first invalid value.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Keys of `j` override `base`; unknown keys raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
/// Writes the resolved config atomically.
void save_run_config(const std::filesystem::path& path, const RunConfig& c);

/// The model config with the named ablations applied in order.
ModelConfig effective_model(const RunConfig& c);

nlohmann::json to_json(const InferenceConfig& c);
InferenceConfig inference_config_from_json(const nlohmann::json& j, InferenceConfig base = {});

}  // namespace sgma
