#include "sgma/config.hpp"

#include <fstream>

#include "sgma/serialize.hpp"

namespace sgma {

namespace {

SynthConfig synth_over(const nlohmann::json& j, const SynthConfig& base) {
  if (!j.is_object()) throw ConfigError("synth: expected a JSON object");
  nlohmann::json merged = to_json(base);
  for (const auto& [key, value] : j.items()) merged[key] = value;
  try {
    return synth_config_from_json(merged);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

template <typename Fn>
void rethrow_as_config(Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

nlohmann::json to_json(const InferenceConfig& c) { return {{"ridge_lambda", c.ridge_lambda}, {"beta", c.beta}}; }

InferenceConfig inference_config_from_json(const nlohmann::json& j, InferenceConfig c) {
  JsonFields f(j, "inference");
  f.read("ridge_lambda", c.ridge_lambda);
  f.read("beta", c.beta);
  f.finish();
  return c;
}

void RunConfig::validate() const {
  rethrow_as_config([&] {
    synth.validate();
    train.validate();
    inference.validate();
    effective_model(*this).validate();
  });
  if (betas.empty()) throw ConfigError("betas: at least one fusion weight is required");
  for (double b : betas)
    if (!(b >= 0)) throw ConfigError("betas: fusion weights must be >= 0");
}

ModelConfig effective_model(const RunConfig& c) {
  ModelConfig m = c.model;
  for (const auto& name : c.ablations) {
    if (!apply_ablation(name, m)) {
      throw ConfigError("unknown ablation '" + name +
                        "' (no-ma-loss, no-parts, random-parts, loss=softmax, loss=cct, loss=combined, shared-backbone)");
    }
  }
  return m;
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"synth", to_json(c.synth)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"inference", to_json(c.inference)},
          {"betas", c.betas},
          {"ablations", c.ablations},
          {"paths", {{"dataset", c.paths.dataset}, {"checkpoint", c.paths.checkpoint}, {"out", c.paths.out}}}};
}

RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c) {
  JsonFields f(j, "config");
  if (const auto* s = f.child("synth")) c.synth = synth_over(*s, c.synth);
  if (const auto* m = f.child("model")) c.model = model_config_from_json(*m, c.model);
  if (const auto* t = f.child("train")) c.train = train_config_from_json(*t, c.train);
  if (const auto* i = f.child("inference")) c.inference = inference_config_from_json(*i, c.inference);
  f.read("betas", c.betas);
  f.read("ablations", c.ablations);
  if (const auto* p = f.child("paths")) {
    JsonFields pf(*p, "paths");
    pf.read("dataset", c.paths.dataset);
    pf.read("checkpoint", c.paths.checkpoint);
    pf.read("out", c.paths.out);
    pf.finish();
  }
  f.finish();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, to_json(c).dump(2) + "\n");
}

}  // namespace sgma
