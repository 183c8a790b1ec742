#include "sgma/checkpoint.hpp"

#include <fstream>

#include "sgma/serialize.hpp"

namespace sgma {

const Tensor& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("checkpoint has no parameter named " + name);
  return it->second;
}

void save_checkpoint(const std::filesystem::path& dir, const ParameterList& params, const nlohmann::json& config) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "sgma-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = config;
  manifest["parameters"] = nlohmann::json::array();
  for (const auto& p : params) {
    const std::string file = p.name + ".sgmt";
    save_tensor(dir / file, p.value);
    manifest["parameters"].push_back({{"name", p.name}, {"shape", p.value.shape()}, {"file", file}});
  }
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no checkpoint manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "sgma-checkpoint" || manifest.value("version", 0) != 1) {
    throw FormatError("unsupported checkpoint format in " + dir.string());
  }
  Checkpoint ck;
  ck.config = manifest["config"];
  for (const auto& entry : manifest["parameters"]) {
    Tensor t = load_tensor(dir / entry.at("file").get<std::string>());
    if (t.shape() != entry.at("shape").get<Shape>()) {
      throw FormatError("checkpoint tensor " + entry.at("name").get<std::string>() + " has unexpected shape");
    }
    t.set_requires_grad(true);
    ck.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

}  // namespace sgma
