#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include <json.hpp>

#include "vitidle/errors.hpp"
#include "vitidle/tensor.hpp"
#include "vitidle/vit.hpp"

namespace vitidle {

inline nlohmann::json config_to_json(const ViTConfig& c) {
  return nlohmann::json{{"image_size", c.image_size},   {"patch_size", c.patch_size},
                        {"channels_in", c.channels_in}, {"embed_dim", c.embed_dim},
                        {"num_heads", c.num_heads},     {"num_layers", c.num_layers},
                        {"ffn_ratio", c.ffn_ratio},     {"num_classes", c.num_classes}};
}

inline ViTConfig config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  try {
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.channels_in = j.at("channels_in").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.ffn_ratio = j.at("ffn_ratio").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("config json: ") + e.what());
  }
  c.validate();
  return c;
}

/// Checkpoint layout: a directory holding one tensor file per parameter and
/// a manifest.json recording the config and the parameter -> file map.
inline void save_checkpoint(const std::string& dir, const ModelParams& params,
                            const ViTConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["config"] = config_to_json(cfg);
  nlohmann::json files = nlohmann::json::object();
  for_each_param(params, [&](const std::string& name, const Tensor& t) {
    const std::string file = name + ".tnsr";
    write_tensor((fs::path(dir) / file).string(), t, Dtype::f64);
    files[name] = file;
  });
  manifest["params"] = std::move(files);
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw ContractError("checkpoint: cannot write manifest in " + dir);
  os << manifest.dump(2) << '\n';
}

inline std::pair<ModelParams, ViTConfig> load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw ContractError("checkpoint: missing manifest in " + dir);
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("checkpoint manifest: ") + e.what());
  }
  const ViTConfig cfg = config_from_json(manifest.at("config"));
  ModelParams params = param_shape<Tensor>(cfg);
  const nlohmann::json& files = manifest.at("params");
  for_each_param(params, [&](const std::string& name, Tensor& t) {
    if (!files.contains(name)) throw ContractError("checkpoint: manifest missing " + name);
    t = read_tensor((fs::path(dir) / files.at(name).get<std::string>()).string());
  });
  validate_params(params, cfg);
  return {std::move(params), cfg};
}

}  // namespace vitidle
