// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "maskinv/errors.hpp"
#include "maskinv/model.hpp"

namespace maskinv {

namespace {

using json = nlohmann::ordered_json;

template <class T>
T require_number(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw LoadError(std::string("model config: missing field '") + key + "'");
  }
  if (!it->is_number()) {
    throw LoadError(std::string("model config: field '") + key +
                    "' must be a number");
  }
  return it->get<T>();
}

std::array<double, 3> require_triple(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw LoadError(std::string("model config: missing field '") + key + "'");
  }
  if (!it->is_array() || it->size() != 3) {
    throw LoadError(std::string("model config: field '") + key +
                    "' must be an array of 3 numbers");
  }
  std::array<double, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!(*it)[i].is_number()) {
      throw LoadError(std::string("model config: field '") + key +
                      "' must be an array of 3 numbers");
    }
    out[i] = (*it)[i].get<double>();
  }
  return out;
}

}  // namespace

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();

  json root;
  try {
    root = json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw LoadError("'" + path + "': " + e.what());
  }
  if (!root.is_object()) {
    throw LoadError("'" + path + "': model config must be a JSON object");
  }

  ModelConfig cfg;
  cfg.layers = require_number<int>(root, "layers");
  cfg.heads = require_number<int>(root, "heads");
  cfg.width = require_number<int>(root, "width");
  cfg.joint_dim = require_number<int>(root, "joint_dim");
  cfg.patch_size = require_number<int>(root, "patch_size");
  cfg.image_size = require_number<int>(root, "image_size");
  if (root.contains("mlp_ratio")) {
    cfg.mlp_ratio = require_number<double>(root, "mlp_ratio");
  }
  if (root.contains("layernorm_eps")) {
    cfg.layernorm_eps = require_number<double>(root, "layernorm_eps");
  }
  if (root.contains("preprocess")) {
    const json& pp = root["preprocess"];
    if (!pp.is_object()) {
      throw LoadError("'" + path + "': field 'preprocess' must be an object");
    }
    cfg.preprocess.mean = require_triple(pp, "mean");
    cfg.preprocess.stddev = require_triple(pp, "stddev");
  }
  try {
    cfg.validate();
  } catch (const ArgumentError& e) {
    throw LoadError("'" + path + "': " + e.what());
  }
  return cfg;
}

void save_model_config(const std::string& path, const ModelConfig& cfg) {
  cfg.validate();
  json root;
  root["layers"] = cfg.layers;
  root["heads"] = cfg.heads;
  root["width"] = cfg.width;
  root["joint_dim"] = cfg.joint_dim;
  root["patch_size"] = cfg.patch_size;
  root["image_size"] = cfg.image_size;
  root["mlp_ratio"] = cfg.mlp_ratio;
  root["layernorm_eps"] = cfg.layernorm_eps;
  root["preprocess"] = {
      {"mean", cfg.preprocess.mean},
      {"stddev", cfg.preprocess.stddev},
  };

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write '" + path + "'");
  out << root.dump(2) << "\n";
  if (!out) throw LoadError("write to '" + path + "' failed");
}

}  // namespace maskinv
