#pragma once

// Parameter checkpoint files.
//
// JSON document, format "gradcache.checkpoint", version 1:
//
//   {
//     "format": "gradcache.checkpoint",
//     "version": 1,
//     "tied": false,
//     "encoders": {
//       "anchor": { "identity_dim": 0,
//                   "layers": [ { "in": 8, "out": 32, "activation": "tanh",
//                                 "weight": [...row-major...], "bias": [...] } ] },
//       "target": { ... }            // omitted when tied
//     },
//     "head": { ... }                // optional distance head, same layout
//   }
//
// Doubles are written with round-trip precision, so save/load is lossless.

#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "gradcache/encoder.hpp"
#include "gradcache/errors.hpp"

namespace gradcache {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  DualEncoder model;
  std::optional<EncoderParams> head;
};

namespace detail {

inline nlohmann::json encoder_to_json(const EncoderParams& p) {
  nlohmann::json j;
  j["identity_dim"] = p.identity_dim;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : p.layers) {
    j["layers"].push_back({{"in", l.weight.rows()},
                           {"out", l.weight.cols()},
                           {"activation", std::string(to_string(l.activation))},
                           {"weight", l.weight.to_vector()},
                           {"bias", l.bias.to_vector()}});
  }
  return j;
}

inline EncoderParams encoder_from_json(const nlohmann::json& j) {
  mem::CategoryScope category(mem::Category::parameters);
  EncoderParams p;
  p.identity_dim = j.value("identity_dim", std::size_t{0});
  for (const auto& lj : j.at("layers")) {
    const std::size_t in = lj.at("in").get<std::size_t>();
    const std::size_t out = lj.at("out").get<std::size_t>();
    Layer l;
    l.activation = parse_activation(lj.at("activation").get<std::string>());
    l.weight = Tensor::matrix(in, out, lj.at("weight").get<std::vector<double>>());
    l.bias = Tensor::matrix(1, out, lj.at("bias").get<std::vector<double>>());
    p.layers.push_back(std::move(l));
  }
  p.validate();
  return p;
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
  nlohmann::json j;
  j["format"] = "gradcache.checkpoint";
  j["version"] = kCheckpointVersion;
  j["tied"] = ck.model.tied;
  j["encoders"]["anchor"] = detail::encoder_to_json(ck.model.anchor);
  if (!ck.model.tied) j["encoders"]["target"] = detail::encoder_to_json(ck.model.target);
  if (ck.head) j["head"] = detail::encoder_to_json(*ck.head);
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "gradcache.checkpoint") {
    throw ConfigError("not a gradcache checkpoint");
  }
  const int version = j.value("version", 0);
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.model.tied = j.value("tied", false);
  ck.model.anchor = detail::encoder_from_json(j.at("encoders").at("anchor"));
  if (!ck.model.tied) ck.model.target = detail::encoder_from_json(j.at("encoders").at("target"));
  if (j.contains("head")) ck.head = detail::encoder_from_json(j.at("head"));
  ck.model.validate();
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open checkpoint for writing: " + path);
  os << checkpoint_to_json(ck).dump(1) << '\n';
  if (!os) throw ConfigError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace gradcache
