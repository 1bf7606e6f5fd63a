#pragma once

#include <functional>
#include <string>

#include <nlohmann/json.hpp>

#include "rotaforge/forced_lift.hpp"

namespace rotaforge {

// Map-definition schema (field names are part of the public contract):
//   {"base":  {"kind": "rotation1d", "omega": 0.6180339887},
//    "fiber": {"family": "arnold-qpf", "tau": 0.1, "alpha": 0.5, "beta": 0.2,
//              "forcing": [[1, 0.0, 1.0]]},
//    "t": 0.0, "knots": 4096, "layers": [...]}        (t/knots/layers optional)
// forcing / V / x_terms / theta_terms entries are [harmonic, sin-coeff, cos-coeff];
// cross_terms entries are [hx, ht, ss, sc, cs, cc].

nlohmann::json base_to_json(const BaseSystem& base);
BasePtr base_from_json(const nlohmann::json& j);

nlohmann::json generator_to_json(const Generator& gen);
Generator generator_from_json(const nlohmann::json& j);

nlohmann::json map_to_json(const ForcedLift& map);
ForcedLift map_from_json(const nlohmann::json& j);

// Perturbation layers serialize as {"kind": ..., ...}; modules providing
// concrete layers register a factory for their kind at startup.
using LayerFactory = std::function<LayerPtr(const nlohmann::json&)>;
void register_layer_kind(const std::string& kind, LayerFactory factory);
LayerPtr layer_from_json(const nlohmann::json& j);

}  // namespace rotaforge
