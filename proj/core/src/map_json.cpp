#include "rotaforge/map_json.hpp"

#include <map>
#include <mutex>

#include "rotaforge/errors.hpp"

namespace rotaforge {

using nlohmann::json;

namespace {

json series_to_json(const FourierSeries& f) {
  json out = json::array();
  for (const auto& t : f) out.push_back(json::array({t.h, t.s, t.c}));
  return out;
}

FourierSeries series_from_json(const json& j, const char* what) {
  if (!j.is_array()) throw ConfigError(std::string(what) + ": expected an array of [h, s, c]");
  FourierSeries out;
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 3)
      throw ConfigError(std::string(what) + ": each entry must be [harmonic, sin, cos]");
    FourierTerm t;
    t.h = e[0].get<int>();
    t.s = e[1].get<double>();
    t.c = e[2].get<double>();
    out.push_back(t);
  }
  return out;
}

double require_number(const json& j, const char* key, const char* ctx) {
  if (!j.contains(key)) throw ConfigError(std::string(ctx) + ": missing field '" + key + "'");
  if (!j.at(key).is_number()) throw ConfigError(std::string(ctx) + ": field '" + key + "' must be a number");
  return j.at(key).get<double>();
}

std::map<std::string, LayerFactory>& layer_registry() {
  static std::map<std::string, LayerFactory> reg;
  return reg;
}

std::mutex& layer_registry_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

json base_to_json(const BaseSystem& base) {
  json j;
  if (base.kind() == BaseSystem::Kind::rotation_1d) {
    j["kind"] = "rotation1d";
    j["omega"] = base.omega1();
  } else {
    j["kind"] = "rotationd";
    j["omega"] = base.omega();
  }
  return j;
}

BasePtr base_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("base: expected an object");
  std::string kind = j.value("kind", "");
  if (kind == "rotation1d") {
    return std::make_shared<BaseSystem>(require_number(j, "omega", "base"));
  }
  if (kind == "rotationd") {
    if (!j.contains("omega") || !j.at("omega").is_array())
      throw ConfigError("base: rotationd requires an omega array");
    return std::make_shared<BaseSystem>(j.at("omega").get<std::vector<double>>());
  }
  throw ConfigError("base: unknown kind '" + kind + "' (expected rotation1d or rotationd)");
}

json generator_to_json(const Generator& gen) {
  json j;
  j["family"] = gen.family_name();
  switch (gen.family) {
    case Generator::Family::rigid:
      j["alpha"] = gen.alpha;
      break;
    case Generator::Family::arnold_qpf:
      j["tau"] = gen.tau;
      j["alpha"] = gen.alpha;
      j["beta"] = gen.beta;
      j["forcing"] = series_to_json(gen.forcing);
      break;
    case Generator::Family::harper:
      j["E"] = gen.E;
      j["v0"] = gen.v0;
      j["V"] = series_to_json(gen.V);
      break;
    case Generator::Family::fourier:
      j["c0"] = gen.c0;
      j["x_terms"] = series_to_json(gen.x_terms);
      j["theta_terms"] = series_to_json(gen.theta_terms);
      {
        json ct = json::array();
        for (const auto& t : gen.cross_terms)
          ct.push_back(json::array({json(t.hx), json(t.ht), json(t.ss), json(t.sc), json(t.cs),
                                    json(t.cc)}));
        j["cross_terms"] = ct;
      }
      break;
  }
  return j;
}

Generator generator_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("fiber: expected an object");
  std::string family = j.value("family", "");
  if (family.empty() && j.contains("kind"))
    throw ConfigError("fiber: kind '" + j.at("kind").get<std::string>() +
                      "' is a run artifact and cannot be reloaded from JSON; rebuild it by "
                      "re-running the producing pipeline on the underlying map");
  if (family == "rigid") {
    return Generator::rigid_map(require_number(j, "alpha", "fiber"));
  }
  if (family == "arnold-qpf") {
    FourierSeries forcing;
    if (j.contains("forcing")) forcing = series_from_json(j.at("forcing"), "fiber.forcing");
    return Generator::arnold(require_number(j, "tau", "fiber"), require_number(j, "alpha", "fiber"),
                             j.value("beta", 0.0), std::move(forcing));
  }
  if (family == "harper") {
    FourierSeries V;
    if (j.contains("V")) V = series_from_json(j.at("V"), "fiber.V");
    return Generator::harper_map(require_number(j, "E", "fiber"), j.value("v0", 0.0),
                                 std::move(V));
  }
  if (family == "fourier") {
    FourierSeries xt, tt;
    std::vector<CrossTerm> ct;
    if (j.contains("x_terms")) xt = series_from_json(j.at("x_terms"), "fiber.x_terms");
    if (j.contains("theta_terms")) tt = series_from_json(j.at("theta_terms"), "fiber.theta_terms");
    if (j.contains("cross_terms")) {
      for (const auto& e : j.at("cross_terms")) {
        if (!e.is_array() || e.size() != 6)
          throw ConfigError("fiber.cross_terms: each entry must be [hx, ht, ss, sc, cs, cc]");
        CrossTerm c;
        c.hx = e[0].get<int>();
        c.ht = e[1].get<int>();
        c.ss = e[2].get<double>();
        c.sc = e[3].get<double>();
        c.cs = e[4].get<double>();
        c.cc = e[5].get<double>();
        ct.push_back(c);
      }
    }
    return Generator::fourier_map(j.value("c0", 0.0), std::move(xt), std::move(tt), std::move(ct));
  }
  throw ConfigError("fiber: unknown family '" + family + "'");
}

void GeneratorKernel::to_json(json& j) const { j = generator_to_json(gen_); }

json map_to_json(const ForcedLift& map) {
  json j;
  j["base"] = base_to_json(map.base());
  json fiber;
  map.kernel()->to_json(fiber);
  j["fiber"] = fiber;
  if (map.t_offset() != 0.0) j["t"] = map.t_offset();
  if (map.fiber_knots() != FiberLift::kDefaultKnots) j["knots"] = map.fiber_knots();
  if (!map.layers().empty()) {
    json layers = json::array();
    for (const auto& l : map.layers()) layers.push_back(l->to_json());
    j["layers"] = layers;
  }
  return j;
}

ForcedLift map_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("map: expected an object");
  if (!j.contains("base")) throw ConfigError("map: missing 'base'");
  if (!j.contains("fiber")) throw ConfigError("map: missing 'fiber'");
  BasePtr base = base_from_json(j.at("base"));
  Generator gen = generator_from_json(j.at("fiber"));
  int knots = j.value("knots", FiberLift::kDefaultKnots);
  ForcedLift map(std::move(base), std::move(gen), knots);
  if (j.contains("layers")) {
    for (const auto& lj : j.at("layers")) map = map.with_layer(layer_from_json(lj));
  }
  if (j.contains("t")) map = map.with_t(j.at("t").get<double>());
  return map;
}

void register_layer_kind(const std::string& kind, LayerFactory factory) {
  std::lock_guard<std::mutex> lock(layer_registry_mutex());
  layer_registry()[kind] = std::move(factory);
}

LayerPtr layer_from_json(const json& j) {
  if (!j.is_object() || !j.contains("kind"))
    throw ConfigError("layer: expected an object with a 'kind' field");
  std::string kind = j.at("kind").get<std::string>();
  LayerFactory factory;
  {
    std::lock_guard<std::mutex> lock(layer_registry_mutex());
    auto it = layer_registry().find(kind);
    if (it == layer_registry().end()) {
      if (kind == "tower-blend" || kind == "return-interp" || kind == "conjugated" ||
          kind == "conjugated-product")
        throw ConfigError("layer: '" + kind +
                          "' is a run artifact and cannot be reloaded from JSON; rebuild it by "
                          "re-running the producing pipeline on the underlying map");
      throw ConfigError("layer: unknown kind '" + kind + "'");
    }
    factory = it->second;
  }
  return factory(j);
}

}  // namespace rotaforge
