// rotaforge command-line front end: map definitions in, reports/CSV out.
//
// Commands: rho, classify, tongue, family, linearize, modelock, strata-dump.
// Exit codes: 0 success, 1 certified-bound failure, 2 config error,
// 3 budget exhaustion.  Identical config + seed produce byte-identical
// output regardless of the worker count (fixed reduction order).

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include <nlohmann/json.hpp>

#include <rotaforge/errors.hpp>
#include <rotaforge/families.hpp>
#include <rotaforge/forced_lift.hpp>
#include <rotaforge/linearize.hpp>
#include <rotaforge/map_json.hpp>
#include <rotaforge/rotation.hpp>
#include <rotaforge/scan.hpp>
#include <rotaforge/strata.hpp>

namespace {

using nlohmann::json;
using namespace rotaforge;

struct CommonArgs {
  std::string config_path;
  std::string out_path;
  std::int64_t n = 0;        // 0 = config / command default
  std::string grid;          // "THETA" or "THETAxY"
  double epsilon = 0.0;      // 0 = config / command default
  std::int64_t seed = -1;    // <0 = config / command default
  int workers = 0;           // 0 = config / default 1
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "JSON run configuration file");
  cmd->add_option("--out", a.out_path, "output file (default: stdout)");
  cmd->add_option("--n", a.n, "orbit length override");
  cmd->add_option("--grid", a.grid, "displacement grid THETA[xY]");
  cmd->add_option("--epsilon", a.epsilon, "distance budget / scan radius override");
  cmd->add_option("--seed", a.seed, "seed override (recorded in every report)");
  cmd->add_option("--workers", a.workers, "worker threads for grid scans");
}

json load_config(const CommonArgs& a) {
  if (a.config_path.empty()) return json::object();
  std::ifstream in(a.config_path);
  if (!in) throw ConfigError("cannot open config '" + a.config_path + "'");
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config parse: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  return j;
}

ForcedLift map_of(const json& cfg) {
  if (cfg.contains("map")) return map_from_json(cfg.at("map"));
  if (cfg.contains("map_path")) {
    std::string path = cfg.at("map_path").get<std::string>();
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open map '" + path + "'");
    json mj;
    try {
      in >> mj;
    } catch (const std::exception& e) {
      throw ConfigError("map parse: " + std::string(e.what()));
    }
    return map_from_json(mj);
  }
  throw ConfigError("config: missing 'map' (inline definition) or 'map_path'");
}

std::int64_t pick_n(const CommonArgs& a, const json& cfg, std::int64_t def) {
  if (a.n > 0) return a.n;
  return cfg.value("n", def);
}

double pick_eps(const CommonArgs& a, const json& cfg, double def) {
  if (a.epsilon > 0.0) return a.epsilon;
  return cfg.value("epsilon", def);
}

std::uint64_t pick_seed(const CommonArgs& a, const json& cfg, std::uint64_t def) {
  if (a.seed >= 0) return static_cast<std::uint64_t>(a.seed);
  return cfg.value("seed", def);
}

int pick_workers(const CommonArgs& a, const json& cfg) {
  int w = a.workers > 0 ? a.workers : cfg.value("workers", 1);
  return std::max(1, w);
}

DispGrid grid_of(const CommonArgs& a, const json& cfg, DispGrid def) {
  if (cfg.contains("grid")) {
    const json& g = cfg.at("grid");
    if (!g.is_array() || g.size() != 2)
      throw ConfigError("config: 'grid' must be [theta_count, y_count]");
    def.theta = g.at(0).get<int>();
    def.y = g.at(1).get<int>();
  }
  if (!a.grid.empty()) {
    std::size_t x = a.grid.find('x');
    try {
      if (x == std::string::npos) {
        def.theta = std::stoi(a.grid);
      } else {
        def.theta = std::stoi(a.grid.substr(0, x));
        def.y = std::stoi(a.grid.substr(x + 1));
      }
    } catch (const std::exception&) {
      throw ConfigError("--grid: expected THETA or THETAxY, got '" + a.grid + "'");
    }
  }
  if (def.theta < 1 || def.y < 1) throw ConfigError("grid counts must be positive");
  return def;
}

void emit(const CommonArgs& a, const std::string& text) {
  if (a.out_path.empty()) {
    std::fwrite(text.data(), 1, text.size(), stdout);
    return;
  }
  std::ofstream out(a.out_path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + a.out_path + "'");
  out << text;
}

bool wants_csv(const CommonArgs& a) {
  return a.out_path.size() >= 4 && a.out_path.substr(a.out_path.size() - 4) == ".csv";
}

json rho_estimate_json(const RotationReport& r) {
  return json{{"rho_hat", r.rho_hat}, {"raw", r.rho_raw},
              {"error_bound", r.error_bound}, {"lower", r.lower},
              {"upper", r.upper},             {"n", r.n_orbit}};
}

// Uniform grid from a config entry [lo, hi, count].
std::vector<double> grid_from_cfg(const json& cfg, const std::string& key, double lo, double hi,
                                  int count) {
  if (cfg.contains(key)) {
    const json& g = cfg.at(key);
    if (!g.is_array() || g.size() != 3)
      throw ConfigError("config: '" + key + "' must be [lo, hi, count]");
    lo = g.at(0).get<double>();
    hi = g.at(1).get<double>();
    count = g.at(2).get<int>();
  }
  return uniform_grid(lo, hi, count);
}

template <class T>
void get_if(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

ReturnSetOptions strata_opts_from(const json& j) {
  ReturnSetOptions o;
  get_if(j, "boundary_tol", o.boundary_tol);
  get_if(j, "length_factor", o.length_factor);
  get_if(j, "horizon", o.horizon);
  get_if(j, "mild_samples", o.mild_samples);
  get_if(j, "seed", o.seed);
  return o;
}

LinearizeOptions lin_opts_from(const json& j) {
  LinearizeOptions o;
  get_if(j, "classify_t_grid", o.classify_t_grid);
  get_if(j, "classify_n", o.classify_n);
  get_if(j, "d", o.d);
  get_if(j, "rho_budget_frac", o.rho_budget_frac);
  get_if(j, "rho_pilot_n", o.rho_pilot_n);
  get_if(j, "rho_max_n", o.rho_max_n);
  get_if(j, "samples_per_arc", o.samples_per_arc);
  get_if(j, "solver_tol", o.solver_tol);
  get_if(j, "place_tol", o.place_tol);
  get_if(j, "rho_slack", o.rho_slack);
  get_if(j, "budget", o.budget);
  get_if(j, "verify_samples", o.verify_samples);
  get_if(j, "showcase_towers", o.showcase_towers);
  get_if(j, "conj_samples", o.conj_samples);
  get_if(j, "seed", o.seed);
  get_if(j, "sliver", o.sliver);
  get_if(j, "midpoint_gate", o.midpoint_gate);
  get_if(j, "n0_override", o.n0_override);
  get_if(j, "p_override", o.p_override);
  if (j.contains("cascade")) {
    const json& c = j.at("cascade");
    if (c.contains("grid")) {
      o.cascade.grid.theta = c.at("grid").at(0).get<int>();
      o.cascade.grid.y = c.at("grid").at(1).get<int>();
    }
    get_if(c, "horizon", o.cascade.horizon);
    get_if(c, "horizon_cap", o.cascade.horizon_cap);
    get_if(c, "rho_n", o.cascade.rho_n);
    get_if(c, "n2_margin", o.cascade.n2_margin);
    get_if(c, "n0_fraction", o.cascade.n0_fraction);
    get_if(c, "rate_safety", o.cascade.rate_safety);
    get_if(c, "p_margin", o.cascade.p_margin);
    get_if(c, "p_floor", o.cascade.p_floor);
  }
  if (j.contains("strata")) o.strata = strata_opts_from(j.at("strata"));
  return o;
}

ModeLockOptions modelock_opts_from(const json& j) {
  ModeLockOptions o;
  get_if(j, "q_max", o.q_max);
  get_if(j, "a_cap", o.a_cap);
  get_if(j, "plateau_floor", o.plateau_floor);
  get_if(j, "safety", o.safety);
  get_if(j, "lip_towers", o.lip_towers);
  get_if(j, "lip_knots", o.lip_knots);
  get_if(j, "classify_t_grid", o.classify_t_grid);
  get_if(j, "classify_n", o.classify_n);
  get_if(j, "row_knots", o.row_knots);
  get_if(j, "seed", o.seed);
  if (j.contains("force_pq")) {
    const json& pq = j.at("force_pq");
    o.force_pq = std::make_pair(pq.at(0).get<std::int64_t>(), pq.at(1).get<std::int64_t>());
  }
  if (j.contains("force_a")) o.force_a = j.at("force_a").get<double>();
  if (j.contains("lin")) o.lin = lin_opts_from(j.at("lin"));
  return o;
}

// Factory for single-parameter scans: the vertical translate "t" works on
// any map; generator parameters need a bare closed-form family.
std::function<ForcedLift(double)> param_family(const ForcedLift& proto, const std::string& param) {
  if (param == "t") return [proto](double v) { return proto.with_t(v); };
  const Generator* g0 = proto.kernel()->as_generator();
  if (g0 == nullptr)
    throw ConfigError("family: parameter '" + param +
                      "' needs a closed-form fiber family (use param 't' for arbitrary maps)");
  if (!proto.layers().empty() || proto.t_offset() != 0.0)
    throw ConfigError("family: layered or translated maps only scan over 't'");
  if (param != "tau" && param != "alpha" && param != "beta" && param != "E" && param != "v0" &&
      param != "c0")
    throw ConfigError("family: unknown parameter '" + param + "'");
  Generator base = *g0;
  return [proto, base, param](double v) {
    Generator g = base;
    if (param == "tau")
      g.tau = v;
    else if (param == "alpha")
      g.alpha = v;
    else if (param == "beta")
      g.beta = v;
    else if (param == "E")
      g.E = v;
    else if (param == "v0")
      g.v0 = v;
    else
      g.c0 = v;
    g.validate();
    return ForcedLift(proto.base_ptr(), g, proto.fiber_knots());
  };
}

int run_rho(const CommonArgs& a) {
  json cfg = load_config(a);
  ForcedLift f = map_of(cfg);
  std::int64_t n = pick_n(a, cfg, 100000);
  DispGrid g = grid_of(a, cfg, DispGrid{32, 8});
  double theta0 = cfg.value("theta0", 0.0);
  RotationReport r = rho(f, theta0, n, g);
  json out{{"v", 1},
           {"kind", "rho"},
           {"seed", pick_seed(a, cfg, 1)},
           {"n", n},
           {"grid", json::array({g.theta, g.y})},
           {"theta0", theta0},
           {"estimate", rho_estimate_json(r)}};
  emit(a, out.dump(2) + "\n");
  return 0;
}

int run_classify(const CommonArgs& a) {
  json cfg = load_config(a);
  ForcedLift f = map_of(cfg);
  std::int64_t n = pick_n(a, cfg, std::int64_t{1} << 14);
  DispGrid g = grid_of(a, cfg, DispGrid{8, 4});
  double eps_bar = pick_eps(a, cfg, 0.05);
  int t_grid = cfg.value("t_grid", 17);
  double theta0 = cfg.value("theta0", 0.0);
  double delta = cfg.value("delta_rho", 0.0);
  if (delta <= 0.0) {
    RotationReport pre = rho(f, theta0, n, g);
    delta = std::max(4.0 / static_cast<double>(n), 2.5 * pre.error_bound);
  }
  LockClassification c = classify(f, eps_bar, t_grid, n, delta, g);
  if (wants_csv(a)) {
    std::string csv = "t,rho_hat,lower,upper,n\n";
    char buf[160];
    for (const ScanPoint& p : c.scan) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%lld\n", p.t, p.rho_hat,
                    p.rho_raw - c.error_bound, p.rho_raw + c.error_bound,
                    static_cast<long long>(n));
      csv += buf;
    }
    emit(a, csv);
    return 0;
  }
  json scan = json::array();
  for (const ScanPoint& p : c.scan)
    scan.push_back(json{{"t", p.t}, {"rho_hat", p.rho_hat}, {"raw", p.rho_raw}});
  json out{{"v", 1},
           {"kind", "classify"},
           {"seed", pick_seed(a, cfg, 1)},
           {"n", n},
           {"eps_bar", eps_bar},
           {"verdict", verdict_name(c.verdict)},
           {"plateau", json::array({c.plateau_lo, c.plateau_hi})},
           {"delta_rho", c.delta_rho},
           {"estimate", json{{"error_bound", c.error_bound}}},
           {"scan", std::move(scan)}};
  emit(a, out.dump(2) + "\n");
  return 0;
}

int run_tongue(const CommonArgs& a) {
  json cfg = load_config(a);
  ForcedLift proto = map_of(cfg);
  const Generator* g0 = proto.kernel()->as_generator();
  if (g0 == nullptr || g0->family_name() != "arnold-qpf")
    throw ConfigError("tongue: the raster needs an arnold-qpf fiber family");
  if (!proto.layers().empty() || proto.t_offset() != 0.0)
    throw ConfigError("tongue: raster runs on a bare family (no layers, t = 0)");
  std::string axis = cfg.value("axis", "alpha");
  if (axis != "alpha" && axis != "beta")
    throw ConfigError("tongue: axis must be 'alpha' or 'beta'");
  std::vector<double> taus = grid_from_cfg(cfg, "tau", -0.5, 0.5, 201);
  std::vector<double> ps = grid_from_cfg(cfg, "param", 0.0, 1.0, 101);
  std::int64_t n = pick_n(a, cfg, 10000);
  TongueRasterOptions opt;
  opt.grid = grid_of(a, cfg, DispGrid{2, 2});
  opt.delta_rho = cfg.value("delta_rho", 0.0);
  opt.theta0 = cfg.value("theta0", 0.0);
  opt.workers = pick_workers(a, cfg);
  Generator base = *g0;
  auto fam = [&](double tau, double p) {
    Generator g = base;
    g.tau = tau;
    if (axis == "alpha")
      g.alpha = p;
    else
      g.beta = p;
    g.validate();
    return ForcedLift(proto.base_ptr(), g, proto.fiber_knots());
  };
  TongueRaster r = tongue_raster(fam, taus, ps, n, opt);
  emit(a, r.to_csv(axis));
  return 0;
}

int run_family(const CommonArgs& a) {
  json cfg = load_config(a);
  ForcedLift proto = map_of(cfg);
  const Generator* g0 = proto.kernel()->as_generator();
  std::string def_param =
      (g0 != nullptr && g0->family_name() == "arnold-qpf" && proto.layers().empty() &&
       proto.t_offset() == 0.0)
          ? "tau"
          : "t";
  std::string param = cfg.value("param", def_param);
  std::vector<double> taus = grid_from_cfg(cfg, "tau", -0.5, 0.5, 1001);
  std::int64_t n = pick_n(a, cfg, 10000);
  FamilyScanOptions opt;
  opt.delta_rho = cfg.value("delta_rho", 0.0);
  opt.min_run = cfg.value("min_run", 2);
  opt.grid = grid_of(a, cfg, DispGrid{8, 2});
  opt.theta0 = cfg.value("theta0", 0.0);
  opt.workers = pick_workers(a, cfg);
  FamilyScanReport rep = family_scan(param_family(proto, param), taus, n, opt);
  if (wants_csv(a)) {
    emit(a, rep.to_csv());
    return 0;
  }
  json out = rep.to_json();
  out["seed"] = pick_seed(a, cfg, 1);
  out["param"] = param;
  emit(a, out.dump(2) + "\n");
  return 0;
}

int run_linearize(const CommonArgs& a) {
  json cfg = load_config(a);
  ForcedLift f = map_of(cfg);
  double eps = pick_eps(a, cfg, 0.0);
  if (!(eps > 0.0))
    throw ConfigError("linearize: a positive --epsilon (or config 'epsilon') is required");
  LinearizeOptions opts = lin_opts_from(cfg.value("options", json::object()));
  opts.seed = pick_seed(a, cfg, opts.seed);
  if (a.n > 0) opts.classify_n = a.n;
  LinearizeResult res = linearize(f, eps, opts);
  json out = res.report();
  if (cfg.value("emit_map", false)) out["map_prime"] = map_to_json(res.f_prime);
  emit(a, out.dump(2) + "\n");
  return 0;
}

int run_modelock(const CommonArgs& a) {
  json cfg = load_config(a);
  ForcedLift f = map_of(cfg);
  double eps = pick_eps(a, cfg, 0.0);
  if (!(eps > 0.0))
    throw ConfigError("modelock: a positive --epsilon (or config 'epsilon') is required");
  ModeLockOptions opts = modelock_opts_from(cfg.value("options", json::object()));
  opts.seed = pick_seed(a, cfg, opts.seed);
  if (a.n > 0) opts.classify_n = a.n;
  ModeLockResult res = mode_lock_densify(f, eps, opts);
  emit(a, res.report().dump(2) + "\n");
  return 0;
}

int run_strata_dump(const CommonArgs& a) {
  json cfg = load_config(a);
  ForcedLift f = map_of(cfg);
  std::int64_t n = pick_n(a, cfg, 20);
  ReturnSetOptions opts = strata_opts_from(cfg.value("options", json::object()));
  if (a.seed >= 0) opts.seed = static_cast<std::uint64_t>(a.seed);
  ReturnSet K = build_return_set(f.base_ptr(), n, opts);
  json out = strata_json(K);
  out["seed"] = opts.seed;
  emit(a, out.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "rotaforge: fibered rotation numbers, mode-locking analysis, and constructive "
      "linearization of forced circle maps"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "rotaforge 0.1.0");

  CommonArgs a;
  CLI::App* c_rho = app.add_subcommand("rho", "fibered rotation number with error bounds");
  CLI::App* c_classify =
      app.add_subcommand("classify", "mode-locking trichotomy of the translate family");
  CLI::App* c_tongue = app.add_subcommand("tongue", "two-parameter locking raster (CSV)");
  CLI::App* c_family = app.add_subcommand("family", "one-parameter scan with locked intervals");
  CLI::App* c_linearize =
      app.add_subcommand("linearize", "certified conjugacy to the rigid rotation");
  CLI::App* c_modelock =
      app.add_subcommand("modelock", "densification to a nearby mode-locked map");
  CLI::App* c_strata =
      app.add_subcommand("strata-dump", "return-set stratification of the base");
  for (CLI::App* c : {c_rho, c_classify, c_tongue, c_family, c_linearize, c_modelock, c_strata})
    add_common(c, a);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (c_rho->parsed()) return run_rho(a);
    if (c_classify->parsed()) return run_classify(a);
    if (c_tongue->parsed()) return run_tongue(a);
    if (c_family->parsed()) return run_family(a);
    if (c_linearize->parsed()) return run_linearize(a);
    if (c_modelock->parsed()) return run_modelock(a);
    if (c_strata->parsed()) return run_strata_dump(a);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
