#include "rotaforge/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "rotaforge/errors.hpp"
#include "rotaforge/fiber_lift.hpp"

namespace rotaforge {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Fiber-dependent probe perturbation y -> y + amp * sin(2*pi*y): zero-mean,
// theta-independent, C0 distance to the unperturbed map exactly amp (the
// supremum is attained).  Complements the vertical translates, whose drift
// is the pure rotation-number response.
class SineProbeLayer final : public PerturbationLayer {
 public:
  explicit SineProbeLayer(double amp) : amp_(amp) {}

  bool active_at(double) const override { return true; }
  double post_eval(double, double y) const override { return y + amp_ * std::sin(kTwoPi * y); }
  double post_invert(double, double y) const override {
    const double a = amp_;
    return invert_monotone([a](double x) { return x + a * std::sin(kTwoPi * x); }, y, y - a,
                           y + a, 1e-12);
  }
  double c0_bound() const override { return amp_; }
  double lip_upper() const override { return 1.0 + kTwoPi * amp_; }
  double lip_lower() const override { return 1.0 - kTwoPi * amp_; }
  bool theta_continuous() const override { return true; }
  double theta_lip() const override { return 0.0; }
  std::string kind() const override { return "probe-sine"; }
  nlohmann::json to_json() const override {
    return {{"kind", "probe-sine"}, {"amplitude", amp_}};
  }

 private:
  double amp_;
};

// Separation constants with adaptive horizon: double until the margins have
// stabilised well inside the window (N1 in the first quarter), then confirm
// at twice that horizon and keep the conservative combination.  An explicit
// opts.horizon skips the search but not the doubled confirmation.
Kappa1Result search_kappa1(const ForcedLift& F, double eps, const CascadeOptions& opts) {
  // The rho gaps the hypothesis check must resolve are O(eps).
  auto rho_n = std::max(opts.rho_n, static_cast<std::int64_t>(std::ceil(16.0 / eps)));
  std::int64_t H = opts.horizon > 0 ? opts.horizon : (std::int64_t{1} << 13);
  std::string last = "not attempted";
  for (;;) {
    if (2 * H > opts.horizon_cap)
      throw CertificationError(
          "estimate_constants: separation margins did not stabilise below the horizon cap (" +
          last + ")");
    try {
      Kappa1Result r = estimate_kappa1_N1(F, eps, H, opts.grid, rho_n);
      if (opts.horizon > 0 || 4 * r.N1 <= H) {
        Kappa1Result r2 = estimate_kappa1_N1(F, eps, 2 * H, opts.grid, rho_n);
        return {std::min(r.kappa1, r2.kappa1), std::max(r.N1, r2.N1)};
      }
      last = "N1 = " + std::to_string(r.N1) + " too close to horizon " + std::to_string(H);
    } catch (const CertificationError& e) {
      last = e.what();
    }
    if (opts.horizon > 0)
      throw CertificationError(
          "estimate_constants: margins did not stabilise at the explicit horizon (" + last + ")");
    H *= 2;
    rho_n *= 2;
  }
}

// Deviation-decay time at tolerance kappa0, accepted only when the
// containment held through twice the returned time.
std::int64_t search_N0(const ForcedLift& F, double kappa0, std::int64_t start,
                       const CascadeOptions& opts) {
  std::int64_t H = std::max<std::int64_t>(start, std::int64_t{1} << 12);
  std::string last = "not attempted";
  for (;;) {
    if (H > opts.horizon_cap)
      throw CertificationError(
          "estimate_constants: deviation decay did not certify below the horizon cap (" + last +
          ")");
    try {
      std::int64_t n0 = estimate_N0(F, kappa0, H, opts.grid);
      if (2 * n0 <= H) return n0;
      last = "N0 = " + std::to_string(n0) + " too close to horizon " + std::to_string(H);
    } catch (const CertificationError& e) {
      last = e.what();
    }
    H *= 2;
  }
}

// Worst observed drift of the displacement envelope per step and per unit of
// C0 distance, over translate and fiber-shape probes.  The scan window runs
// to twice the natural horizon, so late-onset growth raises the estimate
// (the doubled-n confirmation for a quantity defined as a max).
double drift_rate(const ForcedLift& F, double eps, std::int64_t n_lo, std::int64_t Hr,
                  const CascadeOptions& opts) {
  struct Probe {
    ForcedLift map;
    double dist;  // exact C0 distance to F
  };
  const double amp = std::min(eps / 2.0, 0.12);
  const Probe probes[] = {
      {F.translated(+eps), eps},
      {F.translated(-eps), eps},
      {F.with_layer(std::make_shared<SineProbeLayer>(amp)), amp},
  };

  DispProfile base = displacement_profile(F, Hr, opts.grid);
  double rate = 0.0;
  for (const Probe& p : probes) {
    DispProfile prof = displacement_profile(p.map, Hr, opts.grid);
    for (std::int64_t n = n_lo; n <= Hr; ++n) {
      const auto ns = static_cast<std::size_t>(n);
      const double a = std::max(std::fabs(prof.hi[ns] - base.hi[ns]),
                                std::fabs(prof.lo[ns] - base.lo[ns]));
      rate = std::max(rate, a / (static_cast<double>(n) * p.dist));
    }
  }
  return rate;
}

}  // namespace

std::int64_t schedule_p_override(double eps, double p_margin, std::int64_t p_floor) {
  if (p_margin <= 0.0 && p_floor <= 0) return 0;
  if (!(eps > 0.0)) throw ConfigError("schedule_p_override: eps must be positive");
  std::int64_t p = 2;
  if (p_margin > 0.0)
    p = std::max(p, static_cast<std::int64_t>(std::ceil(p_margin / eps)));
  return std::max(p, p_floor);
}

PerturbConstants estimate_constants(const ForcedLift& F, double eps, const CascadeOptions& opts) {
  if (!(eps > 0.0 && eps < 0.25))
    throw ConfigError("estimate_constants: eps outside (0, 1/4)");

  PerturbConstants c;
  Kappa1Result k1 = search_kappa1(F, eps, opts);
  c.kappa1 = k1.kappa1;
  c.N1 = k1.N1;
  c.N2 = std::max(static_cast<std::int64_t>(std::ceil(opts.n2_margin / c.kappa1)), c.N1);
  c.N0 = search_N0(F, c.kappa1 * opts.n0_fraction, 2 * c.N2, opts);

  // Admissibility radii: a perturbation of size kappa drifts the displacement
  // envelope by at most rate * kappa per step (measured; floored at the
  // trivial one-step response of 1), and the schedule's memberships tolerate
  // kappa1-scale drift.  Everything downstream re-checks its own memberships,
  // so the safety factor costs runtime, not correctness.
  const std::int64_t n_lo = std::max<std::int64_t>(c.N1, 16);
  const std::int64_t Hr = std::min(std::max(4 * c.N2, std::int64_t{1} << 12),
                                   opts.horizon_cap / 2);
  const double rate = std::max(drift_rate(F, eps, n_lo, 2 * Hr, opts), 1.0) * opts.rate_safety;
  c.kappa2 = c.kappa1 / (2.0 * rate);
  c.kappa3 = std::min({c.kappa2, eps, c.kappa1 / (3.0 * rate)});

  c.N3 = concat_schedule(eps, c, schedule_p_override(eps, opts.p_margin, opts.p_floor), 0)
             .n3_required;
  return c;
}

const CascadeLevel& EpsilonCascade::level(int k) const {
  if (k < -1 || k > d) throw ConfigError("cascade: level index outside [-1, d]");
  return levels[static_cast<std::size_t>(k + 1)];
}

void EpsilonCascade::validate() const {
  if (!(eps > 0.0)) throw CertificationError("cascade: nonpositive total budget");
  if (d < 0 || levels.size() != static_cast<std::size_t>(d) + 2)
    throw CertificationError("cascade: level vector has the wrong shape");

  for (std::size_t i = 0; i < levels.size(); ++i) {
    const CascadeLevel& lv = levels[i];
    if (lv.k != static_cast<int>(i) - 1) throw CertificationError("cascade: level indexing broken");
    if (lv.active && !lv.computed)
      throw CertificationError("cascade: active level " + std::to_string(lv.k) + " not computed");
    if (lv.computed) {
      const PerturbConstants& pc = lv.constants;
      if (!(lv.eps > 0.0) || !(pc.kappa1 > 0.0) || !(pc.kappa2 > 0.0) || !(pc.kappa3 > 0.0) ||
          pc.N1 < 1 || pc.N2 < 1 || pc.N0 < 1 || pc.N3 < 1)
        throw CertificationError("cascade: degenerate constants at level " +
                                 std::to_string(lv.k));
    }
  }

  // Budgets of computed levels strictly increase with the level index.
  double prev = 0.0;
  bool seen = false;
  for (const CascadeLevel& lv : levels) {
    if (!lv.computed) continue;
    if (seen && !(lv.eps > prev))
      throw CertificationError("cascade: level budgets not strictly increasing");
    prev = lv.eps;
    seen = true;
  }

  // Twice the total active budget stays below the target budget.
  double total = 0.0;
  for (const CascadeLevel& lv : levels)
    if (lv.active) total += lv.eps;
  if (!(2.0 * total < eps)) throw CertificationError("cascade: total budget inequality violated");

  // Twice each charged partial sum stays below the admissibility radius of
  // the level above it.
  double partial = 0.0;
  for (int k = -1; k < d; ++k) {
    const CascadeLevel& lv = level(k);
    if (lv.active) partial += lv.eps;
    if (partial > 0.0) {
      const CascadeLevel& up = level(k + 1);
      if (!up.computed)
        throw CertificationError("cascade: level " + std::to_string(k + 1) +
                                 " above a charged level was not computed");
      if (!(2.0 * partial < up.constants.kappa3))
        throw CertificationError("cascade: admissibility inequality violated at level " +
                                 std::to_string(k));
    }
  }

  std::int64_t worst = 0;
  bool any = false;
  for (const CascadeLevel& lv : levels) {
    if (!lv.active) continue;
    worst = std::max(worst, lv.constants.N3);
    any = true;
  }
  if (!any) throw CertificationError("cascade: no active level");
  if (n0 != worst + 1) throw CertificationError("cascade: n0 does not match the active levels");
}

nlohmann::json constants_to_json(const PerturbConstants& c) {
  return {{"kappa1", c.kappa1}, {"N1", c.N1}, {"kappa2", c.kappa2}, {"N2", c.N2},
          {"N0", c.N0},         {"kappa3", c.kappa3}, {"N3", c.N3}};
}

nlohmann::json EpsilonCascade::to_json() const {
  nlohmann::json lvls = nlohmann::json::array();
  for (const CascadeLevel& lv : levels) {
    nlohmann::json j{{"k", lv.k}, {"active", lv.active}};
    if (lv.computed) {
      j["eps"] = lv.eps;
      j["constants"] = constants_to_json(lv.constants);
    } else {
      j["eps"] = nullptr;
    }
    lvls.push_back(std::move(j));
  }
  return {{"epsilon", eps}, {"d", d}, {"n0", n0}, {"levels", std::move(lvls)}};
}

EpsilonCascade build_cascade(const ForcedLift& F, double eps, int d,
                             const std::vector<bool>& active, const CascadeOptions& opts) {
  if (!(eps > 0.0 && eps < 0.25)) throw ConfigError("build_cascade: eps outside (0, 1/4)");
  if (d < 0) throw ConfigError("build_cascade: d must be >= 0");
  if (active.size() != static_cast<std::size_t>(d) + 2)
    throw ConfigError("build_cascade: active must list levels -1..d");

  int lowest = d + 1;
  for (std::size_t i = 0; i < active.size(); ++i)
    if (active[i]) {
      lowest = static_cast<int>(i) - 1;
      break;
    }
  if (lowest > d) throw ConfigError("build_cascade: at least one level must be active");

  EpsilonCascade cas;
  cas.eps = eps;
  cas.d = d;
  cas.levels.resize(static_cast<std::size_t>(d) + 2);
  for (std::size_t i = 0; i < cas.levels.size(); ++i) {
    cas.levels[i].k = static_cast<int>(i) - 1;
    cas.levels[i].active = active[i];
  }

  // eps_d = eps / (4(d+2)); each level below lives inside the admissibility
  // radius of the level above: eps_{k-1} = kappa3(F, eps_k) / (2(d+2)).
  const double denom = 2.0 * static_cast<double>(d + 2);
  double eps_k = eps / (2.0 * denom);
  for (int k = d; k >= lowest; --k) {
    CascadeLevel& lv = cas.levels[static_cast<std::size_t>(k + 1)];
    lv.eps = eps_k;
    lv.constants = estimate_constants(F, eps_k, opts);
    lv.computed = true;
    eps_k = lv.constants.kappa3 / denom;
  }

  std::int64_t worst = 0;
  for (const CascadeLevel& lv : cas.levels)
    if (lv.active) worst = std::max(worst, lv.constants.N3);
  cas.n0 = worst + 1;

  cas.validate();
  return cas;
}

}  // namespace rotaforge
