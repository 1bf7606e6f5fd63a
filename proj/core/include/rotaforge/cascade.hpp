#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rotaforge/rotation.hpp"
#include "rotaforge/segment.hpp"

namespace rotaforge {

// Options shared by the empirical-constant estimators and the budget-cascade
// builder.
struct CascadeOptions {
  // Displacement grid for the long-horizon probe profiles.  Coarse by
  // default: the profiles run at horizons up to ~10^6 where buffer sizes and
  // step counts scale with the theta count.  The y direction stays certified
  // by monotone cell widening; theta is sampled, and every downstream
  // construction re-verifies its own domain memberships and residuals at run
  // time, so a coarse grid here costs margin, not correctness.
  DispGrid grid{8, 2};
  // Horizon of the separation-margin search (kappa1/N1).  0 = adaptive:
  // double from 2^13 until the margins stabilise well inside the window.
  std::int64_t horizon = 0;
  // Adaptive horizon searches give up here (profile buffers grow linearly).
  std::int64_t horizon_cap = std::int64_t{1} << 22;
  // Floor for the orbit length of the rho(F-) < rho(F) < rho(F+) hypothesis
  // check; scaled up automatically as eps shrinks (the rho gaps to resolve
  // are O(eps)).
  std::int64_t rho_n = std::int64_t{1} << 15;
  // Window-length rule N2 = max(ceil(n2_margin / kappa1), N1): the margin a
  // window must accumulate, in units of kappa1 per step.
  double n2_margin = 2.5;
  // estimate_N0 runs at tolerance kappa0 = kappa1 * n0_fraction.
  double n0_fraction = 1.0 / 3.0;
  // Safety divisor applied to the measured deviation-drift rate before it
  // enters the admissibility radii kappa2 and kappa3.
  double rate_safety = 1.5;
  // Anchor-count rule for the concatenation schedule feeding N3:
  // p = ceil(p_margin / eps) when p_margin > 0, else the schedule default.
  double p_margin = 0.0;
  // Absolute lower bound on the anchor count p, applied on top of the
  // p_margin rule.  The linearization pipeline raises it so the final-snap
  // residual scale 1/p clears the residual tolerance of the coarsest level.
  std::int64_t p_floor = 0;
};

// Anchor-count override under the p_margin rule; 0 (the schedule default)
// when p_margin <= 0.  Shared by estimate_constants and the linearization
// pipeline so both derive the same schedule.
std::int64_t schedule_p_override(double eps, double p_margin, std::int64_t p_floor = 0);

// Empirical perturbation constants of F at perturbation scale eps:
//   kappa1, N1  displacement-separation margin of the translates F_{+-eps}
//               (half the worst observed margin, re-verified at a doubled
//               horizon),
//   N2          window length max(ceil(n2_margin/kappa1), N1),
//   N0          deviation-decay time at tolerance kappa1 * n0_fraction,
//               verified through a doubled horizon,
//   kappa2      admissibility radius kappa1 / (2 * rate), where rate is the
//               worst measured displacement drift per step per unit C0
//               distance over probe perturbations of F (floored at 1,
//               multiplied by rate_safety),
//   kappa3      min(kappa2, eps, kappa1 / (3 * rate)),
//   N3          minimal admissible concatenation length for this schedule.
// Throws CertificationError when a margin never stabilises below the horizon
// cap.  The constants are certified at sampled resolution only; every
// consumer re-checks its own memberships and residuals.
PerturbConstants estimate_constants(const ForcedLift& F, double eps,
                                    const CascadeOptions& opts = {});

// One level of the budget cascade.  Level k's budget is eps_k; "computed"
// levels carry an evaluated budget (and constants), "active" levels carry
// perturbations downstream and enter the budget sums and n0.  Levels below
// the lowest active one are never evaluated: they contribute nothing and
// their constants would require probe horizons at scales the pipeline never
// touches.
struct CascadeLevel {
  int k = 0;
  double eps = 0.0;
  bool computed = false;
  bool active = false;
  PerturbConstants constants;
};

// The decreasing sequence of per-level budgets eps_{-1} < ... < eps_d with
//   eps_d = eps / (4(d+2)),   eps_{k-1} = kappa3(F, eps_k) / (2(d+2)),
// plus per-level constants and the tower floor n0 = max N3 + 1 over active
// levels.  Budget soundness: twice the sum of the active budgets stays below
// eps, and twice every partial sum stays below the admissibility radius of
// the level above it (validate() asserts both exactly).
struct EpsilonCascade {
  double eps = 0.0;
  int d = 0;
  std::int64_t n0 = 0;
  std::vector<CascadeLevel> levels;  // levels[i] holds k = i - 1

  const CascadeLevel& level(int k) const;
  // Asserts the budget and admissibility inequalities, the ordering of the
  // computed budgets, and the n0 recomputation; throws CertificationError.
  void validate() const;
  nlohmann::json to_json() const;
};

// Constants of one level as a JSON object (shared with the pipeline report).
nlohmann::json constants_to_json(const PerturbConstants& c);

// Build the cascade for total budget eps with levels -1..d, where active[i]
// marks level i-1 as carrying perturbations.  Budgets and constants are
// evaluated top-down from level d to the lowest active level.  The result is
// validated before it is returned.
EpsilonCascade build_cascade(const ForcedLift& F, double eps, int d,
                             const std::vector<bool>& active,
                             const CascadeOptions& opts = {});

}  // namespace rotaforge
