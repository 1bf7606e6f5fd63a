#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rotaforge/cascade.hpp"
#include "rotaforge/fiber_lift.hpp"
#include "rotaforge/forced_lift.hpp"
#include "rotaforge/rotation.hpp"
#include "rotaforge/strata.hpp"

namespace rotaforge {

// Conjugacy family H produced by the linearization pipeline: a fiber map per
// base point, defined through the return-tower decomposition of the base
// circle by
//     H_{g^k(theta0)} = (F'^k)_{theta0} . T_{-k rho_hat},   theta0 in K,
// with H = Id on K itself.  Immutable and cheap to copy (shared internals);
// concurrent evaluation is safe.  Pointwise evaluation walks the k fiber
// maps of the tower, so its cost grows with the spanning count D; fiber()
// amortizes one walk over a whole knot grid.
class ConjugacyLift {
 public:
  ConjugacyLift() = default;

  bool empty() const { return impl_ == nullptr; }
  const ForcedLift& f_prime() const;
  const ReturnSet& K() const;
  double rho_hat() const;
  double rho_err() const;
  std::int64_t D() const;

  // Tower coordinates of a base point: theta = g^k(theta0), theta0 in K,
  // 0 <= k < ell(theta0), found by the backward first-entry walk (capped at
  // the return set's search_cap).
  struct Tower {
    double theta0 = 0.0;
    std::int64_t k = 0;
  };
  Tower locate(double theta) const;

  double eval(double theta, double x) const;
  double eval_inverse(double theta, double y) const;

  // Materialized fiber H_theta on a uniform knot grid (0 = the lift's
  // default count).  tol_grid of the result covers the grid resolution under
  // the measured slope, not the theta direction.
  FiberLift fiber(double theta, int knots = 0) const;

  // Structural summary (never a full data dump): kind, rho_hat, D, K.
  nlohmann::json to_json() const;

 private:
  friend struct LinearizePipeline;
  struct Impl;
  std::shared_ptr<const Impl> impl_;
};

struct LinearizeOptions {
  // Precondition scan (mode-lock verdict of the input).
  int classify_t_grid = 17;
  std::int64_t classify_n = std::int64_t{1} << 14;

  // Constants estimation; p_margin/p_floor are filled by the pipeline when
  // left at their defaults (anchor spacing 1.25/eps, snap residual floor).
  CascadeOptions cascade;
  int d = 2;

  // Return-set construction.
  ReturnSetOptions strata;

  // Rotation-number refinement: the orbit length grows until
  // D * rho_err <= rho_budget_frac * (10 * tol_grid(F)); refusing past
  // rho_max_n raises BudgetError.
  double rho_budget_frac = 1.0;
  std::int64_t rho_pilot_n = std::int64_t{1} << 21;
  std::int64_t rho_max_n = std::int64_t{1} << 33;

  // Per-component sampling of the top stratum and solver knobs.
  int samples_per_arc = 64;
  double solver_tol = 1e-10;
  double place_tol = 1e-8;
  double rho_slack = 1.0;
  std::int64_t budget = 0;  // 0 = auto: max(1e6, 2D + 16)
  int verify_samples = 64;  // y-knots of the measured tower sweeps
  int showcase_towers = 4;  // towers re-measured at full fiber resolution
  int conj_samples = 32;    // random interior base points for the conjugacy residual
  std::uint64_t seed = 1;

  // Interpolated-layer verification: identity taper width at component
  // seams, and the sanity bound for the (informational) midpoint residuals.
  double sliver = 1e-9;
  double midpoint_gate = 0.1;

  // Testing overrides: a prebuilt cascade skips constants estimation;
  // n0_override skips the schedule-derived tower length; p_override forces
  // the anchor count of every level.
  std::optional<EpsilonCascade> cascade_override;
  std::int64_t n0_override = 0;
  std::int64_t p_override = 0;
};

struct LinearizeResult {
  ForcedLift f_prime;
  ConjugacyLift H;
  double epsilon = 0.0;        // total budget
  double rho_hat = 0.0;        // refined rotation number
  double rho_err = 0.0;        // its certified error bound
  double tol_final = 0.0;      // 10 * tol_grid(f') + D * rho_err
  double d_certified = 0.0;    // certified C0 distance f -> f'
  double h2_certified = 0.0;   // max certified tower residual
  double h2_measured = 0.0;    // max measured tower residual (sampled y)
  double conj_residual = 0.0;  // max sampled conjugacy residual
  nlohmann::json report() const;
  std::shared_ptr<const nlohmann::json> report_json;  // full report document
};

// The linearization pipeline: verify the input is not mode-locked (translate
// strictly-one-sided inputs off their plateau first), build the epsilon
// cascade and the return set, refine rho_hat until the tower-scale error is
// inside the residual budget, then straighten the towers level by level with
// interpolated concatenation layers.  Returns the perturbed lift, the
// conjugacy, and a certification report.  Throws ConfigError on a verified
// mode-locked input, CertificationError when a gate fails, BudgetError when
// a composition or orbit budget is exhausted.
LinearizeResult linearize(const ForcedLift& f, double eps, const LinearizeOptions& opts = {});

// Random fiber conjugacy with moderate, certified Lipschitz bounds: a
// trigonometric displacement h_theta(x) = x + sum_j c_j/(2 pi j) sin(2 pi (j
// x + k_j theta + phi_j)) with sum |c_j| <= strength < 1.
struct FiberConjugacy {
  std::vector<double> c;    // harmonic amplitudes (fiber frequencies 1..J)
  std::vector<int> k;       // integer base frequencies
  std::vector<double> phi;  // phases

  static FiberConjugacy random(std::uint64_t seed, double strength = 0.8, int harmonics = 3);

  double eval(double theta, double x) const;
  double invert(double theta, double y) const;
  double lip_upper() const;
  double lip_lower() const;
  double c0_bound() const;
};

// h . F . h^{-1} as a ForcedLift over the same base (a wrapped kernel; the
// inner lift's fast orbit path is preserved).
ForcedLift conjugate_lift(const FiberConjugacy& h, const ForcedLift& inner);

struct ModeLockOptions {
  std::int64_t q_max = 64;      // densest rational denominator considered
  double a_cap = 0.9;           // amplitude ceiling of the locked circle map
  double plateau_floor = 1e-3;  // minimal predicted plateau half-width
  double safety = 0.9;          // fraction of the leftover budget given to Q
  int lip_towers = 16;          // theta-samples for the conjugacy slope estimate
  int lip_knots = 256;          // fiber knots of those samples
  int classify_t_grid = 17;     // internal mode-lock verification scan
  std::int64_t classify_n = std::int64_t{1} << 14;
  int row_knots = 1024;         // conjugacy-row resolution of the product kernel
  std::uint64_t seed = 2;
  LinearizeOptions lin;

  // Testing hooks: force the tongue choice; reuse an existing linearization
  // whose certified distance already meets the eps/2 precondition (the
  // caller keeps ownership and must keep it alive).
  std::optional<std::pair<std::int64_t, std::int64_t>> force_pq;
  std::optional<double> force_a;
  const LinearizeResult* reuse = nullptr;
};

struct ModeLockResult {
  ForcedLift f_second;  // h . (g x Q) . h^{-1}
  LinearizeResult lin;  // the underlying linearization (a cheap copy when reused)
  std::int64_t p = 0, q = 1;
  double a = 0.0;              // amplitude of Q
  double plateau_q = 0.0;      // exact plateau half-width of Q: a / (2 pi q)
  double plateau_pred = 0.0;   // predicted surviving half-width after conjugation
  double lip_upper_est = 1.0;  // measured slope bounds of the conjugacy
  double lip_lower_est = 1.0;
  double d_certified = 0.0;  // certified-in-y distance bound f -> f''
  double d_sampled = 0.0;    // plain sampled distance
  LockClassification verdict;  // internal classify of f''
  nlohmann::json report() const;
  std::shared_ptr<const nlohmann::json> report_json;
};

// Theorem-2 densification: linearize at eps/2, then replace the rigid
// rotation inside the conjugacy with a mode-locked circle map Q chosen in a
// rational tongue near rho_hat, picking the convergent denominator that
// maximizes the predicted surviving plateau within the distance budget.
// Throws CertificationError when no admissible tongue clears plateau_floor
// (the distortion bound is included in the message).
ModeLockResult mode_lock_densify(const ForcedLift& f, double eps, const ModeLockOptions& opts = {});

}  // namespace rotaforge
