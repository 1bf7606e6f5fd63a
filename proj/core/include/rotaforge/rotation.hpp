#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "rotaforge/forced_lift.hpp"

namespace rotaforge {

// Fibered rotation number estimate from one orbit plus displacement extrema.
// lower/upper are the displacement bounds M_lo(n)/n, M_hi(n)/n; by sub- and
// super-additivity of the extremal displacements they bracket the rotation
// number for every n, so error_bound = (upper - lower) + 2/n is a bound for
// |rho_hat - rho| at sampled base resolution.
struct RotationReport {
  double rho_hat = 0.0;  // mod-1 representative in [0, 1)
  double rho_raw = 0.0;  // orbit mean displacement before mod-1 reduction
  std::int64_t n_orbit = 0;
  double lower = 0.0;
  double upper = 0.0;
  double error_bound = 0.0;
};

// Sampling resolution for displacement extrema.  The y direction is certified
// by monotonicity (cell endpoints bracket interior values); the theta
// direction is sampled at grid resolution.
struct DispGrid {
  int theta = 32;
  int y = 8;
};

// Extremal n-step displacements (M_lo(n), M_hi(n)) over sampled theta and a
// fundamental y-interval, widened by the certified y-cell margin.
// extra_thetas are always included in the sample set.
std::pair<double, double> displacement_bounds(const ForcedLift& F, std::int64_t n,
                                              DispGrid grid = {},
                                              const std::vector<double>& extra_thetas = {});

// Per-step displacement extrema for n = 1..horizon (index 0 unused).
struct DispProfile {
  std::vector<double> lo, hi;  // size horizon+1
};
DispProfile displacement_profile(const ForcedLift& F, std::int64_t horizon, DispGrid grid = {},
                                 const std::vector<double>& extra_thetas = {});

// Rotation-number estimate from the orbit of (theta0, 0) of length n.
RotationReport rho(const ForcedLift& F, double theta0, std::int64_t n, DispGrid grid = {});

// Smallest n <= horizon with [M_lo(n'), M_hi(n')] inside n' * rho +/- n'*kappa0
// for all n' in [n, horizon] at sampled resolution; throws CertificationError
// when the horizon is exhausted.
std::int64_t estimate_N0(const ForcedLift& F, double kappa0, std::int64_t horizon,
                         DispGrid grid = {});

// Lemma-style separation constants: kappa1 > 0 and N1 such that for all
// n in [N1, horizon],
//   M_hi(F_{-eps}, n) < M_lo(F, n) - n*kappa1   and
//   M_hi(F, n) + n*kappa1 < M_lo(F_{+eps}, n).
// kappa1 is half the worst observed margin (safety factor).  Requires the
// verified hypothesis rho(F_{-eps}) < rho(F) < rho(F_eps).
struct Kappa1Result {
  double kappa1 = 0.0;
  std::int64_t N1 = 0;
};
Kappa1Result estimate_kappa1_N1(const ForcedLift& F, double eps, std::int64_t horizon,
                                DispGrid grid = {}, std::int64_t rho_n = 1 << 15);

enum class Verdict { ML, SL_left, SL_right, UL, UNDECIDED };
const char* verdict_name(Verdict v);

struct ScanPoint {
  double t = 0.0;
  double rho_raw = 0.0;  // unreduced: continuous and nondecreasing in t
  double rho_hat = 0.0;  // mod-1 representative
};

struct LockClassification {
  Verdict verdict = Verdict::UNDECIDED;
  double plateau_lo = 0.0, plateau_hi = 0.0;  // t-interval with constant rho
  double delta_rho = 0.0;
  std::int64_t n = 0;
  double error_bound = 0.0;
  std::vector<ScanPoint> scan;
};

// Plateau analysis of t -> rho(F_t) on [-eps_bar, eps_bar]: ML for a
// two-sided plateau around 0, SL-left/right for a one-sided plateau, UL when
// both first steps move beyond delta_rho, UNDECIDED otherwise.
// delta_rho <= 0 selects the default 4/n; throws CertificationError if
// delta_rho < 2 * error_bound (insufficient resolution).
LockClassification classify(const ForcedLift& F, double eps_bar, int t_grid, std::int64_t n,
                            double delta_rho = 0.0, DispGrid grid = {});

// For a map classified SL: vertical translates F_{t'} (mode-locked) and
// F_{t''} (unlocked) with |t'|, |t''| < eps, verified by re-classification.
struct MlUlNeighbors {
  ForcedLift ml;
  ForcedLift ul;
  double t_ml = 0.0, t_ul = 0.0;
};
MlUlNeighbors find_ml_ul_neighbors(const ForcedLift& F, double eps, int t_grid = 17,
                                   std::int64_t n = 1 << 14);

}  // namespace rotaforge
