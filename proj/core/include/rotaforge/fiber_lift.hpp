#pragma once

#include <cstdint>
#include <functional>
#include <vector>

namespace rotaforge {

// Lift of an orientation-preserving circle homeomorphism: a strictly
// increasing piecewise-linear map R -> R with F(x+1) = F(x)+1, stored as
// m+1 uniform knots v[0..m] on [0,1] with v[m] = v[0] + 1 exactly.
//
// Every object carries tol_grid, an upper bound for the C0 distance between
// this representation and the map it discretizes.  Compositions and
// resamplings accumulate tolerance explicitly (see compose/resample).
class FiberLift {
 public:
  static constexpr int kDefaultKnots = 4096;

  FiberLift() = default;

  // Knot values v[0..m]; validates monotonicity and degree one.
  FiberLift(std::vector<double> knots, double tol_grid);

  // Identity map (exact).
  static FiberLift identity(int m = kDefaultKnots);

  // Vertical translation x -> x + t (exact at knots).
  static FiberLift translation(double t, int m = kDefaultKnots);

  // Sample a callable lift at m+1 uniform knots.  lip_bound is an upper bound
  // for the Lipschitz constant of fn, used to set tol_grid = lip_bound / m;
  // pass base_tol for additional inherited tolerance.
  static FiberLift from_function(const std::function<double(double)>& fn, int m,
                                 double lip_bound, double base_tol = 0.0);

  int knot_count() const { return m_; }
  const std::vector<double>& knots() const { return v_; }
  double tol_grid() const { return tol_; }

  // Evaluation at any real x: piecewise-linear in the fractional part of x,
  // plus the integer part (degree-one periodic by construction).
  double operator()(double x) const { return eval(x); }
  double eval(double x) const;

  // Inverse evaluation: returns x with |eval(x) - y| <= 1e-12 * (1 + |y|).
  // Exact (closed-form per-segment solve) up to roundoff.
  double invert(double y) const;

  // Slope bounds over all knot intervals (Lipschitz constants of the map and
  // of its inverse: Lip(F) = lip_upper, Lip(F^{-1}) = 1 / lip_lower).
  double lip_upper() const;
  double lip_lower() const;

  // Composition (g after f): samples g(f(x)) at f's knots.  Tolerance model:
  // tol = g.tol + Lip(g) * f.tol + Lip(g.f)/m  (resampling term).
  static FiberLift compose(const FiberLift& g, const FiberLift& f);

  // This map plus a constant (exact at knots).
  FiberLift translated(double t) const;

  // Resample to a different knot count (power of two).
  FiberLift resampled(int m) const;

  // Exact inverse as a FiberLift on the same knot grid (knots of the inverse
  // are solved, not resampled; tolerance scales by 1/lip_lower).
  FiberLift inverse_map() const;

  // Max |this - other| at shared knots, widened by both tolerances; requires
  // equal knot counts.
  double knot_distance(const FiberLift& other) const;

  // Throws ConfigError when monotonicity or degree-one fails.
  void validate() const;

 private:
  int m_ = 0;
  std::vector<double> v_;  // size m_+1, v_[m_] = v_[0] + 1
  double tol_ = 0.0;
};

// Monotone scalar parameter inversion: returns t in [lo, hi] with
// |fn(t) - target| <= tol via bisection (fn nondecreasing, strictly
// increasing near the solution); max 200 iterations.  Targets within tol of
// the sweep's closure resolve to the bracket ends; anything beyond throws
// CertificationError (bracket failure: a violated precondition upstream).
double invert_monotone(const std::function<double(double)>& fn, double target, double lo,
                       double hi, double tol = 1e-10);

}  // namespace rotaforge
