#pragma once

namespace rotaforge {

// Parameters of the canonical one-parameter interpolation family phi.
// phi(t, y, z, .) is a lift of a circle homeomorphism that is the identity
// on Z + [z, y + 1], fixes y and z, and as t sweeps (-1, 1) moves every
// point of the window (y, z) monotonically: t -> +1 pushes toward z,
// t -> -1 pushes toward y, with displacement never exceeding 2*eps.
struct PhiParams {
  double eps;  // displacement budget, in (0, 1/4)
  double t;    // interpolation parameter, in (-1, 1)
  double y;    // window start
  double z;    // window end, y < z <= y + 1

  // Throws ConfigError when outside the admissible ranges.
  void validate() const;
};

// Evaluate phi at x.  Exact identity (bit-level) for t == 0 and for x off
// Z + (y, z).
double phi_eval(const PhiParams& p, double x);

// Inverse map: phi_invert(p, phi_eval(p, x)) == x up to roundoff; exact
// identity off Z + (y, z) and at t == 0.
double phi_invert(const PhiParams& p, double v);

// Global slope bounds of phi (piecewise-linear in x).
double phi_lip_upper(const PhiParams& p);
double phi_lip_lower(const PhiParams& p);

}  // namespace rotaforge
