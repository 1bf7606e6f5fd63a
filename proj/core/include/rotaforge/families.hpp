#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace rotaforge {

// One harmonic of a finite Fourier series: s*sin(2*pi*h*u) + c*cos(2*pi*h*u).
struct FourierTerm {
  int h = 1;
  double s = 0.0;
  double c = 0.0;
};

using FourierSeries = std::vector<FourierTerm>;

double fourier_eval(const FourierSeries& f, double u);
// sup |f| bound (sum of coefficient magnitudes).
double fourier_sup_bound(const FourierSeries& f);
// Lipschitz bound: sum of 2*pi*h*(|s|+|c|).
double fourier_lip_bound(const FourierSeries& f);

// Cross term in x and theta for the "fourier" family:
//   sin(2 pi hx x) * (ss*sin(2 pi ht th) + sc*cos(2 pi ht th))
// + cos(2 pi hx x) * (cs*sin(2 pi ht th) + cc*cos(2 pi ht th)).
struct CrossTerm {
  int hx = 1;
  int ht = 1;
  double ss = 0.0, sc = 0.0, cs = 0.0, cc = 0.0;
};

// Closed-form fiber-map family: produces the lift value F_theta(x) for any
// base point and real x.  All parameters are dimensionless.
//
//   rigid:      x + alpha
//   arnold-qpf: x + tau + (alpha/2pi) sin(2 pi x) + beta * g(theta),
//               g a finite Fourier series ("forcing"); requires alpha in [0,1]
//   harper:     angle coordinate of the projective action of
//               ((V(theta)-E, -1), (1, 0)) on RP^1, V a finite Fourier series
//               plus constant v0
//   fourier:    x + c0 + Fourier terms in x, theta plus optional cross terms,
//               validated for strict monotonicity in x at construction
struct Generator {
  enum class Family { rigid, arnold_qpf, harper, fourier };

  Family family = Family::rigid;

  // rigid
  double alpha = 0.0;
  // arnold-qpf
  double tau = 0.0;
  double beta = 0.0;
  FourierSeries forcing;  // g(theta)
  // harper
  double E = 0.0;
  double v0 = 0.0;
  FourierSeries V;  // V(theta) = v0 + series
  // fourier
  double c0 = 0.0;
  FourierSeries x_terms;      // terms in x
  FourierSeries theta_terms;  // terms in theta
  std::vector<CrossTerm> cross_terms;

  static Generator rigid_map(double alpha);
  static Generator arnold(double tau, double alpha, double beta, FourierSeries forcing = {});
  static Generator harper_map(double E, double v0, FourierSeries V);
  static Generator fourier_map(double c0, FourierSeries x_terms, FourierSeries theta_terms = {},
                               std::vector<CrossTerm> cross = {});

  // Closed-form lift value; strictly increasing and degree one in x
  // (bit-exactly: x is reduced to [0,1) before the periodic terms).
  double eval(double theta, double x) const;
  // One fiber at many points in place; hoists the theta-only terms.
  void eval_many(double theta, double* xs, std::size_t n) const;
  // Solve eval(theta, x) == z for x to absolute tolerance tol (closed form
  // for rigid and harper; guarded Newton for the sine families).
  double invert(double theta, double z, double tol) const;

  // Certified fiber slope bounds (sup / inf over theta and x) and a
  // theta-direction Lipschitz bound.  theta_lip_certified() is false only for
  // families where the bound is numerically estimated (none currently).
  double x_lip_upper() const;
  double x_lip_lower() const;
  double theta_lip() const;

  // Throws ConfigError on invalid parameters (monotonicity, alpha range).
  void validate() const;

  std::string family_name() const;
};

}  // namespace rotaforge
