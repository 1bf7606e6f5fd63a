#include "rotaforge/families.hpp"

#include <algorithm>
#include <cmath>

#include "rotaforge/errors.hpp"
#include "rotaforge/util.hpp"

namespace rotaforge {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kPi = 3.1415926535897932384626433832795;
}  // namespace

double fourier_eval(const FourierSeries& f, double u) {
  double v = 0.0;
  for (const auto& t : f) v += t.s * std::sin(kTwoPi * t.h * u) + t.c * std::cos(kTwoPi * t.h * u);
  return v;
}

double fourier_sup_bound(const FourierSeries& f) {
  double v = 0.0;
  for (const auto& t : f) v += std::fabs(t.s) + std::fabs(t.c);
  return v;
}

double fourier_lip_bound(const FourierSeries& f) {
  double v = 0.0;
  for (const auto& t : f) v += kTwoPi * std::fabs(t.h) * (std::fabs(t.s) + std::fabs(t.c));
  return v;
}

Generator Generator::rigid_map(double alpha) {
  Generator g;
  g.family = Family::rigid;
  g.alpha = alpha;
  g.validate();
  return g;
}

Generator Generator::arnold(double tau, double alpha, double beta, FourierSeries forcing) {
  Generator g;
  g.family = Family::arnold_qpf;
  g.tau = tau;
  g.alpha = alpha;
  g.beta = beta;
  g.forcing = std::move(forcing);
  g.validate();
  return g;
}

Generator Generator::harper_map(double E, double v0, FourierSeries V) {
  Generator g;
  g.family = Family::harper;
  g.E = E;
  g.v0 = v0;
  g.V = std::move(V);
  g.validate();
  return g;
}

Generator Generator::fourier_map(double c0, FourierSeries x_terms, FourierSeries theta_terms,
                                 std::vector<CrossTerm> cross) {
  Generator g;
  g.family = Family::fourier;
  g.c0 = c0;
  g.x_terms = std::move(x_terms);
  g.theta_terms = std::move(theta_terms);
  g.cross_terms = std::move(cross);
  g.validate();
  return g;
}

namespace {

// Max over u of the x-slope loss of the fourier family (see x_lip bounds).
double cross_x_lip(const std::vector<CrossTerm>& cross) {
  double v = 0.0;
  for (const auto& t : cross)
    v += kTwoPi * std::fabs(t.hx) *
         (std::fabs(t.ss) + std::fabs(t.sc) + std::fabs(t.cs) + std::fabs(t.cc));
  return v;
}

double cross_theta_lip(const std::vector<CrossTerm>& cross) {
  double v = 0.0;
  for (const auto& t : cross)
    v += kTwoPi * std::fabs(t.ht) *
         (std::fabs(t.ss) + std::fabs(t.sc) + std::fabs(t.cs) + std::fabs(t.cc));
  return v;
}

// Harper: |V - E| upper bound over theta.
double harper_a_bound(const Generator& g) {
  return std::fabs(g.v0 - g.E) + fourier_sup_bound(g.V);
}

// Split x = k + f with f in [0,1), exactly; keeps the periodic terms'
// arguments reduced so degree-one holds bit-exactly.
inline double reduce01(double x, double& k) {
  k = std::floor(x);
  double f = x - k;
  if (f >= 1.0) {
    f -= 1.0;
    k += 1.0;
  }
  return f;
}

// Projective-angle lift of a determinant-positive matrix [[p, q], [r, s]]
// acting on RP^1, angle scaled to period 1.  The increasing lift with
// L(0) = w0 in [0,1) is reconstructed from the principal angle: on one
// period the true lift runs over [w0, w0+1), and frac(L) >= w0 exactly
// where L < 1.
double angle_lift(double p, double q, double r, double s, double x) {
  double k;
  double f = reduce01(x, k);
  double w0 = std::atan2(r, p) / kPi;
  w0 -= std::floor(w0);
  if (f == 0.0) return k + w0;
  double u = kPi * f;
  double cu = std::cos(u), su = std::sin(u);
  double w = std::atan2(r * cu + s * su, p * cu + q * su) / kPi;
  w -= std::floor(w);
  double lift = (w >= w0) ? w : w + 1.0;
  return k + lift;
}

// Harper cocycle matrix for a = v0 + V(theta) - E.
double harper_lift(double a, double x) { return angle_lift(a, -1.0, 1.0, 0.0, x); }
// Its inverse action (matrix inverse, determinant one).
double harper_lift_inv(double a, double y) { return angle_lift(0.0, 1.0, -1.0, a, y); }

double fourier_deriv(const FourierSeries& f, double u) {
  double v = 0.0;
  for (const auto& t : f)
    v += kTwoPi * t.h * (t.s * std::cos(kTwoPi * t.h * u) - t.c * std::sin(kTwoPi * t.h * u));
  return v;
}

}  // namespace

double Generator::eval(double theta, double x) const {
  switch (family) {
    case Family::rigid:
      return x + alpha;
    case Family::arnold_qpf: {
      double k;
      double f = reduce01(x, k);
      return k + f + tau + (alpha / kTwoPi) * std::sin(kTwoPi * f) +
             beta * fourier_eval(forcing, theta);
    }
    case Family::harper:
      return harper_lift(v0 + fourier_eval(V, theta) - E, x);
    case Family::fourier: {
      double k;
      double f = reduce01(x, k);
      double v = f + c0 + fourier_eval(x_terms, f) + fourier_eval(theta_terms, theta);
      for (const auto& t : cross_terms) {
        double sx = std::sin(kTwoPi * t.hx * f), cx = std::cos(kTwoPi * t.hx * f);
        double st = std::sin(kTwoPi * t.ht * theta), ct = std::cos(kTwoPi * t.ht * theta);
        v += sx * (t.ss * st + t.sc * ct) + cx * (t.cs * st + t.cc * ct);
      }
      return k + v;
    }
  }
  return x;
}

void Generator::eval_many(double theta, double* xs, std::size_t n) const {
  switch (family) {
    case Family::rigid:
      for (std::size_t i = 0; i < n; ++i) xs[i] += alpha;
      return;
    case Family::arnold_qpf: {
      const double th = tau + beta * fourier_eval(forcing, theta);
      const double amp = alpha / kTwoPi;
      for (std::size_t i = 0; i < n; ++i) {
        double k;
        double f = reduce01(xs[i], k);
        xs[i] = k + f + th + amp * std::sin(kTwoPi * f);
      }
      return;
    }
    case Family::harper: {
      const double a = v0 + fourier_eval(V, theta) - E;
      for (std::size_t i = 0; i < n; ++i) xs[i] = harper_lift(a, xs[i]);
      return;
    }
    case Family::fourier: {
      const double th = c0 + fourier_eval(theta_terms, theta);
      constexpr std::size_t kMaxHoist = 16;
      if (cross_terms.size() <= kMaxHoist) {
        double A[kMaxHoist], B[kMaxHoist];
        for (std::size_t j = 0; j < cross_terms.size(); ++j) {
          const auto& t = cross_terms[j];
          double st = std::sin(kTwoPi * t.ht * theta), ct = std::cos(kTwoPi * t.ht * theta);
          A[j] = t.ss * st + t.sc * ct;
          B[j] = t.cs * st + t.cc * ct;
        }
        for (std::size_t i = 0; i < n; ++i) {
          double k;
          double f = reduce01(xs[i], k);
          double v = f + th + fourier_eval(x_terms, f);
          for (std::size_t j = 0; j < cross_terms.size(); ++j) {
            const auto& t = cross_terms[j];
            v += A[j] * std::sin(kTwoPi * t.hx * f) + B[j] * std::cos(kTwoPi * t.hx * f);
          }
          xs[i] = k + v;
        }
        return;
      }
      for (std::size_t i = 0; i < n; ++i) xs[i] = eval(theta, xs[i]);
      return;
    }
  }
}

double Generator::invert(double theta, double z, double tol) const {
  switch (family) {
    case Family::rigid:
      return z - alpha;
    case Family::harper:
      return harper_lift_inv(v0 + fourier_eval(V, theta) - E, z);
    case Family::arnold_qpf:
    case Family::fourier:
      break;
  }
  // Guarded Newton on the strictly increasing g(x) = eval(theta, x) - z.
  // Displacement of a degree-one lift has range <= 1 around its value at 0.
  const double d0 = eval(theta, 0.0);
  double lo = z - d0 - 1.0, hi = z - d0 + 1.0;
  const double dmin = x_lip_lower();
  if (dmin > 1e-6) {
    double x = z - d0;  // displacement-at-0 initial guess
    for (int it = 0; it < 80; ++it) {
      double g = eval(theta, x) - z;
      if (std::fabs(g) <= tol * dmin) return x;
      if (g < 0.0)
        lo = x;
      else
        hi = x;
      double d;
      if (family == Family::arnold_qpf) {
        double k;
        double f = reduce01(x, k);
        d = 1.0 + alpha * std::cos(kTwoPi * f);
      } else {
        double k;
        double f = reduce01(x, k);
        d = 1.0 + fourier_deriv(x_terms, f);
        for (const auto& t : cross_terms) {
          double st = std::sin(kTwoPi * t.ht * theta), ct = std::cos(kTwoPi * t.ht * theta);
          double df = kTwoPi * t.hx;
          d += df * (std::cos(kTwoPi * t.hx * f) * (t.ss * st + t.sc * ct) -
                     std::sin(kTwoPi * t.hx * f) * (t.cs * st + t.cc * ct));
        }
      }
      double xn = (d > 1e-12) ? x - g / d : 0.5 * (lo + hi);
      if (!(xn > lo && xn < hi)) xn = 0.5 * (lo + hi);
      x = xn;
    }
    return x;
  }
  for (int it = 0; it < 200 && hi - lo > tol; ++it) {
    double mid = 0.5 * (lo + hi);
    if (eval(theta, mid) < z)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

double Generator::x_lip_upper() const {
  switch (family) {
    case Family::rigid:
      return 1.0;
    case Family::arnold_qpf:
      return 1.0 + alpha;
    case Family::harper: {
      double a = harper_a_bound(*this);
      return a * a + 2.0;  // slope of the projective action is 1/|Av|^2
    }
    case Family::fourier:
      return 1.0 + fourier_lip_bound(x_terms) + cross_x_lip(cross_terms);
  }
  return 1.0;
}

double Generator::x_lip_lower() const {
  switch (family) {
    case Family::rigid:
      return 1.0;
    case Family::arnold_qpf:
      return 1.0 - alpha;
    case Family::harper: {
      double a = harper_a_bound(*this);
      return 1.0 / (a * a + 2.0);
    }
    case Family::fourier: {
      double loss = fourier_lip_bound(x_terms) + cross_x_lip(cross_terms);
      return 1.0 - loss;  // may be <= 0; validate() then falls back to a grid check
    }
  }
  return 1.0;
}

double Generator::theta_lip() const {
  switch (family) {
    case Family::rigid:
      return 0.0;
    case Family::arnold_qpf:
      return std::fabs(beta) * fourier_lip_bound(forcing);
    case Family::harper: {
      double a = harper_a_bound(*this);
      // |d(angle)/dV| <= |Av|^{-2} <= a^2+2 in radians, /pi in lift units.
      return (a * a + 2.0) / kPi * fourier_lip_bound(V);
    }
    case Family::fourier:
      return fourier_lip_bound(theta_terms) + cross_theta_lip(cross_terms);
  }
  return 0.0;
}

void Generator::validate() const {
  for (const auto& t : forcing)
    if (t.h == 0) throw ConfigError("family: forcing harmonic must be nonzero");
  switch (family) {
    case Family::rigid:
      return;
    case Family::arnold_qpf:
      if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ConfigError("arnold-qpf: alpha must lie in [0,1] for a homeomorphism");
      return;
    case Family::harper:
      return;  // projective action of a determinant-one matrix is always a homeomorphism
    case Family::fourier: {
      if (x_lip_lower() > 0.0) return;  // certified analytically
      // Fall back to a fine numeric monotonicity check over (theta, x).
      const int gt = 257, gx = 4096;
      for (int a = 0; a < gt; ++a) {
        double theta = static_cast<double>(a) / gt;
        double prev = eval(theta, 0.0);
        for (int i = 1; i <= gx; ++i) {
          double cur = eval(theta, static_cast<double>(i) / gx);
          if (!(cur - prev > 1e-9))
            throw ConfigError("fourier family: fiber map fails strict monotonicity in x");
          prev = cur;
        }
      }
      return;
    }
  }
}

std::string Generator::family_name() const {
  switch (family) {
    case Family::rigid:
      return "rigid";
    case Family::arnold_qpf:
      return "arnold-qpf";
    case Family::harper:
      return "harper";
    case Family::fourier:
      return "fourier";
  }
  return "?";
}

}  // namespace rotaforge
