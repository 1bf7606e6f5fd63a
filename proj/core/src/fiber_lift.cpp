#include "rotaforge/fiber_lift.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rotaforge/errors.hpp"
#include "rotaforge/util.hpp"

namespace rotaforge {

FiberLift::FiberLift(std::vector<double> knots, double tol_grid)
    : m_(static_cast<int>(knots.size()) - 1), v_(std::move(knots)), tol_(tol_grid) {
  validate();
}

void FiberLift::validate() const {
  if (m_ < 2 || (m_ & (m_ - 1)) != 0)
    throw ConfigError("fiber lift: knot count must be a power of two >= 2");
  if (static_cast<int>(v_.size()) != m_ + 1)
    throw ConfigError("fiber lift: knot vector size mismatch");
  for (int i = 0; i < m_; ++i) {
    if (!(v_[i + 1] > v_[i])) throw ConfigError("fiber lift: knots are not strictly increasing");
    if (!std::isfinite(v_[i])) throw ConfigError("fiber lift: non-finite knot");
  }
  if (v_[m_] - v_[0] != 1.0) throw ConfigError("fiber lift: degree-one violation (v[m] != v[0]+1)");
}

FiberLift FiberLift::identity(int m) {
  std::vector<double> v(static_cast<std::size_t>(m) + 1);
  for (int i = 0; i <= m; ++i) v[i] = static_cast<double>(i) / m;
  v[m] = 1.0;
  return FiberLift(std::move(v), 0.0);
}

FiberLift FiberLift::translation(double t, int m) {
  std::vector<double> v(static_cast<std::size_t>(m) + 1);
  for (int i = 0; i <= m; ++i) v[i] = static_cast<double>(i) / m + t;
  v[m] = v[0] + 1.0;
  return FiberLift(std::move(v), 0.0);
}

FiberLift FiberLift::from_function(const std::function<double(double)>& fn, int m,
                                   double lip_bound, double base_tol) {
  std::vector<double> v(static_cast<std::size_t>(m) + 1);
  for (int i = 0; i < m; ++i) v[i] = fn(static_cast<double>(i) / m);
  v[m] = v[0] + 1.0;  // enforce degree one exactly (fn(1) should equal fn(0)+1)
  double tol = base_tol + std::max(lip_bound, 1.0) / m;
  return FiberLift(std::move(v), tol);
}

double FiberLift::eval(double x) const {
  double k = std::floor(x);
  double f = x - k;  // in [0,1) barring rounding at the top
  if (f >= 1.0) {
    f -= 1.0;
    k += 1.0;
  }
  double scaled = f * m_;
  int i = static_cast<int>(scaled);
  if (i >= m_) i = m_ - 1;
  double t = scaled - i;
  double w = v_[i] + t * (v_[i + 1] - v_[i]);
  return k + w;
}

double FiberLift::invert(double y) const {
  // eval maps [k, k+1) onto [v0 + k, v0 + k + 1); find the right period first.
  double k = std::floor(y - v_[0]);
  double w = y - k;  // target in [v0, v0 + 1)
  if (w < v_[0]) {
    k -= 1.0;
    w = y - k;
  } else if (w >= v_[0] + 1.0) {
    k += 1.0;
    w = y - k;
  }
  // binary search for segment with v[i] <= w <= v[i+1]
  int lo = 0, hi = m_;
  while (hi - lo > 1) {
    int mid = (lo + hi) / 2;
    if (v_[mid] <= w)
      lo = mid;
    else
      hi = mid;
  }
  double seg = v_[lo + 1] - v_[lo];
  double t = (w - v_[lo]) / seg;
  t = std::clamp(t, 0.0, 1.0);
  return k + (lo + t) / m_;
}

double FiberLift::lip_upper() const {
  double s = 0.0;
  for (int i = 0; i < m_; ++i) s = std::max(s, v_[i + 1] - v_[i]);
  return s * m_;
}

double FiberLift::lip_lower() const {
  double s = std::numeric_limits<double>::infinity();
  for (int i = 0; i < m_; ++i) s = std::min(s, v_[i + 1] - v_[i]);
  return s * m_;
}

FiberLift FiberLift::compose(const FiberLift& g, const FiberLift& f) {
  int m = f.knot_count();
  std::vector<double> v(static_cast<std::size_t>(m) + 1);
  for (int i = 0; i < m; ++i) v[i] = g.eval(f.v_[i]);
  v[m] = v[0] + 1.0;
  double lip_g = g.lip_upper();
  double lip_gf = lip_g * f.lip_upper();
  double tol = g.tol_ + lip_g * f.tol_ + lip_gf / m;
  return FiberLift(std::move(v), tol);
}

FiberLift FiberLift::translated(double t) const {
  std::vector<double> v(v_);
  for (double& w : v) w += t;
  v[m_] = v[0] + 1.0;
  return FiberLift(std::move(v), tol_);
}

FiberLift FiberLift::resampled(int m) const {
  if (m == m_) return *this;
  std::vector<double> v(static_cast<std::size_t>(m) + 1);
  for (int i = 0; i < m; ++i) v[i] = eval(static_cast<double>(i) / m);
  v[m] = v[0] + 1.0;
  double tol = tol_ + lip_upper() / m;
  return FiberLift(std::move(v), tol);
}

FiberLift FiberLift::inverse_map() const {
  std::vector<double> v(static_cast<std::size_t>(m_) + 1);
  for (int i = 0; i < m_; ++i) v[i] = invert(static_cast<double>(i) / m_);
  v[m_] = v[0] + 1.0;
  double inv_lip = 1.0 / lip_lower();
  double tol = inv_lip * tol_ + inv_lip / m_;
  return FiberLift(std::move(v), tol);
}

double FiberLift::knot_distance(const FiberLift& other) const {
  if (other.m_ != m_) throw ConfigError("fiber lift: knot_distance requires equal knot counts");
  double d = 0.0;
  for (int i = 0; i <= m_; ++i) d = std::max(d, std::fabs(v_[i] - other.v_[i]));
  return d + tol_ + other.tol_;
}

double invert_monotone(const std::function<double(double)>& fn, double target, double lo,
                       double hi, double tol) {
  if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi))
    throw ConfigError("invert_monotone: empty bracket");
  double flo = fn(lo), fhi = fn(hi);
  if (target < flo) {
    if (flo - target <= tol) return lo;
    throw CertificationError("invert_monotone: target below the parameter sweep (bracket failure)");
  }
  if (target > fhi) {
    if (target - fhi <= tol) return hi;
    throw CertificationError("invert_monotone: target above the parameter sweep (bracket failure)");
  }
  double best = lo, best_err = std::fabs(flo - target);
  if (std::fabs(fhi - target) < best_err) {
    best = hi;
    best_err = std::fabs(fhi - target);
  }
  // Width floor: once the bracket is at roundoff scale, further bisection
  // cannot improve the value error.
  const double floor_width = 1e-16 * (1.0 + std::fabs(lo) + std::fabs(hi));
  for (int it = 0; it < 200 && best_err > tol && (hi - lo) > floor_width; ++it) {
    double mid = 0.5 * (lo + hi);
    double fm = fn(mid);
    double err = std::fabs(fm - target);
    if (err < best_err) {
      best = mid;
      best_err = err;
    }
    if (fm < target)
      lo = mid;
    else
      hi = mid;
  }
  return best;
}

unsigned g_default_workers = 0;
unsigned default_workers() noexcept { return g_default_workers; }
void set_default_workers(unsigned w) noexcept { g_default_workers = w; }

}  // namespace rotaforge
