#include "rotaforge/phi.hpp"

#include <algorithm>
#include <cmath>

#include "rotaforge/errors.hpp"

namespace rotaforge {

void PhiParams::validate() const {
  if (!std::isfinite(eps) || !std::isfinite(t) || !std::isfinite(y) || !std::isfinite(z))
    throw ConfigError("phi: non-finite parameter");
  if (!(eps > 0.0 && eps < 0.25)) throw ConfigError("phi: eps must lie in (0, 1/4)");
  if (!(t > -1.0 && t < 1.0)) throw ConfigError("phi: t must lie in (-1, 1)");
  if (!(y < z && z <= y + 1.0)) throw ConfigError("phi: window must satisfy y < z <= y + 1");
}

namespace {

// Keep a computed image strictly inside the open window; roundoff at the
// window ends could otherwise collapse it onto a fixed endpoint and break
// strict monotonicity of downstream fiber maps.
double pin_open(double v, double u, double y, double z) {
  if (v <= y) return 0.5 * (u + y);
  if (v >= z) return 0.5 * (u + z);
  return v;
}

}  // namespace

double phi_eval(const PhiParams& p, double x) {
  if (p.t == 0.0) return x;
  const double k = std::floor(x - p.y);
  const double u = x - k;  // representative in [y, y + 1)
  if (!(u > p.y && u < p.z)) return x;
  const double w = p.z - p.y;
  const double t = p.t;
  const double cap = 2.0 * p.eps;
  double v;
  if (t > 0.0) {
    const double split = p.y + (1.0 - t) * w;
    if (u >= split)
      v = u + t * std::min(p.z - u, cap);
    else
      v = p.y + (u - p.y) * (1.0 + (t / (1.0 - t)) * std::min(t, cap / w));
  } else {
    const double split = p.z - (t + 1.0) * w;
    if (u <= split)
      v = u + t * std::min(u - p.y, cap);
    else
      v = p.z - (p.z - u) * (1.0 - (t / (t + 1.0)) * std::min(-t, cap / w));
  }
  return k + pin_open(v, u, p.y, p.z);
}

double phi_invert(const PhiParams& p, double v) {
  if (p.t == 0.0) return v;
  const double k = std::floor(v - p.y);
  const double u = v - k;
  if (!(u > p.y && u < p.z)) return v;
  const double w = p.z - p.y;
  const double t = p.t;
  const double cap = 2.0 * p.eps;
  double x;
  if (t > 0.0) {
    const double c = 1.0 + (t / (1.0 - t)) * std::min(t, cap / w);
    const double split_v = p.y + (1.0 - t) * w * c;
    if (u <= split_v) {
      x = p.y + (u - p.y) / c;
    } else if (cap < t * w) {
      // The flat-shift zone exists: images in [split_v, z - cap*(1-t)) come
      // from x + cap*t, the rest from the contraction toward z.
      const double mid_v = p.z - cap * (1.0 - t);
      if (u < mid_v)
        x = u - cap * t;
      else
        x = p.z - (p.z - u) / (1.0 - t);
    } else {
      x = p.z - (p.z - u) / (1.0 - t);
    }
  } else {
    const double c = 1.0 - (t / (t + 1.0)) * std::min(-t, cap / w);
    const double split_v = p.z - (t + 1.0) * w * c;
    if (u >= split_v) {
      x = p.z - (p.z - u) / c;
    } else if (cap < -t * w) {
      const double mid_v = p.y + cap * (1.0 + t);
      if (u > mid_v)
        x = u - cap * t;
      else
        x = p.y + (u - p.y) / (1.0 + t);
    } else {
      x = p.y + (u - p.y) / (1.0 + t);
    }
  }
  return k + pin_open(x, u, p.y, p.z);
}

double phi_lip_upper(const PhiParams& p) {
  const double w = p.z - p.y;
  const double cap = 2.0 * p.eps;
  if (p.t > 0.0) return 1.0 + (p.t / (1.0 - p.t)) * std::min(p.t, cap / w);
  if (p.t < 0.0) return 1.0 - (p.t / (p.t + 1.0)) * std::min(-p.t, cap / w);
  return 1.0;
}

double phi_lip_lower(const PhiParams& p) {
  if (p.t > 0.0) return 1.0 - p.t;
  if (p.t < 0.0) return 1.0 + p.t;
  return 1.0;
}

}  // namespace rotaforge
