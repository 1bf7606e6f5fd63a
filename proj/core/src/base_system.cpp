#include "rotaforge/base_system.hpp"

#include <algorithm>
#include <cmath>

#include "rotaforge/errors.hpp"
#include "rotaforge/util.hpp"

namespace rotaforge {

BaseSystem::BaseSystem(double omega, int grid_points)
    : kind_(Kind::rotation_1d), omega_{frac(omega)}, grid_(grid_points) {
  validate();
}

BaseSystem::BaseSystem(std::vector<double> omega, int grid_points)
    : kind_(omega.size() == 1 ? Kind::rotation_1d : Kind::rotation_d),
      omega_(std::move(omega)),
      grid_(grid_points) {
  for (double& w : omega_) w = frac(w);
  validate();
}

void BaseSystem::validate() const {
  if (omega_.empty()) throw ConfigError("base system: empty frequency vector");
  if (grid_ < 2) throw ConfigError("base system: grid must have at least 2 points");
  for (double w : omega_) {
    // Reject frequencies too close to low-denominator rationals.
    for (int q = 1; q <= 64; ++q) {
      double p = std::nearbyint(w * q);
      if (std::fabs(w - p / q) < 1e-12)
        throw ConfigError("base system: frequency within 1e-12 of rational p/q with q <= 64");
    }
  }
  // Forward/backward composition closes to identity.
  for (double w : omega_) {
    double t = 0.37;
    double r = frac(frac(t + w) - w);
    if (circle_dist(r, t) > 1e-15)
      throw ConfigError("base system: inverse composition residual exceeds 1e-15");
  }
  // Minimality surrogate: the orbit of 0 (length = grid) is delta-dense per
  // coordinate with delta <= 2/grid.
  for (double w : omega_) {
    std::vector<double> pts(static_cast<std::size_t>(grid_));
    for (int k = 0; k < grid_; ++k) pts[static_cast<std::size_t>(k)] = frac_mul(k, w);
    std::sort(pts.begin(), pts.end());
    double gap = 1.0 - pts.back() + pts.front();
    for (std::size_t i = 1; i < pts.size(); ++i) gap = std::max(gap, pts[i] - pts[i - 1]);
    if (gap > 2.0 / grid_)
      throw ConfigError("base system: orbit density surrogate failed (max gap > 2/N)");
  }
}

double BaseSystem::step(double theta) const { return frac(theta + omega_[0]); }

double BaseSystem::step_back(double theta) const { return frac(theta - omega_[0]); }

double BaseSystem::step_n(double theta, std::int64_t n) const {
  return frac(theta + frac_mul(n, omega_[0]));
}

std::vector<double> BaseSystem::step_n_vec(const std::vector<double>& theta,
                                           std::int64_t n) const {
  std::vector<double> out(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i)
    out[i] = frac(theta[i] + frac_mul(n, omega_[i % omega_.size()]));
  return out;
}

double BaseSystem::dist(double a, double b) const { return circle_dist(a, b); }

double BaseSystem::min_orbit_norm(std::int64_t n) const {
  double best = 1.0;
  for (std::int64_t k = 1; k < n; ++k) best = std::min(best, dist_to_int(frac_mul(k, omega_[0])));
  return best;
}

}  // namespace rotaforge
