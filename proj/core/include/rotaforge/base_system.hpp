#pragma once

#include <cstdint>
#include <memory>
#include <vector>

namespace rotaforge {

// Uniquely ergodic base dynamics: an irrational rotation on T^1 (primary,
// hot path with scalar angles) or on T^d (thin support).  The invariant
// measure is Lebesgue, sampled on a uniform grid of grid_points() points per
// coordinate.
class BaseSystem {
 public:
  enum class Kind { rotation_1d, rotation_d };

  static constexpr int kDefaultGrid = 4096;

  // 1-d rotation by omega.  Rejects omega within 1e-12 of p/q with q <= 64,
  // and verifies the orbit-density surrogate at construction.
  explicit BaseSystem(double omega, int grid_points = kDefaultGrid);

  // d-dimensional rotation; every coordinate must pass the same checks.
  explicit BaseSystem(std::vector<double> omega, int grid_points = kDefaultGrid);

  Kind kind() const { return kind_; }
  int dimension() const { return static_cast<int>(omega_.size()); }
  double omega1() const { return omega_[0]; }
  const std::vector<double>& omega() const { return omega_; }
  int grid_points() const { return grid_; }

  // One forward / backward step (scalar interface: first coordinate; total
  // for 1-d bases, which is all the library's hot paths use).
  double step(double theta) const;
  double step_back(double theta) const;

  // g^n(theta) without error accumulation: frac(theta + n*omega) with an
  // exact two-product reduction.  n may be negative.
  double step_n(double theta, std::int64_t n) const;
  std::vector<double> step_n_vec(const std::vector<double>& theta, std::int64_t n) const;

  // Flat torus distance between base points (first coordinate for scalars).
  double dist(double a, double b) const;

  // Smallest distance from k*omega to 0 over 1 <= k < n (arithmetic quality
  // of the rotation; scalar bases only).
  double min_orbit_norm(std::int64_t n) const;

 private:
  void validate() const;

  Kind kind_ = Kind::rotation_1d;
  std::vector<double> omega_;
  int grid_ = kDefaultGrid;
};

using BasePtr = std::shared_ptr<const BaseSystem>;

}  // namespace rotaforge
