#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace rotaforge {

// Fractional part in [0, 1).
inline double frac(double x) {
  double f = x - std::floor(x);
  if (f >= 1.0) f -= 1.0;  // guard against floor rounding at negative ulps
  if (f < 0.0) f += 1.0;
  return f;
}

// frac(k * w) computed with an exact two-product so that no precision is lost
// for |k| up to 2^52.  Returns a value in [0, 1) accurate to a few ulps.
inline double frac_mul(std::int64_t k, double w) {
  double kd = static_cast<double>(k);
  double p = kd * w;
  double e = std::fma(kd, w, -p);  // exact residual of the product
  double fp = p - std::floor(p);   // exact for p with |p| >= 1 (Sterbenz)
  double x = fp + e;
  return frac(x);
}

// Distance to the nearest integer: ||x|| in the standard notation.
inline double dist_to_int(double x) {
  double f = x - std::nearbyint(x);
  return std::fabs(f);
}

// Flat distance on the circle T^1 = R/Z.
inline double circle_dist(double a, double b) { return dist_to_int(a - b); }

// Flat distance on T^d (max metric over coordinates).
inline double torus_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, circle_dist(a[i], b[i]));
  return d;
}

// Deterministic 64-bit RNG (SplitMix64); used wherever sampling needs a seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

 private:
  std::uint64_t state_;
};

// Simple blocked parallel-for over [0, n).  Results must be written to
// per-index slots so that output is independent of the worker count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body,
                         unsigned workers = 0) {
  if (n == 0) return;
  unsigned hw = workers ? workers : std::max(1u, std::thread::hardware_concurrency());
  if (hw <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  unsigned nt = static_cast<unsigned>(std::min<std::size_t>(hw, n));
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (unsigned t = 0; t < nt; ++t) {
    pool.emplace_back([&, t]() {
      for (std::size_t i = t; i < n; i += nt) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

// Global default worker count (set by the CLI --workers flag; 0 = hardware).
unsigned default_workers() noexcept;
void set_default_workers(unsigned w) noexcept;

}  // namespace rotaforge
