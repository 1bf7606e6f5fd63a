#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rotaforge/forced_lift.hpp"
#include "rotaforge/rotation.hpp"

namespace rotaforge {

// One grid point of a parameter scan.
struct FamilyScanPoint {
  double tau = 0.0;
  double rho_hat = 0.0;  // mod-1 representative
  double raw = 0.0;      // unreduced: continuous in tau, used for run detection
  double lower = 0.0;
  double upper = 0.0;
  double error_bound = 0.0;
  bool locked = false;  // member of a detected locked interval
};

// A maximal run of grid points whose rotation numbers agree within delta_rho.
struct LockedInterval {
  double tau_lo = 0.0;
  double tau_hi = 0.0;
  double rho = 0.0;  // rotation number at the run midpoint
  int count = 0;     // grid points in the run
};

struct FamilyScanReport {
  std::vector<FamilyScanPoint> points;
  std::vector<LockedInterval> intervals;
  double delta_rho = 0.0;
  std::int64_t n = 0;
  double locked_fraction = 0.0;  // density statistic: locked points / all points

  nlohmann::json to_json() const;
  // Columns: tau,rho_hat,lower,upper,n,locked (fixed order and formatting).
  std::string to_csv() const;
};

struct FamilyScanOptions {
  double delta_rho = 0.0;  // 0 = auto: 4/n
  int min_run = 2;         // shortest run reported as a locked interval
  DispGrid grid{8, 2};
  double theta0 = 0.0;
  int workers = 1;
};

// Scan tau -> rho_hat(family(tau)) on the given grid and detect maximal
// locked intervals: a run starts at its anchor point and extends while
// |rho_hat - rho_hat(anchor)| <= delta_rho.  Detection resolves plateaus
// only when the grid step exceeds delta_rho.  Deterministic for fixed
// inputs regardless of the worker count.
FamilyScanReport family_scan(const std::function<ForcedLift(double)>& family,
                             const std::vector<double>& taus, std::int64_t n,
                             const FamilyScanOptions& opts = {});

// Uniform closed grid [lo, hi] with count points (count >= 2).
std::vector<double> uniform_grid(double lo, double hi, int count);

struct TongueRasterOptions {
  double delta_rho = 0.0;  // 0 = auto: 4/n
  DispGrid grid{2, 2};
  double theta0 = 0.0;
  int workers = 1;
};

// Raster over a two-parameter family: rho_hat per cell plus a locked flag
// from the plateau test against the tau-neighbors in the same row.
struct TongueRaster {
  std::vector<double> taus;          // fast axis
  std::vector<double> ps;            // slow axis
  std::vector<double> rho;           // ps.size() * taus.size(), tau-major rows
  std::vector<std::uint8_t> locked;  // same layout
  std::int64_t n = 0;
  double delta_rho = 0.0;

  double rho_at(std::size_t pi, std::size_t ti) const { return rho[pi * taus.size() + ti]; }
  bool locked_at(std::size_t pi, std::size_t ti) const {
    return locked[pi * taus.size() + ti] != 0;
  }
  // Columns: tau,<p_name>,rho_hat,locked; rows in (p outer, tau inner) order.
  std::string to_csv(const std::string& p_name = "p") const;
};

TongueRaster tongue_raster(const std::function<ForcedLift(double tau, double p)>& family,
                           const std::vector<double>& taus, const std::vector<double>& ps,
                           std::int64_t n, const TongueRasterOptions& opts = {});

}  // namespace rotaforge
