#include "rotaforge/scan.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <thread>

#include <nlohmann/json.hpp>

#include "rotaforge/errors.hpp"

namespace rotaforge {
namespace {

// Fixed-slot parallel loop: fn(i) writes only to slot i, so the gathered
// result is identical for any worker count.
void run_indexed(std::size_t count, int workers, const std::function<void(std::size_t)>& fn) {
  int w = std::max(1, std::min<int>(workers, static_cast<int>(count)));
  if (w == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(w));
  for (int t = 0; t < w; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = static_cast<std::size_t>(t); i < count;
           i += static_cast<std::size_t>(w))
        fn(i);
    });
  for (std::thread& th : pool) th.join();
}

void append_num(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

}  // namespace

std::vector<double> uniform_grid(double lo, double hi, int count) {
  if (count < 2) throw ConfigError("uniform_grid: at least two points required");
  if (!(hi > lo)) throw ConfigError("uniform_grid: empty range");
  std::vector<double> g(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    g[static_cast<std::size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / (count - 1);
  return g;
}

FamilyScanReport family_scan(const std::function<ForcedLift(double)>& family,
                             const std::vector<double>& taus, std::int64_t n,
                             const FamilyScanOptions& opts) {
  if (n < 1) throw ConfigError("family_scan: orbit length must be positive");
  FamilyScanReport rep;
  rep.n = n;
  rep.delta_rho = opts.delta_rho > 0.0 ? opts.delta_rho : 4.0 / static_cast<double>(n);
  rep.points.resize(taus.size());
  run_indexed(taus.size(), opts.workers, [&](std::size_t i) {
    RotationReport r = rho(family(taus[i]), opts.theta0, n, opts.grid);
    FamilyScanPoint& pt = rep.points[i];
    pt.tau = taus[i];
    pt.rho_hat = r.rho_hat;
    pt.raw = r.rho_raw;
    pt.lower = r.lower;
    pt.upper = r.upper;
    pt.error_bound = r.error_bound;
  });

  // Maximal anchored runs: a run keeps its first point as the anchor and
  // extends while the rotation number stays within delta_rho of it.  The
  // unreduced values are compared, so a plateau straddling an integer does
  // not split at the mod-1 seam.
  std::size_t i = 0;
  while (i < rep.points.size()) {
    std::size_t j = i + 1;
    while (j < rep.points.size() &&
           std::fabs(rep.points[j].raw - rep.points[i].raw) <= rep.delta_rho)
      ++j;
    std::size_t len = j - i;
    if (len >= static_cast<std::size_t>(std::max(opts.min_run, 1)) && len >= 2) {
      LockedInterval iv;
      iv.tau_lo = rep.points[i].tau;
      iv.tau_hi = rep.points[j - 1].tau;
      iv.rho = rep.points[i + len / 2].rho_hat;
      iv.count = static_cast<int>(len);
      rep.intervals.push_back(iv);
      for (std::size_t k = i; k < j; ++k) rep.points[k].locked = true;
    }
    i = j;
  }
  std::size_t nlocked = 0;
  for (const FamilyScanPoint& pt : rep.points) nlocked += pt.locked ? 1 : 0;
  rep.locked_fraction =
      rep.points.empty() ? 0.0 : static_cast<double>(nlocked) / rep.points.size();
  return rep;
}

nlohmann::json FamilyScanReport::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const FamilyScanPoint& p : points)
    pts.push_back({{"tau", p.tau},
                   {"rho_hat", p.rho_hat},
                   {"lower", p.lower},
                   {"upper", p.upper},
                   {"locked", p.locked}});
  nlohmann::json ivs = nlohmann::json::array();
  for (const LockedInterval& iv : intervals)
    ivs.push_back(
        {{"tau_lo", iv.tau_lo}, {"tau_hi", iv.tau_hi}, {"rho", iv.rho}, {"count", iv.count}});
  return {{"v", 1},
          {"kind", "family"},
          {"n", n},
          {"delta_rho", delta_rho},
          {"locked_fraction", locked_fraction},
          {"intervals", std::move(ivs)},
          {"points", std::move(pts)}};
}

std::string FamilyScanReport::to_csv() const {
  std::string out = "tau,rho_hat,lower,upper,n,locked\n";
  for (const FamilyScanPoint& p : points) {
    append_num(out, p.tau);
    out += ',';
    append_num(out, p.rho_hat);
    out += ',';
    append_num(out, p.lower);
    out += ',';
    append_num(out, p.upper);
    out += ',';
    out += std::to_string(n);
    out += ',';
    out += p.locked ? '1' : '0';
    out += '\n';
  }
  return out;
}

TongueRaster tongue_raster(const std::function<ForcedLift(double tau, double p)>& family,
                           const std::vector<double>& taus, const std::vector<double>& ps,
                           std::int64_t n, const TongueRasterOptions& opts) {
  if (taus.size() < 2 || ps.size() < 2)
    throw ConfigError("tongue_raster: both parameter grids need at least two points");
  if (n < 1) throw ConfigError("tongue_raster: orbit length must be positive");
  TongueRaster r;
  r.taus = taus;
  r.ps = ps;
  r.n = n;
  r.delta_rho = opts.delta_rho > 0.0 ? opts.delta_rho : 4.0 / static_cast<double>(n);
  std::size_t T = taus.size();
  r.rho.resize(T * ps.size());
  r.locked.assign(T * ps.size(), 0);
  std::vector<double> raw(T * ps.size());
  run_indexed(r.rho.size(), opts.workers, [&](std::size_t cell) {
    std::size_t pi = cell / T;
    std::size_t ti = cell % T;
    RotationReport rr = rho(family(taus[ti], ps[pi]), opts.theta0, n, opts.grid);
    r.rho[cell] = rr.rho_hat;
    raw[cell] = rr.rho_raw;
  });
  for (std::size_t pi = 0; pi < ps.size(); ++pi) {
    const double* row = raw.data() + pi * T;
    for (std::size_t ti = 0; ti < T; ++ti) {
      bool left = ti > 0 && std::fabs(row[ti] - row[ti - 1]) <= r.delta_rho;
      bool right = ti + 1 < T && std::fabs(row[ti] - row[ti + 1]) <= r.delta_rho;
      r.locked[pi * T + ti] = (left || right) ? 1 : 0;
    }
  }
  return r;
}

std::string TongueRaster::to_csv(const std::string& p_name) const {
  std::string out = "tau," + p_name + ",rho_hat,locked\n";
  for (std::size_t pi = 0; pi < ps.size(); ++pi)
    for (std::size_t ti = 0; ti < taus.size(); ++ti) {
      append_num(out, taus[ti]);
      out += ',';
      append_num(out, ps[pi]);
      out += ',';
      append_num(out, rho_at(pi, ti));
      out += ',';
      out += locked_at(pi, ti) ? '1' : '0';
      out += '\n';
    }
  return out;
}

}  // namespace rotaforge
