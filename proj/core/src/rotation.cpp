#include "rotaforge/rotation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rotaforge/errors.hpp"
#include "rotaforge/util.hpp"

namespace rotaforge {

namespace {

std::vector<double> sample_thetas(int theta_grid, const std::vector<double>& extra) {
  std::vector<double> thetas;
  thetas.reserve(static_cast<std::size_t>(theta_grid) + extra.size());
  for (int i = 0; i < theta_grid; ++i) thetas.push_back(static_cast<double>(i) / theta_grid);
  for (double t : extra) thetas.push_back(frac(t));
  return thetas;
}

}  // namespace

DispProfile displacement_profile(const ForcedLift& F, std::int64_t horizon, DispGrid grid,
                                 const std::vector<double>& extra_thetas) {
  if (horizon < 1) throw ConfigError("displacement_profile: horizon must be >= 1");
  std::vector<double> thetas = sample_thetas(grid.theta, extra_thetas);
  int yg = std::max(1, grid.y);
  double h = 1.0 / yg;

  // One batched orbit per theta carries the whole y-grid; per-theta extrema
  // fold into a pair of profile vectors afterwards.
  std::size_t rows = thetas.size();
  std::vector<std::vector<double>> lo_loc(rows), hi_loc(rows);

  parallel_for(rows, [&](std::size_t idx) {
    double theta = thetas[idx];
    std::vector<double> ys(static_cast<std::size_t>(yg));
    for (int j = 0; j < yg; ++j) ys[static_cast<std::size_t>(j)] = j * h;
    std::vector<double> lo(static_cast<std::size_t>(horizon) + 1,
                           std::numeric_limits<double>::infinity());
    std::vector<double> hi(static_cast<std::size_t>(horizon) + 1,
                           -std::numeric_limits<double>::infinity());
    F.orbit_batch(theta, ys.data(), ys.size(), horizon, nullptr,
                  [&](std::int64_t k, const double* cur) {
                    auto ks = static_cast<std::size_t>(k);
                    for (int j = 0; j < yg; ++j) {
                      double d = cur[j] - j * h;
                      lo[ks] = std::min(lo[ks], d);
                      hi[ks] = std::max(hi[ks], d);
                    }
                  });
    lo_loc[idx] = std::move(lo);
    hi_loc[idx] = std::move(hi);
  }, default_workers());

  DispProfile out;
  out.lo.assign(static_cast<std::size_t>(horizon) + 1, std::numeric_limits<double>::infinity());
  out.hi.assign(static_cast<std::size_t>(horizon) + 1, -std::numeric_limits<double>::infinity());
  for (std::size_t idx = 0; idx < rows; ++idx) {
    for (std::int64_t k = 1; k <= horizon; ++k) {
      auto ks = static_cast<std::size_t>(k);
      out.lo[ks] = std::min(out.lo[ks], lo_loc[idx][ks]);
      out.hi[ks] = std::max(out.hi[ks], hi_loc[idx][ks]);
    }
  }
  // Certified y-cell widening: for y in [y_j, y_j + h] the displacement lies
  // within [disp(y_j) - h, disp(y_j + h) + h] by monotonicity.
  for (std::int64_t k = 1; k <= horizon; ++k) {
    out.lo[static_cast<std::size_t>(k)] -= h;
    out.hi[static_cast<std::size_t>(k)] += h;
  }
  out.lo[0] = out.hi[0] = 0.0;
  return out;
}

std::pair<double, double> displacement_bounds(const ForcedLift& F, std::int64_t n, DispGrid grid,
                                              const std::vector<double>& extra_thetas) {
  if (n < 1) throw ConfigError("displacement_bounds: n must be >= 1");
  std::vector<double> thetas = sample_thetas(grid.theta, extra_thetas);
  int yg = std::max(1, grid.y);
  double h = 1.0 / yg;

  std::size_t rows = thetas.size();
  std::vector<double> row_lo(rows), row_hi(rows);
  parallel_for(rows, [&](std::size_t idx) {
    double theta = thetas[idx];
    std::vector<double> ys(static_cast<std::size_t>(yg));
    for (int j = 0; j < yg; ++j) ys[static_cast<std::size_t>(j)] = j * h;
    F.orbit_batch(theta, ys.data(), ys.size(), n);
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < yg; ++j) {
      double d = ys[static_cast<std::size_t>(j)] - j * h;
      lo = std::min(lo, d);
      hi = std::max(hi, d);
    }
    row_lo[idx] = lo;
    row_hi[idx] = hi;
  }, default_workers());

  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t idx = 0; idx < rows; ++idx) {
    lo = std::min(lo, row_lo[idx]);
    hi = std::max(hi, row_hi[idx]);
  }
  return {lo - h, hi + h};
}

RotationReport rho(const ForcedLift& F, double theta0, std::int64_t n, DispGrid grid) {
  if (n < 1) throw ConfigError("rho: n must be >= 1");
  RotationReport r;
  r.n_orbit = n;
  r.rho_raw = F.iterate(frac(theta0), 0.0, n) / static_cast<double>(n);
  r.rho_hat = frac(r.rho_raw);
  auto [mlo, mhi] = displacement_bounds(F, n, grid, {frac(theta0)});
  r.lower = mlo / static_cast<double>(n);
  r.upper = mhi / static_cast<double>(n);
  r.error_bound = (r.upper - r.lower) + 2.0 / static_cast<double>(n);
  return r;
}

std::int64_t estimate_N0(const ForcedLift& F, double kappa0, std::int64_t horizon,
                         DispGrid grid) {
  if (kappa0 <= 0.0) throw ConfigError("estimate_N0: kappa0 must be positive");
  if (horizon < 1) throw ConfigError("estimate_N0: horizon must be >= 1");
  DispProfile prof = displacement_profile(F, horizon, grid);
  // Best available rotation-number estimate: midpoint of the bounds at the
  // horizon (both converge to rho at rate ~1/n).
  double rho_star =
      0.5 * (prof.lo[static_cast<std::size_t>(horizon)] + prof.hi[static_cast<std::size_t>(horizon)]) /
      static_cast<double>(horizon);
  std::int64_t best = -1;
  for (std::int64_t n = horizon; n >= 1; --n) {
    auto ns = static_cast<std::size_t>(n);
    double nk = static_cast<double>(n) * kappa0;
    double c = static_cast<double>(n) * rho_star;
    bool ok = prof.lo[ns] > c - nk && prof.hi[ns] < c + nk;
    if (!ok) break;
    best = n;
  }
  if (best < 0)
    throw CertificationError(
        "estimate_N0: horizon exhausted (kappa0 below sampled resolution for this map)");
  return best;
}

Kappa1Result estimate_kappa1_N1(const ForcedLift& F, double eps, std::int64_t horizon,
                                DispGrid grid, std::int64_t rho_n) {
  if (eps <= 0.0) throw ConfigError("estimate_kappa1_N1: eps must be positive");
  ForcedLift Fm = F.translated(-eps);
  ForcedLift Fp = F.translated(+eps);

  // Hypothesis: rho(F_{-eps}) < rho(F) < rho(F_{+eps}) with certified gaps.
  RotationReport rm = rho(Fm, 0.0, rho_n, grid);
  RotationReport r0 = rho(F, 0.0, rho_n, grid);
  RotationReport rp = rho(Fp, 0.0, rho_n, grid);
  if (!(rm.rho_raw + rm.error_bound < r0.rho_raw - r0.error_bound) ||
      !(r0.rho_raw + r0.error_bound < rp.rho_raw - rp.error_bound))
    throw CertificationError(
        "estimate_kappa1_N1: hypothesis rho(F-) < rho(F) < rho(F+) not verified at this "
        "resolution");

  DispProfile pm = displacement_profile(Fm, horizon, grid);
  DispProfile p0 = displacement_profile(F, horizon, grid);
  DispProfile pp = displacement_profile(Fp, horizon, grid);

  // margin(n) = min of the two separation gaps, per unit step.
  std::vector<double> margin(static_cast<std::size_t>(horizon) + 1, 0.0);
  for (std::int64_t n = 1; n <= horizon; ++n) {
    auto ns = static_cast<std::size_t>(n);
    double a = (p0.lo[ns] - pm.hi[ns]) / static_cast<double>(n);
    double b = (pp.lo[ns] - p0.hi[ns]) / static_cast<double>(n);
    margin[ns] = std::min(a, b);
  }
  // N1 = start of the longest positive suffix; kappa1 = half the worst
  // suffix margin.
  std::int64_t N1 = -1;
  double worst = std::numeric_limits<double>::infinity();
  for (std::int64_t n = horizon; n >= 1; --n) {
    auto ns = static_cast<std::size_t>(n);
    if (margin[ns] <= 0.0) break;
    worst = std::min(worst, margin[ns]);
    N1 = n;
  }
  if (N1 < 0)
    throw CertificationError("estimate_kappa1_N1: horizon exhausted (no positive margin)");
  return {0.5 * worst, N1};
}

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::ML:
      return "ML";
    case Verdict::SL_left:
      return "SL-left";
    case Verdict::SL_right:
      return "SL-right";
    case Verdict::UL:
      return "UL";
    case Verdict::UNDECIDED:
      return "UNDECIDED";
  }
  return "?";
}

LockClassification classify(const ForcedLift& F, double eps_bar, int t_grid, std::int64_t n,
                            double delta_rho, DispGrid grid) {
  if (eps_bar <= 0.0) throw ConfigError("classify: eps_bar must be positive");
  if (t_grid < 3) throw ConfigError("classify: t-grid needs at least 3 points");
  if (n < 1) throw ConfigError("classify: n must be >= 1");
  if (t_grid % 2 == 0) ++t_grid;  // symmetric grid including 0

  LockClassification out;
  out.n = n;
  out.delta_rho = delta_rho > 0.0 ? delta_rho : 4.0 / static_cast<double>(n);

  // Error bound representative: the scan shares one orbit length; the bound
  // is computed for the center map and checked at both scan endpoints.
  double err = 0.0;
  for (double t : {0.0, -eps_bar, eps_bar}) err = std::max(err, rho(F.translated(t), 0.0, n, grid).error_bound);
  out.error_bound = err;
  if (out.delta_rho < 2.0 * err)
    throw CertificationError("classify: delta_rho below 2x rotation error bound; increase n");

  int half = t_grid / 2;
  // One batched orbit carries the whole t-scan: entry i rides the fiber maps
  // of F translated by t_i, all sharing the base orbit of theta = 0.
  out.scan.resize(static_cast<std::size_t>(t_grid));
  std::vector<double> scan_t(static_cast<std::size_t>(t_grid));
  std::vector<double> scan_y(static_cast<std::size_t>(t_grid), 0.0);
  for (int i = 0; i < t_grid; ++i)
    scan_t[static_cast<std::size_t>(i)] = eps_bar * (static_cast<double>(i - half) / half);
  F.orbit_batch(0.0, scan_y.data(), scan_y.size(), n, scan_t.data());
  for (int i = 0; i < t_grid; ++i) {
    auto iu = static_cast<std::size_t>(i);
    ScanPoint p;
    p.t = scan_t[iu];
    p.rho_raw = scan_y[iu] / static_cast<double>(n);
    p.rho_hat = frac(p.rho_raw);
    out.scan[iu] = p;
  }

  // Sanity: the raw scan must be nondecreasing within resolution.
  for (std::size_t i = 1; i < out.scan.size(); ++i)
    if (out.scan[i].rho_raw < out.scan[i - 1].rho_raw - 2.0 * err)
      throw CertificationError("classify: scan violates monotonicity beyond error bound");

  auto c = static_cast<std::size_t>(half);
  double center = out.scan[c].rho_raw;

  // Plateau: maximal contiguous run around 0 with total spread <= delta_rho.
  std::size_t lo = c, hi = c;
  double run_min = center, run_max = center;
  bool moved = true;
  while (moved) {
    moved = false;
    if (lo > 0) {
      double v = out.scan[lo - 1].rho_raw;
      if (std::max(run_max, v) - std::min(run_min, v) <= out.delta_rho) {
        --lo;
        run_min = std::min(run_min, v);
        run_max = std::max(run_max, v);
        moved = true;
      }
    }
    if (hi + 1 < out.scan.size()) {
      double v = out.scan[hi + 1].rho_raw;
      if (std::max(run_max, v) - std::min(run_min, v) <= out.delta_rho) {
        ++hi;
        run_min = std::min(run_min, v);
        run_max = std::max(run_max, v);
        moved = true;
      }
    }
  }
  out.plateau_lo = out.scan[lo].t;
  out.plateau_hi = out.scan[hi].t;

  bool left_flat = lo < c;
  bool right_flat = hi > c;
  bool left_moves = lo == c && c > 0 && (center - out.scan[c - 1].rho_raw) > out.delta_rho;
  bool right_moves =
      hi == c && c + 1 < out.scan.size() && (out.scan[c + 1].rho_raw - center) > out.delta_rho;

  if (left_flat && right_flat)
    out.verdict = Verdict::ML;
  else if (left_flat && right_moves)
    out.verdict = Verdict::SL_left;
  else if (right_flat && left_moves)
    out.verdict = Verdict::SL_right;
  else if (left_moves && right_moves)
    out.verdict = Verdict::UL;
  else
    out.verdict = Verdict::UNDECIDED;
  return out;
}

MlUlNeighbors find_ml_ul_neighbors(const ForcedLift& F, double eps, int t_grid, std::int64_t n) {
  LockClassification c = classify(F, eps, t_grid, n);
  if (c.verdict != Verdict::SL_left && c.verdict != Verdict::SL_right)
    throw ConfigError("find_ml_ul_neighbors: map must classify as SL");

  double plateau_side = c.verdict == Verdict::SL_left ? -1.0 : 1.0;

  MlUlNeighbors out{F, F, 0.0, 0.0};
  bool have_ml = false, have_ul = false;

  // ML neighbor: translate into the plateau; the sub-scan radius stays small
  // enough that the whole scan remains inside it.
  double plateau_reach =
      plateau_side < 0 ? std::fabs(c.plateau_lo) : std::fabs(c.plateau_hi);
  for (double frac_try : {0.5, 0.25, 0.125}) {
    double t = plateau_side * std::min(eps * 0.9, plateau_reach * frac_try);
    if (t == 0.0) continue;
    // Keep the verification scan strictly inside the observed plateau span.
    double radius = 0.9 * std::min(std::fabs(t), plateau_reach - std::fabs(t));
    if (radius <= 0.0) continue;
    try {
      LockClassification sub = classify(F.translated(t), radius, t_grid, n);
      if (sub.verdict == Verdict::ML) {
        out.ml = F.translated(t);
        out.t_ml = t;
        have_ml = true;
        break;
      }
    } catch (const CertificationError&) {
      continue;
    }
  }

  // UL neighbor: translate to the moving side and verify strict increase.
  for (double factor : {0.5, 0.25, 0.125, 0.0625}) {
    double t = -plateau_side * eps * factor;
    double radius = std::fabs(t) * 0.5;
    if (radius <= 0.0) continue;
    try {
      LockClassification sub = classify(F.translated(t), radius, t_grid, n);
      if (sub.verdict == Verdict::UL) {
        out.ul = F.translated(t);
        out.t_ul = t;
        have_ul = true;
        break;
      }
    } catch (const CertificationError&) {
      continue;
    }
  }

  if (!have_ml || !have_ul)
    throw CertificationError(
        "find_ml_ul_neighbors: search failed at this resolution (UNDECIDED candidates)");
  return out;
}

}  // namespace rotaforge
