#include "rotaforge/segment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

#include <nlohmann/json.hpp>

#include "rotaforge/errors.hpp"
#include "rotaforge/phi.hpp"
#include "rotaforge/util.hpp"

namespace rotaforge {
namespace {

// ---------------------------------------------------------------------------
// Wound coordinates: a fractional position in [0, 1) plus an exact integer
// winding.  Long compositions drift to large absolute values, where plain
// doubles lose absolute precision linearly in the length; keeping the
// integer part exact makes every comparison against a target exact at the
// 1e-16 scale regardless of the chain length.  Degree-one fiber maps act on
// the fractional part alone (bit-exactly, by construction of the kernels).
// ---------------------------------------------------------------------------
struct Wound {
  double fr = 0.0;
  std::int64_t w = 0;
};

Wound wind(double x) {
  double f = std::floor(x);
  double r = x - f;
  if (r >= 1.0) {
    r -= 1.0;
    f += 1.0;
  }
  if (r < 0.0) {
    r += 1.0;
    f -= 1.0;
  }
  return {r, static_cast<std::int64_t>(f)};
}

// Exact difference a - b (windings subtract exactly; fractional parts are
// both O(1)).
double wdiff(const Wound& a, const Wound& b) {
  return static_cast<double>(a.w - b.w) + (a.fr - b.fr);
}

// Replace the fractional part with `full`, folding its integer part into the
// winding.
void rewind(Wound& a, double full) {
  double f = std::floor(full);
  double r = full - f;
  if (r >= 1.0) {
    r -= 1.0;
    f += 1.0;
  }
  if (r < 0.0) {
    r += 1.0;
    f -= 1.0;
  }
  a.fr = r;
  a.w += static_cast<std::int64_t>(f);
}

Wound wstep(const ForcedLift& L, double theta, Wound a) {
  rewind(a, L.evaluate(theta, a.fr));
  return a;
}

// One inverse step: by degree one, the preimage of fr + w is
// inverse(fr) + w, so the winding proceeds through rewind unchanged in
// meaning.
Wound wstep_back(const ForcedLift& L, double theta, Wound a) {
  rewind(a, L.evaluate_inverse(theta, a.fr));
  return a;
}

// A batch of wound points advanced in lockstep; `head` consumes placed
// entries from the front without reallocating.
struct WSweep {
  std::vector<double> fr;
  std::vector<std::int64_t> w;
  std::size_t head = 0;
  std::size_t size() const { return fr.size() - head; }
  double* data() { return fr.data() + head; }
};

void renorm_many(WSweep& s) {
  for (std::size_t i = s.head; i < s.fr.size(); ++i) {
    double f = std::floor(s.fr[i]);
    double r = s.fr[i] - f;
    if (r >= 1.0) {
      r -= 1.0;
      f += 1.0;
    }
    if (r < 0.0) {
      r += 1.0;
      f -= 1.0;
    }
    s.fr[i] = r;
    s.w[i] += static_cast<std::int64_t>(f);
  }
}

// Interpolation window carried along the unperturbed fibers, kept reduced:
// the lower end lives in [0, 1), the upper end is lo + width.
struct Window {
  double lo = 0.0;
  double width = 1.0;

  void advance(const ForcedLift& L, double theta) {
    double nl = L.evaluate(theta, lo);
    double nh = L.evaluate(theta, lo + width);
    double nw = nh - nl;
    double f = std::floor(nl);
    lo = nl - f;
    if (lo >= 1.0) lo -= 1.0;
    if (lo < 0.0) lo += 1.0;
    width = std::min(nw, 1.0);
    if (!(width > 0.0)) throw CertificationError("perturbation window collapsed");
  }
};

// Exact sup |phi - Id| over one window: the displacement of the
// interpolation map is piecewise linear with its maximum at the interior
// kink, |t| * min(|t| * width, 2*eps), for either sign of t.
double phi_disp_bound(double eps, double t, double width) {
  double a = std::fabs(t);
  return a * std::min(a * width, 2.0 * eps);
}

double checked_distance(const ForcedLift& Fc, const ForcedLift& F) { return distance_c0(Fc, F); }

}  // namespace

// ---------------------------------------------------------------------------
// PinnedPL
// ---------------------------------------------------------------------------

PinnedPL::PinnedPL(std::vector<double> u, std::vector<double> v) : u_(std::move(u)), v_(std::move(v)) {
  if (u_.size() != v_.size() || u_.empty())
    throw ConfigError("pinned PL map: knot arrays must be nonempty and of equal size");
  for (std::size_t i = 0; i + 1 < u_.size(); ++i) {
    if (!(u_[i] < u_[i + 1])) throw ConfigError("pinned PL map: knot positions not increasing");
    if (!(v_[i] < v_[i + 1])) throw ConfigError("pinned PL map: knot values not increasing");
  }
  if (!(u_.back() < u_.front() + 1.0))
    throw ConfigError("pinned PL map: knot positions span a full period");
  if (!(v_.back() < v_.front() + 1.0))
    throw ConfigError("pinned PL map: knot values span a full period");
  for (double x : u_)
    if (!std::isfinite(x)) throw ConfigError("pinned PL map: non-finite knot");
  for (double x : v_)
    if (!std::isfinite(x)) throw ConfigError("pinned PL map: non-finite knot");
}

namespace {
// Shared kernel of PinnedPL::eval / invert: piecewise-linear interpolation
// of the degree-one extension of (a, b) knots at x.
double pl_eval(const std::vector<double>& a, const std::vector<double>& b, double x) {
  const double k = std::floor(x - a.front());
  double xr = x - k;  // in [a0, a0 + 1)
  // cell index: last i with a[i] <= xr
  std::size_t idx = static_cast<std::size_t>(std::upper_bound(a.begin(), a.end(), xr) - a.begin());
  // idx == 0 can only arise from reduction roundoff just below a0: clamp.
  if (idx == 0) return b.front() + k;
  double al, ar, bl, br;
  if (idx == a.size()) {
    al = a.back();
    ar = a.front() + 1.0;
    bl = b.back();
    br = b.front() + 1.0;
  } else {
    al = a[idx - 1];
    ar = a[idx];
    bl = b[idx - 1];
    br = b[idx];
  }
  double t = (xr - al) / (ar - al);
  if (t < 0.0) t = 0.0;
  if (t > 1.0) t = 1.0;
  return bl + t * (br - bl) + k;
}
}  // namespace

double PinnedPL::eval(double x) const {
  if (u_.empty()) return x;
  return pl_eval(u_, v_, x);
}

double PinnedPL::invert(double y) const {
  if (u_.empty()) return y;
  return pl_eval(v_, u_, y);
}

double PinnedPL::dist_to_identity() const {
  double d = 0.0;
  for (std::size_t i = 0; i < u_.size(); ++i) d = std::max(d, std::fabs(v_[i] - u_[i]));
  return d;
}

double PinnedPL::lip_upper() const {
  if (u_.empty()) return 1.0;
  double m = 0.0;
  for (std::size_t i = 0; i + 1 < u_.size(); ++i)
    m = std::max(m, (v_[i + 1] - v_[i]) / (u_[i + 1] - u_[i]));
  m = std::max(m, (v_.front() + 1.0 - v_.back()) / (u_.front() + 1.0 - u_.back()));
  return m;
}

double PinnedPL::lip_lower() const {
  if (u_.empty()) return 1.0;
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < u_.size(); ++i)
    m = std::min(m, (v_[i + 1] - v_[i]) / (u_[i + 1] - u_[i]));
  m = std::min(m, (v_.front() + 1.0 - v_.back()) / (u_.front() + 1.0 - u_.back()));
  return m;
}

// ---------------------------------------------------------------------------
// SegmentPerturbation
// ---------------------------------------------------------------------------

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::cancel:
      return "cancel";
    case Provenance::local:
      return "local";
    case Provenance::concatenate:
      return "concatenate";
  }
  return "?";
}

const Stage* SegmentPerturbation::stage_of(std::int64_t i) const {
  if (stages_.empty()) return nullptr;
  if (prov_ == Provenance::local) {
    const Stage& st = stages_.front();
    return (i >= st.begin && i < st.begin + st.length) ? &st : nullptr;
  }
  if (i < cancel_len_ || i >= n_ - 1) return nullptr;
  std::int64_t idx = (i - cancel_len_) / stages_.front().length;
  if (idx < 0 || idx >= static_cast<std::int64_t>(stages_.size())) return nullptr;
  return &stages_[static_cast<std::size_t>(idx)];
}

void SegmentPerturbation::stage_window(const Stage& st, std::int64_t i, double& lo,
                                       double& hi) const {
  std::int64_t j = i - st.begin;  // post of step i uses the window advanced j+1 times
  if (prov_ == Provenance::local && !track_lo_.empty()) {
    lo = track_lo_[static_cast<std::size_t>(j + 1)];
    hi = track_hi_[static_cast<std::size_t>(j + 1)];
    return;
  }
  Window win{st.ylo0, st.yhi0 - st.ylo0};
  for (std::int64_t q = 0; q <= j; ++q)
    win.advance(lift_, lift_.base().step_n(theta0_, st.begin + q));
  lo = win.lo;
  hi = win.lo + win.width;
}

bool SegmentPerturbation::post_active(std::int64_t i) const {
  if (degenerate_ || i < 0 || i >= n_) return false;
  switch (prov_) {
    case Provenance::cancel:
      return s_ != 0.0;
    case Provenance::local: {
      const Stage* st = stage_of(i);
      return st != nullptr && st->t != 0.0;
    }
    case Provenance::concatenate: {
      if (i < cancel_len_) return s_ != 0.0;
      if (i == n_ - 1) return !snap_.is_identity();
      const Stage* st = stage_of(i);
      return st != nullptr && st->t != 0.0;
    }
  }
  return false;
}

double SegmentPerturbation::post_eval(std::int64_t i, double y) const {
  if (!post_active(i)) return y;
  if (prov_ == Provenance::cancel || (prov_ == Provenance::concatenate && i < cancel_len_))
    return y + s_;
  if (prov_ == Provenance::concatenate && i == n_ - 1) return snap_.eval(y);
  const Stage* st = stage_of(i);
  double lo, hi;
  stage_window(*st, i, lo, hi);
  return phi_eval({eps_, st->t, lo, hi}, y);
}

double SegmentPerturbation::post_invert(std::int64_t i, double y) const {
  if (!post_active(i)) return y;
  if (prov_ == Provenance::cancel || (prov_ == Provenance::concatenate && i < cancel_len_))
    return y - s_;
  if (prov_ == Provenance::concatenate && i == n_ - 1) return snap_.invert(y);
  const Stage* st = stage_of(i);
  double lo, hi;
  stage_window(*st, i, lo, hi);
  return phi_invert({eps_, st->t, lo, hi}, y);
}

FiberLift SegmentPerturbation::fiber(std::int64_t i) const {
  const double theta = lift_.base().step_n(theta0_, i);
  if (!post_active(i)) return lift_.fiber(theta);
  if (prov_ == Provenance::cancel || (prov_ == Provenance::concatenate && i < cancel_len_)) {
    return FiberLift::from_function([&](double x) { return lift_.evaluate(theta, x) + s_; },
                                    lift_.fiber_knots(), lift_.x_lip_upper(), 0.0);
  }
  if (prov_ == Provenance::concatenate && i == n_ - 1) {
    return FiberLift::from_function([&](double x) { return snap_.eval(lift_.evaluate(theta, x)); },
                                    lift_.fiber_knots(), lift_.x_lip_upper() * snap_.lip_upper(),
                                    0.0);
  }
  const Stage* st = stage_of(i);
  double lo, hi;
  stage_window(*st, i, lo, hi);
  const PhiParams pp{eps_, st->t, lo, hi};
  return FiberLift::from_function([&](double x) { return phi_eval(pp, lift_.evaluate(theta, x)); },
                                  lift_.fiber_knots(), lift_.x_lip_upper() * phi_lip_upper(pp),
                                  0.0);
}

double SegmentPerturbation::chain_eval(double y) const {
  double cur = y;
  const Stage* active = nullptr;
  Window win;
  for (std::int64_t i = 0; i < n_; ++i) {
    const double theta = lift_.base().step_n(theta0_, i);
    const Stage* st = degenerate_ ? nullptr : stage_of(i);
    if (st != active) {
      active = st;
      if (st) win = Window{st->ylo0, st->yhi0 - st->ylo0};
    }
    if (active && active->t != 0.0) win.advance(lift_, theta);
    cur = lift_.evaluate(theta, cur);
    if (degenerate_) continue;
    if (active && active->t != 0.0)
      cur = phi_eval({eps_, active->t, win.lo, win.lo + win.width}, cur);
    else if (s_ != 0.0 &&
             (prov_ == Provenance::cancel ||
              (prov_ == Provenance::concatenate && i < cancel_len_)))
      cur += s_;
    else if (prov_ == Provenance::concatenate && i == n_ - 1)
      cur = snap_.eval(cur);
  }
  return cur;
}

void SegmentPerturbation::chain_eval_many(double* ys, std::size_t count) const {
  const Stage* active = nullptr;
  Window win;
  for (std::int64_t i = 0; i < n_; ++i) {
    const double theta = lift_.base().step_n(theta0_, i);
    const Stage* st = degenerate_ ? nullptr : stage_of(i);
    if (st != active) {
      active = st;
      if (st) win = Window{st->ylo0, st->yhi0 - st->ylo0};
    }
    if (active && active->t != 0.0) win.advance(lift_, theta);
    lift_.evaluate_many(theta, ys, count);
    if (degenerate_) continue;
    if (active && active->t != 0.0) {
      const PhiParams pp{eps_, active->t, win.lo, win.lo + win.width};
      for (std::size_t j = 0; j < count; ++j) ys[j] = phi_eval(pp, ys[j]);
    } else if (s_ != 0.0 && (prov_ == Provenance::cancel ||
                             (prov_ == Provenance::concatenate && i < cancel_len_))) {
      for (std::size_t j = 0; j < count; ++j) ys[j] += s_;
    } else if (prov_ == Provenance::concatenate && i == n_ - 1) {
      for (std::size_t j = 0; j < count; ++j) ys[j] = snap_.eval(ys[j]);
    }
  }
}

nlohmann::json SegmentPerturbation::to_json() const {
  nlohmann::json j;
  j["provenance"] = provenance_name(prov_);
  j["theta0"] = theta0_;
  j["length"] = n_;
  j["eps"] = eps_;
  j["degenerate"] = degenerate_;
  nlohmann::json params;
  params["s"] = s_;
  params["cancel_length"] = cancel_len_;
  if (!stages_.empty()) {
    params["stage_count"] = stages_.size();
    params["stage_length"] = stages_.front().length;
    nlohmann::json ts = nlohmann::json::array();
    const std::size_t cap = 256;
    for (std::size_t k = 0; k < stages_.size() && k < cap; ++k) {
      const Stage& st = stages_[k];
      ts.push_back({{"begin", st.begin},
                    {"t", st.t},
                    {"anchor", st.anchor},
                    {"target", st.target},
                    {"ylo0", st.ylo0},
                    {"yhi0", st.yhi0}});
    }
    params["stages"] = std::move(ts);
    params["stages_elided"] = stages_.size() > cap;
  }
  if (prov_ == Provenance::concatenate) {
    params["rho_hat"] = rho_hat_;
    params["snap_dist"] = snap_dist_;
    params["snap_knots"] = snap_.knot_count();
  }
  j["params"] = std::move(params);
  j["distance"] = {{"max_fiber_c0", max_c0_},
                   {"residual_certified", res_cert_},
                   {"residual_measured", res_meas_}};
  if (n_ <= 4096) {
    nlohmann::json pf = nlohmann::json::array();
    for (std::int64_t i = 0; i < n_; ++i) {
      double c0 = 0.0;
      if (post_active(i)) {
        if (prov_ == Provenance::cancel || (prov_ == Provenance::concatenate && i < cancel_len_)) {
          c0 = std::fabs(s_);
        } else if (prov_ == Provenance::concatenate && i == n_ - 1) {
          c0 = snap_dist_;
        } else {
          const Stage* st = stage_of(i);
          double lo, hi;
          stage_window(*st, i, lo, hi);
          c0 = phi_disp_bound(eps_, st->t, hi - lo);
        }
      }
      pf.push_back(c0);
    }
    j["per_fiber"] = std::move(pf);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Domain predicates
// ---------------------------------------------------------------------------

bool gamma_membership(const ForcedLift& F, double kappa, double theta, double y, double z,
                      std::int64_t N) {
  if (N <= 0 || !(kappa > 0.0)) throw ConfigError("gamma membership: need N > 0 and kappa > 0");
  Wound a = wind(y);
  for (std::int64_t i = 0; i < N; ++i) a = wstep(F, F.base().step_n(theta, i), a);
  return std::fabs(wdiff(a, wind(z))) < kappa * static_cast<double>(N);
}

bool omega_membership(const ForcedLift& F, double theta, double ylo, double yhi, double z,
                      std::int64_t N) {
  if (N <= 0) throw ConfigError("omega membership: need N > 0");
  if (!(ylo < yhi && yhi <= ylo + 1.0)) throw ConfigError("omega membership: bad window");
  Wound lo = wind(ylo), hi = wind(yhi);
  for (std::int64_t i = 0; i < N; ++i) {
    const double th = F.base().step_n(theta, i);
    lo = wstep(F, th, lo);
    hi = wstep(F, th, hi);
  }
  const Wound wz = wind(z);
  return wdiff(wz, lo) > 0.0 && wdiff(hi, wz) > 0.0;
}

std::int64_t segment_budget(std::int64_t explicit_budget) {
  if (explicit_budget > 0) return explicit_budget;
  static const std::int64_t env_budget = [] {
    const char* s = std::getenv("ROTAFORGE_BUDGET");
    if (s != nullptr && *s != '\0') {
      char* end = nullptr;
      double v = std::strtod(s, &end);
      if (end != s && v > 0 && v < 9.2e18) return static_cast<std::int64_t>(v);
    }
    return static_cast<std::int64_t>(1000000);
  }();
  return env_budget;
}

// ---------------------------------------------------------------------------
// cancel_mean_motion
// ---------------------------------------------------------------------------

SegmentPerturbation cancel_mean_motion(const ForcedLift& F_check, const ForcedLift& F, double eps,
                                       double kappa1, std::int64_t N1, double theta, double y,
                                       double z, std::int64_t N, const SegmentOptions& opts) {
  if (!(eps > 0.0 && eps < 0.25)) throw ConfigError("cancel: eps outside (0, 1/4)");
  if (!(kappa1 > 0.0)) throw ConfigError("cancel: kappa1 must be positive");
  if (N < std::max<std::int64_t>(N1, 1)) throw ConfigError("cancel: N below N1");
  if (N > segment_budget(opts.budget))
    throw BudgetError("cancel: composition length exceeds the step budget");
  if (opts.check_distance) {
    const double d = checked_distance(F_check, F);
    if (!(d < eps)) throw CertificationError("cancel: d(F_check, F) >= eps");
  }
  const BaseSystem& base = F_check.base();

  // Gamma membership of the target against the reference dynamics.
  {
    Wound a = wind(y);
    for (std::int64_t i = 0; i < N; ++i) a = wstep(F, base.step_n(theta, i), a);
    if (!(std::fabs(wdiff(a, wind(z))) < kappa1 * static_cast<double>(N)))
      throw CertificationError("cancel: (theta, y, z) outside Gamma_N(F, kappa1)");
  }

  SegmentPerturbation seg;
  seg.prov_ = Provenance::cancel;
  seg.lift_ = F_check;
  seg.theta0_ = theta;
  seg.n_ = N;
  seg.eps_ = eps;
  seg.cancel_len_ = N;

  const Wound wz = wind(z);
  auto walk = [&](double s) {
    Wound a = wind(y);
    for (std::int64_t i = 0; i < N; ++i) {
      a = wstep(F_check, base.step_n(theta, i), a);
      if (s != 0.0) rewind(a, a.fr + s);
    }
    return a;
  };

  // Degenerate input: the target is the unperturbed image (up to the
  // roundoff envelope of two walk orders) -> exact zero offset.
  const double degen_tol = 1e-12 + (1.0 + std::fabs(z)) * 1e-15 * static_cast<double>(N);
  const double dz0 = wdiff(walk(0.0), wz);
  if (std::fabs(dz0) <= degen_tol) {
    seg.degenerate_ = true;
    seg.s_ = 0.0;
    seg.res_cert_ = seg.res_meas_ = std::fabs(dz0);
    return seg;
  }

  const double smax = 2.0 * eps * (1.0 - 1e-12);
  double s;
  try {
    s = invert_monotone([&](double sv) { return wdiff(walk(sv), wz); }, 0.0, -smax, smax,
                        opts.solver_tol);
  } catch (const CertificationError&) {
    throw CertificationError("cancel: target out of reach of vertical offsets in (-2e, 2e)");
  }
  const double resid = std::fabs(wdiff(walk(s), wz));
  if (!(resid <= 4.0 * opts.solver_tol + degen_tol))
    throw CertificationError("cancel: solve failed to reproduce the target");
  seg.s_ = s;
  seg.max_c0_ = std::fabs(s);
  seg.res_meas_ = resid;
  seg.res_cert_ = resid + degen_tol;
  return seg;
}

// ---------------------------------------------------------------------------
// local_perturb
// ---------------------------------------------------------------------------

SegmentPerturbation local_perturb(const ForcedLift& F_check, const ForcedLift& F, double eps,
                                  double kappa2, std::int64_t N2, double theta, double ylo,
                                  double y, double yhi, double z, std::int64_t N,
                                  const SegmentOptions& opts) {
  if (!(eps > 0.0 && eps < 0.25)) throw ConfigError("local: eps outside (0, 1/4)");
  if (!(ylo < y && y < yhi && yhi <= ylo + 1.0))
    throw ConfigError("local: need ylo < y < yhi <= ylo + 1");
  if (N < std::max<std::int64_t>(N2, 1)) throw ConfigError("local: N below N2");
  if (N > segment_budget(opts.budget))
    throw BudgetError("local: composition length exceeds the step budget");
  if (opts.check_distance && kappa2 > 0.0) {
    const double d = checked_distance(F_check, F);
    if (!(d < kappa2)) throw CertificationError("local: d(F_check, F) >= kappa2");
  }
  const BaseSystem& base = F_check.base();

  SegmentPerturbation seg;
  seg.prov_ = Provenance::local;
  seg.lift_ = F_check;
  seg.theta0_ = theta;
  seg.n_ = N;
  seg.eps_ = eps;

  // Window tracks (reduced), with exact windings for the Omega check.
  std::vector<double> trk_lo(static_cast<std::size_t>(N) + 1);
  std::vector<double> trk_hi(static_cast<std::size_t>(N) + 1);
  Wound lo = wind(ylo), hi = wind(yhi);
  trk_lo[0] = lo.fr;
  trk_hi[0] = lo.fr + wdiff(hi, lo);
  for (std::int64_t i = 0; i < N; ++i) {
    const double th = base.step_n(theta, i);
    lo = wstep(F_check, th, lo);
    hi = wstep(F_check, th, hi);
    const double width = wdiff(hi, lo);
    if (!(width > 0.0)) throw CertificationError("local: window collapsed along the orbit");
    trk_lo[static_cast<std::size_t>(i) + 1] = lo.fr;
    trk_hi[static_cast<std::size_t>(i) + 1] = lo.fr + std::min(width, 1.0);
  }
  const Wound wz = wind(z);
  if (!(wdiff(wz, lo) > 0.0 && wdiff(hi, wz) > 0.0))
    throw CertificationError("local: z outside Omega_N (not between the window images)");

  auto walk = [&](double t) {
    Wound a = wind(y);
    for (std::int64_t i = 0; i < N; ++i) {
      a = wstep(F_check, base.step_n(theta, i), a);
      if (t != 0.0) {
        const std::size_t j = static_cast<std::size_t>(i) + 1;
        rewind(a, phi_eval({eps, t, trk_lo[j], trk_hi[j]}, a.fr));
      }
    }
    return a;
  };

  const double degen_tol = 1e-12 + (1.0 + std::fabs(z)) * 1e-15 * static_cast<double>(N);
  const double dz0 = wdiff(walk(0.0), wz);

  Stage st;
  st.begin = 0;
  st.length = N;
  st.ylo0 = trk_lo[0];
  st.yhi0 = trk_hi[0];
  st.anchor = y;
  st.target = z;

  if (std::fabs(dz0) <= degen_tol) {
    st.t = 0.0;
    seg.degenerate_ = true;
    seg.stages_.push_back(st);
    seg.track_lo_ = std::move(trk_lo);
    seg.track_hi_ = std::move(trk_hi);
    seg.res_cert_ = seg.res_meas_ = std::fabs(dz0);
    return seg;
  }

  const double tmax = 1.0 - 1e-9;
  double t;
  try {
    t = invert_monotone([&](double tv) { return wdiff(walk(tv), wz); }, 0.0, -tmax, tmax,
                        opts.solver_tol);
  } catch (const CertificationError&) {
    throw CertificationError("local: target out of reach of the interpolation sweep");
  }
  const double resid = std::fabs(wdiff(walk(t), wz));
  if (!(resid <= 4.0 * opts.solver_tol + degen_tol))
    throw CertificationError("local: solve failed to reproduce the target");

  st.t = t;
  seg.stages_.push_back(st);
  double maxdisp = 0.0;
  for (std::int64_t i = 1; i <= N; ++i) {
    const std::size_t j = static_cast<std::size_t>(i);
    maxdisp = std::max(maxdisp, phi_disp_bound(eps, t, trk_hi[j] - trk_lo[j]));
  }
  seg.max_c0_ = maxdisp;
  seg.track_lo_ = std::move(trk_lo);
  seg.track_hi_ = std::move(trk_hi);
  seg.res_meas_ = resid;
  seg.res_cert_ = resid + degen_tol;

  // Self-check: points of the frozen region ride the unperturbed fibers
  // bit-for-bit (the interpolation map is the exact identity there).
  const double frozen_width = 1.0 - (seg.stages_.front().yhi0 - seg.stages_.front().ylo0);
  if (opts.verify_samples > 0 && frozen_width > 1e-9) {
    Rng rng(opts.seed);
    for (int k = 0; k < opts.verify_samples; ++k) {
      const double w0 = yhi + rng.next_double() * frozen_width;
      Wound a = wind(w0), b = wind(w0);
      for (std::int64_t i = 0; i < N; ++i) {
        const double th = base.step_n(theta, i);
        a = wstep(F_check, th, a);
        b = wstep(F_check, th, b);
        const std::size_t j = static_cast<std::size_t>(i) + 1;
        rewind(b, phi_eval({eps, t, seg.track_lo_[j], seg.track_hi_[j]}, b.fr));
      }
      if (std::fabs(wdiff(a, b)) > 1e-12)
        throw CertificationError("local: frozen region moved under the perturbation");
    }
  }
  return seg;
}

// ---------------------------------------------------------------------------
// concatenate
// ---------------------------------------------------------------------------

ConcatSchedule concat_schedule(double eps, const PerturbConstants& c, std::int64_t p_override,
                               std::int64_t n2_override) {
  if (!(eps > 0.0 && eps < 0.25)) throw ConfigError("concatenate: eps outside (0, 1/4)");
  ConcatSchedule s;
  s.p = p_override > 0 ? p_override : static_cast<std::int64_t>(std::ceil(10.0 / eps));
  if (s.p < 2) throw ConfigError("concatenate: anchor count p must be at least 2");
  if (n2_override > 0) {
    s.n2 = n2_override;
  } else {
    const std::int64_t need = std::max<std::int64_t>(c.N0 + c.N2, 1);
    s.n2 = (need + s.p - 2) / (s.p - 1);  // ceil(need / (p-1))
  }
  s.span = (s.p - 1) * s.n2;
  // The cancellation zone Nc = N - span - 1 must clear both N1 (mean-motion
  // separation) and N0 (deviation decay); a 10% margin absorbs estimator
  // noise in those constants.
  const auto base = static_cast<std::int64_t>(
      std::ceil(1.1 * static_cast<double>(std::max<std::int64_t>(std::max(c.N0, c.N1), 1))));
  s.n3_required = base + s.span + 1;
  return s;
}

SegmentPerturbation concatenate(const ForcedLift& F_check, const ForcedLift& F, double eps,
                                const PerturbConstants& c, double theta, std::int64_t N,
                                const ConcatOptions& opts) {
  if (!std::isfinite(opts.rho_hat)) throw ConfigError("concatenate: rho_hat is required");
  if (!(opts.rho_err >= 0.0)) throw ConfigError("concatenate: rho_err must be nonnegative");
  const ConcatSchedule sch = concat_schedule(eps, c, opts.p_override, opts.n2_override);
  const std::int64_t p = sch.p, n2 = sch.n2, span = sch.span;
  if (N < sch.n3_required)
    throw ConfigError("concatenate: N below the schedule bound (need >= " +
                      std::to_string(sch.n3_required) + ")");
  if (N > segment_budget(opts.budget))
    throw BudgetError("concatenate: composition length exceeds the step budget");
  // Admissibility of the rotation estimate: the anchor targets are placed at
  // y + N*rho_hat, so the estimate error N*rho_err eats into the kappa1-scale
  // margin of the cancellation-target membership check (|w1 - F^Nc(y1)| <
  // Nc*kappa1, of which the construction itself consumes ~2/3).  It must also
  // stay below the 1/p anchor spacing scale or the stage windows lose meaning.
  {
    const std::int64_t nc_plan = N - sch.span - 1;
    const double slack =
        std::max(1.0 / static_cast<double>(p),
                 c.kappa1 * static_cast<double>(std::max<std::int64_t>(nc_plan, 1)) / 6.0);
    if (static_cast<double>(N) * opts.rho_err > opts.rho_slack * slack)
      throw CertificationError(
          "concatenate: rotation-number error exceeds the correction slack");
  }
  if (opts.check_distance && c.kappa3 > 0.0) {
    const double d = checked_distance(F_check, F);
    if (!(d < c.kappa3)) throw CertificationError("concatenate: d(F_check, F) >= kappa3");
  }

  const BaseSystem& base = F_check.base();
  const std::int64_t Nc = N - span - 1;
  const double NR = static_cast<double>(N) * opts.rho_hat;
  const int msnap = std::max(16, opts.snap_knots);

  SegmentPerturbation seg;
  seg.prov_ = Provenance::concatenate;
  seg.lift_ = F_check;
  seg.theta0_ = theta;
  seg.n_ = N;
  seg.eps_ = eps;
  seg.rho_hat_ = opts.rho_hat;
  seg.cancel_len_ = Nc;

  // Unperturbed deviation from the rigid translation over msamp points.
  auto pure_dev = [&](int msamp) {
    WSweep sw;
    sw.fr.resize(static_cast<std::size_t>(msamp));
    sw.w.assign(static_cast<std::size_t>(msamp), 0);
    for (int j = 0; j < msamp; ++j) sw.fr[static_cast<std::size_t>(j)] = double(j) / msamp;
    for (std::int64_t i = 0; i < N; ++i) {
      F_check.evaluate_many(base.step_n(theta, i), sw.data(), sw.size());
      renorm_many(sw);
    }
    double md = 0.0;
    for (int j = 0; j < msamp; ++j) {
      const Wound e{sw.fr[static_cast<std::size_t>(j)], sw.w[static_cast<std::size_t>(j)]};
      md = std::max(md, std::fabs(wdiff(e, wind(double(j) / msamp + NR))));
    }
    return md;
  };

  // Degenerate input: the whole composition is already the rigid translation
  // by N*rho_hat -> every parameter is zero and the fibers are unperturbed.
  if (pure_dev(8) <= 1e-9) {
    const double md = pure_dev(msnap);
    if (md <= 1e-9) {
      seg.degenerate_ = true;
      seg.res_meas_ = md;
      seg.res_cert_ = md + 1.0 / msnap;
      return seg;
    }
  }

  // Suffix pullback of the first anchor's target + 1 through the unperturbed
  // fibers; its value at each window start is the window's upper end, and at
  // the cancellation boundary it is w1 + 1.
  std::vector<Wound> v_at(static_cast<std::size_t>(p) + 1);
  {
    Wound pull = wind(1.0 + NR);
    for (std::int64_t time = N - 1; time >= Nc; --time) {
      pull = wstep_back(F_check, base.step_n(theta, time), pull);
      const std::int64_t off = time - Nc;
      if (off % n2 == 0) {
        const std::int64_t k = off / n2 + 2;
        if (k <= p) v_at[static_cast<std::size_t>(k)] = pull;
      }
    }
  }
  Wound w1 = v_at[2];
  w1.w -= 1;

  // Gamma membership of the cancellation target against the reference.
  {
    Wound a = wind(0.0);
    for (std::int64_t i = 0; i < Nc; ++i) a = wstep(F, base.step_n(theta, i), a);
    if (!(std::fabs(wdiff(w1, a)) < c.kappa1 * static_cast<double>(Nc)))
      throw CertificationError("concatenate: cancellation target outside Gamma(F, kappa1)");
  }

  // Cancellation solve for anchor 0.
  auto cancel_walk = [&](double s) {
    Wound a = wind(0.0);
    for (std::int64_t i = 0; i < Nc; ++i) {
      a = wstep(F_check, base.step_n(theta, i), a);
      if (s != 0.0) rewind(a, a.fr + s);
    }
    return a;
  };
  const double smax = 2.0 * eps * (1.0 - 1e-12);
  double s;
  try {
    s = invert_monotone([&](double sv) { return wdiff(cancel_walk(sv), w1); }, 0.0, -smax, smax,
                        std::min(opts.solver_tol, 1e-11));
  } catch (const CertificationError&) {
    throw CertificationError("concatenate: cancellation target out of reach (Gamma/bracket)");
  }
  Wound prev_hat = cancel_walk(s);
  if (std::fabs(wdiff(prev_hat, w1)) > opts.place_tol)
    throw CertificationError("concatenate: anchor 0 placement failed");
  seg.s_ = s;
  seg.max_c0_ = std::fabs(s);

  // Each placed anchor rides pure fibers to the end of the chain (it is the
  // lower edge of the next stage window and sits below every later one, and
  // the stage interpolations fix both exactly).  Those chain ends are the
  // snap knots.
  std::vector<Wound> anchor_end(static_cast<std::size_t>(p));
  {
    Wound a = prev_hat;
    for (std::int64_t time = Nc; time < N; ++time)
      a = wstep(F_check, base.step_n(theta, time), a);
    anchor_end[0] = a;
  }

  // Carry the remaining anchors through the cancellation zone in lockstep.
  WSweep sw;
  sw.fr.resize(static_cast<std::size_t>(p - 1));
  sw.w.assign(static_cast<std::size_t>(p - 1), 0);
  for (std::int64_t k = 2; k <= p; ++k)
    sw.fr[static_cast<std::size_t>(k - 2)] = static_cast<double>(k - 1) / static_cast<double>(p);
  for (std::int64_t i = 0; i < Nc; ++i) {
    F_check.evaluate_many(base.step_n(theta, i), sw.data(), sw.size());
    if (s != 0.0)
      for (std::size_t j = sw.head; j < sw.fr.size(); ++j) sw.fr[j] += s;
    renorm_many(sw);
  }

  // Stage loop: one interpolation window per remaining anchor.
  seg.stages_.reserve(static_cast<std::size_t>(p - 1));
  std::vector<double> trk_lo(static_cast<std::size_t>(n2) + 1);
  std::vector<double> trk_w(static_cast<std::size_t>(n2) + 1);
  std::vector<double> trk_th(static_cast<std::size_t>(n2));
  for (std::int64_t k = 2; k <= p; ++k) {
    const std::int64_t tau = Nc + (k - 2) * n2;
    // Target: the anchor's endpoint pulled back through the pure suffix.
    Wound wk = wind(static_cast<double>(k - 1) / static_cast<double>(p) + NR);
    for (std::int64_t time = N - 1; time >= tau + n2; --time)
      wk = wstep_back(F_check, base.step_n(theta, time), wk);

    double width0 = std::min(wdiff(v_at[static_cast<std::size_t>(k)], prev_hat), 1.0);
    if (!(width0 > 1e-12))
      throw CertificationError("concatenate: stage window collapsed at stage " +
                               std::to_string(k));
    const Wound ystart{sw.fr[sw.head], sw.w[sw.head]};
    const double rel = wdiff(ystart, prev_hat);
    if (!(rel > 0.0 && rel < width0))
      throw CertificationError("concatenate: carried anchor left its window at stage " +
                               std::to_string(k));

    // Parameter-independent window track over this stage.
    trk_lo[0] = prev_hat.fr;
    trk_w[0] = width0;
    double maxw = width0;
    {
      Window win{prev_hat.fr, width0};
      for (std::int64_t j = 0; j < n2; ++j) {
        const double th = base.step_n(theta, tau + j);
        trk_th[static_cast<std::size_t>(j)] = th;
        win.advance(F_check, th);
        trk_lo[static_cast<std::size_t>(j) + 1] = win.lo;
        trk_w[static_cast<std::size_t>(j) + 1] = win.width;
        maxw = std::max(maxw, win.width);
      }
    }
    auto stage_walk = [&](double t) {
      Wound a = ystart;
      for (std::int64_t j = 0; j < n2; ++j) {
        a = wstep(F_check, trk_th[static_cast<std::size_t>(j)], a);
        if (t != 0.0) {
          const std::size_t jj = static_cast<std::size_t>(j) + 1;
          rewind(a, phi_eval({eps, t, trk_lo[jj], trk_lo[jj] + trk_w[jj]}, a.fr));
        }
      }
      return a;
    };
    const double tmax = 1.0 - 1e-9;
    double tk;
    try {
      tk = invert_monotone([&](double tv) { return wdiff(stage_walk(tv), wk); }, 0.0, -tmax, tmax,
                           opts.solver_tol);
    } catch (const CertificationError&) {
      throw CertificationError("concatenate: stage " + std::to_string(k) +
                               " target out of reach (Omega/bracket)");
    }
    const Wound wk_hat = stage_walk(tk);
    if (std::fabs(wdiff(wk_hat, wk)) > opts.place_tol)
      throw CertificationError("concatenate: anchor placement failed at stage " +
                               std::to_string(k));

    Stage st;
    st.begin = tau;
    st.length = n2;
    st.t = tk;
    st.ylo0 = prev_hat.fr;
    st.yhi0 = prev_hat.fr + width0;
    st.anchor = static_cast<double>(k - 1) / static_cast<double>(p);
    st.target = wk.fr;
    seg.stages_.push_back(st);
    seg.max_c0_ = std::max(seg.max_c0_, phi_disp_bound(eps, tk, maxw));

    {
      Wound a = wk_hat;
      for (std::int64_t time = tau + n2; time < N; ++time)
        a = wstep(F_check, base.step_n(theta, time), a);
      anchor_end[static_cast<std::size_t>(k - 1)] = a;
    }

    // This anchor is placed: it drops out of the sweep and the rest advance
    // through the window under the solved parameter.
    ++sw.head;
    if (sw.size() > 0) {
      for (std::int64_t j = 0; j < n2; ++j) {
        F_check.evaluate_many(trk_th[static_cast<std::size_t>(j)], sw.data(), sw.size());
        if (tk != 0.0) {
          const std::size_t jj = static_cast<std::size_t>(j) + 1;
          const PhiParams pp{eps, tk, trk_lo[jj], trk_lo[jj] + trk_w[jj]};
          for (std::size_t q = sw.head; q < sw.fr.size(); ++q) sw.fr[q] = phi_eval(pp, sw.fr[q]);
        }
        renorm_many(sw);
      }
    }
    prev_hat = wk_hat;
  }

  // Full solved chain (sans snap) over a vector of wound points.
  auto run_chain = [&](WSweep& sv) {
    for (std::int64_t i = 0; i < Nc; ++i) {
      F_check.evaluate_many(base.step_n(theta, i), sv.data(), sv.size());
      if (seg.s_ != 0.0)
        for (std::size_t j = sv.head; j < sv.fr.size(); ++j) sv.fr[j] += seg.s_;
      renorm_many(sv);
    }
    for (const Stage& st : seg.stages_) {
      Window win{st.ylo0, st.yhi0 - st.ylo0};
      for (std::int64_t j = 0; j < st.length; ++j) {
        const double th = base.step_n(theta, st.begin + j);
        win.advance(F_check, th);
        F_check.evaluate_many(th, sv.data(), sv.size());
        if (st.t != 0.0) {
          const PhiParams pp{eps, st.t, win.lo, win.lo + win.width};
          for (std::size_t q = sv.head; q < sv.fr.size(); ++q) sv.fr[q] = phi_eval(pp, sv.fr[q]);
        }
        renorm_many(sv);
      }
    }
    F_check.evaluate_many(base.step_n(theta, N - 1), sv.data(), sv.size());
    renorm_many(sv);
  };

  // Final snap: pinned PL through (chain end of anchor k, y_k + N*rho_hat).
  // The anchors' targets are 1/p apart and the chain is monotone, so points
  // between anchors land between anchor ends and the snapped residual is
  // certified below the 1/p anchor spacing plus placement error.
  {
    const Wound a0 = anchor_end[0];
    const double dNR = NR - static_cast<double>(a0.w);
    std::vector<double> u(static_cast<std::size_t>(p));
    std::vector<double> v(static_cast<std::size_t>(p));
    for (std::int64_t k = 0; k < p; ++k) {
      const auto sk = static_cast<std::size_t>(k);
      u[sk] = a0.fr + wdiff(anchor_end[sk], a0);
      v[sk] = static_cast<double>(k) / static_cast<double>(p) + dNR;
    }
    try {
      seg.snap_ = PinnedPL(std::move(u), std::move(v));
    } catch (const ConfigError& e) {
      throw CertificationError(std::string("concatenate: snap construction failed: ") + e.what());
    }
    seg.snap_dist_ = seg.snap_.dist_to_identity();
    if (seg.snap_dist_ > 1.0 / static_cast<double>(p) + 10.0 * opts.place_tol)
      throw CertificationError("concatenate: snap deviation exceeds the 1/p budget");
    seg.max_c0_ = std::max(seg.max_c0_, seg.snap_dist_);
    seg.res_cert_ = 1.0 / static_cast<double>(p) + 10.0 * opts.place_tol;
  }

  // A-posteriori verification at random points.
  {
    const int vs = std::max(opts.verify_samples, 1);
    WSweep vv;
    vv.fr.resize(static_cast<std::size_t>(vs));
    vv.w.assign(static_cast<std::size_t>(vs), 0);
    Rng rng(opts.seed);
    std::vector<double> y0(static_cast<std::size_t>(vs));
    for (int j = 0; j < vs; ++j) {
      y0[static_cast<std::size_t>(j)] = rng.next_double();
      vv.fr[static_cast<std::size_t>(j)] = y0[static_cast<std::size_t>(j)];
    }
    run_chain(vv);
    double md = 0.0;
    for (int j = 0; j < vs; ++j) {
      const std::size_t sj = static_cast<std::size_t>(j);
      // Apply the snap in reduced form: H(x + W) = H(x) + W for integer W.
      const std::int64_t W = vv.w[sj];
      const double out = seg.snap_.eval(vv.fr[sj]) + static_cast<double>(W);
      md = std::max(md, std::fabs(out - (y0[sj] + NR)));
    }
    seg.res_meas_ = md;
    if (md > seg.res_cert_)
      throw CertificationError("concatenate: measured residual exceeded its certificate");
  }
  return seg;
}

}  // namespace rotaforge
