#include "rotaforge/linearize.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <list>
#include <memory>
#include <mutex>
#include <sstream>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaforge/errors.hpp"
#include "rotaforge/phi.hpp"
#include "rotaforge/segment.hpp"
#include "rotaforge/tietze.hpp"
#include "rotaforge/util.hpp"

namespace rotaforge {
namespace {

using nlohmann::json;

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Incremental base tracking inside the layer cursors: a predicted next base
// point is accepted when it matches the caller's theta this closely, and the
// prediction is re-anchored through step_n at this period so accumulated
// drift stays an order of magnitude under the acceptance window.
constexpr double kSyncTol = 1e-12;
constexpr std::int64_t kReanchor = 1024;

// Signed circular representative of b - a in (-1/2, 1/2].
double circle_delta(double a, double b) {
  double d = frac(b) - frac(a);
  if (d > 0.5) d -= 1.0;
  if (d <= -0.5) d += 1.0;
  return d;
}

// Window-independent slope bounds of the interpolation family at parameter
// t: the per-window bound 1 + (|t|/(1-|t|)) * min(|t|, 2 eps / width) never
// exceeds 1 + t^2/(1-|t|), and the lower bound 1 - |t| is exact.
double stage_lip_upper_bound(double t) {
  double a = std::fabs(t);
  if (a == 0.0) return 1.0;
  return 1.0 + a * a / (1.0 - a);
}
double stage_lip_lower_bound(double t) { return 1.0 - std::fabs(t); }

// Replica of the interpolation-window track the segment solver carries:
// reduced lower end, width capped at one period.  Kept bit-identical to the
// solver's own track so interpolated posts reproduce the solved posts
// exactly when the parameters coincide.
struct WinTrack {
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
    if (!(width > 0.0)) throw CertificationError("interpolated stage window collapsed");
  }
};

std::uint64_t theta_key(double theta) { return std::bit_cast<std::uint64_t>(theta); }

// Monotonically increasing instance ids shared by all layer types; cursors
// remember (owner address, id) so a freed-and-reallocated layer can never be
// mistaken for the one a thread-local cursor was tracking.
std::atomic<std::uint64_t>& instance_counter() {
  static std::atomic<std::uint64_t> c{1};
  return c;
}

// ---------------------------------------------------------------------------
// Level-1 layer: solved chains over finitely many base orbits, realized as a
// mollified blend around each visited orbit point.
//
// Each chain perturbs the fibers along one base orbit {g^j(z)}.  The layer
// applies the solved post of step j exactly on that orbit, the identity off
// a collar of radius r_u around it, and the single-point mollifier average
// in between, so the realized family is a continuous degree-one perturbation
// whose support has measure at most 2 * r_u * (total orbit points).
//
// Queries on registered walks (the long construction and verification
// orbits) are O(1) through per-walk collar-episode plans enumerated by base
// arithmetic; unregistered queries fall back to a binary search over the
// sorted support.  Both paths end in the identical single-point blend query,
// so the layer is a pure function of theta regardless of the access path.
// ---------------------------------------------------------------------------

struct PointTower {
  double z = 0.0;
  std::int64_t ell = 0;
  std::size_t begin = 0;  // offset of this orbit inside the flat point array
  SegmentPerturbation seg;
};

struct CollarEpisode {
  std::int64_t lo = 0, hi = 0;  // walk-step range [lo, hi)
  std::uint32_t tower = 0;
  std::int64_t j0 = 0;  // orbit index of the tower point met at step lo
};

struct WalkPlan {
  double theta0 = 0.0;
  std::int64_t lo = 0, hi = 0;
  std::vector<CollarEpisode> episodes;  // sorted by lo
};

struct L1Cursor {
  const void* owner = nullptr;
  std::uint64_t owner_id = 0;
  std::shared_ptr<const WalkPlan> plan;
  std::int64_t i = 0;
  double theta_cur = std::numeric_limits<double>::quiet_NaN();
  double theta_hat = 0.0;
  std::int64_t since_anchor = 0;
  std::size_t ep_hint = 0;  // first episode with hi > i
};

thread_local L1Cursor tl_l1;

class TowerBlendLayer final : public PerturbationLayer {
 public:
  TowerBlendLayer(BasePtr base, std::vector<SegmentPerturbation> segs, double collar_budget,
                  int n_quad)
      : base_(std::move(base)), n_quad_(n_quad), id_(instance_counter().fetch_add(1)) {
    if (segs.empty()) throw ConfigError("tower blend layer: no chains");
    omega_ = base_->omega1();
    std::size_t total = 0;
    for (const SegmentPerturbation& s : segs) total += static_cast<std::size_t>(s.length());
    pts_.reserve(total);
    towers_.reserve(segs.size());
    for (SegmentPerturbation& s : segs) {
      PointTower t;
      t.z = s.theta0();
      t.ell = s.length();
      t.begin = pts_.size();
      for (std::int64_t j = 0; j < t.ell; ++j) pts_.push_back(base_->step_n(t.z, j));
      t.seg = std::move(s);
      towers_.push_back(std::move(t));
    }

    // Sorted support with tower/step backlinks.
    std::vector<std::uint32_t> order(pts_.size());
    for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::uint32_t a, std::uint32_t b) { return pts_[a] < pts_[b]; });
    sup_theta_.resize(pts_.size());
    sup_tower_.resize(pts_.size());
    sup_step_.resize(pts_.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
      std::uint32_t flat = order[i];
      sup_theta_[i] = pts_[flat];
      std::uint32_t tw = 0;
      while (tw + 1 < towers_.size() && towers_[tw + 1].begin <= flat) ++tw;
      sup_tower_[i] = tw;
      sup_step_[i] = flat - static_cast<std::uint32_t>(towers_[tw].begin);
    }
    double min_gap = 1.0;
    for (std::size_t i = 0; i + 1 < sup_theta_.size(); ++i)
      min_gap = std::min(min_gap, sup_theta_[i + 1] - sup_theta_[i]);
    if (sup_theta_.size() > 1)
      min_gap = std::min(min_gap, sup_theta_.front() + 1.0 - sup_theta_.back());
    if (!(min_gap > 0.0))
      throw CertificationError("tower blend layer: coincident support points");

    r_u_ = std::min({min_gap / 3.0, 1.0 / 64.0,
                     collar_budget / (2.0 * static_cast<double>(pts_.size()))});
    if (r_u_ < 1e-12)
      throw CertificationError(
          "tower blend layer: blend radius below the distinguishability floor");

    c0_ = 0.0;
    double lu = 1.0, ll = 1.0;
    for (const PointTower& t : towers_) {
      c0_ = std::max(c0_, t.seg.max_fiber_c0());
      for (const Stage& st : t.seg.stages()) {
        lu = std::max(lu, stage_lip_upper_bound(st.t));
        ll = std::min(ll, stage_lip_lower_bound(st.t));
      }
      lu = std::max(lu, t.seg.snap().lip_upper());
      ll = std::min(ll, t.seg.snap().lip_lower());
    }
    lip_up_ = lu;
    lip_lo_ = ll;
  }

  // Register a walk: enumerate, by base arithmetic, every step of the orbit
  // of theta0 over [lo, hi) that can land inside a support collar.  The scan
  // uses a slightly widened radius; the query re-checks the actual distance,
  // so a false positive only costs a lookup.
  void prime_base(double theta0, std::int64_t lo, std::int64_t hi) const {
    if (hi <= lo) return;
    std::uint64_t key = theta_key(theta0);
    {
      std::lock_guard<std::mutex> g(reg_mu_);
      auto it = plans_.find(key);
      if (it != plans_.end() && it->second->lo <= lo && it->second->hi >= hi) return;
    }
    auto plan = std::make_shared<WalkPlan>();
    plan->theta0 = theta0;
    plan->lo = lo;
    plan->hi = hi;
    const double thresh = r_u_ + 1e-11;
    for (std::uint32_t tw = 0; tw < towers_.size(); ++tw) {
      const PointTower& t = towers_[tw];
      // Step m meets orbit index j of the tower when m - j = c and
      // ||theta0 - z + c * omega|| <= r_u; scan the alignment shift c.
      std::int64_t c_lo = lo - t.ell + 1;
      std::int64_t c_hi = hi;
      double base_off = frac(theta0 - t.z);
      double val = frac(base_off + frac_mul(c_lo, omega_));
      std::int64_t since = 0;
      for (std::int64_t c = c_lo; c < c_hi; ++c) {
        if (dist_to_int(val) <= thresh) {
          std::int64_t m_lo = std::max(lo, c);
          std::int64_t m_hi = std::min(hi, c + t.ell);
          if (m_lo < m_hi)
            plan->episodes.push_back(CollarEpisode{m_lo, m_hi, tw, m_lo - c});
        }
        val += omega_;
        if (val >= 1.0) val -= 1.0;
        if (++since >= 16384) {
          val = frac(base_off + frac_mul(c + 1, omega_));
          since = 0;
        }
      }
    }
    std::sort(plan->episodes.begin(), plan->episodes.end(),
              [](const CollarEpisode& a, const CollarEpisode& b) { return a.lo < b.lo; });
    std::lock_guard<std::mutex> g(reg_mu_);
    plans_[key] = std::move(plan);
  }

  bool active_at(double theta) const override {
    Decision d;
    decide(theta, d);
    return d.kind != Decision::off;
  }

  double post_eval(double theta, double y) const override {
    Decision d;
    decide(theta, d);
    return apply_one(d, y);
  }

  double post_invert(double theta, double y) const override {
    Decision d;
    decide(theta, d);
    switch (d.kind) {
      case Decision::off:
        return y;
      case Decision::on:
        return towers_[d.tower].seg.post_invert(d.step, y);
      case Decision::blend: {
        double pad = c0_ + 1e-9;
        return invert_monotone([&](double x) { return apply_one(d, x); }, y, y - pad, y + pad,
                               1e-12);
      }
    }
    return y;
  }

  void post_eval_many(double theta, double* ys, std::size_t n) const override {
    Decision d;
    decide(theta, d);
    if (d.kind == Decision::off) return;
    for (std::size_t i = 0; i < n; ++i) ys[i] = apply_one(d, ys[i]);
  }

  double c0_bound() const override { return c0_; }
  double lip_upper() const override { return lip_up_; }
  double lip_lower() const override { return lip_lo_; }
  bool theta_continuous() const override { return false; }
  double theta_lip() const override { return std::numeric_limits<double>::infinity(); }
  std::string kind() const override { return "tower-blend"; }

  nlohmann::json to_json() const override {
    return json{{"kind", "tower-blend"},
                {"towers", towers_.size()},
                {"points", pts_.size()},
                {"r_u", r_u_},
                {"c0_bound", c0_}};
  }

  double blend_radius() const { return r_u_; }
  const std::vector<PointTower>& towers() const { return towers_; }

 private:
  struct Decision {
    enum Kind { off, on, blend } kind = off;
    std::uint32_t tower = 0;
    std::int64_t step = 0;
    // blend mixture: weight of the solved post; the complement is identity.
    double w_m = 0.0;
  };

  double apply_one(const Decision& d, double y) const {
    switch (d.kind) {
      case Decision::off:
        return y;
      case Decision::on:
        return towers_[d.tower].seg.post_eval(d.step, y);
      case Decision::blend: {
        double post = towers_[d.tower].seg.post_eval(d.step, y);
        return d.w_m * post + (1.0 - d.w_m) * y;
      }
    }
    return y;
  }

  // Classify theta against the nearest support point.  Zone cuts replicate
  // the mollified-extension query exactly: the blend window half-width is
  // 2 * min(dist, r_u - dist) <= r_u < gap - r_u, so the window never sees a
  // second support point and the single-point query below returns the same
  // mixture as a query against the full support would.
  void classify_point(double theta, double point, std::uint32_t tower, std::int64_t step,
                      Decision& d) const {
    double dist = circle_dist(theta, point);
    if (dist == 0.0) {
      d.kind = Decision::on;
      d.tower = tower;
      d.step = step;
      return;
    }
    if (!(dist < r_u_)) {
      d.kind = Decision::off;
      return;
    }
    BlendQuery q = tietze_blend_query(theta, {Arc{point, 0.0}}, r_u_, n_quad_, Zeta{});
    d.tower = tower;
    d.step = step;
    if (q.zone == BlendZone::off) {
      d.kind = Decision::off;
      return;
    }
    if (q.zone == BlendZone::on_m) {
      d.kind = Decision::on;
      return;
    }
    double w = 0.0;
    for (const BlendSample& s : q.samples)
      if (s.from_m) w += s.weight;
    d.kind = Decision::blend;
    d.w_m = w;
  }

  void decide_cold(double theta, Decision& d) const {
    double th = frac(theta);
    auto it = std::lower_bound(sup_theta_.begin(), sup_theta_.end(), th);
    std::size_t n = sup_theta_.size();
    std::size_t hi = (it == sup_theta_.end()) ? 0 : static_cast<std::size_t>(it - sup_theta_.begin());
    std::size_t lo = (hi + n - 1) % n;
    double d_hi = circle_dist(th, sup_theta_[hi]);
    double d_lo = circle_dist(th, sup_theta_[lo]);
    std::size_t best = (d_lo < d_hi) ? lo : hi;
    classify_point(theta, sup_theta_[best], sup_tower_[best],
                   static_cast<std::int64_t>(sup_step_[best]), d);
  }

  void decide_at(L1Cursor& cur, double theta, Decision& d) const {
    const std::vector<CollarEpisode>& eps = cur.plan->episodes;
    std::size_t n = eps.size();
    while (cur.ep_hint < n && eps[cur.ep_hint].hi <= cur.i) ++cur.ep_hint;
    while (cur.ep_hint > 0 && eps[cur.ep_hint - 1].hi > cur.i) --cur.ep_hint;
    // Episodes are short and rarely overlap; scan the few candidates whose
    // range contains i and keep the nearest actual support point.
    Decision best;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t e = cur.ep_hint; e < n && eps[e].lo <= cur.i; ++e) {
      if (eps[e].hi <= cur.i) continue;
      const CollarEpisode& ep = eps[e];
      std::int64_t j = ep.j0 + (cur.i - ep.lo);
      double point = pts_[towers_[ep.tower].begin + static_cast<std::size_t>(j)];
      double dist = circle_dist(theta, point);
      if (dist < best_dist) {
        best_dist = dist;
        best.tower = ep.tower;
        best.step = j;
      }
    }
    if (!(best_dist < r_u_) && best_dist != 0.0) {
      d.kind = Decision::off;
      return;
    }
    classify_point(theta, pts_[towers_[best.tower].begin + static_cast<std::size_t>(best.step)],
                   best.tower, best.step, d);
  }

  void decide(double theta, Decision& d) const {
    L1Cursor& cur = tl_l1;
    if (cur.owner == this && cur.owner_id == id_ && cur.plan) {
      if (theta == cur.theta_cur) {
        decide_at(cur, theta, d);
        return;
      }
      double fwd = cur.theta_hat + omega_;
      if (fwd >= 1.0) fwd -= 1.0;
      if (circle_dist(theta, fwd) <= kSyncTol && cur.i + 1 < cur.plan->hi) {
        ++cur.i;
        cur.theta_cur = theta;
        if (++cur.since_anchor >= kReanchor) {
          cur.theta_hat = base_->step_n(cur.plan->theta0, cur.i);
          cur.since_anchor = 0;
        } else {
          cur.theta_hat = fwd;
        }
        decide_at(cur, theta, d);
        return;
      }
      double bwd = cur.theta_hat - omega_;
      if (bwd < 0.0) bwd += 1.0;
      if (circle_dist(theta, bwd) <= kSyncTol && cur.i - 1 >= cur.plan->lo) {
        --cur.i;
        cur.theta_cur = theta;
        if (++cur.since_anchor >= kReanchor) {
          cur.theta_hat = base_->step_n(cur.plan->theta0, cur.i);
          cur.since_anchor = 0;
        } else {
          cur.theta_hat = bwd;
        }
        decide_at(cur, theta, d);
        return;
      }
    }
    // Restart at a registered walk base?
    {
      std::lock_guard<std::mutex> g(reg_mu_);
      auto it = plans_.find(theta_key(theta));
      if (it != plans_.end() && it->second->lo <= 0 && it->second->hi > 0) {
        cur.owner = this;
        cur.owner_id = id_;
        cur.plan = it->second;
        cur.i = 0;
        cur.theta_cur = theta;
        cur.theta_hat = frac(theta);
        cur.since_anchor = 0;
        cur.ep_hint = 0;
        decide_at(cur, theta, d);
        return;
      }
    }
    decide_cold(theta, d);
  }

  BasePtr base_;
  double omega_ = 0.0;
  int n_quad_ = 33;
  std::uint64_t id_ = 0;
  std::vector<PointTower> towers_;
  std::vector<double> pts_;  // flat orbit points, tower-major
  std::vector<double> sup_theta_;
  std::vector<std::uint32_t> sup_tower_;
  std::vector<std::uint32_t> sup_step_;
  double r_u_ = 0.0;
  double c0_ = 0.0;
  double lip_up_ = 1.0;
  double lip_lo_ = 1.0;
  mutable std::mutex reg_mu_;
  mutable std::unordered_map<std::uint64_t, std::shared_ptr<const WalkPlan>> plans_;
};

// ---------------------------------------------------------------------------
// Level-2 layer: solved return-tower chains over the top stratum, extended
// from finitely many sample towers to every tower by parameter
// interpolation.
//
// Each component of the return-tower decomposition carries chains solved at
// interior samples theta_s.  All chains of a component share one schedule
// (cancellation length Nc, p-1 stages of length n2 tiling [Nc, N-1), final
// snap at N-1), so the solved parameters - cancellation offset s, stage
// parameter t with its window start, snap - interpolate linearly in the
// tower-base offset u.  At a sample offset the interpolated post reproduces
// the solved post bit-exactly (the window replay below matches the solver's
// own track), so the solved residual certificates transfer unchanged.  A
// sliver taper at both component ends blends the posts to the identity,
// keeping the realized family continuous across tower-arc boundaries and
// exactly inert on the depth-one exceptional orbits handled one level
// below.
// ---------------------------------------------------------------------------

struct L2Sample {
  double theta0 = 0.0;
  double u = 0.0;
  SegmentPerturbation seg;
};

struct L2Component {
  Arc arc;
  double cut = 0.0;  // offset of arc.lo from the return-set lower end
  double len = 0.0;
  std::int64_t ell = 0;
  double sliver = 0.0;
  bool inert = false;  // every sample came back degenerate
  std::vector<L2Sample> samples;
  std::vector<double> u;  // sample offsets, increasing
  // shared schedule of the non-degenerate chains
  std::int64_t nc = 0, n2 = 1, nstage = 0;
  // flat per-sample stage parameters [sample * nstage + stage]
  std::vector<double> st_t, st_lo, st_hi;
  std::vector<double> s_off;
};

struct L2Cursor {
  const void* owner = nullptr;
  std::uint64_t owner_id = 0;
  bool bound = false;
  double theta_cur = std::numeric_limits<double>::quiet_NaN();
  double theta_hat = 0.0;
  std::int64_t since_anchor = 0;
  int comp = 0;
  double theta0 = 0.0;
  std::int64_t i = 0;
  std::size_t sa = 0, sb = 0;
  double lam = 0.0;
  double taper = 1.0;
  bool identity = false;
  double s_bar = 0.0;
  std::int64_t stage = -1;
  double t_bar = 0.0;
  WinTrack win;
  bool win_valid = false;
};

thread_local L2Cursor tl_l2;

class ReturnInterpLayer final : public PerturbationLayer {
 public:
  ReturnInterpLayer(const ReturnSet& K, ForcedLift f1, std::vector<L2Component> comps,
                    double eps2)
      : base_(K.base_ptr()),
        f1_(std::move(f1)),
        comps_(std::move(comps)),
        eps2_(eps2),
        id_(instance_counter().fetch_add(1)) {
    omega_ = base_->omega1();
    klo_ = K.arc().lo;
    klen_ = K.arc().len;
    ktol_ = K.boundary_tol();
    cap_ = K.search_cap();
    cuts_.reserve(comps_.size() + 1);
    for (const L2Component& c : comps_) cuts_.push_back(c.cut);
    cuts_.push_back(klen_);

    c0_ = 0.0;
    double lu = 1.0, ll = 1.0, max_t = 0.0, max_s = 0.0, max_snap = 0.0;
    bool any_stage = false;
    for (const L2Component& c : comps_) {
      if (c.inert) continue;
      for (double s : c.s_off) max_s = std::max(max_s, std::fabs(s));
      for (double t : c.st_t) max_t = std::max(max_t, std::fabs(t));
      if (c.nstage > 0) any_stage = true;
      for (const L2Sample& smp : c.samples) {
        max_snap = std::max(max_snap, smp.seg.snap().dist_to_identity());
        lu = std::max(lu, smp.seg.snap().lip_upper());
        ll = std::min(ll, smp.seg.snap().lip_lower());
      }
    }
    // Every realized post is a taper blend of the identity with a
    // translation by an interpolated |s|, an interpolation-family map (exact
    // family bound 2 eps |t|), or a convex combination of sample snaps, so
    // the layer-wide certified size is the max of those three caps.
    c0_ = std::max({max_s, any_stage ? 2.0 * eps2_ * max_t : 0.0, max_snap});
    lip_up_ = std::max(lu, stage_lip_upper_bound(max_t));
    lip_lo_ = std::min(ll, stage_lip_lower_bound(max_t));

    // Crude finite theta-direction slope estimate: parameter drift between
    // adjacent samples plus the taper ramp (reported as an estimate; the
    // layer is continuous but steep at tower-arc seams).
    double tl = 0.0;
    for (const L2Component& c : comps_) {
      if (c.inert) continue;
      if (c.sliver > 0.0) tl = std::max(tl, c0_ / c.sliver);
      for (std::size_t s = 0; s + 1 < c.samples.size(); ++s) {
        double du = std::max(c.u[s + 1] - c.u[s], 1e-300);
        double dp = std::fabs(c.s_off[s + 1] - c.s_off[s]);
        for (std::int64_t k = 0; k < c.nstage; ++k)
          dp = std::max(dp, 2.0 * eps2_ *
                                std::fabs(c.st_t[(s + 1) * static_cast<std::size_t>(c.nstage) +
                                                 static_cast<std::size_t>(k)] -
                                          c.st_t[s * static_cast<std::size_t>(c.nstage) +
                                                 static_cast<std::size_t>(k)]));
        tl = std::max(tl, dp / du);
      }
    }
    theta_lip_est_ = tl;
  }

  bool active_at(double theta) const override {
    sync(theta);
    return !tl_l2.identity;
  }

  double post_eval(double theta, double y) const override {
    sync(theta);
    return apply_one(y);
  }

  double post_invert(double theta, double y) const override {
    sync(theta);
    L2Cursor& cur = tl_l2;
    if (cur.identity) return y;
    const L2Component& c = comps_[static_cast<std::size_t>(cur.comp)];
    if (cur.i < c.nc) return y - cur.taper * cur.s_bar;
    if (cur.taper == 1.0) {
      if (cur.i == c.ell - 1 && cur.sa == cur.sb) return c.samples[cur.sa].seg.snap().invert(y);
      if (cur.i != c.ell - 1 && cur.stage >= 0 && cur.win_valid) {
        if (cur.t_bar == 0.0) return y;
        return phi_invert(PhiParams{eps2_, cur.t_bar, cur.win.lo, cur.win.lo + cur.win.width}, y);
      }
    }
    double pad = c0_ + 1e-9;
    return invert_monotone([&](double x) { return apply_one(x); }, y, y - pad, y + pad, 1e-12);
  }

  void post_eval_many(double theta, double* ys, std::size_t n) const override {
    sync(theta);
    if (tl_l2.identity) return;
    post_apply(ys, n);
  }

  double c0_bound() const override { return c0_; }
  double lip_upper() const override { return lip_up_; }
  double lip_lower() const override { return lip_lo_; }
  bool theta_continuous() const override { return true; }
  double theta_lip() const override { return theta_lip_est_; }
  std::string kind() const override { return "return-interp"; }

  nlohmann::json to_json() const override {
    json comps = json::array();
    for (const L2Component& c : comps_)
      comps.push_back(json{{"lo", c.arc.lo},
                           {"len", c.len},
                           {"ell", c.ell},
                           {"samples", c.samples.size()},
                           {"inert", c.inert}});
    return json{{"kind", "return-interp"}, {"c0_bound", c0_}, {"components", std::move(comps)}};
  }

  // Tower coordinates of theta: the base point of its return tower (exact
  // when theta is in the return set itself), the component, and the step.
  struct Located {
    double theta0 = 0.0;
    int comp = 0;
    std::int64_t i = 0;
  };
  Located locate(double theta) const {
    sync(theta);
    return Located{tl_l2.theta0, tl_l2.comp, tl_l2.i};
  }

  std::int64_t ell_of(int comp) const { return comps_[static_cast<std::size_t>(comp)].ell; }
  const std::vector<L2Component>& components() const { return comps_; }

 private:
  double apply_one(double y) const {
    if (tl_l2.identity) return y;
    post_apply(&y, 1);
    return y;
  }
  void post_apply(double* ys, std::size_t n) const {
    L2Cursor& cur = tl_l2;
    const L2Component& c = comps_[static_cast<std::size_t>(cur.comp)];
    double tp = cur.taper;
    if (cur.i < c.nc) {
      double add = tp * cur.s_bar;
      for (std::size_t j = 0; j < n; ++j) ys[j] += add;
      return;
    }
    if (cur.i == c.ell - 1) {
      const PinnedPL& A = c.samples[cur.sa].seg.snap();
      const PinnedPL& B = c.samples[cur.sb].seg.snap();
      for (std::size_t j = 0; j < n; ++j) {
        double v = (cur.sa == cur.sb) ? A.eval(ys[j])
                                      : (1.0 - cur.lam) * A.eval(ys[j]) + cur.lam * B.eval(ys[j]);
        ys[j] = (tp == 1.0) ? v : tp * v + (1.0 - tp) * ys[j];
      }
      return;
    }
    if (cur.stage >= 0 && cur.win_valid && cur.t_bar != 0.0) {
      PhiParams pp{eps2_, cur.t_bar, cur.win.lo, cur.win.lo + cur.win.width};
      for (std::size_t j = 0; j < n; ++j) {
        double v = phi_eval(pp, ys[j]);
        ys[j] = (tp == 1.0) ? v : tp * v + (1.0 - tp) * ys[j];
      }
    }
  }

  // Membership in the closed return arc with the boundary envelope; r gets
  // the reduced offset from the lower end (snapped to 0 just below it).
  bool in_k(double th, double& r) const {
    r = th - klo_;
    if (r < 0.0) r += 1.0;
    if (r >= 1.0 - ktol_) {
      r = 0.0;
      return true;
    }
    return r <= klen_ + ktol_;
  }

  int comp_of(double r) const {
    int c = static_cast<int>(comps_.size()) - 1;
    for (std::size_t j = 0; j + 1 < cuts_.size(); ++j)
      if (r < cuts_[j + 1]) {
        c = static_cast<int>(j);
        break;
      }
    return c;
  }

  void rebuild_stage(L2Cursor& cur) const {
    const L2Component& c = comps_[static_cast<std::size_t>(cur.comp)];
    cur.stage = -1;
    cur.win_valid = false;
    if (cur.identity) return;
    std::int64_t i = cur.i;
    if (i < c.nc || i >= c.ell - 1) return;
    std::int64_t k = (i - c.nc) / c.n2;
    if (k < 0 || k >= c.nstage) return;
    cur.stage = k;
    std::size_t ia = cur.sa * static_cast<std::size_t>(c.nstage) + static_cast<std::size_t>(k);
    std::size_t ib = cur.sb * static_cast<std::size_t>(c.nstage) + static_cast<std::size_t>(k);
    double t_a = c.st_t[ia];
    double lo_a = c.st_lo[ia];
    double w_a = c.st_hi[ia] - c.st_lo[ia];
    double lo, w;
    if (cur.sa == cur.sb || cur.lam == 0.0) {
      cur.t_bar = t_a;
      lo = lo_a;
      w = w_a;
    } else {
      double t_b = c.st_t[ib];
      double lo_b = c.st_lo[ib];
      double w_b = c.st_hi[ib] - c.st_lo[ib];
      cur.t_bar = t_a + cur.lam * (t_b - t_a);
      lo = frac(lo_a + cur.lam * circle_delta(lo_a, lo_b));
      w = w_a + cur.lam * (w_b - w_a);
    }
    cur.win = WinTrack{lo, w};
    std::int64_t begin = c.nc + k * c.n2;
    for (std::int64_t q = begin; q <= i; ++q)
      cur.win.advance(f1_, base_->step_n(cur.theta0, q));
    cur.win_valid = true;
  }

  void step_stage(L2Cursor& cur) const {
    if (cur.identity) return;
    const L2Component& c = comps_[static_cast<std::size_t>(cur.comp)];
    if (cur.i < c.nc || cur.i >= c.ell - 1) {
      cur.stage = -1;
      cur.win_valid = false;
      return;
    }
    std::int64_t k = (cur.i - c.nc) / c.n2;
    if (k != cur.stage || !cur.win_valid) {
      rebuild_stage(cur);
    } else {
      cur.win.advance(f1_, base_->step_n(cur.theta0, cur.i));
    }
  }

  void bind(double theta0, int comp, std::int64_t i, double theta) const {
    L2Cursor& cur = tl_l2;
    const L2Component& c = comps_[static_cast<std::size_t>(comp)];
    cur.owner = this;
    cur.owner_id = id_;
    cur.bound = true;
    cur.theta_cur = theta;
    cur.theta_hat = (i == 0) ? frac(theta0) : base_->step_n(theta0, i);
    cur.since_anchor = 0;
    cur.comp = comp;
    cur.theta0 = theta0;
    cur.i = i;
    double r = 0.0;
    in_k(frac(theta0), r);
    double u = r - c.cut;
    if (u < 0.0) u = 0.0;
    if (u > c.len) u = c.len;
    if (c.inert || i >= c.ell) {
      cur.identity = true;
      cur.taper = 0.0;
      cur.stage = -1;
      cur.win_valid = false;
      return;
    }
    const std::vector<double>& us = c.u;
    std::size_t S = us.size();
    if (u <= us.front()) {
      cur.sa = cur.sb = 0;
      cur.lam = 0.0;
    } else if (u >= us.back()) {
      cur.sa = cur.sb = S - 1;
      cur.lam = 0.0;
    } else {
      std::size_t b = static_cast<std::size_t>(
          std::upper_bound(us.begin(), us.end(), u) - us.begin());
      cur.sa = b - 1;
      cur.sb = b;
      double du = us[b] - us[b - 1];
      cur.lam = (u == us[b - 1]) ? 0.0 : (u - us[b - 1]) / du;
    }
    double edge = std::min(u, c.len - u);
    double tp = (c.sliver > 0.0) ? edge / c.sliver : 1.0;
    if (tp < 0.0) tp = 0.0;
    if (tp > 1.0) tp = 1.0;
    cur.taper = tp;
    cur.s_bar = (cur.sa == cur.sb)
                    ? c.s_off[cur.sa]
                    : c.s_off[cur.sa] + cur.lam * (c.s_off[cur.sb] - c.s_off[cur.sa]);
    cur.identity = (tp == 0.0);
    rebuild_stage(cur);
  }

  bool try_bind_on_k(double theta) const {
    double th = frac(theta);
    double r = 0.0;
    if (!in_k(th, r)) return false;
    bind(th, comp_of(r), 0, theta);
    return true;
  }

  void cold_locate(double theta) const {
    double th = frac(theta);
    double cur_th = th;
    std::int64_t since = 0;
    for (std::int64_t k = 0; k <= cap_; ++k) {
      double r = 0.0;
      if (in_k(cur_th, r)) {
        double theta0 = (k == 0) ? th : frac(th + frac_mul(-k, omega_));
        // Re-test the exact base representative (the incremental walk can
        // drift by ulps near the envelope edge).
        double r0 = 0.0;
        if (k > 0 && !in_k(theta0, r0)) theta0 = cur_th;
        double rr = 0.0;
        in_k(theta0, rr);
        bind(theta0, comp_of(rr), k, theta);
        return;
      }
      cur_th -= omega_;
      if (cur_th < 0.0) cur_th += 1.0;
      if (++since >= kReanchor) {
        cur_th = frac(th + frac_mul(-(k + 1), omega_));
        since = 0;
      }
    }
    throw CertificationError("return-tower location exceeded the spanning cap");
  }

  void sync(double theta) const {
    L2Cursor& cur = tl_l2;
    if (cur.owner == this && cur.owner_id == id_ && cur.bound) {
      if (theta == cur.theta_cur) return;
      const L2Component& c = comps_[static_cast<std::size_t>(cur.comp)];
      double fwd = cur.theta_hat + omega_;
      if (fwd >= 1.0) fwd -= 1.0;
      if (circle_dist(theta, fwd) <= kSyncTol) {
        if (cur.i + 1 < c.ell) {
          ++cur.i;
          cur.theta_cur = theta;
          if (++cur.since_anchor >= kReanchor) {
            cur.theta_hat = base_->step_n(cur.theta0, cur.i);
            cur.since_anchor = 0;
          } else {
            cur.theta_hat = fwd;
          }
          step_stage(cur);
          return;
        }
        // Tower top crossed: the next point re-enters the return set, and
        // rebinding there restores the exact base representative.
        if (try_bind_on_k(theta)) return;
      } else {
        double bwd = cur.theta_hat - omega_;
        if (bwd < 0.0) bwd += 1.0;
        if (circle_dist(theta, bwd) <= kSyncTol && cur.i > 0) {
          --cur.i;
          cur.theta_cur = theta;
          if (++cur.since_anchor >= kReanchor) {
            cur.theta_hat = base_->step_n(cur.theta0, cur.i);
            cur.since_anchor = 0;
          } else {
            cur.theta_hat = bwd;
          }
          rebuild_stage(cur);
          return;
        }
      }
    }
    cold_locate(theta);
  }

  BasePtr base_;
  ForcedLift f1_;
  std::vector<L2Component> comps_;
  double eps2_ = 0.0;
  std::uint64_t id_ = 0;
  double omega_ = 0.0;
  double klo_ = 0.0, klen_ = 0.0, ktol_ = 1e-9;
  std::int64_t cap_ = 0;
  std::vector<double> cuts_;
  double c0_ = 0.0;
  double lip_up_ = 1.0;
  double lip_lo_ = 1.0;
  double theta_lip_est_ = 0.0;
};

// ---------------------------------------------------------------------------
// Pipeline helpers.
// ---------------------------------------------------------------------------

// Optional coarse progress trace for long pipeline runs (stderr, off unless
// the ROTAFORGE_PROGRESS environment variable is set).
void progress(const std::string& msg) {
  static const bool on = std::getenv("ROTAFORGE_PROGRESS") != nullptr;
  if (!on) return;
  std::fprintf(stderr, "[linearize] %s\n", msg.c_str());
  std::fflush(stderr);
}

// Grow the orbit until the rotation-number error bound clears target: pilot
// run, one model-based jump (error ~ K/n), then doubling; refusing past
// max_n raises BudgetError.
RotationReport refine_rho(const ForcedLift& F, double theta0, double target,
                          std::int64_t pilot_n, std::int64_t max_n, DispGrid grid) {
  if (!(target > 0.0)) throw ConfigError("rho refinement target must be positive");
  RotationReport rep = rho(F, theta0, pilot_n, grid);
  if (rep.error_bound <= target) return rep;
  double model_k = rep.error_bound * static_cast<double>(pilot_n);
  double jump = 1.15 * model_k / target;
  std::int64_t n = pilot_n;
  if (jump > static_cast<double>(n)) n = static_cast<std::int64_t>(std::ceil(jump));
  for (;;) {
    if (n > max_n) n = max_n;
    rep = rho(F, theta0, n, grid);
    if (rep.error_bound <= target) return rep;
    if (n >= max_n)
      throw BudgetError("rotation refinement exceeds the orbit budget before reaching the "
                        "tower-scale error target");
    n *= 2;
  }
}

json arc_json(const Arc& a) { return json{{"lo", a.lo}, {"len", a.len}}; }

}  // namespace

// ---------------------------------------------------------------------------
// ConjugacyLift.
// ---------------------------------------------------------------------------

struct ConjugacyLift::Impl {
  ForcedLift f2;
  std::shared_ptr<const ReturnSet> K;
  double rho_step = 0.0;  // lift-level translation per step (unreduced)
  double rho_hat = 0.0;
  double rho_err = 0.0;
  std::int64_t d_span = 0;
  LayerPtr l1;  // depth-one blend layer (may be empty)
  LayerPtr l2;  // top-stratum interpolation layer (may be empty)
  double omega = 0.0;
  double klo = 0.0, klen = 0.0, ktol = 1e-9;
  std::int64_t cap = 0;
};

struct LinearizePipeline {
  using Impl = ConjugacyLift::Impl;  // re-export of the private state for this TU
  static ConjugacyLift wrap(std::shared_ptr<const ConjugacyLift::Impl> im) {
    ConjugacyLift H;
    H.impl_ = std::move(im);
    return H;
  }
};

using PipelineImpl = LinearizePipeline::Impl;

namespace {

// Backward first-entry walk into the return arc (tolerant membership,
// incremental with periodic exact re-anchoring).
ConjugacyLift::Tower locate_tower(const PipelineImpl& im, double theta) {
  double th = frac(theta);
  double cur = th;
  std::int64_t since = 0;
  for (std::int64_t k = 0; k <= im.cap; ++k) {
    double r = cur - im.klo;
    if (r < 0.0) r += 1.0;
    bool inside = (r >= 1.0 - im.ktol) || (r <= im.klen + im.ktol);
    if (inside) {
      double theta0 = (k == 0) ? th : frac(th + frac_mul(-k, im.omega));
      double r0 = theta0 - im.klo;
      if (r0 < 0.0) r0 += 1.0;
      if (!((r0 >= 1.0 - im.ktol) || (r0 <= im.klen + im.ktol))) theta0 = cur;
      return ConjugacyLift::Tower{theta0, k};
    }
    cur -= im.omega;
    if (cur < 0.0) cur += 1.0;
    if (++since >= kReanchor) {
      cur = frac(th + frac_mul(-(k + 1), im.omega));
      since = 0;
    }
  }
  throw CertificationError("conjugacy evaluation: backward walk exceeded the spanning cap");
}

}  // namespace

const ForcedLift& ConjugacyLift::f_prime() const { return impl_->f2; }
const ReturnSet& ConjugacyLift::K() const { return *impl_->K; }
double ConjugacyLift::rho_hat() const { return impl_->rho_hat; }
double ConjugacyLift::rho_err() const { return impl_->rho_err; }
std::int64_t ConjugacyLift::D() const { return impl_->d_span; }

ConjugacyLift::Tower ConjugacyLift::locate(double theta) const {
  return locate_tower(*impl_, theta);
}

double ConjugacyLift::eval(double theta, double x) const {
  Tower tc = locate_tower(*impl_, theta);
  if (tc.k == 0) return x;
  double y = x - static_cast<double>(tc.k) * impl_->rho_step;
  return impl_->f2.iterate(tc.theta0, y, tc.k);
}

double ConjugacyLift::eval_inverse(double theta, double y) const {
  Tower tc = locate_tower(*impl_, theta);
  if (tc.k == 0) return y;
  double x = impl_->f2.iterate_inverse(tc.theta0, y, tc.k);
  return x + static_cast<double>(tc.k) * impl_->rho_step;
}

FiberLift ConjugacyLift::fiber(double theta, int knots) const {
  int m = knots > 0 ? knots : impl_->f2.fiber_knots();
  if (m < 2 || (m & (m - 1)) != 0)
    throw ConfigError("conjugacy fiber: knot count must be a power of two >= 2");
  Tower tc = locate_tower(*impl_, theta);
  if (tc.k == 0) return FiberLift::identity(m);
  if (impl_->l1)
    static_cast<const TowerBlendLayer*>(impl_->l1.get())->prime_base(tc.theta0, 0, tc.k);
  std::vector<double> v(static_cast<std::size_t>(m) + 1);
  double shift = static_cast<double>(tc.k) * impl_->rho_step;
  for (int j = 0; j < m; ++j) v[static_cast<std::size_t>(j)] = static_cast<double>(j) / m - shift;
  impl_->f2.orbit_batch(tc.theta0, v.data(), static_cast<std::size_t>(m), tc.k);
  v[static_cast<std::size_t>(m)] = v[0] + 1.0;
  double max_slope = 0.0;
  for (int j = 0; j < m; ++j) {
    double s = (v[static_cast<std::size_t>(j) + 1] - v[static_cast<std::size_t>(j)]) * m;
    max_slope = std::max(max_slope, s);
  }
  return FiberLift(std::move(v), max_slope / m);
}

nlohmann::json ConjugacyLift::to_json() const {
  if (!impl_) return json{{"kind", "conjugacy-lift"}, {"empty", true}};
  return json{{"kind", "conjugacy-lift"},
              {"rho_hat", impl_->rho_hat},
              {"rho_err", impl_->rho_err},
              {"D", impl_->d_span},
              {"K", arc_json(impl_->K->arc())}};
}

// ---------------------------------------------------------------------------
// linearize.
// ---------------------------------------------------------------------------

LinearizeResult linearize(const ForcedLift& f, double eps, const LinearizeOptions& opts) {
  auto t_start = std::chrono::steady_clock::now();
  if (!(eps > 0.0) || !(eps < 0.25))
    throw ConfigError("linearize: the total budget eps must lie in (0, 1/4)");
  if (f.base().kind() != BaseSystem::Kind::rotation_1d)
    throw ConfigError("linearize: only 1-d rotation bases are supported");
  int d = opts.d;
  if (d < 1) throw ConfigError("linearize: stratification depth d must be >= 1");

  // --- Mode-lock verdict of the input (resolution gate pre-estimated from a
  // pilot rotation estimate; the default gate assumes a locked plateau).
  DispGrid cgrid{8, 4};
  RotationReport pre = rho(f, 0.0, opts.classify_n, cgrid);
  double delta = std::max(4.0 / static_cast<double>(opts.classify_n), 2.5 * pre.error_bound);
  progress("classifying the input map");
  LockClassification cls =
      classify(f, eps / 4.0, opts.classify_t_grid, opts.classify_n, delta, cgrid);
  ForcedLift F_work = f;
  double t_shift = 0.0;
  switch (cls.verdict) {
    case Verdict::ML:
      throw ConfigError(
          "linearize: the input is mode-locked; no conjugacy to the rigid rotation exists");
    case Verdict::UNDECIDED:
      throw CertificationError(
          "linearize: mode-lock classification is undecided at this resolution");
    case Verdict::SL_left:
    case Verdict::SL_right: {
      MlUlNeighbors nb =
          find_ml_ul_neighbors(f, eps / 4.0, opts.classify_t_grid, opts.classify_n);
      F_work = nb.ul;
      t_shift = nb.t_ul;
      break;
    }
    case Verdict::UL:
      break;
  }

  // --- Budget cascade and per-level constants.
  CascadeOptions copts = opts.cascade;
  if (copts.p_margin <= 0.0) copts.p_margin = 1.25;
  double tol_core = 10.0 * F_work.tol_grid();
  double rho_budget = opts.rho_budget_frac * tol_core;
  // Anchor-count floor: the final-snap residual scale 1/p must clear the
  // worst-case final tolerance (tol_core alone when the rotation refinement
  // overshoots its target) with a 2.5x margin.
  double tol_plan = tol_core + 0.5 * rho_budget;
  copts.p_floor = std::max(copts.p_floor,
                           static_cast<std::int64_t>(std::ceil(2.5 / tol_plan)));
  EpsilonCascade cascade;
  if (opts.cascade_override) {
    cascade = *opts.cascade_override;
    if (cascade.d != d) throw ConfigError("linearize: cascade override depth mismatch");
  } else {
    progress("estimating the budget cascade");
    std::vector<bool> active(static_cast<std::size_t>(d) + 2, false);
    active[static_cast<std::size_t>(d) + 1] = true;  // level d: return towers of K
    active[static_cast<std::size_t>(d)] = true;      // level d-1: depth-one orbits
    cascade = build_cascade(F_work, eps, d, active, copts);
  }
  std::int64_t n0 = opts.n0_override > 0 ? opts.n0_override : cascade.n0;
  double eps1 = cascade.level(d - 1).eps;
  double eps2 = cascade.level(d).eps;
  const PerturbConstants& c1 = cascade.level(d - 1).constants;
  const PerturbConstants& c2 = cascade.level(d).constants;

  // --- Return set and its exceptional strata.
  progress("building the return set");
  ReturnSet K = build_return_set(f.base_ptr(), n0, opts.strata);
  std::int64_t D = K.D();
  for (int i = 0; i + 1 < d; ++i) {
    if (!z_points(K, i).empty())
      throw CertificationError(
          "linearize: exceptional points of depth below d-1 survived the general-position "
          "search");
  }
  std::vector<double> z1 = z_points(K, d - 1);
  std::int64_t budget_eff = opts.budget > 0 ? opts.budget
                                            : std::max<std::int64_t>(1000000, 2 * D + 16);

  // --- Rotation number refined to the tower scale.
  progress("refining the rotation number");
  double rho_target = rho_budget / static_cast<double>(D);
  RotationReport rep =
      refine_rho(F_work, 0.0, rho_target, opts.rho_pilot_n, opts.rho_max_n, copts.grid);
  double rho_use = rep.rho_raw;

  auto make_concat_opts = [&](double level_eps, std::uint64_t seed) {
    ConcatOptions co;
    co.rho_hat = rho_use;
    co.rho_err = rep.error_bound;
    co.rho_slack = opts.rho_slack;
    co.p_override = opts.p_override > 0
                        ? opts.p_override
                        : schedule_p_override(level_eps, copts.p_margin, copts.p_floor);
    co.solver_tol = opts.solver_tol;
    co.place_tol = opts.place_tol;
    co.budget = budget_eff;
    co.verify_samples = opts.verify_samples;
    co.seed = seed;
    return co;
  };

  // --- Level d-1: straightened chains on the depth-one orbits, keyed to
  // exact base points and blended over vanishing collars.
  std::shared_ptr<const TowerBlendLayer> l1;
  double l1_res_cert = 0.0;
  std::vector<double> h2_list;
  if (!z1.empty()) {
    std::vector<SegmentPerturbation> segs;
    segs.reserve(z1.size());
    for (std::size_t i = 0; i < z1.size(); ++i) {
      progress("level " + std::to_string(d - 1) + ": chain " + std::to_string(i + 1) + "/" +
               std::to_string(z1.size()));
      segs.push_back(concatenate(F_work, F_work, eps1, c1, z1[i], n0,
                                 make_concat_opts(eps1, opts.seed + 101 + i)));
      l1_res_cert = std::max(l1_res_cert, segs.back().residual_certified());
      h2_list.push_back(segs.back().residual_certified());
    }
    l1 = std::make_shared<TowerBlendLayer>(f.base_ptr(), segs, 1e-3, 33);
  }
  ForcedLift F1 = l1 ? F_work.with_layer(l1) : F_work;

  // --- Level d: straightened return-tower chains at sampled bases,
  // interpolated across each constant-return component.
  std::vector<TowerArc> towers = return_towers(K);
  double klo = K.arc().lo;
  double ktol = K.boundary_tol();
  int S = opts.samples_per_arc;
  if (S < 2) throw ConfigError("linearize: samples_per_arc must be >= 2");

  struct CompView {
    Arc arc;
    std::int64_t ell = 0;
    bool inert = false;
    double res_cert = 0.0;
    std::vector<double> thetas;
    std::vector<double> offsets;
  };
  std::vector<CompView> views;
  std::vector<L2Component> comps;
  comps.reserve(towers.size());
  double l2_res_cert = 0.0;
  for (std::size_t ci = 0; ci < towers.size(); ++ci) {
    const TowerArc& tw = towers[ci];
    L2Component comp;
    comp.arc = tw.arc;
    comp.ell = tw.ell;
    comp.len = tw.arc.len;
    double cut = tw.arc.lo - klo;
    if (cut < 0.0) cut += 1.0;
    if (cut >= 1.0 - ktol) cut = 0.0;
    comp.cut = cut;
    comp.sliver = std::min(opts.sliver, comp.len / (4.0 * S));
    CompView view;
    view.arc = tw.arc;
    view.ell = tw.ell;
    int n_deg = 0;
    for (int s = 0; s < S; ++s) {
      double theta_s = frac(tw.arc.lo + comp.len * ((s + 0.5) / S));
      // The layer recomputes sample offsets with this exact arithmetic, so
      // queries at theta_s reproduce the solved chain bit for bit.
      double r = theta_s - klo;
      if (r < 0.0) r += 1.0;
      if (r >= 1.0 - ktol) r = 0.0;
      double u = r - cut;
      if (u < 0.0) u = 0.0;
      if (u > comp.len) u = comp.len;
      if (first_return(K, theta_s) != tw.ell)
        throw CertificationError(
            "linearize: sampled return time disagrees with its tower component");
      progress("level " + std::to_string(d) + ": component " + std::to_string(ci + 1) + "/" +
               std::to_string(towers.size()) + ", chain " + std::to_string(s + 1) + "/" +
               std::to_string(S));
      if (l1) l1->prime_base(theta_s, 0, tw.ell + 1);
      SegmentPerturbation seg =
          concatenate(F1, F_work, eps2, c2, theta_s, tw.ell,
                      make_concat_opts(eps2, opts.seed + 1000 * (ci + 1) + s));
      if (seg.degenerate()) ++n_deg;
      view.thetas.push_back(theta_s);
      view.offsets.push_back(u);
      view.res_cert = std::max(view.res_cert, seg.residual_certified());
      L2Sample smp;
      smp.theta0 = theta_s;
      smp.u = u;
      smp.seg = std::move(seg);
      comp.u.push_back(u);
      comp.samples.push_back(std::move(smp));
    }
    for (std::size_t j = 0; j + 1 < comp.u.size(); ++j)
      if (!(comp.u[j] < comp.u[j + 1]))
        throw CertificationError(
            "linearize: sample offsets within a tower component must increase");
    if (n_deg == S) {
      comp.inert = true;
    } else if (n_deg != 0) {
      throw CertificationError(
          "linearize: mixed degenerate and solved chains within one tower component");
    } else {
      const SegmentPerturbation& s0 = comp.samples.front().seg;
      comp.nc = s0.cancel_length();
      comp.nstage = static_cast<std::int64_t>(s0.stages().size());
      comp.n2 = comp.nstage > 0 ? s0.stages().front().length : 1;
      for (const L2Sample& smp : comp.samples) {
        const SegmentPerturbation& sg = smp.seg;
        bool ok = sg.cancel_length() == comp.nc &&
                  static_cast<std::int64_t>(sg.stages().size()) == comp.nstage &&
                  sg.length() == tw.ell;
        for (std::int64_t k = 0; ok && k < comp.nstage; ++k) {
          const Stage& st = sg.stages()[static_cast<std::size_t>(k)];
          ok = st.begin == comp.nc + k * comp.n2 && st.length == comp.n2;
        }
        if (!ok)
          throw CertificationError(
              "linearize: chain schedules disagree within one tower component");
        comp.s_off.push_back(sg.s());
        for (const Stage& st : sg.stages()) {
          comp.st_t.push_back(st.t);
          comp.st_lo.push_back(st.ylo0);
          comp.st_hi.push_back(st.yhi0);
        }
      }
      l2_res_cert = std::max(l2_res_cert, view.res_cert);
      h2_list.push_back(view.res_cert);
    }
    view.inert = comp.inert;
    views.push_back(std::move(view));
    comps.push_back(std::move(comp));
  }
  bool all_inert = true;
  for (const L2Component& c : comps)
    if (!c.inert) all_inert = false;
  std::shared_ptr<const ReturnInterpLayer> l2;
  if (!all_inert) l2 = std::make_shared<ReturnInterpLayer>(K, F1, std::move(comps), eps2);
  ForcedLift F2 = l2 ? F1.with_layer(l2) : F1;

  // --- Certified distance and the final tolerance.
  double d_certified = std::fabs(t_shift) + (l1 ? l1->c0_bound() : 0.0) +
                       (l2 ? l2->c0_bound() : 0.0);
  if (!(d_certified < eps))
    throw CertificationError("linearize: certified perturbation distance reached the budget");
  double tol_final = 10.0 * F2.tol_grid() + static_cast<double>(D) * rep.error_bound;

  auto im = std::make_shared<PipelineImpl>();
  im->f2 = F2;
  im->K = std::make_shared<ReturnSet>(K);
  im->rho_step = rho_use;
  im->rho_hat = rep.rho_hat;
  im->rho_err = rep.error_bound;
  im->d_span = D;
  im->l1 = l1;
  im->l2 = l2;
  im->omega = f.base().omega1();
  im->klo = klo;
  im->klen = K.arc().len;
  im->ktol = ktol;
  im->cap = K.search_cap();
  ConjugacyLift H = LinearizePipeline::wrap(im);

  // --- Verification: certified residuals, measured tower sweeps, midpoint
  // interpolation checks, full-resolution showcase towers, and the conjugacy
  // identity at random base points.
  progress("verification: tower sweeps");
  double h2_certified = std::max(l1_res_cert, l2_res_cert);
  if (!(h2_certified < tol_final))
    throw CertificationError("linearize: certified tower residual exceeds the final tolerance");

  int V = std::max(opts.verify_samples, 2);
  auto sweep_residual = [&](double theta0, std::int64_t n, int count) {
    std::vector<double> w(static_cast<std::size_t>(count));
    for (int j = 0; j < count; ++j) w[static_cast<std::size_t>(j)] = (j + 0.5) / count;
    std::vector<double> w0 = w;
    F2.orbit_batch(theta0, w.data(), w.size(), n);
    double target = static_cast<double>(n) * rho_use;
    double res = 0.0;
    for (int j = 0; j < count; ++j)
      res = std::max(res, std::fabs(w[static_cast<std::size_t>(j)] -
                                    w0[static_cast<std::size_t>(j)] - target));
    return res;
  };
  double h2_measured = 0.0;
  for (double z : z1) h2_measured = std::max(h2_measured, sweep_residual(z, n0, V));
  for (const CompView& vw : views)
    for (double th : vw.thetas)
      h2_measured = std::max(h2_measured, sweep_residual(th, vw.ell, V));
  if (!(h2_measured < tol_final))
    throw CertificationError("linearize: measured tower residual exceeds the final tolerance");

  progress("verification: midpoint towers");
  double midpoint_max = 0.0;
  for (const CompView& vw : views) {
    if (vw.inert) continue;
    for (std::size_t s = 0; s + 1 < vw.offsets.size(); ++s) {
      double theta_m = frac(vw.arc.lo + 0.5 * (vw.offsets[s] + vw.offsets[s + 1]));
      midpoint_max = std::max(midpoint_max, sweep_residual(theta_m, vw.ell, 8));
    }
  }
  if (!(midpoint_max <= opts.midpoint_gate))
    throw CertificationError(
        "linearize: interpolated tower residual exceeded the sanity gate between samples");

  progress("verification: showcase towers");
  json showcase = json::array();
  {
    std::vector<std::pair<double, std::int64_t>> pool;
    for (const CompView& vw : views)
      if (!vw.inert)
        for (double th : vw.thetas) pool.emplace_back(th, vw.ell);
    int count = std::min<int>(opts.showcase_towers, static_cast<int>(pool.size()));
    int m = F2.fiber_knots();
    for (int i = 0; i < count; ++i) {
      auto [theta0, n] = pool[static_cast<std::size_t>(i) * pool.size() /
                              std::max<std::size_t>(1, static_cast<std::size_t>(count))];
      std::vector<double> w(static_cast<std::size_t>(m));
      for (int j = 0; j < m; ++j) w[static_cast<std::size_t>(j)] = static_cast<double>(j) / m;
      F2.orbit_batch(theta0, w.data(), w.size(), n);
      double target = static_cast<double>(n) * rho_use;
      double res = 0.0, gap = 0.0;
      for (int j = 0; j < m; ++j) {
        res = std::max(res,
                       std::fabs(w[static_cast<std::size_t>(j)] - static_cast<double>(j) / m -
                                 target));
        double next = (j + 1 < m) ? w[static_cast<std::size_t>(j) + 1] : w[0] + 1.0;
        gap = std::max(gap, next - w[static_cast<std::size_t>(j)]);
      }
      double in_y = res + gap + 1.0 / m;
      showcase.push_back(json{{"theta0", theta0},
                              {"ell", n},
                              {"residual_measured", res},
                              {"residual_in_y", in_y}});
      h2_measured = std::max(h2_measured, res);
    }
  }
  if (!(h2_measured < tol_final))
    throw CertificationError("linearize: measured tower residual exceeds the final tolerance");

  progress("verification: conjugacy identity");
  double conj_residual = 0.0;
  {
    Rng rng(opts.seed ^ 0xc0837ULL);
    auto conj_at = [&](double theta, double x) {
      double lhs = F2.evaluate(theta, H.eval(theta, x));
      double rhs = H.eval(f.base().step(theta), x + rho_use);
      return std::fabs(lhs - rhs);
    };
    for (int c = 0; c < opts.conj_samples; ++c) {
      double theta = rng.next_double();
      for (int xi = 0; xi < 8; ++xi)
        conj_residual = std::max(conj_residual, conj_at(theta, (xi + 0.5) / 8.0));
    }
    for (const CompView& vw : views) {
      if (vw.thetas.empty()) continue;
      double top = f.base().step_n(vw.thetas.front(), vw.ell - 1);
      for (int xi = 0; xi < 4; ++xi)
        conj_residual = std::max(conj_residual, conj_at(top, (xi + 0.5) / 4.0));
    }
  }
  if (!(conj_residual < tol_final))
    throw CertificationError("linearize: sampled conjugacy residual exceeds the final tolerance");

  RotationReport rver = rho(F2, 0.0, opts.classify_n, cgrid);
  if (std::fabs(rver.rho_raw - rho_use) > rver.error_bound + rep.error_bound + 1e-12)
    throw CertificationError("linearize: the perturbation failed to preserve the rotation number");

  double runtime =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  json towers_j = json::array();
  for (const CompView& vw : views)
    towers_j.push_back(json{{"lo", vw.arc.lo},
                            {"len", vw.arc.len},
                            {"ell", vw.ell},
                            {"samples", vw.thetas.size()},
                            {"inert", vw.inert},
                            {"residual_certified", vw.res_cert}});
  json distances{{"input_translate", std::fabs(t_shift)}, {"total", d_certified}};
  distances["level_" + std::to_string(d - 1)] = l1 ? l1->c0_bound() : 0.0;
  distances["level_" + std::to_string(d)] = l2 ? l2->c0_bound() : 0.0;
  json constants{{"kappa1", c2.kappa1},
                 {"N1", c2.N1},
                 {"kappa2", c2.kappa2},
                 {"N2", c2.N2},
                 {"kappa3", json::array({c1.kappa3, c2.kappa3})},
                 {"N3", json::array({c1.N3, c2.N3})},
                 {"n0", n0}};
  json report{
      {"v", 1},
      {"kind", "linearize"},
      {"seed", opts.seed},
      {"epsilon", eps},
      {"d", d},
      {"input", json{{"verdict", verdict_name(cls.verdict)}, {"t_shift", t_shift}}},
      {"rho_hat", rep.rho_hat},
      {"rho", json{{"hat", rep.rho_hat},
                   {"raw", rep.rho_raw},
                   {"err", rep.error_bound},
                   {"n", rep.n_orbit}}},
      {"cascade", cascade.to_json()["levels"]},
      {"constants", std::move(constants)},
      {"distances", std::move(distances)},
      {"H2_residuals", h2_list},
      {"return_set",
       json{{"K", arc_json(K.arc())}, {"n0", n0}, {"D", D}, {"towers", std::move(towers_j)}}},
      {"levels",
       json{{"depth_one", l1 ? json{{"points", z1.size()},
                                    {"eps", eps1},
                                    {"residual_certified", l1_res_cert},
                                    {"layer", l1->to_json()}}
                             : json()},
            {"top", json{{"eps", eps2},
                         {"residual_certified", l2_res_cert},
                         {"layer", l2 ? l2->to_json() : json()}}}}},
      {"verification", json{{"tol_final", tol_final},
                            {"d_certified", d_certified},
                            {"h2_certified", h2_certified},
                            {"h2_measured", h2_measured},
                            {"midpoint_max", midpoint_max},
                            {"conj_residual", conj_residual},
                            {"rho_check_err", std::fabs(rver.rho_raw - rho_use)},
                            {"showcase", std::move(showcase)}}},
      {"conjugacy_residual", conj_residual},
      {"runtime", runtime}};

  LinearizeResult out;
  out.f_prime = F2;
  out.H = H;
  out.epsilon = eps;
  out.rho_hat = rep.rho_hat;
  out.rho_err = rep.error_bound;
  out.tol_final = tol_final;
  out.d_certified = d_certified;
  out.h2_certified = h2_certified;
  out.h2_measured = h2_measured;
  out.conj_residual = conj_residual;
  out.report_json = std::make_shared<const json>(std::move(report));
  return out;
}

nlohmann::json LinearizeResult::report() const {
  return report_json ? *report_json : nlohmann::json::object();
}

// ---------------------------------------------------------------------------
// FiberConjugacy.
// ---------------------------------------------------------------------------

FiberConjugacy FiberConjugacy::random(std::uint64_t seed, double strength, int harmonics) {
  if (!(strength > 0.0) || !(strength < 1.0))
    throw ConfigError("fiber conjugacy: strength must lie in (0, 1)");
  if (harmonics < 1) throw ConfigError("fiber conjugacy: at least one harmonic required");
  Rng rng(seed);
  double eff = strength * rng.uniform(0.6, 1.0);
  std::vector<double> w(static_cast<std::size_t>(harmonics));
  double sw = 0.0;
  for (double& wi : w) {
    wi = rng.uniform(0.2, 1.0);
    sw += wi;
  }
  FiberConjugacy h;
  h.c.resize(w.size());
  h.k.resize(w.size());
  h.phi.resize(w.size());
  for (std::size_t j = 0; j < w.size(); ++j) {
    h.c[j] = eff * w[j] / sw;
    h.k[j] = static_cast<int>(rng.next_below(9)) - 4;
    h.phi[j] = rng.next_double();
  }
  return h;
}

double FiberConjugacy::eval(double theta, double x) const {
  double s = x;
  for (std::size_t j = 0; j < c.size(); ++j) {
    double fj = static_cast<double>(j + 1);
    s += c[j] / (kTwoPi * fj) * std::sin(kTwoPi * (fj * x + k[j] * theta + phi[j]));
  }
  return s;
}

double FiberConjugacy::invert(double theta, double y) const {
  double pad = c0_bound() + 1e-9;
  return invert_monotone([&](double x) { return eval(theta, x); }, y, y - pad, y + pad, 1e-13);
}

double FiberConjugacy::lip_upper() const {
  double s = 0.0;
  for (double cj : c) s += std::fabs(cj);
  return 1.0 + s;
}

double FiberConjugacy::lip_lower() const {
  double s = 0.0;
  for (double cj : c) s += std::fabs(cj);
  return 1.0 - s;
}

double FiberConjugacy::c0_bound() const {
  double s = 0.0;
  for (std::size_t j = 0; j < c.size(); ++j) s += std::fabs(c[j]) / (kTwoPi * (j + 1));
  return s;
}

// ---------------------------------------------------------------------------
// Mode-locking kernels.
// ---------------------------------------------------------------------------

namespace {

// Continued-fraction convergents p/q of frac(x) with q <= q_max.
std::vector<std::pair<std::int64_t, std::int64_t>> cf_convergents(double x, std::int64_t q_max) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  out.emplace_back(0, 1);
  std::int64_t p0 = 1, q0 = 0, p1 = 0, q1 = 1;
  double r = frac(x);
  for (int it = 0; it < 48 && r > 1e-15; ++it) {
    double inv = 1.0 / r;
    double af = std::floor(inv);
    if (af > 1e15) break;
    std::int64_t a = static_cast<std::int64_t>(af);
    r = inv - af;
    std::int64_t p2 = a * p1 + p0;
    std::int64_t q2 = a * q1 + q0;
    if (q2 > q_max) break;
    out.emplace_back(p2, q2);
    p0 = p1;
    q0 = q1;
    p1 = p2;
    q1 = q2;
  }
  return out;
}

// The fiber kernel of the densified map H . (g x Q) . H^{-1}: conjugacy rows
// H_theta materialized on a knot grid, with a fast orbit cursor that rides
// one row along the base orbit through the exact recursion
// H_{g theta} = F'_theta . H_theta . T_{-rho}.  The realized n-step chain
// telescopes to row_n . Q^n . row_0^{-1} exactly, so mode-locking of Q is
// preserved bit for bit by the cursor realization.
class ConjProductKernel final : public FiberKernel {
 public:
  ConjProductKernel(ConjugacyLift H, ForcedLift f2, std::int64_t p, std::int64_t q, double a,
                    int row_knots, double lip_up_hint, double lip_lo_hint)
      : H_(std::move(H)),
        f2_(std::move(f2)),
        p_(p),
        q_(q),
        a_(a),
        m_(row_knots),
        lip_up_(std::max(1.0, lip_up_hint)),
        lip_lo_(std::min(1.0, std::max(1e-6, lip_lo_hint))) {
    if (m_ < 2 || (m_ & (m_ - 1)) != 0)
      throw ConfigError("product kernel: row knots must be a power of two >= 2");
    if (!(std::fabs(a_) < 1.0))
      throw ConfigError("product kernel: the locked amplitude must satisfy |a| < 1");
    pq_ = static_cast<double>(p_) / static_cast<double>(q_);
    amp_ = a_ / (kTwoPi * static_cast<double>(q_));
    rho_ = H_.rho_hat();
  }

  double q_eval(double u) const {
    double fl = std::floor(u);
    double uf = u - fl;
    return fl + uf + pq_ + amp_ * std::sin(kTwoPi * frac(static_cast<double>(q_) * uf));
  }
  double q_invert(double w) const {
    double pad = std::fabs(amp_) + 1e-9;
    return invert_monotone([this](double u) { return q_eval(u); }, w, w - pq_ - pad,
                           w - pq_ + pad, 1e-13);
  }

  const ForcedLift& f_prime() const { return f2_; }
  double rho_step() const { return rho_; }

  // Cached conjugacy row at an exact base point.
  std::shared_ptr<const FiberLift> row(double theta) const {
    double th = frac(theta);
    std::uint64_t key = theta_key(th);
    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = map_.find(key);
      if (it != map_.end()) {
        lru_.splice(lru_.begin(), lru_, it->second);
        return it->second->second;
      }
    }
    auto fresh = std::make_shared<const FiberLift>(H_.fiber(th, m_));
    std::lock_guard<std::mutex> lk(mu_);
    auto it = map_.find(key);
    if (it != map_.end()) {
      lru_.splice(lru_.begin(), lru_, it->second);
      return it->second->second;
    }
    lru_.emplace_front(key, fresh);
    map_[key] = lru_.begin();
    if (map_.size() > kRowCacheCap) {
      map_.erase(lru_.back().first);
      lru_.pop_back();
    }
    return fresh;
  }

  double eval(double theta, double x) const override {
    auto r0 = row(theta);
    auto r1 = row(f2_.base().step(theta));
    return r1->eval(q_eval(r0->invert(x)));
  }
  void eval_many(double theta, double* xs, std::size_t n) const override {
    auto r0 = row(theta);
    auto r1 = row(f2_.base().step(theta));
    for (std::size_t i = 0; i < n; ++i) xs[i] = r1->eval(q_eval(r0->invert(xs[i])));
  }
  double invert(double theta, double z, double /*tol*/) const override {
    auto r0 = row(theta);
    auto r1 = row(f2_.base().step(theta));
    return r0->eval(q_invert(r1->invert(z)));
  }

  std::unique_ptr<OrbitCursor> make_cursor(const BaseSystem& base, double theta0) const override;

  double x_lip_upper() const override { return lip_up_ * (1.0 + std::fabs(a_)) / lip_lo_; }
  double x_lip_lower() const override { return lip_lo_ * (1.0 - std::fabs(a_)) / lip_up_; }
  // The conjugacy rows jump across tower seams, so no useful certified
  // theta-direction bound exists; report a crude scale estimate.
  double theta_lip() const override { return 1e6; }
  bool theta_lip_certified() const override { return false; }
  double tol() const override { return lip_up_ / static_cast<double>(m_) + 1e-12; }
  std::string kind() const override { return "conjugated-product"; }
  void to_json(nlohmann::json& j) const override {
    j = json{{"kind", "conjugated-product"}, {"p", p_}, {"q", q_}, {"a", a_}, {"rows", m_}};
  }

 private:
  static constexpr std::size_t kRowCacheCap = 48;

  ConjugacyLift H_;
  ForcedLift f2_;
  std::int64_t p_ = 0, q_ = 1;
  double a_ = 0.0;
  int m_ = 1024;
  double lip_up_ = 1.0, lip_lo_ = 1.0;
  double pq_ = 0.0, amp_ = 0.0, rho_ = 0.0;

  mutable std::mutex mu_;
  using LruList = std::list<std::pair<std::uint64_t, std::shared_ptr<const FiberLift>>>;
  mutable LruList lru_;
  mutable std::unordered_map<std::uint64_t, LruList::iterator> map_;
};

// Orbit cursor of the product kernel: one row of knot values advanced by
// mapping the values through F' (the knot grid drifts by rho per step, so
// every stored value stays an exact orbit point of the conjugacy).
class ProductRowCursor final : public OrbitCursor {
 public:
  ProductRowCursor(const ConjProductKernel& k, const BaseSystem& base, double theta0)
      : k_(k), base_(base), theta0_(frac(theta0)) {
    v_ = k_.row(theta0_)->knots();
  }

  void step(double* ys, std::size_t n) override {
    double theta = base_.step_n(theta0_, step_);
    for (std::size_t i = 0; i < n; ++i) ys[i] = k_.q_eval(row_invert(ys[i]));
    k_.f_prime().evaluate_many(theta, v_.data(), v_.size());
    v_.back() = v_.front() + 1.0;
    u0_ = frac(u0_ + k_.rho_step());
    ++step_;
    for (std::size_t i = 0; i < n; ++i) ys[i] = row_eval(ys[i]);
  }

  double theta() const override { return base_.step_n(theta0_, step_); }

 private:
  double row_eval(double x) const {
    std::int64_t m = static_cast<std::int64_t>(v_.size()) - 1;
    double t = (x - u0_) * static_cast<double>(m);
    double fl = std::floor(t);
    std::int64_t jf = static_cast<std::int64_t>(fl);
    std::int64_t wrap = jf >= 0 ? jf / m : -((-jf + m - 1) / m);
    std::int64_t j = jf - wrap * m;
    double s = t - fl;
    const double* v = v_.data();
    return v[j] + s * (v[j + 1] - v[j]) + static_cast<double>(wrap);
  }

  double row_invert(double y) const {
    std::int64_t m = static_cast<std::int64_t>(v_.size()) - 1;
    double w = std::floor(y - v_.front());
    double yr = y - w;
    if (yr < v_.front()) {
      yr += 1.0;
      w -= 1.0;
    } else if (yr >= v_.front() + 1.0) {
      yr -= 1.0;
      w += 1.0;
    }
    auto it = std::upper_bound(v_.begin(), v_.end(), yr);
    std::int64_t j = std::clamp<std::int64_t>((it - v_.begin()) - 1, 0, m - 1);
    double den = v_[static_cast<std::size_t>(j) + 1] - v_[static_cast<std::size_t>(j)];
    double s = den > 0.0 ? (yr - v_[static_cast<std::size_t>(j)]) / den : 0.0;
    return u0_ + (static_cast<double>(j) + s) / static_cast<double>(m) + w;
  }

  const ConjProductKernel& k_;
  const BaseSystem& base_;
  double theta0_ = 0.0;
  std::int64_t step_ = 0;
  std::vector<double> v_;
  double u0_ = 0.0;
};

std::unique_ptr<OrbitCursor> ConjProductKernel::make_cursor(const BaseSystem& base,
                                                            double theta0) const {
  return std::make_unique<ProductRowCursor>(*this, base, theta0);
}

// h . F . h^{-1} as a fiber kernel; the inner lift's fast orbit path is
// preserved by keeping orbit values in inner coordinates between steps.
class ConjWrapKernel final : public FiberKernel {
 public:
  ConjWrapKernel(FiberConjugacy h, ForcedLift inner)
      : h_(std::move(h)), inner_(std::move(inner)) {
    double hs = 0.0;
    for (std::size_t j = 0; j < h_.c.size(); ++j)
      hs += std::fabs(h_.c[j]) * std::fabs(static_cast<double>(h_.k[j])) /
            static_cast<double>(j + 1);
    theta_slope_ = hs;
  }

  const FiberConjugacy& h() const { return h_; }
  const ForcedLift& inner() const { return inner_; }

  double eval(double theta, double x) const override {
    double u = h_.invert(theta, x);
    double v = inner_.evaluate(theta, u);
    return h_.eval(inner_.base().step(theta), v);
  }
  void eval_many(double theta, double* xs, std::size_t n) const override {
    for (std::size_t i = 0; i < n; ++i) xs[i] = h_.invert(theta, xs[i]);
    inner_.evaluate_many(theta, xs, n);
    double tn = inner_.base().step(theta);
    for (std::size_t i = 0; i < n; ++i) xs[i] = h_.eval(tn, xs[i]);
  }
  double invert(double theta, double z, double /*tol*/) const override {
    double v = h_.invert(inner_.base().step(theta), z);
    double u = inner_.evaluate_inverse(theta, v);
    return h_.eval(theta, u);
  }

  std::unique_ptr<OrbitCursor> make_cursor(const BaseSystem& base, double theta0) const override;

  double x_lip_upper() const override {
    return h_.lip_upper() * inner_.x_lip_upper() / h_.lip_lower();
  }
  double x_lip_lower() const override {
    return h_.lip_lower() * inner_.x_lip_lower() / h_.lip_upper();
  }
  double theta_lip() const override { return 2.0 * theta_slope_ + inner_.theta_lip(); }
  bool theta_lip_certified() const override { return false; }
  double tol() const override { return inner_.kernel()->tol() + 1e-12; }
  std::string kind() const override { return "conjugated"; }
  void to_json(nlohmann::json& j) const override {
    j = json{{"kind", "conjugated"},
             {"harmonics", h_.c.size()},
             {"inner", inner_.kernel()->kind()}};
  }

 private:
  FiberConjugacy h_;
  ForcedLift inner_;
  double theta_slope_ = 0.0;
};

class WrapCursor final : public OrbitCursor {
 public:
  WrapCursor(const ConjWrapKernel& k, const BaseSystem& base, double theta0)
      : k_(k), base_(base), theta0_(frac(theta0)) {
    inner_cur_ = k_.inner().kernel()->make_cursor(base, theta0_);
  }

  void step(double* ys, std::size_t n) override {
    double theta = base_.step_n(theta0_, step_);
    // Into inner coordinates; when the caller left the values untouched
    // since our last step, h^-1 . h cancels exactly and the cached inner
    // values are reused.
    if (snap_.size() == n && std::equal(snap_.begin(), snap_.end(), ys)) {
      std::copy(us_.begin(), us_.end(), ys);
    } else {
      for (std::size_t i = 0; i < n; ++i) ys[i] = k_.h().invert(theta, ys[i]);
    }
    const ForcedLift& il = k_.inner();
    if (inner_cur_) {
      inner_cur_->step(ys, n);
      for (const auto& layer : il.layers())
        if (layer->active_at(theta)) layer->post_eval_many(theta, ys, n);
      if (il.t_offset() != 0.0)
        for (std::size_t i = 0; i < n; ++i) ys[i] += il.t_offset();
    } else {
      il.evaluate_many(theta, ys, n);
    }
    ++step_;
    double tn = base_.step_n(theta0_, step_);
    us_.assign(ys, ys + n);
    for (std::size_t i = 0; i < n; ++i) ys[i] = k_.h().eval(tn, ys[i]);
    snap_.assign(ys, ys + n);
  }

  double theta() const override { return base_.step_n(theta0_, step_); }

 private:
  const ConjWrapKernel& k_;
  const BaseSystem& base_;
  double theta0_ = 0.0;
  std::int64_t step_ = 0;
  std::unique_ptr<OrbitCursor> inner_cur_;
  std::vector<double> us_, snap_;
};

std::unique_ptr<OrbitCursor> ConjWrapKernel::make_cursor(const BaseSystem& base,
                                                         double theta0) const {
  return std::make_unique<WrapCursor>(*this, base, theta0);
}

}  // namespace

ForcedLift conjugate_lift(const FiberConjugacy& h, const ForcedLift& inner) {
  return ForcedLift(inner.base_ptr(), std::make_shared<ConjWrapKernel>(h, inner),
                    inner.fiber_knots());
}

// ---------------------------------------------------------------------------
// mode_lock_densify.
// ---------------------------------------------------------------------------

ModeLockResult mode_lock_densify(const ForcedLift& f, double eps, const ModeLockOptions& opts) {
  auto t_start = std::chrono::steady_clock::now();
  if (!(eps > 0.0) || !(eps < 0.5))
    throw ConfigError("mode_lock_densify: eps must lie in (0, 1/2)");

  LinearizeResult lin;
  if (opts.reuse != nullptr) {
    const LinearizeResult& R = *opts.reuse;
    if (R.H.empty())
      throw ConfigError("mode_lock_densify: the reused linearization is empty");
    bool base_ok = R.f_prime.base().kind() == f.base().kind() &&
                   R.f_prime.base().omega1() == f.base().omega1();
    if (!base_ok || !(R.epsilon <= eps / 2.0 + 1e-15) || !(R.d_certified < R.epsilon))
      throw ConfigError(
          "mode_lock_densify: the reused linearization does not meet the eps/2 precondition");
    lin = R;
  } else {
    lin = linearize(f, eps / 2.0, opts.lin);
  }
  const ConjugacyLift& H = lin.H;

  // Conjugacy distortion estimated from sampled tower fibers, with margins.
  double lu = 1.0, llo = 1.0;
  for (int r = 0; r < opts.lip_towers; ++r) {
    FiberLift fl = H.fiber(frac((r + 0.5) / opts.lip_towers), opts.lip_knots);
    lu = std::max(lu, fl.lip_upper());
    llo = std::min(llo, fl.lip_lower());
  }
  double lip_up_est = lu * 1.25;
  double lip_lo_est = llo * 0.8;

  double room = eps - lin.d_certified - lin.tol_final;
  if (!(room > 0.0))
    throw CertificationError(
        "mode_lock_densify: no distance budget remains after linearization");
  double B = opts.safety * room / lip_up_est;

  // Tongue selection: convergents of the rotation number, predicted
  // surviving plateau A * lip_lower maximized within the budget.
  double x = H.rho_hat();
  std::int64_t best_p = 0, best_q = 0;
  double best_pred = -1.0, best_A = 0.0, best_dist = 0.0;
  auto consider = [&](std::int64_t p, std::int64_t q) {
    if (q < 1 || q > opts.q_max) return;
    double dist = std::fabs(x - static_cast<double>(p) / static_cast<double>(q));
    double A = std::min(opts.a_cap / (kTwoPi * static_cast<double>(q)), B - dist);
    if (!(A > 0.0)) return;
    double pred = A * lip_lo_est;
    if (pred > best_pred) {
      best_pred = pred;
      best_p = p;
      best_q = q;
      best_A = A;
      best_dist = dist;
    }
  };
  if (opts.force_pq) {
    consider(opts.force_pq->first, opts.force_pq->second);
    if (best_q == 0)
      throw CertificationError(
          "mode_lock_densify: the forced tongue is outside the distance budget");
  } else {
    for (auto [p, q] : cf_convergents(x, opts.q_max)) consider(p, q);
  }
  if (best_q == 0 || !(best_pred >= opts.plateau_floor)) {
    std::ostringstream os;
    os << "mode_lock_densify: no admissible tongue clears the plateau floor "
       << opts.plateau_floor << " (best predicted half-width " << std::max(0.0, best_pred)
       << " at " << best_p << "/" << std::max<std::int64_t>(best_q, 1) << ", distance budget "
       << B << ", conjugacy distortion [" << lip_lo_est << ", " << lip_up_est << "])";
    throw CertificationError(os.str());
  }
  double A = opts.force_a ? *opts.force_a : best_A;
  if (!(A >= 0.0) || !(A <= opts.a_cap / (kTwoPi * static_cast<double>(best_q)) + 1e-15))
    throw ConfigError("mode_lock_densify: forced amplitude outside the admissible range");
  double a = A * kTwoPi * static_cast<double>(best_q);
  double plateau_pred = A * lip_lo_est;

  auto kern = std::make_shared<ConjProductKernel>(H, lin.f_prime, best_p, best_q, a,
                                                  opts.row_knots, lip_up_est, lip_lo_est);
  ForcedLift f2(f.base_ptr(), kern, f.fiber_knots());

  double d_certified = lin.d_certified + lin.tol_final + lip_up_est * (best_dist + A);
  if (!(d_certified < eps))
    throw CertificationError("mode_lock_densify: certified distance reached the budget");

  // Plain sampled distance along one shared orbit (the cursor realization).
  double d_sampled = 0.0;
  {
    std::size_t ny = 33;
    std::vector<double> ys(ny), prev(ny), fv(ny);
    for (std::size_t i = 0; i < ny; ++i) ys[i] = static_cast<double>(i) / 32.0;
    prev = ys;
    f2.orbit_batch(0.0, ys.data(), ny, 64, nullptr,
                   [&](std::int64_t k, const double* cur) {
                     double theta = f.base().step_n(0.0, k - 1);
                     fv = prev;
                     f.evaluate_many(theta, fv.data(), ny);
                     for (std::size_t i = 0; i < ny; ++i)
                       d_sampled = std::max(d_sampled, std::fabs(cur[i] - fv[i]));
                     std::copy(cur, cur + ny, prev.begin());
                   });
  }

  // Mode-lock verification of the densified map.
  DispGrid cgrid{8, 4};
  RotationReport r0 = rho(f2, 0.0, opts.classify_n, cgrid);
  double delta = std::max(4.0 / static_cast<double>(opts.classify_n), 2.5 * r0.error_bound);
  double eps_bar = std::min(0.45, 8.0 * std::max(plateau_pred, opts.plateau_floor));
  LockClassification verdict =
      classify(f2, eps_bar, opts.classify_t_grid, opts.classify_n, delta, cgrid);
  if (verdict.verdict != Verdict::ML)
    throw CertificationError(
        std::string("mode_lock_densify: the densified map failed mode-lock verification "
                    "(verdict ") +
        verdict_name(verdict.verdict) + ")");

  double runtime =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  ModeLockResult out;
  out.f_second = f2;
  out.lin = lin;
  out.p = best_p;
  out.q = best_q;
  out.a = a;
  out.plateau_q = A;
  out.plateau_pred = plateau_pred;
  out.lip_upper_est = lip_up_est;
  out.lip_lower_est = lip_lo_est;
  out.d_certified = d_certified;
  out.d_sampled = d_sampled;
  out.verdict = verdict;

  json report{{"v", 1},
              {"kind", "mode-lock"},
              {"seed", opts.seed},
              {"epsilon", eps},
              {"tongue", json{{"p", best_p},
                              {"q", best_q},
                              {"a", a},
                              {"distance", best_dist},
                              {"plateau_q", A},
                              {"plateau_pred", plateau_pred}}},
              {"conjugacy_lip", json{{"lower", lip_lo_est}, {"upper", lip_up_est}}},
              {"distance", json{{"certified", d_certified}, {"sampled", d_sampled}}},
              {"verdict", json{{"name", verdict_name(verdict.verdict)},
                               {"plateau_lo", verdict.plateau_lo},
                               {"plateau_hi", verdict.plateau_hi},
                               {"delta_rho", verdict.delta_rho}}},
              {"rho_f_second", json{{"hat", r0.rho_hat}, {"err", r0.error_bound}}},
              {"linearize", json{{"epsilon", lin.epsilon},
                                 {"tol_final", lin.tol_final},
                                 {"d_certified", lin.d_certified},
                                 {"h2_certified", lin.h2_certified},
                                 {"reused", opts.reuse != nullptr}}},
              {"runtime", runtime}};
  out.report_json = std::make_shared<const json>(std::move(report));
  return out;
}

nlohmann::json ModeLockResult::report() const {
  return report_json ? *report_json : nlohmann::json::object();
}

}  // namespace rotaforge
