#include "rotaforge/strata.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "rotaforge/errors.hpp"
#include "rotaforge/util.hpp"

namespace rotaforge {

struct ReturnSetCache {
  std::mutex mutex;
  std::vector<ArcUnion> w;
  std::vector<bool> ready;
};

namespace {

constexpr double kMergeEps = 1e-15;

double reduce(double x) {
  double r = x - std::floor(x);
  if (r >= 1.0) r -= 1.0;
  if (r < 0.0) r += 1.0;
  return r;
}

// Position of x relative to the arc start, in [0, 1).
double rel_pos(double x, double lo) {
  double d = x - lo;
  d -= std::floor(d);
  if (d >= 1.0) d -= 1.0;
  if (d < 0.0) d += 1.0;
  return d;
}

bool arc_contains(const Arc& a, double x, double tol) {
  const double d = rel_pos(x, a.lo);
  return d <= a.len + tol || d >= 1.0 - tol;
}

}  // namespace

// ---------------------------------------------------------------------------
// ArcUnion
// ---------------------------------------------------------------------------

ArcUnion::ArcUnion(std::vector<Arc> arcs) {
  std::vector<Arc> in;
  in.reserve(arcs.size());
  for (Arc a : arcs) {
    if (!(a.len >= 0.0) || !std::isfinite(a.lo) || !std::isfinite(a.len))
      throw ConfigError("arc union: arcs need finite lo and len >= 0");
    if (a.len >= 1.0 - kMergeEps) {
      full_ = true;
      arcs_.clear();
      return;
    }
    a.lo = reduce(a.lo);
    in.push_back(a);
  }
  if (in.empty()) return;
  std::sort(in.begin(), in.end(), [](const Arc& x, const Arc& y) { return x.lo < y.lo; });
  std::vector<Arc> out;
  Arc cur = in.front();
  for (std::size_t i = 1; i < in.size(); ++i) {
    const Arc& nx = in[i];
    if (nx.lo <= cur.lo + cur.len + kMergeEps) {
      cur.len = std::max(cur.len, nx.lo + nx.len - cur.lo);
    } else {
      out.push_back(cur);
      cur = nx;
    }
  }
  out.push_back(cur);
  // Wraparound: the last arc may reach past 1 into the leading ones.
  while (out.size() > 1) {
    Arc& last = out.back();
    const Arc& first = out.front();
    if (last.lo + last.len - 1.0 >= first.lo - kMergeEps) {
      last.len = std::max(last.len, first.lo + first.len + 1.0 - last.lo);
      out.erase(out.begin());
    } else {
      break;
    }
  }
  for (const Arc& a : out) {
    if (a.len >= 1.0 - kMergeEps) {
      full_ = true;
      arcs_.clear();
      return;
    }
  }
  arcs_ = std::move(out);
}

ArcUnion ArcUnion::full_circle() {
  ArcUnion u;
  u.full_ = true;
  return u;
}

bool ArcUnion::contains(double x, double tol) const {
  if (full_) return true;
  if (arcs_.empty()) return false;
  x = reduce(x);
  const auto it = std::upper_bound(arcs_.begin(), arcs_.end(), x,
                                   [](double v, const Arc& a) { return v < a.lo; });
  if (it != arcs_.begin() && arc_contains(*(it - 1), x, tol)) return true;
  if (it != arcs_.end() && arc_contains(*it, x, tol)) return true;
  return arc_contains(arcs_.back(), x, tol);
}

double ArcUnion::measure() const {
  if (full_) return 1.0;
  double m = 0.0;
  for (const Arc& a : arcs_) m += a.len;
  return std::min(m, 1.0);
}

// ---------------------------------------------------------------------------
// ReturnSet queries
// ---------------------------------------------------------------------------

KPosition ReturnSet::classify(double theta) const {
  const Arc& a = k_.front();
  const double p = rel_pos(theta, a.lo);
  if (p <= tol_ || p >= 1.0 - tol_ || std::fabs(p - a.len) <= tol_) return KPosition::boundary;
  if (p < a.len) return KPosition::interior;
  return KPosition::outside;
}

bool ReturnSet::in_K(double theta) const { return classify(theta) != KPosition::outside; }

KPosition ReturnSet::classify_vec(const std::vector<double>& theta) const {
  if (theta.size() != k_.size())
    throw ConfigError("return set: point dimension does not match the base");
  bool on_boundary = false;
  for (std::size_t i = 0; i < k_.size(); ++i) {
    const double p = rel_pos(theta[i], k_[i].lo);
    if (p <= tol_ || p >= 1.0 - tol_ || std::fabs(p - k_[i].len) <= tol_) {
      on_boundary = true;
    } else if (!(p < k_[i].len)) {
      return KPosition::outside;
    }
  }
  return on_boundary ? KPosition::boundary : KPosition::interior;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace {

// Max gap of the sorted points {frac(k*omega) | 0 <= k < m}: the circle is
// covered by m translates of an arc of length L starting anywhere iff the
// max gap is <= L (gaps are translation invariant).
double max_gap(const BaseSystem& base, std::int64_t m) {
  std::vector<double> pts(static_cast<std::size_t>(m));
  for (std::int64_t k = 0; k < m; ++k) pts[static_cast<std::size_t>(k)] = base.step_n(0.0, k);
  std::sort(pts.begin(), pts.end());
  double g = pts.front() + 1.0 - pts.back();
  for (std::size_t i = 1; i < pts.size(); ++i) g = std::max(g, pts[i] - pts[i - 1]);
  return g;
}

// Minimal m with max_gap(m) <= L (max_gap is non-increasing in m).
std::int64_t minimal_span(const BaseSystem& base, std::int64_t n, double L) {
  std::int64_t lo = std::max<std::int64_t>(n, static_cast<std::int64_t>(std::floor(1.0 / L)));
  lo = std::max<std::int64_t>(lo, 1);
  std::int64_t hi = lo;
  while (max_gap(base, hi) > L) {
    lo = hi + 1;
    hi *= 2;
    if (hi > (1 << 26)) throw CertificationError("return set: covering count exceeds 2^26");
  }
  while (lo < hi) {
    const std::int64_t mid = lo + (hi - lo) / 2;
    if (max_gap(base, mid) <= L)
      hi = mid;
    else
      lo = mid + 1;
  }
  return lo;
}

// Smallest circle distance from q to {frac(k*omega) | 1 <= k <= H}, given
// those points pre-sorted.
double min_dist_to_orbit(const std::vector<double>& sorted_pts, double q) {
  q = reduce(q);
  auto it = std::lower_bound(sorted_pts.begin(), sorted_pts.end(), q);
  double best = 1.0;
  auto probe = [&](std::size_t i) {
    const double d = std::fabs(sorted_pts[i] - q);
    best = std::min(best, std::min(d, 1.0 - d));
  };
  if (it != sorted_pts.end()) probe(static_cast<std::size_t>(it - sorted_pts.begin()));
  if (it != sorted_pts.begin()) probe(static_cast<std::size_t>(it - sorted_pts.begin()) - 1);
  probe(0);
  probe(sorted_pts.size() - 1);
  return best;
}

// Count visits of the orbit {x + k*omega | |k| <= H} to the tol-envelope of
// q, by incremental stepping both directions (error H*ulp << tol).
int count_orbit_hits(double x, double omega, double q, std::int64_t H, double tol) {
  int hits = 0;
  double fwd = reduce(x - q), bwd = fwd;
  auto near0 = [&](double v) { return v <= tol || v >= 1.0 - tol; };
  if (near0(fwd)) ++hits;  // k = 0 counted once
  for (std::int64_t k = 1; k <= H; ++k) {
    fwd += omega;
    if (fwd >= 1.0) fwd -= 1.0;
    bwd -= omega;
    if (bwd < 0.0) bwd += 1.0;
    if (near0(fwd)) ++hits;
    if (near0(bwd)) ++hits;
  }
  return hits;
}

}  // namespace

ReturnSet build_return_set(const BasePtr& base, std::int64_t n, const ReturnSetOptions& opts) {
  if (!base) throw ConfigError("return set: null base");
  if (base->kind() != BaseSystem::Kind::rotation_1d)
    throw ConfigError("return set: exact construction needs a 1-d rotation base");
  if (n < 1) throw ConfigError("return set: n must be >= 1");
  if (!(opts.boundary_tol > 0.0 && opts.boundary_tol < 1e-3))
    throw ConfigError("return set: boundary_tol out of range");
  const double omega = base->omega1();

  // Arc length below the smallest translate distance: disjointness is then
  // immediate from ||k*omega|| > L for 1 <= k < n.
  const double lmax = std::min(base->min_orbit_norm(n), 0.25);
  double L = opts.length_factor * lmax;
  if (!(L > 8.0 * opts.boundary_tol))
    throw ConfigError("return set: arc length collides with the boundary envelope");

  // General position: the orbit of one endpoint must avoid the other
  // endpoint and the orbit of 0 to the horizon, with margin.
  const double margin = std::max(16.0 * opts.boundary_tol, 1e-7);
  std::vector<double> orbit(static_cast<std::size_t>(opts.horizon));
  for (std::int64_t k = 1; k <= opts.horizon; ++k)
    orbit[static_cast<std::size_t>(k - 1)] = base->step_n(0.0, k);
  std::sort(orbit.begin(), orbit.end());

  // a + k*omega = a + L has no |k| <= H solution iff L (and 1-L) stay off
  // the orbit of 0.
  {
    int tries = 0;
    while ((min_dist_to_orbit(orbit, L) < margin || min_dist_to_orbit(orbit, 1.0 - L) < margin) &&
           tries < 200) {
      L *= 1.0 - 1e-3;
      ++tries;
    }
    if (tries >= 200)
      throw CertificationError("return set: no general-position arc length found");
  }
  // Endpoints off the orbit of 0 (both directions).
  double a = 0.0;
  {
    Rng rng(opts.seed);
    bool ok = false;
    for (int tries = 0; tries < 1000 && !ok; ++tries) {
      a = rng.next_double();
      ok = min_dist_to_orbit(orbit, a) >= margin && min_dist_to_orbit(orbit, 1.0 - a) >= margin &&
           min_dist_to_orbit(orbit, reduce(a + L)) >= margin &&
           min_dist_to_orbit(orbit, reduce(1.0 - a - L)) >= margin;
    }
    if (!ok) throw CertificationError("return set: no general-position endpoint found");
  }

  ReturnSet K;
  K.base_ = base;
  K.k_ = {Arc{a, L}};
  K.n_ = n;
  K.d_mild_ = 2;
  K.tol_ = opts.boundary_tol;
  K.exact_ = true;
  K.cache_ = std::make_shared<ReturnSetCache>();

  // Exact spanning count, minimal by bisection on the translate gap.
  K.d_span_ = minimal_span(*base, n, L);
  if (K.d_span_ > 1 && max_gap(*base, K.d_span_ - 1) <= L)
    throw CertificationError("return set: spanning count not minimal");

  // Re-verification of all three properties.
  for (std::int64_t k = 1; k < n; ++k) {
    if (!(dist_to_int(frac_mul(k, omega)) > L))
      throw CertificationError("return set: translate disjointness refuted");
  }
  if (max_gap(*base, K.d_span_) > L)
    throw CertificationError("return set: covering refuted at the computed count");
  {
    Rng rng(opts.seed ^ 0x9e3779b97f4a7c15ull);
    for (int s = 0; s < opts.mild_samples; ++s) {
      const double x = rng.next_double();
      const int hits = count_orbit_hits(x, omega, a, opts.horizon, opts.boundary_tol) +
                       count_orbit_hits(x, omega, reduce(a + L), opts.horizon, opts.boundary_tol);
      if (hits > K.d_mild_)
        throw CertificationError("return set: mildness refuted on a sampled orbit");
    }
  }
  return K;
}

ReturnSet declared_return_set(const BasePtr& base, std::vector<Arc> Karcs, std::int64_t n,
                              int d_declared, const ReturnSetOptions& opts) {
  if (!base) throw ConfigError("return set: null base");
  const std::size_t dim = static_cast<std::size_t>(base->dimension());
  if (Karcs.size() != dim) throw ConfigError("return set: arc count must match the base dimension");
  if (n < 1 || d_declared < 1) throw ConfigError("return set: need n >= 1 and d >= 1");
  for (Arc& a : Karcs) {
    if (!(a.len > 0.0 && a.len < 1.0)) throw ConfigError("return set: arc lengths must be in (0,1)");
    a.lo = reduce(a.lo);
  }

  ReturnSet K;
  K.base_ = base;
  K.k_ = std::move(Karcs);
  K.n_ = n;
  K.d_mild_ = d_declared;
  K.tol_ = opts.boundary_tol;
  K.exact_ = false;
  K.cache_ = std::make_shared<ReturnSetCache>();

  // Goodness, exactly: K + k*omega meets K iff every coordinate's translate
  // overlaps, so disjointness holds iff some coordinate has
  // ||k*omega_i|| > L_i.
  for (std::int64_t k = 1; k < n; ++k) {
    bool disjoint = false;
    for (std::size_t i = 0; i < dim; ++i) {
      if (dist_to_int(frac_mul(k, base->omega()[i])) > K.k_[i].len) {
        disjoint = true;
        break;
      }
    }
    if (!disjoint)
      throw CertificationError("return set: declared arcs are not n-good (translate " +
                               std::to_string(k) + " overlaps)");
  }

  // Spanning, sampled: measure first-entry times of random points.
  double vol = 1.0;
  for (const Arc& a : K.k_) vol *= a.len;
  const std::int64_t entry_budget =
      std::max<std::int64_t>(1024, static_cast<std::int64_t>(64.0 / std::max(vol, 1e-9)));
  std::int64_t max_entry = 0;
  {
    Rng rng(opts.seed);
    std::vector<double> th(dim);
    const int samples = std::max(opts.mild_samples, 8) * 8;
    for (int s = 0; s < samples; ++s) {
      for (double& c : th) c = rng.next_double();
      std::int64_t entry = -1;
      std::vector<double> cur = th;
      for (std::int64_t k = 0; k < entry_budget; ++k) {
        cur = base->step_n_vec(th, k);
        bool inside = true;
        for (std::size_t i = 0; i < dim; ++i)
          if (rel_pos(cur[i], K.k_[i].lo) > K.k_[i].len + K.tol_) {
            inside = false;
            break;
          }
        if (inside) {
          entry = k;
          break;
        }
      }
      if (entry < 0)
        throw CertificationError("return set: sampled orbit failed to enter K within budget");
      max_entry = std::max(max_entry, entry);
    }
  }
  K.d_span_ = max_entry + 1;

  // Mildness, sampled: count boundary visits along sampled orbits.
  {
    Rng rng(opts.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<double> th(dim);
    for (int s = 0; s < opts.mild_samples; ++s) {
      for (double& c : th) c = rng.next_double();
      int hits = 0;
      for (std::int64_t k = -opts.horizon / 8; k <= opts.horizon / 8; ++k) {
        if (K.classify_vec(base->step_n_vec(th, k)) == KPosition::boundary) ++hits;
      }
      if (hits > d_declared)
        throw CertificationError("return set: declared mildness refuted on a sampled orbit");
    }
  }
  return K;
}

// ---------------------------------------------------------------------------
// Stratification queries
// ---------------------------------------------------------------------------

std::int64_t first_return(const ReturnSet& K, double theta) {
  if (K.base().kind() != BaseSystem::Kind::rotation_1d)
    throw ConfigError("first_return: scalar query needs a 1-d base");
  if (!K.in_K(theta)) throw ConfigError("first_return: theta outside K");
  const std::int64_t cap = K.search_cap();
  for (std::int64_t j = 1; j <= cap; ++j) {
    if (K.in_K(K.base().step_n(theta, j))) return j;
  }
  throw CertificationError("first_return: no return within the search cap");
}

namespace {

template <class Classify>
StratumInfo stratify_impl(const ReturnSet& K, const Classify& classify_at, bool in_k,
                          std::int64_t ell) {
  const std::int64_t cap = K.search_cap();
  StratumInfo s;
  s.in_k = in_k;
  s.ell = ell;
  s.ell_plus = -1;
  for (std::int64_t j = 1; j <= cap; ++j) {
    if (classify_at(j) == KPosition::interior) {
      s.ell_plus = j;
      break;
    }
  }
  s.ell_minus = -1;
  for (std::int64_t j = 0; j <= cap; ++j) {
    if (classify_at(-j) == KPosition::interior) {
      s.ell_minus = j;
      break;
    }
  }
  if (s.ell_plus < 0 || s.ell_minus < 0)
    throw CertificationError("stratify: no interior entry within the search cap");
  for (std::int64_t j = -s.ell_minus + 1; j < s.ell_plus; ++j) {
    if (classify_at(j) == KPosition::boundary) s.t_boundary.push_back(j);
  }
  s.n_hits = static_cast<int>(s.t_boundary.size());
  s.stratum = in_k ? K.d() - s.n_hits : -1;
  return s;
}

}  // namespace

StratumInfo stratify(const ReturnSet& K, double theta) {
  if (K.base().kind() != BaseSystem::Kind::rotation_1d)
    throw ConfigError("stratify: scalar query needs a 1-d base");
  const bool in_k = K.in_K(theta);
  const std::int64_t ell = in_k ? first_return(K, theta) : 0;
  return stratify_impl(
      K, [&](std::int64_t j) { return K.classify(K.base().step_n(theta, j)); }, in_k, ell);
}

StratumInfo stratify_vec(const ReturnSet& K, const std::vector<double>& theta) {
  const bool in_k = K.classify_vec(theta) != KPosition::outside;
  std::int64_t ell = 0;
  if (in_k) {
    const std::int64_t cap = K.search_cap();
    for (std::int64_t j = 1; j <= cap && ell == 0; ++j) {
      if (K.classify_vec(K.base().step_n_vec(theta, j)) != KPosition::outside) ell = j;
    }
    if (ell == 0) throw CertificationError("stratify: no return within the search cap");
  }
  return stratify_impl(
      K, [&](std::int64_t j) { return K.classify_vec(K.base().step_n_vec(theta, j)); }, in_k, ell);
}

std::vector<double> z_points(const ReturnSet& K, int i) {
  if (K.base().kind() != BaseSystem::Kind::rotation_1d)
    throw ConfigError("z_points: 1-d bases only");
  if (i < 0 || i >= K.d()) throw ConfigError("z_points: stratum index must be in [0, d)");
  const std::int64_t cap = K.search_cap();
  const Arc& arc = K.arc();
  const double endpoints[2] = {arc.lo, reduce(arc.lo + arc.len)};
  std::vector<double> out;
  for (const double e : endpoints) {
    for (std::int64_t j = -cap; j <= cap; ++j) {
      const double x = K.base().step_n(e, -j);  // g^j(x) = e
      if (!K.in_K(x)) continue;
      const StratumInfo s = stratify(K, x);
      if (s.in_k && s.stratum == i) out.push_back(reduce(x));
    }
  }
  std::sort(out.begin(), out.end());
  // Dedup points identified under the boundary envelope.
  std::vector<double> dedup;
  for (double x : out) {
    if (dedup.empty() || (x - dedup.back() > 2.0 * K.boundary_tol() &&
                          (dedup.front() + 1.0 - x) > 2.0 * K.boundary_tol()))
      dedup.push_back(x);
  }
  return dedup;
}

ArcUnion tower_sets(const ReturnSet& K, int j) {
  if (j < -1 || j > K.d()) throw ConfigError("tower_sets: j must be in [-1, d]");
  if (K.base().kind() != BaseSystem::Kind::rotation_1d)
    throw ConfigError("tower_sets: 1-d bases only");
  ReturnSetCache& cache = *K.cache_;
  {
    std::lock_guard<std::mutex> lock(cache.mutex);
    if (cache.w.empty()) {
      cache.w.resize(static_cast<std::size_t>(K.d()) + 2);
      cache.ready.assign(static_cast<std::size_t>(K.d()) + 2, false);
    }
    if (cache.ready[static_cast<std::size_t>(j + 1)]) return cache.w[static_cast<std::size_t>(j + 1)];
  }
  ArcUnion result;
  if (j == -1) {
    result = ArcUnion();
  } else if (j == K.d()) {
    result = ArcUnion::full_circle();
  } else {
    // K^j = union of Z^i for i <= j; its towers are finite point sets.
    std::vector<Arc> pts;
    for (int i = 0; i <= j; ++i) {
      for (const double th : z_points(K, i)) {
        const std::int64_t ell = first_return(K, th);
        for (std::int64_t m = 0; m < ell; ++m) pts.push_back(Arc{K.base().step_n(th, m), 0.0});
      }
    }
    result = ArcUnion(std::move(pts));
  }
  std::lock_guard<std::mutex> lock(cache.mutex);
  cache.w[static_cast<std::size_t>(j + 1)] = result;
  cache.ready[static_cast<std::size_t>(j + 1)] = true;
  return result;
}

std::vector<TowerArc> return_towers(const ReturnSet& K) {
  if (K.base().kind() != BaseSystem::Kind::rotation_1d)
    throw ConfigError("return_towers: 1-d bases only");
  const Arc& arc = K.arc();
  const std::int64_t cap = K.search_cap();
  // Return-time discontinuities sit where some g^j, j <= cap, maps the point
  // onto an endpoint: collect those preimages inside K as relative cuts.
  std::vector<double> cuts = {0.0, arc.len};
  const double endpoints[2] = {arc.lo, reduce(arc.lo + arc.len)};
  for (const double e : endpoints) {
    for (std::int64_t j = 1; j <= cap; ++j) {
      const double x = K.base().step_n(e, -j);
      const double p = rel_pos(x, arc.lo);
      if (p >= 1.0 - K.boundary_tol()) continue;  // the left endpoint itself
      if (p <= arc.len + K.boundary_tol()) cuts.push_back(std::min(p, arc.len));
    }
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(
      std::unique(cuts.begin(), cuts.end(), [](double a, double b) { return b - a <= 1e-13; }),
      cuts.end());
  if (cuts.size() < 2) cuts.push_back(arc.len);

  // Sample one return time per cell, merging adjacent cells that share it
  // (cells are tracked in coordinates relative to the arc start).
  std::vector<TowerArc> out;
  double seg_start = cuts.front();
  std::int64_t seg_ell = -1;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double mid = 0.5 * (cuts[i] + cuts[i + 1]);
    const std::int64_t ell = first_return(K, reduce(arc.lo + mid));
    if (seg_ell < 0) {
      seg_ell = ell;
      seg_start = cuts[i];
    } else if (ell != seg_ell) {
      out.push_back(TowerArc{Arc{reduce(arc.lo + seg_start), cuts[i] - seg_start}, seg_ell});
      seg_start = cuts[i];
      seg_ell = ell;
    }
  }
  out.push_back(TowerArc{Arc{reduce(arc.lo + seg_start), cuts.back() - seg_start}, seg_ell});
  return out;
}

nlohmann::json strata_json(const ReturnSet& K) {
  nlohmann::json j;
  j["K"] = {K.arc().lo, K.arc().len};
  j["n"] = K.n();
  j["D"] = K.D();
  j["d"] = K.d();
  nlohmann::json strata = nlohmann::json::array();
  for (int i = 0; i <= K.d(); ++i) {
    nlohmann::json arcs = nlohmann::json::array();
    if (i == K.d()) {
      arcs.push_back({K.arc().lo, K.arc().len});  // closure of the generic stratum
    } else {
      for (const double x : z_points(K, i)) arcs.push_back({x, 0.0});
    }
    strata.push_back({{"i", i}, {"arcs", std::move(arcs)}});
  }
  j["strata"] = std::move(strata);
  nlohmann::json W = nlohmann::json::array();
  for (int q = -1; q <= K.d(); ++q) {
    const ArcUnion u = tower_sets(K, q);
    nlohmann::json arcs = nlohmann::json::array();
    if (u.is_full()) {
      arcs.push_back({0.0, 1.0});
    } else {
      for (const Arc& a : u.arcs()) arcs.push_back({a.lo, a.len});
    }
    W.push_back({{"j", q}, {"arcs", std::move(arcs)}});
  }
  j["W"] = std::move(W);
  return j;
}

}  // namespace rotaforge
