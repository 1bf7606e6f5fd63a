#include "rotaforge/tietze.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "rotaforge/errors.hpp"
#include "rotaforge/util.hpp"

namespace rotaforge {

double default_zeta(double r, double rprime) {
  double v = 2.0 * r - rprime;
  return v > 0.0 ? v * v : 0.0;
}

namespace {

// Signed position of x relative to the closed arc [lo, lo + len] (mod 1):
// 0 when inside, otherwise the circle distance to the nearest endpoint.
double arc_dist(const Arc& a, double x) {
  double rel = frac(x - a.lo);
  if (rel <= a.len) return 0.0;
  return std::min(rel - a.len, 1.0 - rel);
}

// Nearest point of the closed arc to x.
double arc_project(const Arc& a, double x) {
  double rel = frac(x - a.lo);
  if (rel <= a.len) return x;
  return (rel - a.len < 1.0 - rel) ? frac(a.lo + a.len) : a.lo;
}

double min_support_dist(const std::vector<Arc>& support, double x, std::size_t* which) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t bi = 0;
  for (std::size_t i = 0; i < support.size(); ++i) {
    double d = arc_dist(support[i], x);
    if (d < best) {
      best = d;
      bi = i;
    }
  }
  if (which) *which = bi;
  return best;
}

double min_gap(const std::vector<Arc>& support) {
  if (support.size() == 1) return std::max(0.0, 1.0 - support[0].len);
  double g = 1.0;
  for (std::size_t i = 0; i < support.size(); ++i) {
    const Arc& cur = support[i];
    const Arc& nxt = support[(i + 1) % support.size()];
    g = std::min(g, frac(nxt.lo - (cur.lo + cur.len)));
  }
  return g;
}

}  // namespace

BlendQuery tietze_blend_query(double theta, const std::vector<Arc>& support, double r_u,
                              int n_quad, const Zeta& zeta) {
  BlendQuery q;
  theta = frac(theta);
  double dist = min_support_dist(support, theta, &q.arc_index);
  q.dist = dist;
  if (dist == 0.0) {
    q.zone = BlendZone::on_m;
    return q;
  }
  if (!(dist < r_u)) {
    q.zone = BlendZone::off;
    return q;
  }
  q.zone = BlendZone::blend;

  const Zeta& z = zeta ? zeta : Zeta(default_zeta);
  // Distance to the glued set C = M u (X \ U); valid because the blend
  // radius never exceeds half the smallest support gap.
  double d = std::min(dist, r_u - dist);
  double h = 2.0 * d / std::max(1, n_quad);

  auto push = [&](double tp, double w, bool from_m, std::size_t ai) {
    if (w <= 0.0) return;
    BlendSample s;
    s.theta = frac(tp);
    s.weight = w;
    s.from_m = from_m;
    s.arc_index = ai;
    q.samples.push_back(s);
  };

  // Uniform window quadrature over (theta - 2d, theta + 2d), classifying
  // each node against C.
  std::vector<char> arc_hit(support.size(), 0);
  for (int j = -n_quad; j <= n_quad; ++j) {
    if (j == 0) continue;  // theta itself lies in U \ M
    double tp = theta + j * h;
    double r = std::fabs(j) * h;
    std::size_t ai = 0;
    double dm = min_support_dist(support, tp, &ai);
    if (dm == 0.0) {
      push(arc_project(support[ai], tp), z(d, r) * h, true, ai);
      arc_hit[ai] = 1;
    } else if (dm >= r_u) {
      push(tp, z(d, r) * h, false, 0);
    }
  }
  // Arcs whose window intersection the uniform grid missed (always the case
  // for zero-length arcs) contribute their nearest point with one cell of
  // quadrature weight.
  for (std::size_t i = 0; i < support.size(); ++i) {
    if (arc_hit[i]) continue;
    double dm = arc_dist(support[i], theta);
    if (dm < 2.0 * d) push(arc_project(support[i], theta), z(d, dm) * h, true, i);
  }

  double total = 0.0;
  for (const BlendSample& s : q.samples) total += s.weight;
  if (!(total > 0.0))
    throw CertificationError("tietze: empty mollifier window (degenerate blend radius)");
  for (BlendSample& s : q.samples) s.weight /= total;
  return q;
}

TietzeLayer::TietzeLayer(PartialFamily partial, ForcedLift reference, double r_u, int n_quad,
                         Zeta zeta)
    : partial_(std::move(partial)),
      ref_(std::move(reference)),
      r_u_(r_u),
      n_quad_(n_quad),
      zeta_(std::move(zeta)) {}

bool TietzeLayer::active_at(double theta) const {
  if (partial_.support.size() == 1 && partial_.support[0].len >= 1.0) return true;
  return min_support_dist(partial_.support, frac(theta), nullptr) < r_u_;
}

double TietzeLayer::family_eval(double theta, double x) const {
  theta = frac(theta);
  if (partial_.support.size() == 1 && partial_.support[0].len >= 1.0)
    return partial_.eval(theta, x);
  BlendQuery q = tietze_blend_query(theta, partial_.support, r_u_, n_quad_, zeta_);
  switch (q.zone) {
    case BlendZone::on_m:
      return partial_.eval(theta, x);
    case BlendZone::off:
      return ref_.evaluate(theta, x);
    case BlendZone::blend: {
      double acc = 0.0;
      for (const BlendSample& s : q.samples)
        acc += s.weight * (s.from_m ? partial_.eval(s.theta, x) : ref_.evaluate(s.theta, x));
      return acc;
    }
  }
  return ref_.evaluate(theta, x);
}

double TietzeLayer::post_eval(double theta, double y) const {
  double x = ref_.evaluate_inverse(theta, y);
  return family_eval(theta, x);
}

double TietzeLayer::post_invert(double theta, double z) const {
  double pad = c0_ + 1e-6;
  double lo = z - pad, hi = z + pad;
  for (int it = 0; it < 200 && hi - lo > 1e-13 * (1.0 + std::fabs(z)); ++it) {
    double mid = 0.5 * (lo + hi);
    if (post_eval(theta, mid) < z)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

double TietzeLayer::lip_upper() const {
  return std::max(partial_.lip_upper, ref_.x_lip_upper()) / ref_.x_lip_lower();
}

double TietzeLayer::lip_lower() const {
  return std::min(partial_.lip_lower, ref_.x_lip_lower()) / ref_.x_lip_upper();
}

double TietzeLayer::theta_lip() const { return std::numeric_limits<double>::infinity(); }

nlohmann::json TietzeLayer::to_json() const {
  nlohmann::json arcs = nlohmann::json::array();
  for (const Arc& a : partial_.support) arcs.push_back({a.lo, a.len});
  return nlohmann::json{{"kind", kind()},
                        {"support", std::move(arcs)},
                        {"r_u", r_u_},
                        {"c0", c0_}};
}

std::shared_ptr<const TietzeLayer> tietze_extend(const PartialFamily& partial,
                                                 const ForcedLift& F, double c,
                                                 const TietzeOptions& opts) {
  if (partial.support.empty()) throw ConfigError("tietze_extend: empty support");
  if (!partial.eval) throw ConfigError("tietze_extend: partial family has no evaluator");
  if (!(c > 0.0)) throw ConfigError("tietze_extend: bound c must be positive");

  PartialFamily p = partial;
  std::sort(p.support.begin(), p.support.end(),
            [](const Arc& a, const Arc& b) { return a.lo < b.lo; });
  for (Arc& a : p.support) {
    a.lo = frac(a.lo);
    if (!(a.len >= 0.0 && a.len <= 1.0)) throw ConfigError("tietze_extend: bad arc length");
  }
  const bool full = p.support.size() == 1 && p.support[0].len >= 1.0;

  double gap = full ? 0.0 : min_gap(p.support);
  if (!full && !(gap > 0.0)) throw ConfigError("tietze_extend: support arcs overlap");
  double r_u;
  if (full) {
    r_u = 0.0;
  } else if (opts.r_u > 0.0) {
    r_u = std::min(opts.r_u, gap / 2.5);
  } else {
    r_u = std::min(gap / 3.0, 1.0 / 64.0);
  }
  if (!full && !(r_u > 0.0)) throw ConfigError("tietze_extend: blend radius collapsed");

  auto layer = std::make_shared<TietzeLayer>(p, F, r_u, std::max(3, opts.n_quad),
                                             opts.zeta ? opts.zeta : Zeta(default_zeta));

  // Bound verification over support + blend annuli: certified in the fiber
  // direction by monotone cell widening, sampled in theta.
  int cx = std::max(4, opts.check_x);
  double measured = 0.0;
  auto check_theta_at = [&](double theta) {
    theta = frac(theta);
    double f_prev = F.evaluate(theta, 0.0);
    double g_prev = layer->family_eval(theta, 0.0);
    double best = std::fabs(g_prev - f_prev);
    for (int i = 1; i <= cx; ++i) {
      double x = static_cast<double>(i) / cx;
      double f_cur = F.evaluate(theta, x);
      double g_cur = layer->family_eval(theta, x);
      best = std::max(best, std::max(g_cur - f_prev, f_cur - g_prev));
      f_prev = f_cur;
      g_prev = g_cur;
    }
    measured = std::max(measured, best);
  };
  if (full) {
    int nt = std::max(8, opts.check_theta);
    for (int i = 0; i < nt; ++i) check_theta_at(static_cast<double>(i) / nt);
  } else {
    // Distribute the check grid over each arc plus its blend collar.
    for (const Arc& a : p.support) {
      double span = a.len + 2.0 * r_u;
      int nt = std::max(9, static_cast<int>(std::ceil(opts.check_theta * span)) | 1);
      for (int i = 0; i <= nt; ++i)
        check_theta_at(a.lo - r_u + span * static_cast<double>(i) / nt);
    }
  }
  // The monotone cell widening above already certifies the fiber direction;
  // theta stays sampled at the check-grid resolution.
  if (!(measured < c))
    throw CertificationError(
        "tietze_extend: extension leaves the C0 bound (measured " + std::to_string(measured) +
        " vs " + std::to_string(c) + "); shrink the blend radius or the partial family");
  layer->set_c0(measured);
  return layer;
}

}  // namespace rotaforge
