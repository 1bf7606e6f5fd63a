#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "rotaforge/forced_lift.hpp"
#include "rotaforge/strata.hpp"

namespace rotaforge {

// Mollifier profile for the blend averages: zeta(r, r') is positive for
// r' in [0, 2r) and zero for r' >= 2r.  The default is max(0, 2r - r')^2.
using Zeta = std::function<double(double, double)>;
double default_zeta(double r, double rprime);

// A family of monotone degree-one fiber maps given only on a closed subset M
// of the base circle: a union of disjoint closed arcs (single points are
// zero-length arcs).  eval(theta, x) must be defined for every theta in the
// support and monotone increasing, degree one in x.
struct PartialFamily {
  std::vector<Arc> support;                    // disjoint, sorted by lo
  std::function<double(double, double)> eval;  // G_theta(x) on the support
  double lip_upper = 2.0;                      // fiber slope bounds of eval
  double lip_lower = 0.5;
};

struct TietzeOptions {
  // Blend radius: the extension equals the partial family on M, the
  // reference off the open r_u-neighborhood of M, and a mollified average in
  // between.  0 selects a third of the smallest gap between support arcs
  // (capped at 1/64).
  double r_u = 0.0;
  int n_quad = 33;        // quadrature samples per blend window side
  int check_theta = 256;  // bound-verification grid (theta direction)
  int check_x = 64;       // bound-verification grid (fiber direction)
  Zeta zeta = {};         // empty = default_zeta
};

// One blend-average sample: a base point of the glued family C = M u (X \ U)
// with its mollifier weight.  from_m tells whether the sample carries the
// partial family (true) or the reference (false); arc_index identifies the
// support arc for from_m samples.
struct BlendSample {
  double theta = 0.0;
  double weight = 0.0;
  bool from_m = false;
  std::size_t arc_index = 0;
};

// Where theta falls relative to the support and its blend collar.
enum class BlendZone { on_m, blend, off };

struct BlendQuery {
  BlendZone zone = BlendZone::off;
  std::size_t arc_index = 0;         // nearest support arc
  double dist = 0.0;                 // distance to M
  std::vector<BlendSample> samples;  // normalized weights; blend zone only
};

// Classify theta against the support arcs and, in the blend zone, produce
// the normalized mollifier samples of the glued family within the window of
// radius 2 d(theta, C), C = M u (X \ U).  Support arcs must be disjoint and
// sorted by lo.  Shared by the standalone extension below and by the
// cascade layers.
BlendQuery tietze_blend_query(double theta, const std::vector<Arc>& support, double r_u,
                              int n_quad, const Zeta& zeta);

// The extension layer: post-composition data for the reference map such that
// the realized family  G_theta = post(theta, .) o F_theta  equals the
// partial family on its support, the reference off the open
// r_u-neighborhood of the support, and a mollified average in between.
class TietzeLayer final : public PerturbationLayer {
 public:
  TietzeLayer(PartialFamily partial, ForcedLift reference, double r_u, int n_quad, Zeta zeta);

  bool active_at(double theta) const override;
  double post_eval(double theta, double y) const override;
  double post_invert(double theta, double y) const override;
  double c0_bound() const override { return c0_; }
  double lip_upper() const override;
  double lip_lower() const override;
  bool theta_continuous() const override { return false; }
  double theta_lip() const override;
  std::string kind() const override { return "tietze-extension"; }
  nlohmann::json to_json() const override;

  // The extended family G_theta(x) evaluated directly (no fiber inversion).
  double family_eval(double theta, double x) const;
  double r_u() const { return r_u_; }
  const PartialFamily& partial() const { return partial_; }

  // Set by tietze_extend after verification.
  void set_c0(double c0) { c0_ = c0; }

 private:
  PartialFamily partial_;
  ForcedLift ref_;
  double r_u_;
  int n_quad_;
  Zeta zeta_;
  double c0_ = 0.0;
};

// Extend a partial family from its closed support to the whole circle.  The
// result agrees with the partial family exactly on the support, with the
// reference off the open r_u-neighborhood of the support, and everywhere
// stays within c of the reference (verified on the check grid: certified in
// the fiber direction, sampled in theta).  Throws CertificationError when
// the bound is violated; the caller may shrink r_u (or the partial family)
// and retry.
std::shared_ptr<const TietzeLayer> tietze_extend(const PartialFamily& partial,
                                                 const ForcedLift& F, double c,
                                                 const TietzeOptions& opts = {});

}  // namespace rotaforge
