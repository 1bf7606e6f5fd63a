#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rotaforge/forced_lift.hpp"

namespace rotaforge {

// Monotone degree-one piecewise-linear lift through explicit, possibly
// non-uniform knots (u_i, v_i): strictly increasing in both coordinates with
// u spanning less than one period and the map extended by H(x+1) = H(x)+1.
// Default-constructed objects are the exact identity.
class PinnedPL {
 public:
  PinnedPL() = default;

  // Knot positions u (strictly increasing, u.back() < u.front() + 1) and
  // values v (strictly increasing, v.back() < v.front() + 1); throws
  // ConfigError on a violated shape.
  PinnedPL(std::vector<double> u, std::vector<double> v);

  bool is_identity() const { return u_.empty(); }
  std::size_t knot_count() const { return u_.size(); }
  const std::vector<double>& u() const { return u_; }
  const std::vector<double>& v() const { return v_; }

  double eval(double x) const;
  double invert(double y) const;

  // Exact for PL maps: |H - Id| attains its maximum at a knot.
  double dist_to_identity() const;
  double lip_upper() const;
  double lip_lower() const;

 private:
  std::vector<double> u_, v_;  // empty = identity
};

// Which operation produced a segment.
enum class Provenance { cancel, local, concatenate };
const char* provenance_name(Provenance p);

// One solved interpolation window inside a concatenation: composition steps
// [begin, begin + length) post-compose the base fiber map with
// phi(eps, t, lo_j, hi_j) where (lo_j, hi_j) is the forward orbit of
// (ylo0, yhi0) under the unperturbed fibers, j = step - begin + 1.
struct Stage {
  std::int64_t begin = 0;
  std::int64_t length = 0;
  double t = 0.0;
  double ylo0 = 0.0;  // window ends at the window start
  double yhi0 = 0.0;
  double anchor = 0.0;  // grid point this stage places
  double target = 0.0;  // solved endpoint value the anchor was steered to
};

// A finite composition segment over the base orbit of theta0:
//   G_i = post_i . F_{g^i(theta0)},  i = 0..N-1,
// where every post_i is a degree-one homeomorphism within 2*eps of the
// identity: a vertical translation (mean-motion cancellation), an
// interpolation-family map on a moving window (local perturbation), the
// final pinned-PL snap of a concatenation, or the identity.
class SegmentPerturbation {
 public:
  Provenance provenance() const { return prov_; }
  double theta0() const { return theta0_; }
  std::int64_t length() const { return n_; }
  const ForcedLift& lift() const { return lift_; }
  double eps() const { return eps_; }

  // True when the target was already the unperturbed image: every post is
  // the exact identity and the fibers equal the unperturbed fibers.
  bool degenerate() const { return degenerate_; }

  // Solved parameters.  s() is the cancellation offset (steps
  // [0, cancel_length)); stages() are the interpolation windows; snap() is
  // the final-step correction (identity unless concatenate).
  double s() const { return s_; }
  std::int64_t cancel_length() const { return cancel_len_; }
  const std::vector<Stage>& stages() const { return stages_; }
  const PinnedPL& snap() const { return snap_; }
  double snap_dist() const { return snap_dist_; }
  double rho_hat() const { return rho_hat_; }

  // Post-map of composition step i (the identity when inactive).
  bool post_active(std::int64_t i) const;
  double post_eval(std::int64_t i, double y) const;
  double post_invert(std::int64_t i, double y) const;

  // Realized fiber map of step i as a materialized lift.
  FiberLift fiber(std::int64_t i) const;

  // Full-chain forward evaluation G_{N-1}...G_0(y), walking the composition
  // pointwise with the window tracks carried incrementally (O(N) total).
  double chain_eval(double y) const;
  // Same for many points in lockstep (batched fiber evaluation).
  void chain_eval_many(double* ys, std::size_t count) const;

  // Certified max_i d(G_i, unperturbed fiber): |s|, the exact per-window
  // displacement bounds of the interpolation maps, and the snap deviation.
  double max_fiber_c0() const { return max_c0_; }
  // Chain-endpoint residual |chain(y) - target(y)|: the certified bound and
  // the value measured on verification samples.
  double residual_certified() const { return res_cert_; }
  double residual_measured() const { return res_meas_; }

  nlohmann::json to_json() const;

 private:
  friend SegmentPerturbation cancel_mean_motion(const ForcedLift&, const ForcedLift&, double,
                                                double, std::int64_t, double, double, double,
                                                std::int64_t, const struct SegmentOptions&);
  friend SegmentPerturbation local_perturb(const ForcedLift&, const ForcedLift&, double, double,
                                           std::int64_t, double, double, double, double, double,
                                           std::int64_t, const struct SegmentOptions&);
  friend SegmentPerturbation concatenate(const ForcedLift&, const ForcedLift&, double,
                                         const struct PerturbConstants&, double, std::int64_t,
                                         const struct ConcatOptions&);

  // Window track of stage st at step i (ends entering the post of step i);
  // uses the stored full track when present, else recomputes O(length).
  void stage_window(const Stage& st, std::int64_t i, double& lo, double& hi) const;
  const Stage* stage_of(std::int64_t i) const;

  Provenance prov_ = Provenance::cancel;
  ForcedLift lift_;
  double theta0_ = 0.0;
  std::int64_t n_ = 0;
  double eps_ = 0.0;
  bool degenerate_ = false;
  double s_ = 0.0;
  std::int64_t cancel_len_ = 0;
  std::vector<Stage> stages_;
  std::vector<double> track_lo_, track_hi_;  // full window tracks (standalone local)
  PinnedPL snap_;
  double snap_dist_ = 0.0;
  double rho_hat_ = 0.0;
  double max_c0_ = 0.0;
  double res_cert_ = 0.0;
  double res_meas_ = 0.0;
};

// Domain predicates.  Gamma: the target z is within N*kappa of the
// unperturbed N-step image of y.  Omega: z lies strictly between the N-step
// images of the window ends.
bool gamma_membership(const ForcedLift& F, double kappa, double theta, double y, double z,
                      std::int64_t N);
bool omega_membership(const ForcedLift& F, double theta, double ylo, double yhi, double z,
                      std::int64_t N);

struct SegmentOptions {
  double solver_tol = 1e-10;  // absolute value tolerance of the parameter solve
  std::int64_t budget = 0;    // max composition steps; 0 = ROTAFORGE_BUDGET or 1e6
  bool check_distance = true; // verify the C0 closeness precondition on entry
  int verify_samples = 16;    // random forward-evaluation checks of the result
  std::uint64_t seed = 1;
};

// Steer y to z over N steps by one vertical offset: G_i = T_s . F_check
// with s in (-2*eps, 2*eps) solved monotonically.  Preconditions: N >= N1,
// d(F_check, F) < eps, (theta, y, z) in Gamma_N(F, kappa1).  If z is the
// unperturbed image, s = 0 exactly and the fibers are unperturbed.
SegmentPerturbation cancel_mean_motion(const ForcedLift& F_check, const ForcedLift& F, double eps,
                                       double kappa1, std::int64_t N1, double theta, double y,
                                       double z, std::int64_t N,
                                       const SegmentOptions& opts = {});

// Steer y to z over N steps while freezing everything in [yhi, ylo + 1]:
// G_i = phi(eps, t, lo_i, hi_i) . F_check on the moving window orbit of
// (ylo, yhi), with one t in (-1, 1) solved monotonically.  Preconditions:
// N >= N2, d(F_check, F) < kappa2, ylo < y < yhi <= ylo + 1, and z strictly
// between the N-step images of ylo and yhi (Omega membership).
SegmentPerturbation local_perturb(const ForcedLift& F_check, const ForcedLift& F, double eps,
                                  double kappa2, std::int64_t N2, double theta, double ylo,
                                  double y, double yhi, double z, std::int64_t N,
                                  const SegmentOptions& opts = {});

// Constants feeding the concatenation schedule (estimated empirically by the
// rotation/cascade modules; see estimate_kappa1_N1 and friends).
struct PerturbConstants {
  double kappa1 = 0.0;
  std::int64_t N1 = 0;
  double kappa2 = 0.0;
  std::int64_t N2 = 0;
  std::int64_t N0 = 0;
  double kappa3 = 0.0;
  std::int64_t N3 = 0;  // informational; the schedule recomputes its own bound
};

// Derived schedule of a concatenation: p anchor points, per-stage window
// length n2, total stage span, cancellation length at N = N3_required.
struct ConcatSchedule {
  std::int64_t p = 0;
  std::int64_t n2 = 0;
  std::int64_t span = 0;         // (p - 1) * n2
  std::int64_t n3_required = 0;  // minimal admissible N
};
ConcatSchedule concat_schedule(double eps, const PerturbConstants& c, std::int64_t p_override = 0,
                               std::int64_t n2_override = 0);

struct ConcatOptions {
  double rho_hat = 0.0;   // rotation-number estimate of the reference map
  double rho_err = 0.0;   // its error estimate
  // Admissibility gate: N * rho_err <= rho_slack * max(1/p, kappa1*Nc/6).
  // The target offset N*rho_err must stay inside the kappa1-scale margin of
  // the cancellation-target membership check and below the anchor spacing.
  double rho_slack = 1.0;
  std::int64_t p_override = 0;
  std::int64_t n2_override = 0;
  int snap_knots = 512;      // degenerate-branch confirmation samples
  double solver_tol = 1e-10; // per-solve value tolerance
  double place_tol = 1e-8;   // accepted anchor placement error
  std::int64_t budget = 0;   // max composition steps; 0 = ROTAFORGE_BUDGET or 1e6
  bool check_distance = true;
  int verify_samples = 64;
  std::uint64_t seed = 1;
};

// Straighten the whole N-step composition to the rigid translation by
// N*rho_hat: a mean-motion cancellation on the leading steps places anchor
// grid point 0, one interpolation window per remaining anchor places
// 1/p, ..., (p-1)/p, and a final pinned-PL snap H through the anchors' own
// chain ends (d(H, Id) stays at placement-error scale) corrects the residue.
// Postcondition (certified a posteriori):
// |chain(y) - y - N*rho_hat| <= 1/p + solver slack for all y.
// If the composition is already the rigid translation, all parameters are 0
// and the fibers are unperturbed.
SegmentPerturbation concatenate(const ForcedLift& F_check, const ForcedLift& F, double eps,
                                const PerturbConstants& c, double theta, std::int64_t N,
                                const ConcatOptions& opts);

// Composition-step budget shared by the segment operations: explicit value,
// else the ROTAFORGE_BUDGET environment variable, else 10^6.
std::int64_t segment_budget(std::int64_t explicit_budget);

}  // namespace rotaforge
