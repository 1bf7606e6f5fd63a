#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rotaforge/base_system.hpp"
#include "rotaforge/families.hpp"
#include "rotaforge/fiber_lift.hpp"

namespace rotaforge {

// Stateful orbit evaluator: some kernels (the conjugated-product kernel of
// the mode-locking pipeline) evaluate orbits far faster than repeated
// pointwise calls by carrying state along the base orbit.  step() evaluates
// the fiber map at the cursor's current base point for every entry of ys
// (in place) and then advances one base step.
class OrbitCursor {
 public:
  virtual ~OrbitCursor() = default;
  virtual void step(double* ys, std::size_t count) = 0;
  virtual double theta() const = 0;
};

// Closed-form source of fiber maps: given a base point, produces the lift
// value pointwise.  Implementations: the generator families (here) and the
// conjugated-product kernel (module linearize).
class FiberKernel {
 public:
  virtual ~FiberKernel() = default;
  virtual double eval(double theta, double x) const = 0;
  // Evaluate one fiber at many points in place.  Kernels with a shared
  // per-fiber setup (the generator families hoist the theta forcing term)
  // override this; the default is a pointwise loop.
  virtual void eval_many(double theta, double* xs, std::size_t n) const {
    for (std::size_t i = 0; i < n; ++i) xs[i] = eval(theta, xs[i]);
  }
  // Solve eval(theta, x) == z for x to absolute tolerance tol.  The default
  // brackets via the degree-one displacement range and bisects; generator
  // kernels use a guarded Newton iteration instead.
  virtual double invert(double theta, double z, double tol) const;
  // Optional fast orbit path; nullptr means "use pointwise eval".
  virtual std::unique_ptr<OrbitCursor> make_cursor(const BaseSystem& /*base*/,
                                                   double /*theta0*/) const {
    return nullptr;
  }
  // Certified slope bounds over all fibers, and a theta-direction Lipschitz
  // bound (estimate for kernels that declare theta_lip_certified() false).
  virtual double x_lip_upper() const = 0;
  virtual double x_lip_lower() const = 0;
  virtual double theta_lip() const = 0;
  virtual bool theta_lip_certified() const { return true; }
  // Representation tolerance of the kernel itself (0 for closed forms).
  virtual double tol() const { return 0.0; }
  virtual std::string kind() const = 0;
  virtual const Generator* as_generator() const { return nullptr; }
  virtual void to_json(nlohmann::json& j) const = 0;
};

using KernelPtr = std::shared_ptr<const FiberKernel>;

class GeneratorKernel final : public FiberKernel {
 public:
  explicit GeneratorKernel(Generator g) : gen_(std::move(g)) {}
  double eval(double theta, double x) const override { return gen_.eval(theta, x); }
  void eval_many(double theta, double* xs, std::size_t n) const override {
    gen_.eval_many(theta, xs, n);
  }
  double invert(double theta, double z, double tol) const override {
    return gen_.invert(theta, z, tol);
  }
  double x_lip_upper() const override { return gen_.x_lip_upper(); }
  double x_lip_lower() const override { return gen_.x_lip_lower(); }
  double theta_lip() const override { return gen_.theta_lip(); }
  std::string kind() const override { return gen_.family_name(); }
  const Generator* as_generator() const override { return &gen_; }
  void to_json(nlohmann::json& j) const override;

 private:
  Generator gen_;
};

// A perturbation layer post-composes the realized fiber map of everything
// below it with a degree-one homeomorphism post(theta, .) of R, equal to the
// identity off the layer's support.  Layers are immutable once constructed.
class PerturbationLayer {
 public:
  virtual ~PerturbationLayer() = default;
  virtual bool active_at(double theta) const = 0;
  virtual double post_eval(double theta, double y) const = 0;
  virtual double post_invert(double theta, double y) const = 0;
  // Batched post at a fixed theta.  Layers whose per-point cost is dominated
  // by locating theta (tower lookups) override this to pay that cost once.
  virtual void post_eval_many(double theta, double* ys, std::size_t n) const {
    for (std::size_t i = 0; i < n; ++i) ys[i] = post_eval(theta, ys[i]);
  }
  // Certified sup_{theta,y} |post(theta,y) - y| (the C0 size of the layer).
  virtual double c0_bound() const = 0;
  virtual double lip_upper() const = 0;
  virtual double lip_lower() const = 0;
  // True when post(theta,.) varies continuously in theta (windowed layers);
  // false for layers keyed to finitely many exact base points.
  virtual bool theta_continuous() const = 0;
  // Theta-direction Lipschitz estimate for theta-continuous layers
  // (meaningless for point-keyed layers; they report infinity).
  virtual double theta_lip() const = 0;
  virtual std::string kind() const = 0;
  virtual nlohmann::json to_json() const = 0;
};

using LayerPtr = std::shared_ptr<const PerturbationLayer>;

// A forced lift: base system + fiber kernel + perturbation layers + vertical
// offset t.  The realized fiber map is
//     F_theta = T_t . post_L . ... . post_1 . kernel(theta, .)
// All values are immutable; evaluation is pure and thread-safe.
class ForcedLift {
 public:
  ForcedLift() = default;
  ForcedLift(BasePtr base, Generator gen, int fiber_knots = FiberLift::kDefaultKnots);
  ForcedLift(BasePtr base, KernelPtr kernel, int fiber_knots = FiberLift::kDefaultKnots);

  const BaseSystem& base() const { return *base_; }
  const BasePtr& base_ptr() const { return base_; }
  const KernelPtr& kernel() const { return kernel_; }
  const Generator* generator() const { return kernel_->as_generator(); }
  const std::vector<LayerPtr>& layers() const { return layers_; }
  double t_offset() const { return t_; }
  int fiber_knots() const { return m_; }

  // Realized fiber value at (theta, x); strictly increasing and degree one
  // in x.
  double evaluate(double theta, double x) const;
  // One fiber at many points, in place (shared per-fiber setup hoisted).
  void evaluate_many(double theta, double* xs, std::size_t n) const;
  // Inverse of the realized fiber map at theta.
  double evaluate_inverse(double theta, double y) const;

  // (F^n)_theta(x): composition along the base orbit.  n >= 0.  stride
  // evaluation without materialized fibers.
  double iterate(double theta, double x, std::int64_t n) const;
  // Inverse of the n-step composition: ((F^n)_theta)^{-1}(y).
  double iterate_inverse(double theta, double y, std::int64_t n) const;

  // Visit the forward orbit: sink(k, x_k) for k = 1..n with x_k = (F^k)(x).
  void orbit(double theta, double x, std::int64_t n,
             const std::function<void(std::int64_t, double)>& sink) const;

  // Advance `count` fiber values in lockstep along one shared base orbit of
  // theta0 for n steps (each step applies the same fiber map to every entry
  // plus the per-entry extra translation, if given).  Uses the kernel's fast
  // orbit cursor when available; otherwise pointwise evaluation.  sink, if
  // non-null, observes (k, ys) after step k = 1..n.
  void orbit_batch(double theta0, double* ys, std::size_t count, std::int64_t n,
                   const double* extra_t = nullptr,
                   const std::function<void(std::int64_t, const double*)>& sink = nullptr) const;

  // Materialized fiber map at theta.
  FiberLift fiber(double theta) const;

  // d-dimensional base support: theta as a vector; fiber formulas are fed
  // frac(sum of coordinates).
  double evaluate_at(const std::vector<double>& theta, double x) const;
  double iterate_at(const std::vector<double>& theta, double x, std::int64_t n) const;

  // Structure edits (value semantics: return modified copies).
  ForcedLift translated(double dt) const;
  ForcedLift with_t(double t) const;
  ForcedLift with_layer(LayerPtr layer) const;
  ForcedLift without_layers() const;

  // Tolerance and regularity of the realized map.
  double tol_grid() const;
  double x_lip_upper() const;
  double x_lip_lower() const;
  double theta_lip() const;
  bool theta_regular() const;  // all layers theta-continuous

  // If G differs from *this by a constant vertical shift recognizable from
  // kernel parameters (same family, same shape), return that shift.
  std::optional<double> translate_delta(const ForcedLift& G) const;

 private:
  double flatten(const std::vector<double>& theta) const;

  BasePtr base_;
  KernelPtr kernel_;
  std::vector<LayerPtr> layers_;
  double t_ = 0.0;
  int m_ = FiberLift::kDefaultKnots;
};

// Certified C0 distance: sampled sup over a theta-grid x x-grid plus a
// declared safety margin (Lipschitz widening in both directions; layers that
// are not theta-continuous contribute their certified c0 bounds instead).
// Fast paths: identical structure -> exact |t difference|; recognizable
// translates -> exact shift.
double distance_c0(const ForcedLift& F, const ForcedLift& G, int theta_grid = 256,
                   int x_grid = 128);

}  // namespace rotaforge
