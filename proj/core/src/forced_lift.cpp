#include "rotaforge/forced_lift.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rotaforge/errors.hpp"
#include "rotaforge/util.hpp"

namespace rotaforge {

ForcedLift::ForcedLift(BasePtr base, Generator gen, int fiber_knots)
    : base_(std::move(base)),
      kernel_(std::make_shared<GeneratorKernel>(std::move(gen))),
      m_(fiber_knots) {
  if (!base_) throw ConfigError("forced lift: null base system");
}

ForcedLift::ForcedLift(BasePtr base, KernelPtr kernel, int fiber_knots)
    : base_(std::move(base)), kernel_(std::move(kernel)), m_(fiber_knots) {
  if (!base_) throw ConfigError("forced lift: null base system");
  if (!kernel_) throw ConfigError("forced lift: null fiber kernel");
}

double FiberKernel::invert(double theta, double z, double tol) const {
  // The displacement of a degree-one lift has range of length <= 1, so the
  // preimage lies within 1 of z - disp(0).
  double d0 = eval(theta, 0.0);
  double lo = z - d0 - 1.0, hi = z - d0 + 1.0;
  for (int it = 0; it < 200 && hi - lo > tol; ++it) {
    double mid = 0.5 * (lo + hi);
    if (eval(theta, mid) < z)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

double ForcedLift::evaluate(double theta, double x) const {
  double y = kernel_->eval(theta, x);
  for (const auto& layer : layers_)
    if (layer->active_at(theta)) y = layer->post_eval(theta, y);
  return y + t_;
}

void ForcedLift::evaluate_many(double theta, double* xs, std::size_t n) const {
  kernel_->eval_many(theta, xs, n);
  for (const auto& layer : layers_) {
    if (!layer->active_at(theta)) continue;
    layer->post_eval_many(theta, xs, n);
  }
  if (t_ != 0.0)
    for (std::size_t i = 0; i < n; ++i) xs[i] += t_;
}

double ForcedLift::evaluate_inverse(double theta, double y) const {
  double z = y - t_;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
    if ((*it)->active_at(theta)) z = (*it)->post_invert(theta, z);
  return kernel_->invert(theta, z, 1e-14 * (1.0 + std::fabs(z)));
}

double ForcedLift::iterate(double theta, double x, std::int64_t n) const {
  if (auto cursor = kernel_->make_cursor(*base_, theta)) {
    for (std::int64_t k = 0; k < n; ++k) {
      double th = cursor->theta();
      cursor->step(&x, 1);
      for (const auto& layer : layers_)
        if (layer->active_at(th)) x = layer->post_eval(th, x);
      x += t_;
    }
    return x;
  }
  for (std::int64_t k = 0; k < n; ++k) x = evaluate(base_->step_n(theta, k), x);
  return x;
}

double ForcedLift::iterate_inverse(double theta, double y, std::int64_t n) const {
  for (std::int64_t k = n - 1; k >= 0; --k) y = evaluate_inverse(base_->step_n(theta, k), y);
  return y;
}

void ForcedLift::orbit(double theta, double x, std::int64_t n,
                       const std::function<void(std::int64_t, double)>& sink) const {
  for (std::int64_t k = 0; k < n; ++k) {
    x = evaluate(base_->step_n(theta, k), x);
    sink(k + 1, x);
  }
}

void ForcedLift::orbit_batch(double theta0, double* ys, std::size_t count, std::int64_t n,
                             const double* extra_t,
                             const std::function<void(std::int64_t, const double*)>& sink) const {
  auto apply_layers = [&](double theta) {
    for (const auto& layer : layers_)
      if (layer->active_at(theta)) layer->post_eval_many(theta, ys, count);
    if (t_ != 0.0)
      for (std::size_t i = 0; i < count; ++i) ys[i] += t_;
    if (extra_t)
      for (std::size_t i = 0; i < count; ++i) ys[i] += extra_t[i];
  };
  if (auto cursor = kernel_->make_cursor(*base_, theta0)) {
    for (std::int64_t k = 0; k < n; ++k) {
      double theta = cursor->theta();
      cursor->step(ys, count);
      apply_layers(theta);
      if (sink) sink(k + 1, ys);
    }
    return;
  }
  for (std::int64_t k = 0; k < n; ++k) {
    double theta = base_->step_n(theta0, k);
    kernel_->eval_many(theta, ys, count);
    apply_layers(theta);
    if (sink) sink(k + 1, ys);
  }
}

FiberLift ForcedLift::fiber(double theta) const {
  return FiberLift::from_function([&](double x) { return evaluate(theta, x); }, m_,
                                  x_lip_upper(), kernel_->tol());
}

double ForcedLift::flatten(const std::vector<double>& theta) const {
  double s = 0.0;
  for (double t : theta) s += t;
  return frac(s);
}

double ForcedLift::evaluate_at(const std::vector<double>& theta, double x) const {
  return evaluate(flatten(theta), x);
}

double ForcedLift::iterate_at(const std::vector<double>& theta, double x, std::int64_t n) const {
  for (std::int64_t k = 0; k < n; ++k) x = evaluate_at(base_->step_n_vec(theta, k), x);
  return x;
}

ForcedLift ForcedLift::translated(double dt) const {
  ForcedLift out = *this;
  out.t_ += dt;
  return out;
}

ForcedLift ForcedLift::with_t(double t) const {
  ForcedLift out = *this;
  out.t_ = t;
  return out;
}

ForcedLift ForcedLift::with_layer(LayerPtr layer) const {
  if (!layer) throw ConfigError("forced lift: null layer");
  ForcedLift out = *this;
  out.layers_.push_back(std::move(layer));
  return out;
}

ForcedLift ForcedLift::without_layers() const {
  ForcedLift out = *this;
  out.layers_.clear();
  return out;
}

double ForcedLift::tol_grid() const { return kernel_->tol() + x_lip_upper() / m_; }

double ForcedLift::x_lip_upper() const {
  double lip = kernel_->x_lip_upper();
  for (const auto& layer : layers_) lip *= layer->lip_upper();
  return lip;
}

double ForcedLift::x_lip_lower() const {
  double lip = kernel_->x_lip_lower();
  for (const auto& layer : layers_) lip *= layer->lip_lower();
  return lip;
}

double ForcedLift::theta_lip() const {
  double post_lip = 1.0;
  double extra = 0.0;
  for (const auto& layer : layers_) {
    post_lip *= layer->lip_upper();
    if (layer->theta_continuous()) extra += layer->theta_lip();
  }
  return post_lip * kernel_->theta_lip() + extra;
}

bool ForcedLift::theta_regular() const {
  for (const auto& layer : layers_)
    if (!layer->theta_continuous()) return false;
  return true;
}

namespace {

bool same_base(const BaseSystem& a, const BaseSystem& b) {
  return a.kind() == b.kind() && a.omega() == b.omega();
}

bool same_series(const FourierSeries& a, const FourierSeries& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].h != b[i].h || a[i].s != b[i].s || a[i].c != b[i].c) return false;
  return true;
}

// If two generators differ only by a constant vertical shift, return it.
std::optional<double> generator_shift(const Generator& a, const Generator& b) {
  if (a.family != b.family) return std::nullopt;
  switch (a.family) {
    case Generator::Family::rigid:
      return b.alpha - a.alpha;
    case Generator::Family::arnold_qpf:
      if (a.alpha == b.alpha && a.beta == b.beta && same_series(a.forcing, b.forcing))
        return b.tau - a.tau;
      return std::nullopt;
    case Generator::Family::harper:
      if (a.E == b.E && a.v0 == b.v0 && same_series(a.V, b.V)) return 0.0;
      return std::nullopt;
    case Generator::Family::fourier:
      if (same_series(a.x_terms, b.x_terms) && same_series(a.theta_terms, b.theta_terms) &&
          a.cross_terms.size() == b.cross_terms.size()) {
        for (std::size_t i = 0; i < a.cross_terms.size(); ++i) {
          const auto& u = a.cross_terms[i];
          const auto& v = b.cross_terms[i];
          if (u.hx != v.hx || u.ht != v.ht || u.ss != v.ss || u.sc != v.sc || u.cs != v.cs ||
              u.cc != v.cc)
            return std::nullopt;
        }
        return b.c0 - a.c0;
      }
      return std::nullopt;
  }
  return std::nullopt;
}

bool same_layers(const std::vector<LayerPtr>& a, const std::vector<LayerPtr>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].get() != b[i].get()) return false;
  return true;
}

}  // namespace

std::optional<double> ForcedLift::translate_delta(const ForcedLift& G) const {
  if (!same_base(*base_, G.base())) return std::nullopt;
  if (!same_layers(layers_, G.layers())) return std::nullopt;
  if (kernel_.get() == G.kernel().get()) return G.t_offset() - t_;
  const Generator* ga = kernel_->as_generator();
  const Generator* gb = G.kernel()->as_generator();
  if (ga && gb) {
    if (auto shift = generator_shift(*ga, *gb)) return *shift + (G.t_offset() - t_);
  }
  return std::nullopt;
}

double distance_c0(const ForcedLift& F, const ForcedLift& G, int theta_grid, int x_grid) {
  if (!same_base(F.base(), G.base()))
    throw ConfigError("distance_c0: maps live over different base systems");

  if (auto delta = F.translate_delta(G)) return std::fabs(*delta);

  // Structural bound when one map extends the other's layer stack: the extra
  // layers' certified C0 sizes plus the t difference.
  double structural = std::numeric_limits<double>::infinity();
  const auto& la = F.layers();
  const auto& lb = G.layers();
  if (F.kernel().get() == G.kernel().get() && la.size() <= lb.size()) {
    bool prefix = true;
    for (std::size_t i = 0; i < la.size(); ++i)
      if (la[i].get() != lb[i].get()) prefix = false;
    if (prefix) {
      double sum = std::fabs(G.t_offset() - F.t_offset());
      for (std::size_t i = la.size(); i < lb.size(); ++i) sum += lb[i]->c0_bound();
      structural = sum;
    }
  }

  // Sampled sup with certified widening.  In the x direction monotonicity
  // gives a rigorous per-cell bound; in the theta direction a Lipschitz
  // margin applies when both maps vary continuously in theta, otherwise the
  // discontinuous layers' certified sizes are added.
  double sampled = 0.0;
  std::vector<double> row_max(static_cast<std::size_t>(theta_grid), 0.0);
  parallel_for(static_cast<std::size_t>(theta_grid), [&](std::size_t a) {
    double theta = static_cast<double>(a) / theta_grid;
    double best = 0.0;
    double f_prev = F.evaluate(theta, 0.0);
    double g_prev = G.evaluate(theta, 0.0);
    for (int i = 1; i <= x_grid; ++i) {
      double x = static_cast<double>(i) / x_grid;
      double f_cur = F.evaluate(theta, x);
      double g_cur = G.evaluate(theta, x);
      best = std::max(best, std::max(f_cur - g_prev, g_cur - f_prev));
      f_prev = f_cur;
      g_prev = g_cur;
    }
    row_max[a] = best;
  }, default_workers());
  for (double v : row_max) sampled = std::max(sampled, v);

  double margin = 0.0;
  if (F.theta_regular() && G.theta_regular()) {
    margin = (F.theta_lip() + G.theta_lip()) * (0.5 / theta_grid);
  } else {
    for (const auto& l : F.layers())
      if (!l->theta_continuous()) margin += l->c0_bound();
    for (const auto& l : G.layers())
      if (!l->theta_continuous()) margin += l->c0_bound();
    margin += (F.kernel()->theta_lip() + G.kernel()->theta_lip()) * (0.5 / theta_grid);
  }
  return std::min(structural, sampled + margin);
}

}  // namespace rotaforge
