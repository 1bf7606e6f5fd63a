#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rotaforge/base_system.hpp"

namespace rotaforge {

// Closed arc [lo, lo + len] on the circle, lo in [0, 1), 0 <= len <= 1.
// len == 0 is a single point; len == 1 is the full circle.
struct Arc {
  double lo = 0.0;
  double len = 0.0;
};

// Sorted disjoint union of closed arcs with tolerant membership.
class ArcUnion {
 public:
  ArcUnion() = default;
  explicit ArcUnion(std::vector<Arc> arcs);  // normalizes: reduces, sorts, merges
  static ArcUnion full_circle();

  bool empty() const { return arcs_.empty() && !full_; }
  bool is_full() const { return full_; }
  const std::vector<Arc>& arcs() const { return arcs_; }
  std::size_t count() const { return full_ ? 1 : arcs_.size(); }

  bool contains(double x, double tol = 0.0) const;
  double measure() const;

 private:
  std::vector<Arc> arcs_;
  bool full_ = false;
};

// Position of a point relative to the return set K, under the boundary
// precision policy: "on the boundary" means within boundary_tol of an
// endpoint, interior and outside are the unambiguous remainder.
enum class KPosition { interior, boundary, outside };

struct ReturnSetOptions {
  double boundary_tol = 1e-9;   // on-boundary envelope
  double length_factor = 0.9;   // arc length as a fraction of min ||k*omega||
  std::int64_t horizon = 100000;  // general-position / mildness check horizon
  int mild_samples = 32;        // sampled orbits for the mildness re-check
  std::uint64_t seed = 0x5eed;  // deterministic general-position search
};

// A return set: a compact K (one closed arc per base coordinate) that is
// n-good (g^k(K) disjoint for k < n), D-spanning (the first D translates
// cover), and d-mild (every full orbit meets the boundary at most d times).
class ReturnSet {
 public:
  const BaseSystem& base() const { return *base_; }
  const BasePtr& base_ptr() const { return base_; }
  const std::vector<Arc>& K() const { return k_; }
  const Arc& arc() const { return k_.front(); }  // 1-d convenience
  std::int64_t n() const { return n_; }
  std::int64_t D() const { return d_span_; }
  int d() const { return d_mild_; }
  double boundary_tol() const { return tol_; }
  // True on the 1-d arithmetic path (exact goodness/spanning); false for
  // declared higher-dimensional sets verified by sampling only.
  bool exact() const { return exact_; }

  // Scalar-base point classification and membership (closed K).
  KPosition classify(double theta) const;
  bool in_K(double theta) const;
  // Product membership for d-dimensional bases.
  KPosition classify_vec(const std::vector<double>& theta) const;

  // Search cap for entry/return loops; exceeding it raises
  // CertificationError (it never triggers for a verified return set).
  std::int64_t search_cap() const { return 4 * d_span_ + 16; }

 private:
  friend ReturnSet build_return_set(const BasePtr& base, std::int64_t n,
                                    const ReturnSetOptions& opts);
  friend ReturnSet declared_return_set(const BasePtr& base, std::vector<Arc> K, std::int64_t n,
                                       int d_declared, const ReturnSetOptions& opts);
  friend ArcUnion tower_sets(const ReturnSet& K, int j);

  BasePtr base_;
  std::vector<Arc> k_;
  std::int64_t n_ = 0;
  std::int64_t d_span_ = 0;
  int d_mild_ = 2;
  double tol_ = 1e-9;
  bool exact_ = true;

  // Tower-set cache (W^j computed once per return set), shared across
  // copies; append-only with idempotent entries.
  std::shared_ptr<struct ReturnSetCache> cache_;
};

// Construct a verified return set over a 1-d irrational rotation: the arc
// length is length_factor * min_{1<=k<n} ||k*omega|| (disjoint translates),
// the left endpoint is searched in general position (its orbit avoids 0 and
// the right endpoint to the horizon), D is the exact minimal covering count
// from an endpoint sweep, and d = 2 (an orbit meets each endpoint at most
// once); all three properties are re-verified after construction.
ReturnSet build_return_set(const BasePtr& base, std::int64_t n,
                           const ReturnSetOptions& opts = {});

// Declared return set over a d-dimensional rotation: K is a user-supplied
// product of arcs and d_mild is user-declared.  Goodness is checked exactly
// coordinate-wise, the spanning count D is measured on sampled first-entry
// times, and mildness is sampled; a refuted declaration raises
// CertificationError.
ReturnSet declared_return_set(const BasePtr& base, std::vector<Arc> K, std::int64_t n,
                              int d_declared, const ReturnSetOptions& opts = {});

// Exact first-return time ell(theta) = min{j > 0 | g^j(theta) in K} for
// theta in closed K (ConfigError otherwise); n <= ell <= D.
std::int64_t first_return(const ReturnSet& K, double theta);

// Window and boundary data of one base point.
struct StratumInfo {
  std::int64_t ell_plus = 0;   // min{j > 0 | g^j in int K}
  std::int64_t ell_minus = 0;  // min{j >= 0 | g^-j in int K}
  std::int64_t ell = 0;        // first return (0 when theta not in K)
  std::vector<std::int64_t> t_boundary;  // T_B: window times on the boundary
  int n_hits = 0;              // N(theta) = #T_B
  bool in_k = false;
  int stratum = -1;            // i with theta in Z^i (= d - N) for theta in K
};
StratumInfo stratify(const ReturnSet& K, double theta);
StratumInfo stratify_vec(const ReturnSet& K, const std::vector<double>& theta);

// Points of the finite strata Z^i, i < d (candidates on the boundary
// orbits with the hit inside their window), sorted; 1-d bases only.
std::vector<double> z_points(const ReturnSet& K, int i);

// Tower set W^j = union over theta in K^j of its return tower
// {g^i(theta) | 0 <= i < ell(theta)} as a finite union of closed arcs;
// j = d is the full circle, j = -1 is empty.  1-d bases only.
ArcUnion tower_sets(const ReturnSet& K, int j);

// Maximal subarcs of K with constant first-return time, in circle order
// within K (at most 3 distinct return values for a 1-d rotation).
struct TowerArc {
  Arc arc;
  std::int64_t ell = 0;
};
std::vector<TowerArc> return_towers(const ReturnSet& K);

// Summary dump: {K:[a,L], n, D, d, strata:[{i, arcs|points}], W:[{j, arcs}]}.
// Strata with i < d are the finite exceptional sets (listed as points); the
// stratum i = d entry reports the closure (the full arc K).
nlohmann::json strata_json(const ReturnSet& K);

}  // namespace rotaforge
