#pragma once

// Post-processing of particle runs: KDE densities, occupation (Krylov) functionals,
// moments, path moduli and the weak-form residual. Path integrals use the
// trapezoid rule on the snapshot grid; every reduction sums pairwise in a fixed order.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mkv/error.hpp"
#include "mkv/grid.hpp"
#include "mkv/kernels.hpp"
#include "mkv/parallel.hpp"
#include "mkv/particles.hpp"
#include "mkv/spaces.hpp"

namespace mkv {

struct Estimate {
  double value = 0.0;
  double se = 0.0;
};

/// Mean with a batch-means standard error over contiguous index blocks.
inline Estimate batch_means(std::span<const double> v, std::size_t batches = 20) {
  Estimate e;
  if (v.empty()) return e;
  e.value = pairwise_mean(v);
  batches = std::min(batches, v.size());
  if (batches < 2) return e;
  std::vector<double> means(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t lo = b * v.size() / batches, hi = (b + 1) * v.size() / batches;
    means[b] = pairwise_mean(v.subspan(lo, hi - lo));
  }
  std::vector<double> sq(batches);
  const double m = pairwise_mean(means);
  for (std::size_t b = 0; b < batches; ++b) sq[b] = (means[b] - m) * (means[b] - m);
  e.se = std::sqrt(pairwise_sum(sq) / static_cast<double>(batches - 1) / static_cast<double>(batches));
  return e;
}

/// Mean and standard error over independent replicates.
inline Estimate replicate_mean(std::span<const double> v) {
  Estimate e;
  if (v.empty()) return e;
  e.value = pairwise_mean(v);
  if (v.size() < 2) return e;
  std::vector<double> sq(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) sq[k] = (v[k] - e.value) * (v[k] - e.value);
  e.se = std::sqrt(pairwise_sum(sq) / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  return e;
}

inline double sample_sd(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = pairwise_mean(v);
  std::vector<double> sq(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) sq[k] = (v[k] - m) * (v[k] - m);
  return std::sqrt(pairwise_sum(sq) / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------------------
// Density estimation

struct DensityGrid {
  GriddedFunction density;
  std::array<double, 2> bandwidth{};
  double mass = 0.0;          // quadrature mass on the grid
  double outside_mass = 0.0;  // analytic Gaussian mass falling outside the grid box
};

/// sigma_k = N^{-1/6} * std_k per axis.
inline std::array<double, 2> default_bandwidth(std::span<const double> xy) {
  const std::size_t N = xy.size() / 2;
  std::array<double, 2> out{};
  for (int k = 0; k < 2; ++k) {
    std::vector<double> c(N), sq(N);
    for (std::size_t i = 0; i < N; ++i) c[i] = xy[2 * i + static_cast<std::size_t>(k)];
    const double m = pairwise_mean(c);
    for (std::size_t i = 0; i < N; ++i) sq[i] = (c[i] - m) * (c[i] - m);
    const double sd = N > 1 ? std::sqrt(pairwise_sum(sq) / static_cast<double>(N - 1)) : 0.0;
    out[static_cast<std::size_t>(k)] = std::pow(static_cast<double>(N), -1.0 / 6.0) * sd;
  }
  return out;
}

/// Gaussian-kernel density estimate of a planar cloud on a cell-centred grid.
/// A nonpositive bandwidth selects the default rule per axis.
inline DensityGrid kde(std::span<const double> xy, double bandwidth, const Axis& ax, const Axis& ay,
                       double max_leak = 0.01) {
  const std::size_t N = xy.size() / 2;
  if (N == 0) throw DomainError("kde needs at least one particle");
  DensityGrid out;
  out.bandwidth = bandwidth > 0.0 ? std::array<double, 2>{bandwidth, bandwidth} : default_bandwidth(xy);
  if (!(out.bandwidth[0] > 0.0 && out.bandwidth[1] > 0.0))
    throw DomainError("kde bandwidth must be positive (degenerate cloud needs an explicit bandwidth)");
  out.density = GriddedFunction({ax, ay});
  auto vals = out.density.values();
  const double sx = out.bandwidth[0], sy = out.bandwidth[1];
  const double reach = 7.0;
  const double norm = 1.0 / (2.0 * std::numbers::pi * sx * sy * static_cast<double>(N));
  std::vector<double> gx, gy, inside(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double px = xy[2 * i], py = xy[2 * i + 1];
    auto lo_idx = [&](const Axis& a, double p, double s) {
      return static_cast<long>(std::floor((p - reach * s - a.lo) / a.width()));
    };
    auto hi_idx = [&](const Axis& a, double p, double s) {
      return static_cast<long>(std::ceil((p + reach * s - a.lo) / a.width()));
    };
    const long x0 = std::max(0L, lo_idx(ax, px, sx)), x1 = std::min(static_cast<long>(ax.n), hi_idx(ax, px, sx));
    const long y0 = std::max(0L, lo_idx(ay, py, sy)), y1 = std::min(static_cast<long>(ay.n), hi_idx(ay, py, sy));
    auto cdf = [](double u) { return 0.5 * std::erfc(-u / std::numbers::sqrt2); };
    inside[i] = (cdf((ax.hi - px) / sx) - cdf((ax.lo - px) / sx)) * (cdf((ay.hi - py) / sy) - cdf((ay.lo - py) / sy));
    if (x0 >= x1 || y0 >= y1) continue;
    gx.resize(static_cast<std::size_t>(x1 - x0));
    gy.resize(static_cast<std::size_t>(y1 - y0));
    for (long k = x0; k < x1; ++k) {
      const double u = (ax.node(static_cast<std::size_t>(k)) - px) / sx;
      gx[static_cast<std::size_t>(k - x0)] = std::exp(-0.5 * u * u);
    }
    for (long k = y0; k < y1; ++k) {
      const double u = (ay.node(static_cast<std::size_t>(k)) - py) / sy;
      gy[static_cast<std::size_t>(k - y0)] = std::exp(-0.5 * u * u);
    }
    for (long a = x0; a < x1; ++a) {
      const double wx = gx[static_cast<std::size_t>(a - x0)] * norm;
      double* row = &vals[static_cast<std::size_t>(a) * ay.n];
      for (long b = y0; b < y1; ++b) row[b] += wx * gy[static_cast<std::size_t>(b - y0)];
    }
  }
  out.outside_mass = std::max(0.0, 1.0 - pairwise_mean(inside));
  out.mass = pairwise_sum(vals) * out.density.cell_volume();
  if (out.outside_mass > max_leak)
    throw ExtentError("kde grid too small: " + std::to_string(100.0 * out.outside_mass) + "% of the mass leaks outside");
  return out;
}

inline DensityGrid kde(const Ensemble& ens, double bandwidth, const Axis& ax, const Axis& ay) {
  if (ens.dimension() != 2) throw ConfigurationError("kde is planar (d = 2)");
  return kde(ens.positions(), bandwidth, ax, ay);
}

/// L1 distance between a density grid and a reference density, plus the
/// reference and estimate mass outside the grid (an upper bound on the tail part).
inline double l1_distance(const DensityGrid& g, const std::function<double(double, double)>& reference,
                          double reference_outside = 0.0) {
  const auto& f = g.density;
  const Axis& ax = f.axis(0);
  const Axis& ay = f.axis(1);
  std::vector<double> diff(f.size());
  for (std::size_t a = 0; a < ax.n; ++a)
    for (std::size_t b = 0; b < ay.n; ++b)
      diff[a * ay.n + b] = std::abs(f.values()[a * ay.n + b] - reference(ax.node(a), ay.node(b)));
  return pairwise_sum(diff) * f.cell_volume() + reference_outside + g.outside_mass;
}

inline double l1_distance(const DensityGrid& a, const DensityGrid& b) {
  if (!a.density.same_layout(b.density)) throw ConfigurationError("density grids differ in layout");
  std::vector<double> diff(a.density.size());
  for (std::size_t c = 0; c < diff.size(); ++c) diff[c] = std::abs(a.density.values()[c] - b.density.values()[c]);
  return pairwise_sum(diff) * a.density.cell_volume() + a.outside_mass + b.outside_mass;
}

// ---------------------------------------------------------------------------
// Gridded test functions

/// Multilinear interpolation of a gridded function at coords (time first when
/// present). Zero outside the grid box; constant extension inside the edge half-cells.
inline double interpolate(const GriddedFunction& f, std::span<const double> coords) {
  const std::size_t r = f.rank();
  std::array<std::size_t, 8> base{};
  std::array<double, 8> frac{};
  for (std::size_t k = 0; k < r; ++k) {
    const Axis& a = f.axis(k);
    const double c = coords[k];
    if (c < a.lo || c > a.hi) return 0.0;
    double u = (c - a.lo) / a.width() - 0.5;
    u = std::clamp(u, 0.0, static_cast<double>(a.n - 1));
    auto i = static_cast<std::size_t>(u);
    if (i >= a.n - 1) i = a.n >= 2 ? a.n - 2 : 0;
    base[k] = i;
    frac[k] = a.n >= 2 ? u - static_cast<double>(i) : 0.0;
  }
  const auto vals = f.values();
  double acc = 0.0;
  for (std::size_t corner = 0; corner < (std::size_t{1} << r); ++corner) {
    double w = 1.0;
    std::size_t flat = 0;
    for (std::size_t k = 0; k < r; ++k) {
      const bool up = (corner >> (r - 1 - k)) & 1u;
      const Axis& a = f.axis(k);
      const std::size_t idx = std::min(a.n - 1, base[k] + (up ? 1 : 0));
      w *= up ? frac[k] : 1.0 - frac[k];
      flat = flat * a.n + idx;
    }
    if (w != 0.0) acc += w * vals[flat];
  }
  return acc;
}

/// A nonnegative test function f(t, x): gridded for norms, optionally with an
/// exact pointwise form used along paths.
struct TestFunction {
  std::string id;
  GriddedFunction grid;  // spatial, or space-time with a time axis
  std::function<double(double, std::span<const double>)> exact;

  double operator()(double t, std::span<const double> x) const {
    if (exact) return exact(t, x);
    std::array<double, 8> c{};
    std::size_t k = 0;
    if (grid.has_time_axis()) c[k++] = t;
    for (double v : x) c[k++] = v;
    return interpolate(grid, std::span<const double>(c.data(), k));
  }
};

// ---------------------------------------------------------------------------
// Path functionals

/// Per-particle trapezoid integrals of several f(t, X_t) along paths, fed one
/// time slice at a time (from a store or online from a StepObserver).
class OccupationIntegrator : public StepObserver {
 public:
  OccupationIntegrator(std::vector<const TestFunction*> fs, std::size_t N, int d)
      : fs_(std::move(fs)), N_(N), d_(d), acc_(fs_.size() * N, 0.0), prev_(fs_.size() * N, 0.0) {}

  void add_slice(double t, std::span<const double> pos) {
    const auto d = static_cast<std::size_t>(d_);
    for (std::size_t m = 0; m < fs_.size(); ++m)
      for (std::size_t i = 0; i < N_; ++i) {
        const double v = (*fs_[m])(t, pos.subspan(i * d, d));
        if (started_) acc_[m * N_ + i] += 0.5 * (prev_[m * N_ + i] + v) * (t - t_prev_);
        prev_[m * N_ + i] = v;
      }
    t_prev_ = t;
    started_ = true;
  }

  void on_step(const StepRecord& rec) override {
    if (!started_) add_slice(rec.t, rec.before);
    add_slice(rec.t + rec.dt, rec.after);
  }

  /// Per-particle integrals for function m.
  std::span<const double> values(std::size_t m) const { return std::span<const double>(acc_).subspan(m * N_, N_); }
  double mean(std::size_t m) const { return pairwise_mean(values(m)); }
  std::size_t count() const { return fs_.size(); }

 private:
  std::vector<const TestFunction*> fs_;
  std::size_t N_;
  int d_;
  std::vector<double> acc_, prev_;
  double t_prev_ = 0.0;
  bool started_ = false;
};

inline std::vector<std::vector<double>> occupation_values(const TrajectoryStore& store,
                                                          std::vector<const TestFunction*> fs) {
  if (store.empty()) throw DomainError("empty trajectory store");
  OccupationIntegrator acc(fs, store.N, store.d);
  for (std::size_t k = 0; k < store.size(); ++k) acc.add_slice(store.times[k], store.snapshots[k]);
  std::vector<std::vector<double>> out;
  for (std::size_t m = 0; m < fs.size(); ++m) out.emplace_back(acc.values(m).begin(), acc.values(m).end());
  return out;
}

struct MomentReport {
  double beta = 0.0;
  double value = 0.0;    // (1/N) sum_i sup_t |X^i_t|^beta
  double se = 0.0;
  double initial = 0.0;  // (1/N) sum_i |X^i_0|^beta
  double ratio = 0.0;    // value / (initial + 1)
  bool admissible = true;  // beta below 2 / (d/p + 2/q)
};

/// Running sup of |X|^beta per particle; usable online or over a store.
class SupMomentTracker : public StepObserver {
 public:
  SupMomentTracker(double beta, std::size_t N, int d) : beta_(beta), d_(d), sup_(N, 0.0), init_(N, 0.0) {
    if (!(beta >= 0.0)) throw DomainError("moment order beta must be nonnegative");
  }
  void add_slice(std::span<const double> pos) {
    const auto d = static_cast<std::size_t>(d_);
    for (std::size_t i = 0; i < sup_.size(); ++i) {
      double r2 = 0.0;
      for (std::size_t k = 0; k < d; ++k) r2 += pos[i * d + k] * pos[i * d + k];
      const double v = beta_ == 0.0 ? 1.0 : std::pow(std::sqrt(r2), beta_);
      if (!started_) init_[i] = v;
      sup_[i] = started_ ? std::max(sup_[i], v) : v;
    }
    started_ = true;
  }
  void on_step(const StepRecord& rec) override {
    if (!started_) add_slice(rec.before);
    add_slice(rec.after);
  }
  MomentReport report(std::optional<Exponents> ex = std::nullopt) const {
    MomentReport r;
    r.beta = beta_;
    const auto e = batch_means(sup_);
    r.value = e.value;
    r.se = e.se;
    r.initial = pairwise_mean(init_);
    r.ratio = r.value / (r.initial + 1.0);
    if (ex) r.admissible = beta_ < 2.0 / (d_ / ex->p + 2.0 / ex->q);
    return r;
  }

 private:
  double beta_;
  int d_;
  std::vector<double> sup_, init_;
  bool started_ = false;
};

inline MomentReport sup_moment(const TrajectoryStore& store, double beta, std::optional<Exponents> ex = std::nullopt) {
  if (store.empty()) throw DomainError("empty trajectory store");
  SupMomentTracker t(beta, store.N, store.d);
  for (const auto& s : store.snapshots) t.add_slice(s);
  return t.report(ex);
}

// ---------------------------------------------------------------------------
// Krylov functionals

struct KrylovRow {
  std::string id;
  double estimate = 0.0;  // E int_0^T f(t, X_t) dt
  double se = 0.0;
  double norm = 0.0;      // localized space-time norm of f
  double ratio = 0.0;
};

struct KrylovReport {
  std::vector<KrylovRow> rows;
  double worst_ratio = 0.0;
  double p = 0.0, q = 0.0;
};

/// Ratio of occupation estimates to localized norms. Several replicate runs may be
/// given as per-run per-particle values; standard errors then come from replicates.
inline KrylovReport krylov_from_values(const std::vector<std::vector<std::vector<double>>>& per_run,
                                       const std::vector<const TestFunction*>& fs, const LocalizedNormSpec& spec,
                                       int d) {
  if (!index_class(spec.p, spec.q, d, 0.0).member)
    throw DomainError("Krylov exponents (p, q) must lie in the index set I_0");
  KrylovReport rep;
  rep.p = spec.p;
  rep.q = spec.q;
  for (std::size_t m = 0; m < fs.size(); ++m) {
    KrylovRow row;
    row.id = fs[m]->id;
    if (per_run.size() == 1) {
      const auto e = batch_means(per_run[0][m]);
      row.estimate = e.value;
      row.se = e.se;
    } else {
      std::vector<double> means;
      for (const auto& run : per_run) means.push_back(pairwise_mean(run[m]));
      const auto e = replicate_mean(means);
      row.estimate = e.value;
      row.se = e.se;
    }
    row.norm = localized_norm(fs[m]->grid, spec);
    row.ratio = row.norm > 0.0 ? row.estimate / row.norm : 0.0;
    rep.worst_ratio = std::max(rep.worst_ratio, row.ratio);
    rep.rows.push_back(row);
  }
  return rep;
}

inline KrylovReport krylov_ratio(const std::vector<const TrajectoryStore*>& stores,
                                 const std::vector<const TestFunction*>& fs, const LocalizedNormSpec& spec) {
  if (stores.empty()) throw DomainError("no trajectory stores given");
  std::vector<std::vector<std::vector<double>>> per_run;
  for (const auto* s : stores) per_run.push_back(occupation_values(*s, fs));
  return krylov_from_values(per_run, fs, spec, stores.front()->d);
}

inline KrylovReport krylov_ratio(const TrajectoryStore& store, const std::vector<const TestFunction*>& fs,
                                 const LocalizedNormSpec& spec) {
  return krylov_ratio(std::vector<const TrajectoryStore*>{&store}, fs, spec);
}

struct ProductKrylov {
  double estimate = 0.0;
  double se = 0.0;
  double norm = 0.0;
  double ratio = 0.0;
};

/// E int_0^T f(t, X_t, Y_t) dt for independent runs X and Y paired particle by
/// particle; f has a time axis and spatial axes (x, y). The ratio is against
/// the double-localized norm.
inline ProductKrylov product_krylov(const TrajectoryStore& X, const TrajectoryStore& Y,
                                    const std::function<double(double, std::span<const double>, std::span<const double>)>& f,
                                    const GriddedFunction* grid, double p1, double p2, double q0, double T) {
  if (X.empty() || Y.empty()) throw DomainError("empty trajectory store");
  const auto sx = X.metadata.find("seed"), sy = Y.metadata.find("seed");
  if (sx != X.metadata.end() && sy != Y.metadata.end() && sx->second == sy->second)
    throw IndependenceError("product estimate needs independently seeded runs (both seeds = " + sx->second + ")");
  if (X.size() != Y.size() || X.d != Y.d) throw ConfigurationError("paired stores must share the snapshot grid");
  for (std::size_t k = 0; k < X.size(); ++k)
    if (X.times[k] != Y.times[k]) throw ConfigurationError("paired stores must share the snapshot grid");
  const std::size_t N = std::min(X.N, Y.N);
  const auto d = static_cast<std::size_t>(X.d);
  std::vector<double> acc(N, 0.0), prev(N, 0.0);
  for (std::size_t k = 0; k < X.size(); ++k) {
    const auto& px = X.snapshots[k];
    const auto& py = Y.snapshots[k];
    for (std::size_t i = 0; i < N; ++i) {
      const double v = f(X.times[k], std::span<const double>(px).subspan(i * d, d),
                         std::span<const double>(py).subspan(i * d, d));
      if (k > 0) acc[i] += 0.5 * (prev[i] + v) * (X.times[k] - X.times[k - 1]);
      prev[i] = v;
    }
  }
  ProductKrylov out;
  const auto e = batch_means(acc);
  out.estimate = e.value;
  out.se = e.se;
  if (grid) {
    out.norm = double_localized_norm(*grid, p1, p2, q0, T);
    out.ratio = out.norm > 0.0 ? out.estimate / out.norm : 0.0;
  }
  return out;
}

/// Gridded variant: f sampled on (t, x, y) and interpolated along the paired paths.
inline ProductKrylov product_krylov(const TrajectoryStore& X, const TrajectoryStore& Y, const GriddedFunction& f,
                                    double p1, double p2, double q0, double T) {
  if (!f.has_time_axis() || f.spatial_rank() != 2 * static_cast<std::size_t>(X.d))
    throw ConfigurationError("product test function must live on (t, x, y)");
  auto eval = [&](double t, std::span<const double> x, std::span<const double> y) {
    std::array<double, 8> c{};
    c[0] = t;
    std::copy(x.begin(), x.end(), c.begin() + 1);
    std::copy(y.begin(), y.end(), c.begin() + 1 + static_cast<std::ptrdiff_t>(x.size()));
    return interpolate(f, std::span<const double>(c.data(), 1 + x.size() + y.size()));
  };
  return product_krylov(X, Y, eval, &f, p1, p2, q0, T);
}

// ---------------------------------------------------------------------------
// Path modulus

struct ModulusRow {
  double delta = 0.0;
  double value = 0.0;  // E sup_{|t-s| <= delta} |X_t - X_s|^{theta gamma}
  double se = 0.0;
};

struct ModulusReport {
  std::vector<ModulusRow> rows;
  double exponent = std::numeric_limits<double>::quiet_NaN();  // least-squares slope of log value on log delta
};

inline ModulusReport path_modulus(const TrajectoryStore& store, double gamma, double theta,
                                  std::span<const double> deltas, std::optional<Exponents> ex = std::nullopt) {
  if (store.size() < 2) throw DomainError("path modulus needs at least two snapshots");
  if (!(theta > 0.0 && theta < 1.0)) throw DomainError("theta must lie in (0, 1)");
  if (!(gamma > 1.0)) throw DomainError("gamma must exceed 1");
  if (ex && !(gamma < 2.0 / (store.d / ex->p + 2.0 / ex->q))) throw DomainError("gamma exceeds 2 / (d/p + 2/q)");
  double min_gap = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < store.size(); ++k) min_gap = std::min(min_gap, store.times[k] - store.times[k - 1]);
  const auto d = static_cast<std::size_t>(store.d);
  const double power = theta * gamma;
  ModulusReport rep;
  for (double delta : deltas) {
    if (delta < min_gap * (1.0 - 1e-9)) throw ResolutionError("delta below the snapshot resolution");
    std::vector<double> sup(store.N, 0.0);
    for (std::size_t a = 0; a < store.size(); ++a)
      for (std::size_t b = a + 1; b < store.size() && store.times[b] - store.times[a] <= delta * (1.0 + 1e-9); ++b)
        for (std::size_t i = 0; i < store.N; ++i) {
          double r2 = 0.0;
          for (std::size_t k = 0; k < d; ++k) r2 += std::pow(store.snapshots[b][i * d + k] - store.snapshots[a][i * d + k], 2);
          sup[i] = std::max(sup[i], r2);
        }
    for (auto& s : sup) s = std::pow(std::sqrt(s), power);
    const auto e = batch_means(sup);
    rep.rows.push_back({delta, e.value, e.se});
  }
  // Fit only when every value is positive.
  std::vector<double> lx, ly;
  for (const auto& r : rep.rows)
    if (r.value > 0.0) {
      lx.push_back(std::log(r.delta));
      ly.push_back(std::log(r.value));
    }
  if (lx.size() >= 2 && lx.size() == rep.rows.size()) {
    const double mx = pairwise_mean(lx), my = pairwise_mean(ly);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t k = 0; k < lx.size(); ++k) {
      sxy += (lx[k] - mx) * (ly[k] - my);
      sxx += (lx[k] - mx) * (lx[k] - mx);
    }
    rep.exponent = sxy / sxx;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Weak-form residual

/// Smooth test function with gradient and Laplacian.
struct SmoothTest {
  std::function<double(std::span<const double>)> f;
  std::function<void(std::span<const double>, std::span<double>)> grad;
  std::function<double(std::span<const double>)> laplacian;
};

inline SmoothTest gaussian_test() {
  return {[](std::span<const double> x) {
            double r2 = 0.0;
            for (double v : x) r2 += v * v;
            return std::exp(-r2);
          },
          [](std::span<const double> x, std::span<double> g) {
            double r2 = 0.0;
            for (double v : x) r2 += v * v;
            const double e = std::exp(-r2);
            for (std::size_t k = 0; k < x.size(); ++k) g[k] = -2.0 * x[k] * e;
          },
          [](std::span<const double> x) {
            double r2 = 0.0;
            for (double v : x) r2 += v * v;
            return (4.0 * r2 - 2.0 * static_cast<double>(x.size())) * std::exp(-r2);
          }};
}

struct ResidualPoint {
  double t = 0.0;
  double residual = 0.0;    // R(t)
  double martingale = 0.0;  // M(t) = (1/N) sum_i sum_k grad f(X^i_k) . dW^i_k (online only)
};

namespace detail {

/// Empirical averages of f, Laplacian f and b . grad f on one slice.
struct WeakTerms {
  double f = 0.0, lap = 0.0, transport = 0.0;
};

inline WeakTerms weak_terms(const SmoothTest& test, std::span<const double> pos, std::span<const double> drift, int dim) {
  const auto d = static_cast<std::size_t>(dim);
  const std::size_t N = pos.size() / d;
  std::vector<double> fv(N), lv(N), tv(N);
  std::array<double, 8> g{};
  for (std::size_t i = 0; i < N; ++i) {
    const auto x = pos.subspan(i * d, d);
    fv[i] = test.f(x);
    lv[i] = test.laplacian(x);
    test.grad(x, std::span<double>(g.data(), d));
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += drift[i * d + k] * g[k];
    tv[i] = s;
  }
  return {pairwise_mean(fv), pairwise_mean(lv), pairwise_mean(tv)};
}

}  // namespace detail

/// R(t) = mu_t(f) - mu_0(f) - int_0^t mu_s(Lap f) ds - int_0^t (1/N) sum_i b(X^i_s) . grad f(X^i_s) ds,
/// accumulated online with trapezoid time integrals on the step grid. The
/// martingale part of the Euler scheme is tracked alongside.
class WeakFormAccumulator : public StepObserver {
 public:
  WeakFormAccumulator(SmoothTest test, std::vector<double> checkpoints = {})
      : test_(std::move(test)), checkpoints_(std::move(checkpoints)) {}

  void on_step(const StepRecord& rec) override {
    const auto d = static_cast<std::size_t>(rec.d);
    const std::size_t N = rec.before.size() / d;
    // The drift at X_k arrives with step k, which closes the trapezoid on [t_{k-1}, t_k].
    absorb(detail::weak_terms(test_, rec.before, rec.drift, rec.d), rec.t, rec.dt);
    std::vector<double> mv(N);
    std::array<double, 8> g{};
    for (std::size_t i = 0; i < N; ++i) {
      test_.grad(rec.before.subspan(i * d, d), std::span<double>(g.data(), d));
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += g[k] * rec.noise[i * d + k];
      mv[i] = s;
    }
    martingale_ += pairwise_mean(mv);
  }

  bool wants_final_drift() const override { return true; }

  void on_finish(const Ensemble& fin, std::span<const double> drift) override {
    absorb(detail::weak_terms(test_, fin.positions(), drift, fin.dimension()), fin.time(), 0.0);
    final_ = current_;
  }

  const ResidualPoint& final_point() const { return final_; }
  const std::vector<ResidualPoint>& series() const { return series_; }

 private:
  SmoothTest test_;
  std::vector<double> checkpoints_;
  std::vector<ResidualPoint> series_;
  ResidualPoint final_, current_;
  detail::WeakTerms prev_;
  double prev_dt_ = 0.0, f0_ = 0.0, integral_ = 0.0, martingale_ = 0.0;
  bool started_ = false;

  void absorb(const detail::WeakTerms& terms, double t, double dt) {
    if (!started_) {
      f0_ = terms.f;
      started_ = true;
    } else {
      integral_ += 0.5 * (prev_.lap + prev_.transport + terms.lap + terms.transport) * prev_dt_;
    }
    current_ = {t, terms.f - f0_ - integral_, martingale_};
    const double tol = 0.5 * std::max(dt, prev_dt_);
    for (double c : checkpoints_)
      if (std::abs(c - t) < tol && (series_.empty() || series_.back().t < t)) series_.push_back(current_);
    prev_ = terms;
    prev_dt_ = dt;
  }
};

/// Store-based residual series at every snapshot; the drift is re-evaluated on
/// each snapshot and time integrals use the snapshot trapezoid rule.
inline std::vector<ResidualPoint> weak_form_residual(const TrajectoryStore& store, const SmoothTest& test,
                                                     const InteractionKernel& kernel, const DriftOptions& opt = {},
                                                     const Executor& exec = Executor{}) {
  if (store.empty()) throw DomainError("empty trajectory store");
  std::vector<ResidualPoint> out;
  detail::WeakTerms prev;
  double f0 = 0.0, integral = 0.0;
  for (std::size_t k = 0; k < store.size(); ++k) {
    const Ensemble e = store.ensemble(k);
    const auto drift = ensemble_drift(e, kernel, opt, exec);
    const auto terms = detail::weak_terms(test, e.positions(), drift, e.dimension());
    if (k == 0) f0 = terms.f;
    else integral += 0.5 * (prev.lap + prev.transport + terms.lap + terms.transport) * (store.times[k] - store.times[k - 1]);
    out.push_back({store.times[k], terms.f - f0 - integral, 0.0});
    prev = terms;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Derived quantities

/// (1/N) sum_i x^i wedge b^i for a planar ensemble.
inline double angular_momentum(std::span<const double> pos, std::span<const double> drift) {
  const std::size_t N = pos.size() / 2;
  std::vector<double> v(N);
  for (std::size_t i = 0; i < N; ++i) v[i] = pos[2 * i] * drift[2 * i + 1] - pos[2 * i + 1] * drift[2 * i];
  return pairwise_mean(v);
}

inline double second_moment(std::span<const double> pos, int dim) {
  const auto d = static_cast<std::size_t>(dim);
  const std::size_t N = pos.size() / d;
  std::vector<double> v(N);
  for (std::size_t i = 0; i < N; ++i) {
    double r2 = 0.0;
    for (std::size_t k = 0; k < d; ++k) r2 += pos[i * d + k] * pos[i * d + k];
    v[i] = r2;
  }
  return pairwise_mean(v);
}

}  // namespace mkv
