#pragma once

// Localized function-space norms on gridded functions: sup over translated
// cutoffs of L^p / H^{alpha,p} norms, their space-time versions, and the
// double-localized norm over (t, x, y).

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mkv/error.hpp"
#include "mkv/grid.hpp"
#include "mkv/kernels.hpp"

namespace mkv {

enum class Regime { subcritical, critical, supercritical };

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::subcritical: return "subcritical";
    case Regime::critical: return "critical";
    case Regime::supercritical: return "supercritical";
  }
  return "?";
}

struct IndexClass {
  bool member = false;   // (p, q) in I_alpha: d/p + 2/q < 2 - alpha
  Regime regime = Regime::subcritical;
  double scaling = 0.0;  // d/p + 2/q
};

inline IndexClass index_class(double p, double q, int d, double alpha) {
  if (!(p > 1.0) || !(q > 1.0) || !std::isfinite(p) || !std::isfinite(q))
    throw DomainError("exponents must lie in (1, inf)");
  if (d < 1) throw DomainError("dimension must be positive");
  if (!(alpha >= 0.0 && alpha < 2.0)) throw DomainError("alpha must lie in [0, 2)");
  IndexClass c;
  c.scaling = d / p + 2.0 / q;
  c.member = c.scaling < 2.0 - alpha;
  constexpr double tie = 1e-12;
  c.regime = c.scaling < 1.0 - tie ? Regime::subcritical
             : c.scaling > 1.0 + tie ? Regime::supercritical
                                      : Regime::critical;
  return c;
}

/// Smooth cutoff: chi = 1 on |x| <= 1, 0 on |x| >= 2, C-infinity in between.
struct Cutoff {
  static double psi(double s) { return s > 0.0 ? std::exp(-1.0 / s) : 0.0; }

  static double radial(double rho) {
    if (rho <= 1.0) return 1.0;
    if (rho >= 2.0) return 0.0;
    const double a = psi(2.0 - rho), b = psi(rho - 1.0);
    return a / (a + b);
  }

  /// chi^z_r(x) = chi((x - z) / r), given |x - z|.
  static double scaled(double dist, double r) { return radial(dist / r); }
};

struct LocalizedNormSpec {
  double alpha = 0.0;
  double p = 2.0;
  double q = 2.0;
  double r = 1.0;
  double T = 1.0;
  /// Spacing of the lattice of centres approximating sup over z; <= 0 means r / 4.
  double lattice_spacing = 0.0;
  /// Evaluate every H^{alpha,p} norm through the Fourier multiplier, including alpha in {0, 1}.
  bool spectral = false;

  double spacing() const { return lattice_spacing > 0.0 ? lattice_spacing : 0.25 * r; }
};

namespace detail {

/// Multi-index iteration over a box [lo_k, hi_k) in up to 4 dimensions.
struct Box {
  std::vector<std::size_t> lo, hi;
  std::size_t count() const {
    std::size_t c = 1;
    for (std::size_t k = 0; k < lo.size(); ++k) c *= hi[k] - lo[k];
    return c;
  }
};

inline std::size_t flat_index(std::span<const Axis> axes, std::span<const std::size_t> idx) {
  std::size_t f = 0;
  for (std::size_t k = 0; k < axes.size(); ++k) f = f * axes[k].n + idx[k];
  return f;
}

template <class F>
void for_each_in_box(const Box& box, F&& f) {
  const std::size_t d = box.lo.size();
  std::vector<std::size_t> idx(box.lo);
  if (box.count() == 0) return;
  while (true) {
    f(std::span<const std::size_t>(idx));
    std::size_t k = d;
    while (k-- > 0) {
      if (++idx[k] < box.hi[k]) break;
      idx[k] = box.lo[k];
      if (k == 0) return;
    }
  }
}

/// Cells whose centres lie within `radius` of point z (bounding-box indices).
inline Box window(std::span<const Axis> axes, std::span<const double> z, double radius, std::size_t margin = 0) {
  Box b;
  for (std::size_t k = 0; k < axes.size(); ++k) {
    const double w = axes[k].width();
    const double lo = std::floor((z[k] - radius - axes[k].lo) / w) - static_cast<double>(margin);
    const double hi = std::ceil((z[k] + radius - axes[k].lo) / w) + static_cast<double>(margin);
    b.lo.push_back(static_cast<std::size_t>(std::clamp(lo, 0.0, static_cast<double>(axes[k].n))));
    b.hi.push_back(static_cast<std::size_t>(std::clamp(hi, 0.0, static_cast<double>(axes[k].n))));
  }
  return b;
}

/// Bounding box (in coordinates) of cells where |f| exceeds `tol`, over all time slices.
struct Support {
  bool empty = true;
  std::vector<double> lo, hi;
};

inline Support support_of(std::span<const Axis> axes, std::size_t slice, std::size_t slices,
                          std::span<const double> values, double tol) {
  Support s;
  const std::size_t d = axes.size();
  s.lo.assign(d, std::numeric_limits<double>::infinity());
  s.hi.assign(d, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> idx(d);
  for (std::size_t t = 0; t < slices; ++t) {
    for (std::size_t c = 0; c < slice; ++c) {
      if (!(std::abs(values[t * slice + c]) > tol)) continue;
      s.empty = false;
      std::size_t rem = c;
      for (std::size_t k = d; k-- > 0;) {
        idx[k] = rem % axes[k].n;
        rem /= axes[k].n;
        const double x = axes[k].node(idx[k]);
        s.lo[k] = std::min(s.lo[k], x - 0.5 * axes[k].width());
        s.hi[k] = std::max(s.hi[k], x + 0.5 * axes[k].width());
      }
    }
  }
  return s;
}

inline void check_boundary(const GriddedFunction& f, double tol) {
  const auto axes = f.spatial_axes();
  const std::size_t d = axes.size();
  std::vector<std::size_t> idx(d);
  for (std::size_t t = 0; t < f.time_count(); ++t) {
    const auto s = f.slice(t);
    for (std::size_t c = 0; c < s.size(); ++c) {
      if (!(std::abs(s[c]) > tol)) continue;
      std::size_t rem = c;
      for (std::size_t k = d; k-- > 0;) {
        idx[k] = rem % axes[k].n;
        rem /= axes[k].n;
        if (idx[k] == 0 || idx[k] + 1 == axes[k].n)
          throw ExtentError("gridded function is non-zero on the grid boundary; enlarge the grid");
      }
    }
  }
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// Lattice of centres k * spacing covering the box [lo - pad, hi + pad].
inline std::vector<std::vector<double>> lattice(const Support& s, double pad, double spacing) {
  std::vector<std::vector<double>> axes_pts;
  for (std::size_t k = 0; k < s.lo.size(); ++k) {
    std::vector<double> pts;
    const auto first = static_cast<long>(std::floor((s.lo[k] - pad) / spacing));
    const auto last = static_cast<long>(std::ceil((s.hi[k] + pad) / spacing));
    for (long i = first; i <= last; ++i) pts.push_back(static_cast<double>(i) * spacing);
    axes_pts.push_back(std::move(pts));
  }
  std::vector<std::vector<double>> out(1);
  for (const auto& pts : axes_pts) {
    std::vector<std::vector<double>> next;
    for (const auto& prefix : out)
      for (double x : pts) {
        auto v = prefix;
        v.push_back(x);
        next.push_back(std::move(v));
      }
    out = std::move(next);
  }
  return out;
}

/// H^{alpha,p} norm of a function stored on a box of cells (row-major, `dims` per axis).
/// alpha = 0: L^p. alpha = 1: (||g||_p^p + ||grad g||_p^p)^{1/p} with central
/// differences. Fractional alpha: the Bessel multiplier (1 + |xi|^2)^{alpha/2}
/// applied through a DFT on a torus twice the box extent.
inline double bessel_norm(std::span<const double> g, std::span<const std::size_t> dims, std::span<const double> h,
                          double alpha, double p, bool force_spectral = false) {
  const std::size_t d = dims.size();
  double vol = 1.0;
  for (double w : h) vol *= w;
  if (alpha == 0.0 && !force_spectral) {
    double s = 0.0;
    for (double v : g) s += std::pow(std::abs(v), p);
    return std::pow(s * vol, 1.0 / p);
  }
  if (alpha == 1.0 && !force_spectral) {
    std::vector<std::size_t> stride(d, 1);
    for (std::size_t k = d - 1; k-- > 0;) stride[k] = stride[k + 1] * dims[k + 1];
    std::vector<std::size_t> idx(d);
    double s = 0.0;
    for (std::size_t c = 0; c < g.size(); ++c) {
      std::size_t rem = c;
      for (std::size_t k = d; k-- > 0;) {
        idx[k] = rem % dims[k];
        rem /= dims[k];
      }
      double grad2 = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double up = idx[k] + 1 < dims[k] ? g[c + stride[k]] : 0.0;
        const double dn = idx[k] > 0 ? g[c - stride[k]] : 0.0;
        const double dk = (up - dn) / (2.0 * h[k]);
        grad2 += dk * dk;
      }
      s += std::pow(std::abs(g[c]), p) + std::pow(std::sqrt(grad2), p);
    }
    return std::pow(s * vol, 1.0 / p);
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("localized norms support alpha in [0, 1]");

  std::vector<int> padded(d);
  std::size_t total = 1;
  for (std::size_t k = 0; k < d; ++k) {
    padded[k] = static_cast<int>(2 * dims[k]);
    total *= static_cast<std::size_t>(padded[k]);
  }
  const std::size_t last_complex = static_cast<std::size_t>(padded[d - 1] / 2 + 1);
  const std::size_t spectral = total / static_cast<std::size_t>(padded[d - 1]) * last_complex;
  double* real = fftw_alloc_real(total);
  fftw_complex* freq = fftw_alloc_complex(spectral);
  std::fill(real, real + total, 0.0);
  // Copy g into the low corner of the padded box.
  std::vector<std::size_t> idx(d);
  for (std::size_t c = 0; c < g.size(); ++c) {
    std::size_t rem = c;
    for (std::size_t k = d; k-- > 0;) {
      idx[k] = rem % dims[k];
      rem /= dims[k];
    }
    std::size_t f = 0;
    for (std::size_t k = 0; k < d; ++k) f = f * static_cast<std::size_t>(padded[k]) + idx[k];
    real[f] = g[c];
  }
  fftw_plan fwd = fftw_plan_dft_r2c(static_cast<int>(d), padded.data(), real, freq, FFTW_ESTIMATE);
  fftw_plan bwd = fftw_plan_dft_c2r(static_cast<int>(d), padded.data(), freq, real, FFTW_ESTIMATE);
  fftw_execute(fwd);
  for (std::size_t c = 0; c < spectral; ++c) {
    std::size_t rem = c;
    double xi2 = 0.0;
    for (std::size_t k = d; k-- > 0;) {
      const std::size_t extent = k + 1 == d ? last_complex : static_cast<std::size_t>(padded[k]);
      long m = static_cast<long>(rem % extent);
      rem /= extent;
      if (k + 1 != d && m > padded[k] / 2) m -= padded[k];
      const double xi = kTwoPi * static_cast<double>(m) / (static_cast<double>(padded[k]) * h[k]);
      xi2 += xi * xi;
    }
    const double mult = std::pow(1.0 + xi2, 0.5 * alpha) / static_cast<double>(total);
    freq[c][0] *= mult;
    freq[c][1] *= mult;
  }
  fftw_execute(bwd);
  double s = 0.0;
  for (std::size_t c = 0; c < total; ++c) s += std::pow(std::abs(real[c]), p);
  fftw_destroy_plan(fwd);
  fftw_destroy_plan(bwd);
  fftw_free(real);
  fftw_free(freq);
  return std::pow(s * vol, 1.0 / p);
}

}  // namespace detail

/// sup over a lattice of centres z of ||f chi^z_r||_{alpha,p}; for a space-time
/// grid the L^q-in-time composition sup_z (int_0^T ||chi^z_r f(t)||^q dt)^{1/q}.
/// Time-independent input is treated as constant on [0, spec.T].
inline double localized_norm(const GriddedFunction& f, const LocalizedNormSpec& spec) {
  if (!(spec.p >= 1.0)) throw DomainError("localized norm needs p >= 1");
  if (!(spec.q >= 1.0)) throw DomainError("localized norm needs q >= 1");
  if (!(spec.r > 0.0)) throw DomainError("cutoff radius must be positive");
  if (spec.spacing() > spec.r) throw ResolutionError("lattice spacing exceeds the cutoff radius");
  const double peak = detail::max_abs(f.values());
  if (peak == 0.0) return 0.0;
  const double tol = 1e-12 * peak;
  detail::check_boundary(f, tol);

  const auto axes = f.spatial_axes();
  const std::size_t d = axes.size();
  const auto supp = detail::support_of(axes, f.slice_size(), f.time_count(), f.values(), tol);
  const auto centres = detail::lattice(supp, 2.0 * spec.r, spec.spacing());
  std::vector<double> h(d);
  for (std::size_t k = 0; k < d; ++k) h[k] = axes[k].width();

  double best = 0.0;
  std::vector<double> chi, g;
  std::vector<std::size_t> dims(d);
  std::vector<std::size_t> gidx(d);
  for (const auto& z : centres) {
    const std::size_t margin = spec.alpha == 1.0 ? 1 : 0;
    const auto box = detail::window(axes, z, 2.0 * spec.r, margin);
    if (box.count() == 0) continue;
    for (std::size_t k = 0; k < d; ++k) dims[k] = box.hi[k] - box.lo[k];
    chi.clear();
    std::vector<std::size_t> flats;
    detail::for_each_in_box(box, [&](std::span<const std::size_t> idx) {
      double r2 = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double dx = axes[k].node(idx[k]) - z[k];
        r2 += dx * dx;
      }
      chi.push_back(Cutoff::scaled(std::sqrt(r2), spec.r));
      flats.push_back(detail::flat_index(axes, idx));
    });
    double time_acc = 0.0;
    for (std::size_t t = 0; t < f.time_count(); ++t) {
      const auto s = f.slice(t);
      g.resize(chi.size());
      bool any = false;
      for (std::size_t c = 0; c < chi.size(); ++c) {
        g[c] = s[flats[c]] * chi[c];
        any = any || g[c] != 0.0;
      }
      const double inner = any ? detail::bessel_norm(g, dims, h, spec.alpha, spec.p, spec.spectral) : 0.0;
      if (f.has_time_axis()) time_acc += std::pow(inner, spec.q) * f.time_step();
      else time_acc = inner;
    }
    const double value = f.has_time_axis() ? std::pow(time_acc, 1.0 / spec.q)
                                           : std::pow(spec.T, 1.0 / spec.q) * time_acc;
    best = std::max(best, value);
  }
  return best;
}

/// sup over centre pairs (z, z') of
/// ( int_0^T ( int 1_{B_1(z')}(y) ||1_{B_1(z)} f(t, ., y)||_{p1}^{p2} dy )^{q0/p2} dt )^{1/q0}.
/// The spatial axes of f are split in half: the first half is x, the second y.
inline double double_localized_norm(const GriddedFunction& f, double p1, double p2, double q0, double T,
                                    double lattice_spacing = 0.25) {
  if (!(p1 >= 1.0 && p2 >= 1.0 && q0 >= 1.0)) throw DomainError("double-localized norm needs exponents >= 1");
  if (!(T > 0.0)) throw DomainError("time horizon must be positive");
  if (lattice_spacing > 1.0) throw ResolutionError("lattice spacing exceeds the unit ball radius");
  const auto axes = f.spatial_axes();
  if (axes.size() % 2 != 0 || axes.size() > 6) throw ConfigurationError("expected a grid over x and y of equal dimension");
  const double peak = detail::max_abs(f.values());
  if (peak == 0.0) return 0.0;
  const double tol = 1e-12 * peak;
  detail::check_boundary(f, tol);

  const std::size_t d = axes.size() / 2;
  const auto xaxes = axes.subspan(0, d), yaxes = axes.subspan(d, d);
  std::size_t sx = 1, sy = 1;
  for (const auto& a : xaxes) sx *= a.n;
  for (const auto& a : yaxes) sy *= a.n;
  double vx = 1.0, vy = 1.0;
  for (const auto& a : xaxes) vx *= a.width();
  for (const auto& a : yaxes) vy *= a.width();

  // Support per block: collapse the other variable.
  std::vector<double> mx(sx, 0.0), my(sy, 0.0);
  for (std::size_t t = 0; t < f.time_count(); ++t) {
    const auto s = f.slice(t);
    for (std::size_t ix = 0; ix < sx; ++ix)
      for (std::size_t iy = 0; iy < sy; ++iy) {
        const double v = std::abs(s[ix * sy + iy]);
        mx[ix] = std::max(mx[ix], v);
        my[iy] = std::max(my[iy], v);
      }
  }
  const auto zx = detail::lattice(detail::support_of(xaxes, sx, 1, mx, tol), 1.0, lattice_spacing);
  const auto zy = detail::lattice(detail::support_of(yaxes, sy, 1, my, tol), 1.0, lattice_spacing);

  auto ball_cells = [](std::span<const Axis> ax, const std::vector<double>& z) {
    std::vector<std::size_t> cells;
    const auto box = detail::window(ax, z, 1.0);
    detail::for_each_in_box(box, [&](std::span<const std::size_t> idx) {
      double r2 = 0.0;
      for (std::size_t k = 0; k < ax.size(); ++k) {
        const double dx = ax[k].node(idx[k]) - z[k];
        r2 += dx * dx;
      }
      if (r2 < 1.0) cells.push_back(detail::flat_index(ax, idx));
    });
    return cells;
  };
  std::vector<std::vector<std::size_t>> xballs, yballs;
  for (const auto& z : zx) xballs.push_back(ball_cells(xaxes, z));
  for (const auto& z : zy) yballs.push_back(ball_cells(yaxes, z));

  const std::size_t nt = f.time_count();
  const double dt = f.has_time_axis() ? f.time_step() : T;
  // inner[t][iz][iy] = ||1_{B(z)} f(t, ., y)||_{p1}^{p2}
  std::vector<double> inner(nt * zx.size() * sy, 0.0);
  for (std::size_t t = 0; t < nt; ++t) {
    const auto s = f.slice(t);
    for (std::size_t iz = 0; iz < zx.size(); ++iz)
      for (std::size_t iy = 0; iy < sy; ++iy) {
        if (my[iy] == 0.0) continue;
        double acc = 0.0;
        for (std::size_t ix : xballs[iz]) acc += std::pow(std::abs(s[ix * sy + iy]), p1);
        inner[(t * zx.size() + iz) * sy + iy] = std::pow(std::pow(acc * vx, 1.0 / p1), p2);
      }
  }
  double best = 0.0;
  for (std::size_t iz = 0; iz < zx.size(); ++iz)
    for (std::size_t jz = 0; jz < zy.size(); ++jz) {
      double acc_t = 0.0;
      for (std::size_t t = 0; t < nt; ++t) {
        double acc_y = 0.0;
        for (std::size_t iy : yballs[jz]) acc_y += inner[(t * zx.size() + iz) * sy + iy];
        acc_t += std::pow(acc_y * vy, q0 / p2) * dt;
      }
      best = std::max(best, std::pow(acc_t, 1.0 / q0));
    }
  return best;
}

/// Convolution of a spatial grid function with the scaled mollifier of radius eps,
/// weights renormalised to unit discrete mass.
inline GriddedFunction mollify_grid(const GriddedFunction& f, double eps) {
  if (f.has_time_axis()) throw ConfigurationError("grid mollification expects a spatial grid");
  if (!(eps > 0.0)) throw DomainError("mollification radius must be positive");
  const auto axes = f.spatial_axes();
  const std::size_t d = axes.size();
  const Mollifier rho(static_cast<int>(d), 1.0 / eps);
  std::vector<long> reach(d);
  for (std::size_t k = 0; k < d; ++k) reach[k] = static_cast<long>(std::ceil(eps / axes[k].width()));
  struct Tap {
    std::vector<long> off;
    double w;
  };
  std::vector<Tap> taps;
  double wsum = 0.0;
  detail::Box box;
  for (std::size_t k = 0; k < d; ++k) {
    box.lo.push_back(0);
    box.hi.push_back(static_cast<std::size_t>(2 * reach[k] + 1));
  }
  detail::for_each_in_box(box, [&](std::span<const std::size_t> idx) {
    std::vector<long> off(d);
    double r2 = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      off[k] = static_cast<long>(idx[k]) - reach[k];
      const double u = static_cast<double>(off[k]) * axes[k].width();
      r2 += u * u;
    }
    const double w = rho.at_radius(std::sqrt(r2));
    if (w > 0.0) {
      taps.push_back({off, w});
      wsum += w;
    }
  });
  if (taps.empty()) taps.push_back({std::vector<long>(d, 0), 1.0}), wsum = 1.0;
  GriddedFunction out(std::vector<Axis>(axes.begin(), axes.end()), false);
  const auto src = f.values();
  auto dst = out.values();
  std::vector<std::size_t> idx(d), tgt(d);
  for (std::size_t c = 0; c < src.size(); ++c) {
    if (src[c] == 0.0) continue;
    f.unflatten(c, idx);
    for (const auto& tap : taps) {
      bool inside = true;
      for (std::size_t k = 0; k < d; ++k) {
        const long j = static_cast<long>(idx[k]) + tap.off[k];
        if (j < 0 || j >= static_cast<long>(axes[k].n)) {
          inside = false;
          break;
        }
        tgt[k] = static_cast<std::size_t>(j);
      }
      if (inside) dst[detail::flat_index(axes, tgt)] += src[c] * tap.w / wsum;
    }
  }
  return out;
}

struct StabilityRow {
  double eps = 0.0;
  double mollified_norm = 0.0;  // |||f_eps|||
  double base_norm = 0.0;       // |||f|||
  double ratio = 0.0;           // |||f_eps||| / |||f|||  (0 when f = 0)
  double local_error = 0.0;     // ||(f_eps - f) phi||_{alpha,p}, phi = chi^0_1
};

/// For each eps: the localized norm of f * rho_eps and its localized distance to f.
inline std::vector<StabilityRow> mollifier_stability_check(const GriddedFunction& f, const LocalizedNormSpec& spec,
                                                           std::span<const double> eps_list) {
  std::vector<StabilityRow> rows;
  const double base = localized_norm(f, spec);
  const auto axes = f.spatial_axes();
  std::vector<std::size_t> dims;
  std::vector<double> h;
  for (const auto& a : axes) {
    dims.push_back(a.n);
    h.push_back(a.width());
  }
  std::vector<double> phi(f.size());
  std::vector<std::size_t> idx(axes.size());
  for (std::size_t c = 0; c < f.size(); ++c) {
    f.unflatten(c, idx);
    double r2 = 0.0;
    for (std::size_t k = 0; k < axes.size(); ++k) r2 += std::pow(axes[k].node(idx[k]), 2);
    phi[c] = Cutoff::radial(std::sqrt(r2));
  }
  for (double eps : eps_list) {
    const auto fe = mollify_grid(f, eps);
    StabilityRow row;
    row.eps = eps;
    row.base_norm = base;
    row.mollified_norm = localized_norm(fe, spec);
    row.ratio = base > 0.0 ? row.mollified_norm / base : 0.0;
    std::vector<double> diff(f.size());
    for (std::size_t c = 0; c < f.size(); ++c) diff[c] = (fe.values()[c] - f.values()[c]) * phi[c];
    row.local_error = detail::bessel_norm(diff, dims, h, spec.alpha, spec.p);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mkv
