#pragma once

// Interaction kernels K(t, x, y), their majorants, and mollification.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mkv/error.hpp"
#include "mkv/quadrature.hpp"

namespace mkv {

using ConstPoint = std::span<const double>;
using MutPoint = std::span<double>;

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Integrability exponents (p, q) of a kernel majorant h in L^q_t(L~^p_x).
struct Exponents {
  double p = 2.0;
  double q = 2.0;
};

/// A vector field K(t, x, y) on R^d, dominated by h(t, x - y).
class InteractionKernel {
 public:
  virtual ~InteractionKernel() = default;

  virtual std::string id() const = 0;
  virtual int dimension() const = 0;
  virtual void evaluate(double t, ConstPoint x, ConstPoint y, MutPoint out) const = 0;
  virtual double majorant(double t, ConstPoint z) const = 0;

  virtual Exponents majorant_exponents() const { return {}; }
  /// True when the majorant's p-th power is integrable near its singular set.
  virtual bool majorant_locally_integrable(double /*p*/) const { return true; }
  /// Asserts div_x K(t, ., y) <= 0 in the distributional sense.
  virtual bool divergence_free() const { return false; }
  virtual bool autonomous() const { return true; }
  /// K(t, x, y) = k(t, x - y).
  virtual bool difference_kernel() const { return false; }
  /// k(t, -z) = -k(t, z); only meaningful for difference kernels.
  virtual bool odd() const { return false; }
  /// Distance from (x, y) to the set where evaluation is undefined.
  virtual double singular_distance(double /*t*/, ConstPoint /*x*/, ConstPoint /*y*/) const {
    return std::numeric_limits<double>::infinity();
  }
  /// Upper bound for |K| when the kernel is bounded, +inf otherwise.
  virtual double sup_bound() const { return std::numeric_limits<double>::infinity(); }

  /// out += sum over j != skip of K(t, x, Y_j), with Y stored row-major (N x d).
  virtual void accumulate(double t, ConstPoint x, std::span<const double> ys, std::size_t skip,
                          MutPoint out) const {
    const auto d = static_cast<std::size_t>(dimension());
    std::array<double, 8> buf{};
    const std::size_t count = ys.size() / d;
    for (std::size_t j = 0; j < count; ++j) {
      if (j == skip) continue;
      evaluate(t, x, ys.subspan(j * d, d), MutPoint(buf.data(), d));
      for (std::size_t k = 0; k < d; ++k) out[k] += buf[k];
    }
  }

  std::array<double, 2> evaluate2(double t, std::array<double, 2> x, std::array<double, 2> y) const {
    std::array<double, 2> out{};
    evaluate(t, x, y, out);
    return out;
  }
};

using KernelPtr = std::shared_ptr<const InteractionKernel>;

inline double norm(ConstPoint v) {
  double s = 0.0;
  for (double c : v) s += c * c;
  return std::sqrt(s);
}

/// K2(z) = (-z2, z1) / (2 pi |z|^2). Throws at the origin.
inline std::array<double, 2> eval_biot_savart(std::array<double, 2> z) {
  const double r2 = z[0] * z[0] + z[1] * z[1];
  if (r2 == 0.0) throw SingularityError("Biot-Savart kernel evaluated at z = 0; use a mollified kernel");
  const double s = 1.0 / (kTwoPi * r2);
  return {-z[1] * s, z[0] * s};
}

/// Rotational power-law field k(z) = (-z2, z1) / (2 pi |z|^(a+1)), |k| = |z|^-a / (2 pi).
/// Divergence-free for every a; a = 1 is the Biot-Savart kernel.
class RotationalPowerKernel : public InteractionKernel {
 public:
  explicit RotationalPowerKernel(double exponent, Exponents ex = {1.5, 100.0})
      : a_(exponent), ex_(ex) {
    if (!(exponent >= 0.0)) throw DomainError("rotational power exponent must be >= 0");
  }

  std::string id() const override { return "rotational_power"; }
  int dimension() const override { return 2; }
  double exponent() const { return a_; }

  void evaluate(double /*t*/, ConstPoint x, ConstPoint y, MutPoint out) const override {
    const double z0 = x[0] - y[0], z1 = x[1] - y[1];
    const double r2 = z0 * z0 + z1 * z1;
    if (r2 == 0.0) throw SingularityError(id() + " kernel evaluated at z = 0; use a mollified kernel");
    const double s = profile(std::sqrt(r2)) / std::sqrt(r2);
    out[0] = -z1 * s;
    out[1] = z0 * s;
  }

  /// Tangential magnitude at radius r.
  double profile(double r) const {
    if (a_ == 1.0) return 1.0 / (kTwoPi * r);
    return std::pow(r, -a_) / kTwoPi;
  }

  double majorant(double /*t*/, ConstPoint z) const override { return profile(norm(z)); }
  Exponents majorant_exponents() const override { return ex_; }
  bool majorant_locally_integrable(double p) const override { return a_ * p < 2.0; }
  bool divergence_free() const override { return true; }
  bool difference_kernel() const override { return true; }
  bool odd() const override { return true; }
  double singular_distance(double, ConstPoint x, ConstPoint y) const override {
    return a_ > 0.0 ? std::hypot(x[0] - y[0], x[1] - y[1]) : std::numeric_limits<double>::infinity();
  }

 private:
  double a_;
  Exponents ex_;
};

/// The 2D Biot-Savart kernel K(t, x, y) = K2(x - y). Autonomous, odd, divergence-free.
class BiotSavartKernel final : public RotationalPowerKernel {
 public:
  explicit BiotSavartKernel(Exponents ex = {1.5, 100.0}) : RotationalPowerKernel(1.0, ex) {}
  std::string id() const override { return "biot_savart"; }

  void evaluate(double, ConstPoint x, ConstPoint y, MutPoint out) const override {
    const auto v = eval_biot_savart({x[0] - y[0], x[1] - y[1]});
    out[0] = v[0];
    out[1] = v[1];
  }
};

class ZeroKernel final : public InteractionKernel {
 public:
  explicit ZeroKernel(int d = 2) : d_(d) {}
  std::string id() const override { return "zero"; }
  int dimension() const override { return d_; }
  void evaluate(double, ConstPoint, ConstPoint, MutPoint out) const override {
    std::fill(out.begin(), out.end(), 0.0);
  }
  void accumulate(double, ConstPoint, std::span<const double>, std::size_t, MutPoint) const override {}
  double majorant(double, ConstPoint) const override { return 0.0; }
  bool divergence_free() const override { return true; }
  bool difference_kernel() const override { return true; }
  bool odd() const override { return true; }
  double sup_bound() const override { return 0.0; }

 private:
  int d_;
};

/// K = c for every argument.
class ConstantKernel final : public InteractionKernel {
 public:
  explicit ConstantKernel(std::vector<double> value) : c_(std::move(value)) {
    if (c_.empty() || c_.size() > 8) throw DomainError("constant kernel dimension must be in [1, 8]");
  }
  std::string id() const override { return "constant"; }
  int dimension() const override { return static_cast<int>(c_.size()); }
  void evaluate(double, ConstPoint, ConstPoint, MutPoint out) const override {
    std::copy(c_.begin(), c_.end(), out.begin());
  }
  double majorant(double, ConstPoint) const override { return norm(c_); }
  bool divergence_free() const override { return true; }
  bool difference_kernel() const override { return true; }
  double sup_bound() const override { return norm(c_); }
  const std::vector<double>& value() const { return c_; }

 private:
  std::vector<double> c_;
};

/// K(x, y) = sign * x. Not a difference kernel; its majorant is unbounded.
class LinearKernel final : public InteractionKernel {
 public:
  LinearKernel(int d, double sign) : d_(d), sign_(sign) {}
  std::string id() const override { return "linear"; }
  int dimension() const override { return d_; }
  void evaluate(double, ConstPoint x, ConstPoint, MutPoint out) const override {
    for (int k = 0; k < d_; ++k) out[k] = sign_ * x[k];
  }
  double majorant(double, ConstPoint) const override { return std::numeric_limits<double>::infinity(); }
  bool divergence_free() const override { return sign_ <= 0.0; }

 private:
  int d_;
  double sign_;
};

/// g(t) * K(t, x, y) for a base kernel K; non-autonomous whenever g is not constant.
class TimeModulatedKernel final : public InteractionKernel {
 public:
  TimeModulatedKernel(KernelPtr base, std::function<double(double)> g, double g_sup)
      : base_(std::move(base)), g_(std::move(g)), g_sup_(g_sup) {}
  std::string id() const override { return "time_modulated(" + base_->id() + ")"; }
  int dimension() const override { return base_->dimension(); }
  void evaluate(double t, ConstPoint x, ConstPoint y, MutPoint out) const override {
    base_->evaluate(t, x, y, out);
    const double g = g_(t);
    for (double& v : out) v *= g;
  }
  double majorant(double t, ConstPoint z) const override { return g_sup_ * base_->majorant(t, z); }
  Exponents majorant_exponents() const override { return base_->majorant_exponents(); }
  bool majorant_locally_integrable(double p) const override { return base_->majorant_locally_integrable(p); }
  bool divergence_free() const override { return base_->divergence_free(); }
  bool autonomous() const override { return false; }
  bool difference_kernel() const override { return base_->difference_kernel(); }
  bool odd() const override { return base_->odd(); }
  double singular_distance(double t, ConstPoint x, ConstPoint y) const override {
    return base_->singular_distance(t, x, y);
  }

 private:
  KernelPtr base_;
  std::function<double(double)> g_;
  double g_sup_;
};

inline double unit_sphere_area(int d) {
  return 2.0 * std::pow(std::numbers::pi, 0.5 * d) / std::tgamma(0.5 * d);
}

/// Radial bump rho(x) = c (1 - |x|^2)^4 on the closed unit ball of R^d, scaled to
/// rho_n(x) = n^d rho(n x) with support radius 1/n.
class Mollifier {
 public:
  Mollifier(int d, double n) : d_(d), n_(n) {
    if (d < 1) throw DomainError("mollifier dimension must be positive");
    if (!(n > 0.0)) throw DomainError("mollifier scale index must be positive");
    // The radial integrand u^(d-1) (1 - u^2)^4 is a polynomial; 32 points integrate it exactly.
    radial_mass_ = quad::integrate([d](double u) { return std::pow(u, d - 1) * std::pow(1.0 - u * u, 4); }, 0.0,
                                   1.0, 1, 32);
    c_ = 1.0 / (unit_sphere_area(d) * radial_mass_);
  }

  int dimension() const { return d_; }
  double scale() const { return n_; }
  double support_radius() const { return 1.0 / n_; }
  double normalization() const { return c_; }

  /// Unscaled profile value at radius s.
  double profile_radial(double s) const {
    if (s >= 1.0) return 0.0;
    const double w = 1.0 - s * s;
    return c_ * w * w * w * w;
  }

  /// Scaled profile rho_n evaluated at a point.
  double operator()(ConstPoint x) const { return std::pow(n_, d_) * profile_radial(n_ * norm(x)); }
  double at_radius(double r) const { return std::pow(n_, d_) * profile_radial(n_ * r); }

  /// Mass of rho_n inside the ball of radius r.
  double cumulative_mass(double r) const {
    const double s = n_ * r;
    if (s <= 0.0) return 0.0;
    if (s >= 1.0) return 1.0;
    if (d_ == 2) {
      const double w = 1.0 - s * s;
      return 1.0 - w * w * w * w * w;
    }
    const int d = d_;
    const double part = quad::integrate(
        [d](double u) { return std::pow(u, d - 1) * std::pow(1.0 - u * u, 4); }, 0.0, s, 1, 32);
    return part / radial_mass_;
  }

 private:
  int d_;
  double n_;
  double radial_mass_ = 1.0;
  double c_ = 1.0;
};

enum class MollifyMode { closed_form_biot_savart, quadrature, radial_table };

inline std::string to_string(MollifyMode m) {
  switch (m) {
    case MollifyMode::closed_form_biot_savart: return "closed_form";
    case MollifyMode::quadrature: return "quadrature";
    case MollifyMode::radial_table: return "radial_table";
  }
  return "?";
}

/// K_n = K convolved with rho_n in x (equivalently in x - y for difference kernels)
/// and with a 1D bump in time for non-autonomous K.
class MollifiedKernel final : public InteractionKernel {
 public:
  static constexpr std::size_t kMinResolution = 16;

  MollifiedKernel(KernelPtr base, double n, MollifyMode mode, std::size_t resolution = 201)
      : base_(std::move(base)),
        mollifier_(base_->dimension(), n),
        time_mollifier_(1, n),
        mode_(mode),
        resolution_(resolution) {
    if (mode_ == MollifyMode::closed_form_biot_savart) {
      const auto* rot = dynamic_cast<const RotationalPowerKernel*>(base_.get());
      if (rot == nullptr || rot->exponent() != 1.0 || !base_->autonomous())
        throw ConfigurationError("closed-form mollification requires the autonomous Biot-Savart kernel");
    } else if (resolution_ < kMinResolution) {
      throw ConfigurationError("quadrature resolution " + std::to_string(resolution_) +
                               " cannot resolve the mollifier support (need >= " +
                               std::to_string(kMinResolution) + ")");
    }
    if (mode_ == MollifyMode::radial_table) build_radial_table();
    if (mode_ == MollifyMode::closed_form_biot_savart) {
      // max over s in (0,1] of (1 - (1 - s^2)^5) / s, on a fine grid refined once.
      double best = 0.0;
      for (int k = 1; k <= 4000; ++k) {
        const double s = k / 4000.0;
        const double w = 1.0 - s * s;
        best = std::max(best, (1.0 - w * w * w * w * w) / s);
      }
      sup_ = n * best / kTwoPi * (1.0 + 1e-6);
    }
  }

  std::string id() const override { return "mollified(" + base_->id() + ")"; }
  int dimension() const override { return base_->dimension(); }
  const InteractionKernel& base() const { return *base_; }
  const KernelPtr& base_ptr() const { return base_; }
  const Mollifier& mollifier() const { return mollifier_; }
  MollifyMode mode() const { return mode_; }
  double scale() const { return mollifier_.scale(); }
  std::size_t resolution() const { return resolution_; }

  void evaluate(double t, ConstPoint x, ConstPoint y, MutPoint out) const override {
    switch (mode_) {
      case MollifyMode::closed_form_biot_savart: {
        const double z0 = x[0] - y[0], z1 = x[1] - y[1];
        const double r2 = z0 * z0 + z1 * z1;
        if (r2 == 0.0) {
          out[0] = out[1] = 0.0;
          return;
        }
        const double s = closed_form_factor(r2) / (kTwoPi * r2);
        out[0] = -z1 * s;
        out[1] = z0 * s;
        return;
      }
      case MollifyMode::radial_table: {
        const double z0 = x[0] - y[0], z1 = x[1] - y[1];
        const double r = std::hypot(z0, z1);
        if (r == 0.0) {
          out[0] = out[1] = 0.0;
          return;
        }
        const double s = table_profile(r) / r;
        out[0] = -z1 * s;
        out[1] = z0 * s;
        return;
      }
      case MollifyMode::quadrature:
        evaluate_quadrature(t, x, y, out);
        return;
    }
  }

  void accumulate(double t, ConstPoint x, std::span<const double> ys, std::size_t skip,
                  MutPoint out) const override {
    if (mode_ != MollifyMode::closed_form_biot_savart) {
      InteractionKernel::accumulate(t, x, ys, skip, out);
      return;
    }
    const double x0 = x[0], x1 = x[1];
    const double ns = mollifier_.scale() * mollifier_.scale();
    const double inv_n2 = 1.0 / ns;
    double u0 = 0.0, u1 = 0.0;
    const std::size_t count = ys.size() / 2;
    const double* py = ys.data();
    for (std::size_t j = 0; j < count; ++j) {
      const double z0 = x0 - py[2 * j], z1 = x1 - py[2 * j + 1];
      const double r2 = z0 * z0 + z1 * z1;
      if (j == skip || r2 == 0.0) continue;
      double f = 1.0;
      if (r2 < inv_n2) {
        const double w = 1.0 - ns * r2;
        const double w2 = w * w;
        f = 1.0 - w2 * w2 * w;
      }
      const double s = f / r2;
      u0 -= z1 * s;
      u1 += z0 * s;
    }
    out[0] += u0 / kTwoPi;
    out[1] += u1 / kTwoPi;
  }

  /// Mollified base majorant (h * rho_n)(z), by quadrature; dominates |K_n|.
  double majorant(double t, ConstPoint z) const override {
    if (mode_ == MollifyMode::closed_form_biot_savart) {
      // |K2 * rho_n| = |K2| M_n <= |K2|.
      return base_->majorant(t, z);
    }
    const int d = dimension();
    std::vector<double> zero(static_cast<std::size_t>(d), 0.0);
    return convolve_spatial(z, zero, [&](ConstPoint xs, ConstPoint) { return base_->majorant(t, xs); });
  }

  Exponents majorant_exponents() const override { return base_->majorant_exponents(); }
  bool majorant_locally_integrable(double p) const override { return base_->majorant_locally_integrable(p); }
  bool divergence_free() const override { return base_->divergence_free(); }
  bool autonomous() const override { return base_->autonomous(); }
  bool difference_kernel() const override { return base_->difference_kernel(); }
  bool odd() const override { return base_->odd(); }
  double sup_bound() const override { return sup_; }

  /// Cumulative mass factor M_n(|z|) given |z|^2 (closed-form mode).
  double closed_form_factor(double r2) const {
    const double ns = mollifier_.scale() * mollifier_.scale();
    if (r2 * ns >= 1.0) return 1.0;
    const double w = 1.0 - ns * r2;
    const double w2 = w * w;
    return 1.0 - w2 * w2 * w;
  }

 private:
  KernelPtr base_;
  Mollifier mollifier_;
  Mollifier time_mollifier_;
  MollifyMode mode_;
  std::size_t resolution_;
  double sup_ = std::numeric_limits<double>::infinity();
  // radial_table: tangential magnitude on s = n r in [0, kTableExtent].
  static constexpr double kTableExtent = 16.0;
  static constexpr std::size_t kTableSize = 1025;
  std::vector<double> table_;

  /// int F(x - u, y) rho_n(u) du by tensor-product midpoint quadrature. When the
  /// singular point of a difference kernel lies inside the support, the node
  /// lattice is centred on it so the odd leading singularity cancels.
  template <class F>
  double convolve_spatial(ConstPoint x, ConstPoint y, F&& integrand) const {
    const int d = dimension();
    const double rad = mollifier_.support_radius();
    const double h = 2.0 * rad / static_cast<double>(resolution_);
    std::array<double, 8> centre{};
    std::size_t per_axis = resolution_;
    bool centred = false;
    if (base_->difference_kernel()) {
      double reach = 0.0;
      for (int k = 0; k < d; ++k) reach = std::max(reach, std::abs(x[k] - y[k]));
      if (reach < rad + h) {
        centred = true;
        const auto m = static_cast<std::size_t>(std::ceil((reach + rad) / h));
        per_axis = 2 * m;
        for (int k = 0; k < d; ++k) centre[k] = x[k] - y[k];
      }
    }
    const double half = 0.5 * static_cast<double>(per_axis) * h;
    std::array<std::size_t, 8> idx{};
    std::array<double, 8> u{}, xs{};
    double total = 0.0;
    std::size_t cells = 1;
    for (int k = 0; k < d; ++k) cells *= per_axis;
    for (std::size_t c = 0; c < cells; ++c) {
      std::size_t rem = c;
      double r2 = 0.0;
      for (int k = 0; k < d; ++k) {
        idx[k] = rem % per_axis;
        rem /= per_axis;
        const double base = centred ? centre[k] : 0.0;
        u[k] = base - half + (static_cast<double>(idx[k]) + 0.5) * h;
        r2 += u[k] * u[k];
      }
      if (r2 >= rad * rad) continue;
      const double w = mollifier_.at_radius(std::sqrt(r2));
      bool singular = false;
      double dist2 = 0.0;
      for (int k = 0; k < d; ++k) {
        xs[k] = x[k] - u[k];
        const double dk = xs[k] - y[k];
        dist2 += dk * dk;
      }
      if (base_->difference_kernel() && dist2 < 1e-24) singular = true;
      if (singular) continue;
      total += w * integrand(ConstPoint(xs.data(), static_cast<std::size_t>(d)), y);
    }
    return total * std::pow(h, d);
  }

  void evaluate_spatial(double t, ConstPoint x, ConstPoint y, MutPoint out) const {
    const int d = dimension();
    std::array<double, 8> buf{};
    for (int k = 0; k < d; ++k) {
      out[k] = convolve_spatial(x, y, [&](ConstPoint xs, ConstPoint ys) {
        if (base_->singular_distance(t, xs, ys) == 0.0) return 0.0;
        base_->evaluate(t, xs, ys, MutPoint(buf.data(), static_cast<std::size_t>(d)));
        return buf[k];
      });
    }
  }

  void evaluate_quadrature(double t, ConstPoint x, ConstPoint y, MutPoint out) const {
    const int d = dimension();
    if (base_->autonomous()) {
      evaluate_spatial(t, x, y, out);
      return;
    }
    // Temporal convolution over t' in [t - 1/n, t + 1/n] intersected with [0, inf).
    std::fill(out.begin(), out.end(), 0.0);
    const double rad = time_mollifier_.support_radius();
    const double lo = std::max(0.0, t - rad), hi = t + rad;
    if (hi <= lo) return;
    static const quad::Rule rule = quad::gauss_legendre(24);
    std::array<double, 8> buf{};
    for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
      const double tp = 0.5 * (lo + hi) + 0.5 * (hi - lo) * rule.nodes[k];
      const double w = 0.5 * (hi - lo) * rule.weights[k] * time_mollifier_.at_radius(std::abs(t - tp));
      if (w == 0.0) continue;
      evaluate_spatial(tp, x, y, MutPoint(buf.data(), static_cast<std::size_t>(d)));
      for (int c = 0; c < d; ++c) out[c] += w * buf[c];
    }
  }

  void build_radial_table() {
    const auto* rot = dynamic_cast<const RotationalPowerKernel*>(base_.get());
    if (rot == nullptr || !base_->autonomous())
      throw ConfigurationError("radial-table mollification requires an autonomous rotational kernel");
    table_.resize(kTableSize);
    const double n = mollifier_.scale();
    const double x0[2] = {0.0, 0.0};
    for (std::size_t k = 1; k < kTableSize; ++k) {
      const double r = kTableExtent / n * static_cast<double>(k) / static_cast<double>(kTableSize - 1);
      const double xp[2] = {r, 0.0};
      std::array<double, 2> v{};
      evaluate_spatial(0.0, xp, x0, v);
      table_[k] = v[1];
    }
    table_[0] = 0.0;
  }

  double table_profile(double r) const {
    const double n = mollifier_.scale();
    const double s = r * n;
    if (s >= kTableExtent) {
      return static_cast<const RotationalPowerKernel&>(*base_).profile(r);
    }
    // Catmull-Rom interpolation on the uniform table; the profile is odd in r,
    // which supplies the ghost value below zero.
    const double pos = s / kTableExtent * static_cast<double>(kTableSize - 1);
    const auto i = static_cast<std::ptrdiff_t>(pos);
    const double f = pos - static_cast<double>(i);
    auto at = [&](std::ptrdiff_t j) {
      if (j < 0) return -table_[static_cast<std::size_t>(-j)];
      if (j >= static_cast<std::ptrdiff_t>(kTableSize)) j = static_cast<std::ptrdiff_t>(kTableSize) - 1;
      return table_[static_cast<std::size_t>(j)];
    };
    const double p0 = at(i - 1), p1 = at(i), p2 = at(i + 1), p3 = at(i + 2);
    return p1 + 0.5 * f * (p2 - p0 + f * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + f * (3.0 * (p1 - p2) + p3 - p0)));
  }
};

/// Builds K_n from a base kernel. Closed form is only valid for the Biot-Savart kernel.
inline std::shared_ptr<const MollifiedKernel> mollify(KernelPtr base, double n, MollifyMode mode,
                                                      std::size_t resolution = 201) {
  const Exponents ex = base->majorant_exponents();
  if (!base->majorant_locally_integrable(ex.p))
    throw ConfigurationError("base majorant is not locally L^p integrable at p = " + std::to_string(ex.p));
  return std::make_shared<const MollifiedKernel>(std::move(base), n, mode, resolution);
}

struct DivergenceProbe {
  std::vector<double> divergence;      // NaN at rejected points
  std::vector<std::size_t> rejected;   // indices of points too close to a singularity
};

/// Central finite-difference divergence in x of K(t, ., y) at each probe point,
/// with the fourth-order five-point stencil. Its truncation error, O(step^4),
/// stays below 1e-6 for step = 1e-4 even a few hundredths from the singular point,
/// where the three-point stencil's step^2 / |z|^4 term does not.
inline DivergenceProbe divergence_probe(const InteractionKernel& kernel, double t, std::span<const double> points,
                                        ConstPoint y, double step) {
  if (!(step > 0.0)) throw DomainError("divergence probe step must be positive");
  const auto d = static_cast<std::size_t>(kernel.dimension());
  const std::size_t count = points.size() / d;
  DivergenceProbe result;
  result.divergence.assign(count, std::numeric_limits<double>::quiet_NaN());
  const bool bounded = std::isfinite(kernel.sup_bound()) || dynamic_cast<const MollifiedKernel*>(&kernel);
  std::vector<double> xs(d), v(d);
  for (std::size_t i = 0; i < count; ++i) {
    const ConstPoint x = points.subspan(i * d, d);
    if (!bounded && kernel.singular_distance(t, x, y) <= 2.0 * step) {
      result.rejected.push_back(i);
      continue;
    }
    double div = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      double acc = 0.0;
      for (const auto& [offset, weight] : {std::pair{-2.0, 1.0}, {-1.0, -8.0}, {1.0, 8.0}, {2.0, -1.0}}) {
        std::copy(x.begin(), x.end(), xs.begin());
        xs[k] += offset * step;
        kernel.evaluate(t, xs, y, v);
        acc += weight * v[k];
      }
      div += acc / (12.0 * step);
    }
    result.divergence[i] = div;
  }
  return result;
}

/// int_{delta < |z| < R} h(t, z)^p dz in two dimensions, by polar quadrature.
/// The radial variable is log-substituted when delta > 0 and power-substituted
/// (r = R u^4) when delta = 0, which absorbs the 1/|z|^a singularity.
inline double majorant_integral(const InteractionKernel& kernel, double t, double p, double delta, double outer) {
  if (kernel.dimension() != 2) throw DomainError("majorant integrals are implemented for d = 2");
  if (!(delta >= 0.0 && delta < outer)) throw DomainError("majorant integral needs 0 <= delta < R");
  if (!(p >= 1.0)) throw DomainError("majorant integral needs p >= 1");
  constexpr std::size_t kAngles = 64;
  auto ring = [&](double r) {
    double s = 0.0;
    for (std::size_t k = 0; k < kAngles; ++k) {
      const double phi = kTwoPi * (static_cast<double>(k) + 0.5) / kAngles;
      const double z[2] = {r * std::cos(phi), r * std::sin(phi)};
      const double h = kernel.majorant(t, z);
      s += h == 0.0 ? 0.0 : std::pow(h, p);
    }
    return s * kTwoPi / kAngles * r;
  };
  if (delta > 0.0) {
    return quad::integrate([&](double s) { const double r = std::exp(s); return ring(r) * r; }, std::log(delta),
                           std::log(outer), 32, 16);
  }
  return quad::integrate(
      [&](double u) {
        const double u3 = u * u * u;
        return ring(outer * u3 * u) * 4.0 * outer * u3;
      },
      0.0, 1.0, 32, 16);
}

/// (int_0^T (int_{delta<|z|<R} h^p dz)^{q/p} dt)^{1/q}; autonomous kernels use T^{1/q} times the spatial factor.
inline double majorant_integrability(const InteractionKernel& kernel, double p, double q, double delta,
                                     double outer, double horizon) {
  if (!(q >= 1.0)) throw DomainError("majorant integrability needs q >= 1");
  if (!(horizon > 0.0)) throw DomainError("time horizon must be positive");
  if (kernel.autonomous()) {
    return std::pow(horizon, 1.0 / q) * std::pow(majorant_integral(kernel, 0.0, p, delta, outer), 1.0 / p);
  }
  const double inner = quad::integrate(
      [&](double t) { return std::pow(majorant_integral(kernel, t, p, delta, outer), q / p); }, 0.0, horizon, 8, 8);
  return std::pow(inner, 1.0 / q);
}

}  // namespace mkv
