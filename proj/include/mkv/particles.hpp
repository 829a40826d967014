#pragma once

// N-particle mean-field discretization: empirical drift (direct or tree),
// synchronous Euler-Maruyama with counter-based noise, and trajectory capture.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mkv/error.hpp"
#include "mkv/kernels.hpp"
#include "mkv/parallel.hpp"
#include "mkv/rng.hpp"
#include "mkv/tree.hpp"

namespace mkv {

enum class Summation { direct, tree };
enum class SelfInteraction { exclude, include };

inline std::string to_string(Summation s) { return s == Summation::direct ? "direct" : "tree"; }
inline std::string to_string(SelfInteraction s) { return s == SelfInteraction::exclude ? "exclude" : "include"; }

/// Uniformly weighted particle cloud at a given time and step.
class Ensemble {
 public:
  Ensemble() = default;
  Ensemble(int d, std::vector<double> positions, double t = 0.0, std::uint64_t step = 0)
      : d_(d), pos_(std::move(positions)), t_(t), step_(step) {
    if (d_ < 1 || d_ > 8) throw ConfigurationError("ensemble dimension must lie in [1, 8]");
    if (pos_.size() % static_cast<std::size_t>(d_) != 0) throw ConfigurationError("position block is not N x d");
  }

  int dimension() const { return d_; }
  std::size_t size() const { return pos_.size() / static_cast<std::size_t>(d_); }
  double weight() const { return 1.0 / static_cast<double>(size()); }
  double time() const { return t_; }
  std::uint64_t step() const { return step_; }
  std::span<const double> positions() const { return pos_; }
  std::span<double> positions() { return pos_; }
  std::span<const double> point(std::size_t i) const {
    return std::span<const double>(pos_).subspan(i * static_cast<std::size_t>(d_), static_cast<std::size_t>(d_));
  }

 private:
  int d_ = 2;
  std::vector<double> pos_;
  double t_ = 0.0;
  std::uint64_t step_ = 0;
};

struct InitialLaw {
  enum class Kind { point_mass, gaussian, uniform_ball, empirical };
  Kind kind = Kind::point_mass;
  std::vector<double> center;      // point / mean / ball centre; empty = origin
  std::vector<double> covariance;  // Gaussian, d x d row-major; empty = identity
  double radius = 1.0;             // uniform ball
  std::string path;                // empirical: where the samples came from
  std::vector<double> samples;     // empirical: M x d block
};

inline std::string to_string(InitialLaw::Kind k) {
  switch (k) {
    case InitialLaw::Kind::point_mass: return "point_mass";
    case InitialLaw::Kind::gaussian: return "gaussian";
    case InitialLaw::Kind::uniform_ball: return "uniform_ball";
    case InitialLaw::Kind::empirical: return "empirical";
  }
  return "?";
}

struct KernelSpec {
  std::string id = "biot_savart";  // biot_savart | rotational_power | zero | constant | linear
  double exponent = 1.0;           // rotational_power: |k(z)| = |z|^-a / (2 pi)
  std::vector<double> value;       // constant
  double sign = -1.0;              // linear: K(x, y) = sign * x
  Exponents exponents{1.5, 100.0};
  bool mollified = true;
  std::optional<MollifyMode> mode;  // unset: closed form for Biot-Savart, radial table for power laws
  std::size_t resolution = 201;
};

struct SimulationConfig {
  std::size_t N = 1000;
  double n = 10.0;  // mollification index
  double dt = 1e-3;
  double T = 0.1;
  int d = 2;
  KernelSpec kernel;
  InitialLaw initial;
  std::uint64_t seed = 1;
  Summation summation = Summation::direct;
  TreeOptions tree;
  SelfInteraction self_interaction = SelfInteraction::exclude;
  std::size_t stride = 1;
  double noise_scale = 1.0;       // test hook: 0 freezes the Brownian part
  unsigned noise_substeps = 1;    // each step's increment sums this many unit sub-increments
  unsigned workers = 1;           // not part of the digest: results do not depend on it

  std::size_t steps() const { return static_cast<std::size_t>(std::floor(T / dt * (1.0 + 1e-12))); }

  void validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigurationError("dt must be positive");
    if (!(T >= dt)) throw ConfigurationError("T must be at least dt");
    if (N < 1) throw ConfigurationError("N must be positive");
    if (d < 1 || d > 8) throw ConfigurationError("d must lie in [1, 8]");
    if (!(n > 0.0)) throw ConfigurationError("mollification index n must be positive");
    if (stride < 1) throw ConfigurationError("snapshot stride must be positive");
    if (noise_substeps < 1) throw ConfigurationError("noise_substeps must be positive");
    if (!(noise_scale >= 0.0)) throw ConfigurationError("noise_scale must be nonnegative");
    if (summation == Summation::tree) {
      if (!(tree.theta > 0.0 && tree.theta <= 1.0)) throw DomainError("opening angle theta must lie in (0, 1]");
      if (d != 2) throw ConfigurationError("tree summation requires d = 2");
    }
    if (!initial.center.empty() && initial.center.size() != static_cast<std::size_t>(d))
      throw ConfigurationError("initial centre has wrong dimension");
    if (initial.kind == InitialLaw::Kind::gaussian && !initial.covariance.empty() &&
        initial.covariance.size() != static_cast<std::size_t>(d * d))
      throw ConfigurationError("initial covariance must be d x d");
    if (initial.kind == InitialLaw::Kind::uniform_ball && !(initial.radius > 0.0))
      throw ConfigurationError("ball radius must be positive");
    if (initial.kind == InitialLaw::Kind::empirical &&
        (initial.samples.empty() || initial.samples.size() % static_cast<std::size_t>(d) != 0))
      throw ConfigurationError("empirical initial law needs an M x d sample block");
  }

  /// Stable key=value rendering of every field that influences the trajectory.
  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    auto list = [&](const std::vector<double>& v) {
      os << '[';
      for (std::size_t k = 0; k < v.size(); ++k) os << (k ? "," : "") << v[k];
      os << ']';
    };
    os << "N=" << N << "\nn=" << n << "\ndt=" << dt << "\nT=" << T << "\nd=" << d << "\nseed=" << seed
       << "\nkernel.id=" << kernel.id << "\nkernel.exponent=" << kernel.exponent << "\nkernel.value=";
    list(kernel.value);
    os << "\nkernel.sign=" << kernel.sign << "\nkernel.p=" << kernel.exponents.p << "\nkernel.q=" << kernel.exponents.q
       << "\nkernel.mollified=" << kernel.mollified
       << "\nkernel.mode=" << (kernel.mode ? to_string(*kernel.mode) : std::string("auto"))
       << "\nkernel.resolution=" << kernel.resolution << "\ninitial.kind=" << to_string(initial.kind)
       << "\ninitial.center=";
    list(initial.center);
    os << "\ninitial.covariance=";
    list(initial.covariance);
    os << "\ninitial.radius=" << initial.radius << "\ninitial.samples="
       << rng::fnv1a(std::string_view(reinterpret_cast<const char*>(initial.samples.data()),
                                      initial.samples.size() * sizeof(double)))
       << "\nsummation=" << to_string(summation) << "\ntree.theta=" << tree.theta << "\ntree.leaf_size="
       << tree.leaf_size << "\ntree.order=" << tree.order << "\nself_interaction=" << to_string(self_interaction)
       << "\nstride=" << stride << "\nnoise_scale=" << noise_scale << "\nnoise_substeps=" << noise_substeps << '\n';
    return os.str();
  }

  std::uint64_t hash() const { return rng::fnv1a(canonical()); }
};

/// Kernel described by a spec, mollified at index n where the base is singular.
inline KernelPtr build_kernel(const KernelSpec& spec, int d, double n) {
  KernelPtr base;
  bool singular = false;
  if (spec.id == "biot_savart") {
    if (d != 2) throw ConfigurationError("biot_savart kernel requires d = 2");
    base = std::make_shared<BiotSavartKernel>(spec.exponents);
    singular = true;
  } else if (spec.id == "rotational_power") {
    if (d != 2) throw ConfigurationError("rotational_power kernel requires d = 2");
    base = std::make_shared<RotationalPowerKernel>(spec.exponent, spec.exponents);
    singular = spec.exponent > 0.0;
  } else if (spec.id == "zero") {
    base = std::make_shared<ZeroKernel>(d);
  } else if (spec.id == "constant") {
    if (spec.value.size() != static_cast<std::size_t>(d)) throw ConfigurationError("constant kernel value must have d entries");
    base = std::make_shared<ConstantKernel>(spec.value);
  } else if (spec.id == "linear") {
    base = std::make_shared<LinearKernel>(d, spec.sign);
  } else {
    throw ConfigurationError("unknown kernel id '" + spec.id + "'");
  }
  if (!spec.mollified || !singular) return base;
  MollifyMode mode = spec.mode.value_or(spec.id == "biot_savart" ? MollifyMode::closed_form_biot_savart
                                                                 : MollifyMode::radial_table);
  return mollify(base, n, mode, spec.resolution);
}

inline KernelPtr build_kernel(const SimulationConfig& cfg) { return build_kernel(cfg.kernel, cfg.d, cfg.n); }

/// b(t, x) = (1/N) sum_j K(t, x, X^j), omitting j = self_index when given.
inline std::vector<double> empirical_drift(double t, ConstPoint x, const Ensemble& ens, const InteractionKernel& kernel,
                                           std::optional<std::size_t> self_index = std::nullopt) {
  const auto d = static_cast<std::size_t>(ens.dimension());
  if (x.size() != d || kernel.dimension() != ens.dimension()) throw ConfigurationError("dimension mismatch in drift");
  std::vector<double> out(d, 0.0);
  kernel.accumulate(t, x, ens.positions(), self_index.value_or(std::numeric_limits<std::size_t>::max()), out);
  for (auto& v : out) {
    v *= ens.weight();
    if (!std::isfinite(v)) throw SingularityError("non-finite kernel value in empirical drift");
  }
  return out;
}

struct DriftOptions {
  Summation summation = Summation::direct;
  TreeOptions tree;
  SelfInteraction self_interaction = SelfInteraction::exclude;
};

/// Drift at every particle against the same (pre-step) ensemble.
inline std::vector<double> ensemble_drift(const Ensemble& ens, const InteractionKernel& kernel, const DriftOptions& opt,
                                          const Executor& exec) {
  const auto d = static_cast<std::size_t>(ens.dimension());
  const std::size_t count = ens.size();
  if (kernel.dimension() != ens.dimension()) throw ConfigurationError("kernel and ensemble dimensions differ");
  if (opt.summation == Summation::tree) {
    const auto* mk = dynamic_cast<const MollifiedKernel*>(&kernel);
    if (mk == nullptr) throw DomainError("tree summation requires a mollified Biot-Savart kernel");
    // K_n(0) = 0 for the odd mollified kernel, so both self-interaction conventions agree.
    return tree_drift(ens.positions(), *mk, opt.tree, exec);
  }
  std::vector<double> out(count * d, 0.0);
  const double w = ens.weight();
  const auto all = ens.positions();
  const bool exclude = opt.self_interaction == SelfInteraction::exclude;
  exec.parallel_for(count, [&](std::size_t i) {
    std::array<double, 8> acc{};
    const auto xi = ens.point(i);
    kernel.accumulate(ens.time(), xi, all, exclude ? i : std::numeric_limits<std::size_t>::max(),
                      std::span<double>(acc.data(), d));
    for (std::size_t k = 0; k < d; ++k) out[i * d + k] = acc[k] * w;
  });
  return out;
}

struct StepOptions {
  DriftOptions drift;
  std::uint64_t noise_seed = 0;
  double noise_scale = 1.0;
  unsigned noise_substeps = 1;
};

/// Per-step view handed to observers; every span refers to N x d blocks.
struct StepRecord {
  std::uint64_t step = 0;  // index of the step taken (pre-step counter)
  double t = 0.0;          // pre-step time
  double dt = 0.0;
  int d = 2;
  std::span<const double> before, drift, noise, after;  // noise = sqrt(2 dt) * xi * noise_scale
};

class StepObserver {
 public:
  virtual ~StepObserver() = default;
  virtual void on_step(const StepRecord& rec) = 0;
  /// Called after the last step with the terminal ensemble and, if requested, its drift.
  virtual bool wants_final_drift() const { return false; }
  virtual void on_finish(const Ensemble& /*final*/, std::span<const double> /*drift*/) {}
};

namespace detail {

inline BlowUpError blow_up(const Ensemble& before, std::span<const double> drift, std::size_t particle) {
  const auto d = static_cast<std::size_t>(before.dimension());
  BlowUpError::Diagnostics diag;
  diag.particle = particle;
  diag.step = before.step();
  diag.time = before.time();
  for (std::size_t i = 0; i < before.size(); ++i) {
    double m = 0.0;
    for (std::size_t k = 0; k < d; ++k) m += drift[i * d + k] * drift[i * d + k];
    if (std::isfinite(m)) diag.max_drift = std::max(diag.max_drift, std::sqrt(m));
    else diag.max_drift = std::numeric_limits<double>::infinity();
  }
  // The nearest pre-step neighbours of the offending particle are the suspects.
  std::vector<std::pair<std::size_t, double>> dist;
  const auto x = before.point(particle);
  for (std::size_t j = 0; j < before.size(); ++j) {
    if (j == particle) continue;
    double r2 = 0.0;
    for (std::size_t k = 0; k < d; ++k) r2 += std::pow(before.point(j)[k] - x[k], 2);
    dist.emplace_back(j, std::sqrt(r2));
  }
  const std::size_t keep = std::min<std::size_t>(5, dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(keep), dist.end(),
                    [](const auto& a, const auto& b) { return a.second < b.second; });
  dist.resize(keep);
  diag.suspects = std::move(dist);
  return BlowUpError(diag);
}

}  // namespace detail

/// One synchronous Euler-Maruyama step: X_i += b_i dt + sqrt(2 dt) xi_i.
inline Ensemble step(const Ensemble& ens, const InteractionKernel& kernel, double dt, const StepOptions& opt,
                     const Executor& exec = Executor{}, StepObserver* observer = nullptr,
                     const std::vector<double>* cached_drift = nullptr) {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigurationError("step size dt must be positive");
  const auto d = static_cast<std::size_t>(ens.dimension());
  const std::size_t count = ens.size();
  const std::vector<double> drift = cached_drift ? *cached_drift : ensemble_drift(ens, kernel, opt.drift, exec);
  std::vector<double> noise(count * d, 0.0);
  std::vector<double> next(count * d);
  const auto key = rng::key_from_seed(opt.noise_seed);
  const unsigned S = opt.noise_substeps;
  const double amp = std::sqrt(2.0 * dt) * opt.noise_scale / std::sqrt(static_cast<double>(S));
  const auto pos = ens.positions();
  exec.parallel_for(count, [&](std::size_t i) {
    std::array<double, 8> xi{};
    if (opt.noise_scale != 0.0) {
      for (unsigned m = 0; m < S; ++m) {
        const std::uint64_t sub = ens.step() * S + m;
        for (std::size_t k = 0; k < d; k += 2) {
          const auto g = rng::gaussian_pair(rng::make_counter(i, sub, rng::Tag::noise, static_cast<std::uint32_t>(k / 2)), key);
          xi[k] += g[0];
          if (k + 1 < d) xi[k + 1] += g[1];
        }
      }
    }
    for (std::size_t k = 0; k < d; ++k) {
      noise[i * d + k] = amp * xi[k];
      next[i * d + k] = pos[i * d + k] + drift[i * d + k] * dt + noise[i * d + k];
    }
  });
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t k = 0; k < d; ++k)
      if (!std::isfinite(next[i * d + k])) throw detail::blow_up(ens, drift, i);
  Ensemble out(ens.dimension(), std::move(next), ens.time() + dt, ens.step() + 1);
  if (observer) observer->on_step({ens.step(), ens.time(), dt, ens.dimension(), pos, drift, noise, out.positions()});
  return out;
}

/// Draws the initial ensemble from the configured law using the "initial" sub-stream.
inline Ensemble sample_initial(const SimulationConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.d);
  const std::size_t N = cfg.N;
  std::vector<double> pos(N * d, 0.0);
  std::vector<double> centre = cfg.initial.center.empty() ? std::vector<double>(d, 0.0) : cfg.initial.center;
  const auto key = rng::key_from_seed(rng::derive_seed(cfg.seed, "initial"));
  auto normals = [&](std::size_t i, std::array<double, 8>& g) {
    for (std::size_t k = 0; k < d; k += 2) {
      const auto p = rng::gaussian_pair(rng::make_counter(i, 0, rng::Tag::initial, static_cast<std::uint32_t>(k / 2)), key);
      g[k] = p[0];
      if (k + 1 < d) g[k + 1] = p[1];
    }
  };
  switch (cfg.initial.kind) {
    case InitialLaw::Kind::point_mass:
      for (std::size_t i = 0; i < N; ++i) std::copy(centre.begin(), centre.end(), pos.begin() + static_cast<std::ptrdiff_t>(i * d));
      break;
    case InitialLaw::Kind::gaussian: {
      // Cholesky factor of the covariance (identity when unset).
      std::vector<double> L(d * d, 0.0);
      if (cfg.initial.covariance.empty()) {
        for (std::size_t k = 0; k < d; ++k) L[k * d + k] = 1.0;
      } else {
        const auto& C = cfg.initial.covariance;
        for (std::size_t r = 0; r < d; ++r)
          for (std::size_t c = 0; c <= r; ++c) {
            double s = C[r * d + c];
            for (std::size_t k = 0; k < c; ++k) s -= L[r * d + k] * L[c * d + k];
            if (r == c) {
              if (!(s > 0.0)) throw ConfigurationError("initial covariance is not positive definite");
              L[r * d + r] = std::sqrt(s);
            } else {
              L[r * d + c] = s / L[c * d + c];
            }
          }
      }
      std::array<double, 8> g{};
      for (std::size_t i = 0; i < N; ++i) {
        normals(i, g);
        for (std::size_t r = 0; r < d; ++r) {
          double v = centre[r];
          for (std::size_t c = 0; c <= r; ++c) v += L[r * d + c] * g[c];
          pos[i * d + r] = v;
        }
      }
      break;
    }
    case InitialLaw::Kind::uniform_ball: {
      std::array<double, 8> g{};
      for (std::size_t i = 0; i < N; ++i) {
        normals(i, g);
        double norm2 = 0.0;
        for (std::size_t k = 0; k < d; ++k) norm2 += g[k] * g[k];
        const double u = rng::uniform_pair(rng::make_counter(i, 1, rng::Tag::initial, 0), key)[0];
        const double rad = cfg.initial.radius * std::pow(u, 1.0 / static_cast<double>(d));
        for (std::size_t k = 0; k < d; ++k) pos[i * d + k] = centre[k] + rad * g[k] / std::sqrt(norm2);
      }
      break;
    }
    case InitialLaw::Kind::empirical: {
      const auto& s = cfg.initial.samples;
      const std::size_t M = s.size() / d;
      for (std::size_t i = 0; i < N; ++i) {
        std::size_t src = i;
        if (M != N) {
          const double u = rng::uniform_pair(rng::make_counter(i, 0, rng::Tag::resample, 0), key)[0];
          src = std::min(M - 1, static_cast<std::size_t>(u * static_cast<double>(M)));
        }
        std::copy_n(s.begin() + static_cast<std::ptrdiff_t>(src * d), d, pos.begin() + static_cast<std::ptrdiff_t>(i * d));
      }
      break;
    }
  }
  return Ensemble(cfg.d, std::move(pos));
}

/// Time grid plus ensemble snapshots every `stride` steps.
struct TrajectoryStore {
  int d = 2;
  std::size_t N = 0;
  std::vector<double> times;
  std::vector<std::vector<double>> snapshots;
  std::vector<std::uint64_t> steps;
  std::map<std::string, std::string> metadata;

  std::size_t size() const { return snapshots.size(); }
  bool empty() const { return snapshots.empty(); }
  Ensemble ensemble(std::size_t k) const { return Ensemble(d, snapshots[k], times[k], steps[k]); }

  void push(const Ensemble& e) {
    if (!times.empty() && !(e.time() > times.back())) throw IntegrityError("snapshot times must increase");
    times.push_back(e.time());
    steps.push_back(e.step());
    snapshots.emplace_back(e.positions().begin(), e.positions().end());
  }
};

inline StepOptions step_options(const SimulationConfig& cfg) {
  StepOptions opt;
  opt.drift = {cfg.summation, cfg.tree, cfg.self_interaction};
  opt.noise_seed = rng::derive_seed(cfg.seed, "noise");
  opt.noise_scale = cfg.noise_scale;
  opt.noise_substeps = cfg.noise_substeps;
  return opt;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int k = 15; k >= 0; --k, v >>= 4) s[static_cast<std::size_t>(k)] = digits[v & 0xF];
  return s;
}

/// Runs the configured system to T. Snapshots are bit-identical for any
/// worker count: each particle's drift and noise are computed in a fixed order.
inline TrajectoryStore simulate(const SimulationConfig& cfg, StepObserver* observer = nullptr,
                                KernelPtr kernel = nullptr) {
  cfg.validate();
  if (!kernel) kernel = build_kernel(cfg);
  const Executor exec(cfg.workers);
  const StepOptions opt = step_options(cfg);
  TrajectoryStore store;
  store.d = cfg.d;
  store.N = cfg.N;
  store.metadata["config_hash"] = hex64(cfg.hash());
  store.metadata["seed"] = std::to_string(cfg.seed);
  store.metadata["kernel"] = kernel->id();
  Ensemble ens = sample_initial(cfg);
  store.push(ens);
  const std::size_t K = cfg.steps();
  for (std::size_t k = 0; k < K; ++k) {
    ens = step(ens, *kernel, cfg.dt, opt, exec, observer);
    if ((k + 1) % cfg.stride == 0) store.push(ens);
  }
  if (observer) {
    std::vector<double> drift;
    if (observer->wants_final_drift()) drift = ensemble_drift(ens, *kernel, opt.drift, exec);
    observer->on_finish(ens, drift);
  }
  return store;
}

}  // namespace mkv
