#pragma once

// End-to-end studies: the Lamb-Oseen benchmark, the mollification-limit
// study and the regime sweep over power-law kernels. Each returns a Report
// whose asserted rows carry pass/fail flags.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mkv/error.hpp"
#include "mkv/estimators.hpp"
#include "mkv/particles.hpp"
#include "mkv/report.hpp"
#include "mkv/spaces.hpp"

namespace mkv {

struct StudyPlan {
  std::string id = "simulate";  // simulate | lamb_oseen | mollification_limit | regime_sweep
  SimulationConfig base;
  std::vector<std::size_t> N_list;
  std::vector<double> n_list;
  std::vector<double> dt_list;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> estimators;
  std::map<std::string, double> tolerances;

  double tol(const std::string& key, double fallback) const {
    const auto it = tolerances.find(key);
    return it == tolerances.end() ? fallback : it->second;
  }
  std::vector<std::uint64_t> seed_list() const { return seeds.empty() ? std::vector<std::uint64_t>{base.seed} : seeds; }
  std::vector<std::size_t> sizes() const { return N_list.empty() ? std::vector<std::size_t>{base.N} : N_list; }
};

/// Fans one step stream out to several observers.
class ObserverFan : public StepObserver {
 public:
  explicit ObserverFan(std::vector<StepObserver*> obs) : obs_(std::move(obs)) {}
  void on_step(const StepRecord& rec) override {
    for (auto* o : obs_) o->on_step(rec);
  }
  bool wants_final_drift() const override {
    return std::any_of(obs_.begin(), obs_.end(), [](const StepObserver* o) { return o->wants_final_drift(); });
  }
  void on_finish(const Ensemble& e, std::span<const double> drift) override {
    for (auto* o : obs_) o->on_finish(e, drift);
  }

 private:
  std::vector<StepObserver*> obs_;
};

/// Positions and drift captured at selected step indices.
class CheckpointRecorder : public StepObserver {
 public:
  struct Frame {
    double t = 0.0;
    std::uint64_t step = 0;
    std::vector<double> positions, drift;
  };

  CheckpointRecorder(std::vector<double> times, double dt) {
    for (double t : times) steps_.insert(static_cast<std::uint64_t>(std::llround(t / dt)));
  }
  void on_step(const StepRecord& rec) override {
    if (steps_.count(rec.step))
      frames_.push_back({rec.t, rec.step, {rec.before.begin(), rec.before.end()}, {rec.drift.begin(), rec.drift.end()}});
  }
  bool wants_final_drift() const override { return true; }
  void on_finish(const Ensemble& e, std::span<const double> drift) override {
    if (steps_.count(e.step()))
      frames_.push_back({e.time(), e.step(), {e.positions().begin(), e.positions().end()}, {drift.begin(), drift.end()}});
  }
  const std::vector<Frame>& frames() const { return frames_; }
  const Frame* at_step(std::uint64_t s) const {
    for (const auto& f : frames_)
      if (f.step == s) return &f;
    return nullptr;
  }

 private:
  std::set<std::uint64_t> steps_;
  std::vector<Frame> frames_;
};

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Lamb-Oseen reference

/// rho*(t, x) = (4 pi t)^{-1} exp(-|x|^2 / (4 t)).
inline double lamb_oseen_density(double t, double x, double y) {
  return std::exp(-(x * x + y * y) / (4.0 * t)) / (4.0 * std::numbers::pi * t);
}

struct ReferenceCheck {
  double t = 0.0;
  double scale = 0.0;              // sup |d rho / dt| on the interior
  double heat_residual = 0.0;      // sup |d_t rho - Lap rho| / scale
  double transport = 0.0;          // sup |div(rho K2 * rho)| / scale
  double full_residual = 0.0;      // sup |d_t rho - Lap rho + div(rho u)| / scale
  double velocity_tangential = 0.0;  // sup |x . u| / sup |x| |u|
};

/// Substitutes rho* into a grid discretization of the vorticity equation
/// d_t rho = Lap rho - div(rho K2 * rho). The velocity comes from a direct
/// discrete convolution with K2, not from the radial formula.
inline ReferenceCheck validate_lamb_oseen_reference(double t, double extent = 4.0, std::size_t cells = 96) {
  const double h = 2.0 * extent / static_cast<double>(cells);
  const std::size_t m = cells;
  auto node = [&](std::size_t k) { return -extent + (static_cast<double>(k) + 0.5) * h; };
  std::vector<double> rho(m * m), ux(m * m, 0.0), uy(m * m, 0.0);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) rho[a * m + b] = lamb_oseen_density(t, node(a), node(b));
  const double cell = h * h;
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) {
      double sx = 0.0, sy = 0.0;
      for (std::size_t c = 0; c < m; ++c)
        for (std::size_t e = 0; e < m; ++e) {
          if (c == a && e == b) continue;
          const auto k = eval_biot_savart({node(a) - node(c), node(b) - node(e)});
          sx += k[0] * rho[c * m + e];
          sy += k[1] * rho[c * m + e];
        }
      ux[a * m + b] = sx * cell;
      uy[a * m + b] = sy * cell;
    }
  const double ht = 1e-4 * t;
  ReferenceCheck rc;
  rc.t = t;
  double heat = 0.0, trans = 0.0, full = 0.0, tang = 0.0, tang_scale = 0.0;
  for (std::size_t a = 2; a + 2 < m; ++a)
    for (std::size_t b = 2; b + 2 < m; ++b) {
      const double x = node(a), y = node(b);
      const double dt_rho = (lamb_oseen_density(t + ht, x, y) - lamb_oseen_density(t - ht, x, y)) / (2.0 * ht);
      const double lap = (rho[(a + 1) * m + b] + rho[(a - 1) * m + b] + rho[a * m + b + 1] + rho[a * m + b - 1] -
                          4.0 * rho[a * m + b]) / (h * h);
      auto flux_x = [&](std::size_t i, std::size_t j) { return rho[i * m + j] * ux[i * m + j]; };
      auto flux_y = [&](std::size_t i, std::size_t j) { return rho[i * m + j] * uy[i * m + j]; };
      const double div = (flux_x(a + 1, b) - flux_x(a - 1, b)) / (2.0 * h) + (flux_y(a, b + 1) - flux_y(a, b - 1)) / (2.0 * h);
      rc.scale = std::max(rc.scale, std::abs(dt_rho));
      heat = std::max(heat, std::abs(dt_rho - lap));
      trans = std::max(trans, std::abs(div));
      full = std::max(full, std::abs(dt_rho - lap + div));
      tang = std::max(tang, std::abs(x * ux[a * m + b] + y * uy[a * m + b]));
      tang_scale = std::max(tang_scale, std::hypot(x, y) * std::hypot(ux[a * m + b], uy[a * m + b]));
    }
  rc.heat_residual = heat / rc.scale;
  rc.transport = trans / rc.scale;
  rc.full_residual = full / rc.scale;
  rc.velocity_tangential = tang / tang_scale;
  return rc;
}

// ---------------------------------------------------------------------------
// Test-function suite

/// Ten smooth compactly supported bumps (1 - |x - c|^2 / s^2)^3_+ of varied
/// centre and width, plus the unit-disk indicator, gridded on [-L, L]^2.
inline std::vector<TestFunction> standard_bumps(double extent = 4.5, std::size_t cells = 180) {
  struct B {
    double cx, cy, s;
  };
  const std::vector<B> bumps = {{0.0, 0.0, 0.5}, {0.0, 0.0, 1.0}, {0.5, 0.0, 0.3}, {0.0, 1.0, 0.5},
                                {1.0, 1.0, 0.7}, {-1.5, 0.5, 0.5}, {2.0, 0.0, 1.0}, {-0.7, -0.7, 0.3},
                                {0.0, -2.0, 0.8}, {1.5, -1.5, 0.4}};
  const Axis ax{-extent, extent, cells};
  std::vector<TestFunction> out;
  for (std::size_t k = 0; k < bumps.size(); ++k) {
    const auto b = bumps[k];
    auto f = [b](double, std::span<const double> x) {
      const double u = ((x[0] - b.cx) * (x[0] - b.cx) + (x[1] - b.cy) * (x[1] - b.cy)) / (b.s * b.s);
      if (u >= 1.0) return 0.0;
      const double w = 1.0 - u;
      return w * w * w;
    };
    TestFunction tf;
    tf.id = "bump" + std::to_string(k) + "(c=" + fmt(b.cx, 3) + ";" + fmt(b.cy, 3) + ",s=" + fmt(b.s, 3) + ")";
    tf.grid = GriddedFunction::sample({ax, ax}, false, [&](std::span<const double> c) { return f(0.0, c); });
    tf.exact = f;
    out.push_back(std::move(tf));
  }
  auto disk = [](double, std::span<const double> x) { return x[0] * x[0] + x[1] * x[1] <= 1.0 ? 1.0 : 0.0; };
  TestFunction tf;
  tf.id = "unit_disk";
  tf.grid = GriddedFunction::sample({ax, ax}, false, [&](std::span<const double> c) { return disk(0.0, c); });
  tf.exact = disk;
  out.push_back(std::move(tf));
  return out;
}

/// int_0^T (1 - exp(-1 / (4 t))) dt: heat-kernel mass of the unit disk integrated in time.
inline double disk_occupation_oracle(double T) {
  return quad::integrate([](double t) { return t > 0.0 ? 1.0 - std::exp(-1.0 / (4.0 * t)) : 1.0; }, 0.0, T, 64, 16);
}

// ---------------------------------------------------------------------------
// Lamb-Oseen study

struct LambOseenRun {
  std::size_t N = 0;
  std::uint64_t seed = 0;
  std::vector<CheckpointRecorder::Frame> frames;
  ResidualPoint residual;
  double seconds = 0.0;
};

inline void require_point_mass_origin(const SimulationConfig& cfg) {
  const bool origin = cfg.initial.center.empty() ||
                      std::all_of(cfg.initial.center.begin(), cfg.initial.center.end(), [](double v) { return v == 0.0; });
  if (cfg.initial.kind != InitialLaw::Kind::point_mass || !origin)
    throw ConfigurationError("study misconfiguration: the Lamb-Oseen study needs a point mass at the origin");
  if (cfg.kernel.id != "biot_savart") throw ConfigurationError("study misconfiguration: the Lamb-Oseen study needs the Biot-Savart kernel");
  if (cfg.d != 2) throw ConfigurationError("study misconfiguration: the Lamb-Oseen study is planar");
}

inline std::vector<double> lamb_oseen_checkpoints(double T) {
  std::vector<double> out;
  for (double t : {0.1, 0.25, 0.5})
    if (t <= T * (1.0 + 1e-12)) out.push_back(t);
  if (out.empty() || out.back() < T * (1.0 - 1e-12)) out.push_back(T);
  return out;
}

inline LambOseenRun run_lamb_oseen(const SimulationConfig& cfg, const std::vector<double>& checkpoints) {
  LambOseenRun run;
  run.N = cfg.N;
  run.seed = cfg.seed;
  CheckpointRecorder rec(checkpoints, cfg.dt);
  WeakFormAccumulator weak(gaussian_test());
  ObserverFan fan({&rec, &weak});
  SimulationConfig c = cfg;
  c.stride = std::max<std::size_t>(1, c.steps());
  const auto t0 = std::chrono::steady_clock::now();
  simulate(c, &fan);
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  run.frames = rec.frames();
  run.residual = weak.final_point();
  return run;
}

/// KDE of the pooled replicate clouds at one checkpoint, with the default
/// bandwidth rule applied to the pooled sample.
inline DensityGrid pooled_kde(const std::vector<LambOseenRun>& runs, std::size_t frame, double extent, std::size_t cells) {
  std::vector<double> pooled;
  for (const auto& r : runs) pooled.insert(pooled.end(), r.frames[frame].positions.begin(), r.frames[frame].positions.end());
  const Axis ax{-extent, extent, cells};
  return kde(pooled, 0.0, ax, ax);
}

inline double lamb_oseen_l1(const DensityGrid& g, double t) {
  return l1_distance(g, [t](double x, double y) { return lamb_oseen_density(t, x, y); },
                     // Reference mass outside the square is below the mass outside the inscribed disk.
                     std::exp(-g.density.axis(0).hi * g.density.axis(0).hi / (4.0 * t)));
}

struct LambOseenResult {
  Report report;
  std::map<std::size_t, std::vector<LambOseenRun>> runs;
};

inline LambOseenResult lamb_oseen_study_detailed(const StudyPlan& plan,
                                                 const std::function<void(const std::string&)>& log = {}) {
  require_point_mass_origin(plan.base);
  LambOseenResult out;
  Report& rep = out.report;
  rep.study = "lamb_oseen";
  const double T = plan.base.T, dt = plan.base.dt;
  const auto cps = lamb_oseen_checkpoints(T);

  const auto ref = validate_lamb_oseen_reference(cps.back());
  const double ref_tol = plan.tol("reference_residual", 0.02);
  rep.check("reference_pde_residual", "t=" + fmt(ref.t) + ",heat=" + fmt(ref.heat_residual, 3) + ",transport=" + fmt(ref.transport, 3),
            ref.full_residual, ref_tol, ref.full_residual <= ref_tol);

  const auto sizes = plan.sizes();
  const auto seeds = plan.seed_list();
  for (std::size_t N : sizes) {
    auto& runs = out.runs[N];
    for (auto seed : seeds) {
      SimulationConfig cfg = plan.base;
      cfg.N = N;
      cfg.seed = seed;
      runs.push_back(run_lamb_oseen(cfg, cps));
      if (log) log("lamb_oseen N=" + std::to_string(N) + " seed=" + std::to_string(seed) + " " + fmt(runs.back().seconds, 3) + " s");
    }
  }

  const double extent = plan.tol("kde_extent", std::max(5.0, 5.0 * std::sqrt(2.0 * T)));
  const auto cells = static_cast<std::size_t>(plan.tol("kde_cells", 200));
  const double l1_tol = plan.tol("l1_density", 0.05);
  const double sig = plan.tol("moment_sigmas", 3.0);
  const double dt_budget = plan.tol("moment_dt_budget", 2.0);
  std::map<std::size_t, double> terminal_l1;
  for (std::size_t N : sizes) {
    const auto& runs = out.runs[N];
    const double R = static_cast<double>(runs.size());
    for (std::size_t f = 0; f < cps.size(); ++f) {
      const double t = cps[f];
      const std::string par = "N=" + std::to_string(N) + ",t=" + fmt(t) + ",replicates=" + std::to_string(runs.size());
      const auto g = pooled_kde(runs, f, extent, cells);
      const double l1 = lamb_oseen_l1(g, t);
      const bool terminal = f + 1 == cps.size();
      if (terminal) terminal_l1[N] = l1;
      if (terminal) rep.check("l1_density", par, l1, l1_tol, l1 <= l1_tol);
      else rep.add({"l1_density", par, l1, 0.0, l1_tol, l1 / l1_tol, false, l1 <= l1_tol});

      std::vector<double> m2, am;
      for (const auto& r : runs) {
        m2.push_back(second_moment(r.frames[f].positions, 2));
        am.push_back(angular_momentum(r.frames[f].positions, r.frames[f].drift));
      }
      const auto e = replicate_mean(m2);
      const double band = sig * (4.0 * t / std::sqrt(R * static_cast<double>(N))) + dt_budget * dt;
      rep.check("second_moment", par + ",target=" + fmt(4.0 * t), e.value, 4.0 * t,
                std::abs(e.value - 4.0 * t) <= band, e.se)
          .bound = band;
      const auto ea = replicate_mean(am);
      rep.check("angular_momentum", par, ea.value, 0.0, ea.value > 0.0, ea.se);
    }
    std::vector<double> res, mart, comp;
    for (const auto& r : runs) {
      res.push_back(r.residual.residual);
      mart.push_back(r.residual.martingale);
      comp.push_back(r.residual.residual - r.residual.martingale);
    }
    const auto er = replicate_mean(res);
    ReportRow row{"weak_residual", "N=" + std::to_string(N) + ",t=" + fmt(T) + ",f=exp(-|x|^2)", er.value, er.se};
    row.bound = sample_sd(res);
    rep.add(row);
    const auto ec = replicate_mean(comp);
    rep.add({"weak_residual_compensated", "N=" + std::to_string(N) + ",t=" + fmt(T), ec.value, ec.se});
  }
  if (sizes.size() >= 2) {
    for (std::size_t k = 1; k < sizes.size(); ++k) {
      const double a = terminal_l1[sizes[k - 1]], b = terminal_l1[sizes[k]];
      rep.check("l1_decrease_in_N", "N=" + std::to_string(sizes[k - 1]) + "->" + std::to_string(sizes[k]), b, a,
                sizes[k] > sizes[k - 1] ? b < a : b > a);
    }
  }
  return out;
}

inline Report lamb_oseen_study(const StudyPlan& plan, const std::function<void(const std::string&)>& log = {}) {
  return lamb_oseen_study_detailed(plan, log).report;
}

// ---------------------------------------------------------------------------
// Mollification limit

struct MollificationRun {
  double n = 0.0;
  std::vector<double> terminal;
  std::vector<double> occupation;  // per test function mean occupation
  std::vector<double> occupation_se;
  KrylovReport krylov;             // ten bumps only; the disk has its own oracle
  double seconds = 0.0;
};

inline Report mollification_limit_study(const StudyPlan& plan, const std::function<void(const std::string&)>& log = {},
                                        std::vector<MollificationRun>* runs_out = nullptr) {
  if (plan.n_list.size() < 3) throw ConfigurationError("study misconfiguration: the mollification study needs at least 3 values of n");
  if (plan.base.d != 2) throw ConfigurationError("study misconfiguration: the mollification study is planar");
  Report rep;
  rep.study = "mollification_limit";
  const auto suite = standard_bumps();
  std::vector<const TestFunction*> fs;
  for (const auto& f : suite) fs.push_back(&f);
  const std::vector<const TestFunction*> bumps(fs.begin(), fs.end() - 1);
  LocalizedNormSpec kspec;
  kspec.p = plan.tol("krylov_p", 4.0);
  kspec.q = plan.tol("krylov_q", 8.0);
  kspec.T = plan.base.T;
  const double disk_oracle = disk_occupation_oracle(plan.base.T);
  std::vector<MollificationRun> runs;
  for (double n : plan.n_list) {
    SimulationConfig cfg = plan.base;
    cfg.n = n;
    cfg.stride = std::max<std::size_t>(1, cfg.steps());
    OccupationIntegrator occ(fs, cfg.N, cfg.d);
    const auto t0 = std::chrono::steady_clock::now();
    const auto store = simulate(cfg, &occ);
    MollificationRun r;
    r.n = n;
    r.terminal = store.snapshots.back();
    std::vector<std::vector<double>> bump_values;
    for (std::size_t m = 0; m < fs.size(); ++m) {
      const auto e = batch_means(occ.values(m));
      r.occupation.push_back(e.value);
      r.occupation_se.push_back(e.se);
      if (m < bumps.size()) bump_values.emplace_back(occ.values(m).begin(), occ.values(m).end());
    }
    r.krylov = krylov_from_values({bump_values}, bumps, kspec, cfg.d);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) log("mollification n=" + fmt(n) + " " + fmt(r.seconds, 3) + " s");
    runs.push_back(std::move(r));
  }
  const double extent = plan.tol("kde_extent", std::max(5.0, 5.0 * std::sqrt(2.0 * plan.base.T) + 2.0));
  const auto cells = static_cast<std::size_t>(plan.tol("kde_cells", 200));
  const Axis ax{-extent, extent, cells};
  const double bw = default_bandwidth(runs.front().terminal)[0];
  std::vector<DensityGrid> dens;
  for (const auto& r : runs) dens.push_back(kde(r.terminal, bw, ax, ax));
  const double floor = plan.tol("noise_floor", 0.10);
  std::vector<double> gaps, kgaps;
  for (std::size_t k = 0; k + 1 < runs.size(); ++k) {
    gaps.push_back(l1_distance(dens[k], dens[k + 1]));
    double kg = 0.0;
    for (std::size_t m = 0; m < fs.size(); ++m) kg = std::max(kg, std::abs(runs[k].occupation[m] - runs[k + 1].occupation[m]));
    kgaps.push_back(kg);
    const std::string par = "n=" + fmt(runs[k].n) + "->" + fmt(runs[k + 1].n);
    if (k == 0) {
      rep.add({"density_gap", par, gaps[k]});
      rep.add({"krylov_gap", par, kgaps[k]});
    } else {
      rep.check("density_gap", par, gaps[k], (1.0 + floor) * gaps[k - 1], gaps[k] <= (1.0 + floor) * gaps[k - 1]);
      rep.check("krylov_gap", par, kgaps[k], (1.0 + floor) * kgaps[k - 1], kgaps[k] <= (1.0 + floor) * kgaps[k - 1]);
    }
  }
  rep.check("density_gap_last_vs_first", "first=" + fmt(gaps.front()), gaps.back(), 0.5 * gaps.front(),
            gaps.back() < 0.5 * gaps.front());
  double kmin = std::numeric_limits<double>::infinity(), kmax = 0.0;
  for (const auto& r : runs) {
    const std::string par = "n=" + fmt(r.n) + ",p=" + fmt(r.krylov.p) + ",q=" + fmt(r.krylov.q);
    rep.add({"krylov_worst_ratio", par, r.krylov.worst_ratio});
    kmin = std::min(kmin, r.krylov.worst_ratio);
    kmax = std::max(kmax, r.krylov.worst_ratio);
    const double occ = r.occupation.back(), se = r.occupation_se.back();
    rep.check("unit_disk_occupation", "n=" + fmt(r.n) + ",oracle=" + fmt(disk_oracle), occ, disk_oracle,
              std::abs(occ - disk_oracle) <= 3.0 * se + 0.01, se);
    rep.extra["krylov"].push_back({{"n", r.n}, {"worst_ratio", r.krylov.worst_ratio}, {"p", r.krylov.p}, {"q", r.krylov.q}});
  }
  rep.check("krylov_ratio_spread", "max/min over n", kmax / kmin, 2.0, kmax / kmin < 2.0);
  if (runs_out) *runs_out = std::move(runs);
  return rep;
}

// ---------------------------------------------------------------------------
// Regime sweep

struct ExponentPoint {
  double a = 0.0, p = 0.0, q = 0.0;
  IndexClass cls;
  bool integrable = false;  // int_{|z|<1} |z|^{-a p} dz < inf
  bool admissible = false;  // integrable and in I_0
};

inline std::vector<ExponentPoint> exponent_grid(double a, int d = 2) {
  std::vector<ExponentPoint> out;
  for (double p : {1.1, 1.25, 1.3, 4.0 / 3.0, 1.5, 2.0, 3.0, 4.0, 8.0})
    for (double q : {2.0, 8.0, 100.0}) {
      ExponentPoint e;
      e.a = a;
      e.p = p;
      e.q = q;
      e.cls = index_class(p, q, d, 0.0);
      e.integrable = a * p < static_cast<double>(d);
      e.admissible = e.integrable && e.cls.member;
      out.push_back(e);
    }
  return out;
}

inline Report regime_sweep(const StudyPlan& plan, const std::function<void(const std::string&)>& log = {}) {
  Report rep;
  rep.study = "regime_sweep";
  std::vector<double> as = {0.5, 1.0, 1.5};
  if (plan.tolerances.count("exponent")) as = {plan.tolerances.at("exponent")};
  for (double a : as) {
    const auto grid = exponent_grid(a, plan.base.d);
    const ExponentPoint* best = nullptr;
    bool any_large_p = false;
    for (const auto& e : grid) {
      rep.add({"classification",
               "a=" + fmt(a) + ",p=" + fmt(e.p, 4) + ",q=" + fmt(e.q) + ",regime=" + to_string(e.cls.regime) +
                   ",member=" + (e.cls.member ? "true" : "false") + ",integrable=" + (e.integrable ? "true" : "false"),
               e.cls.scaling, 0.0, 2.0, std::nan(""), false, e.admissible});
      if (e.admissible && (!best || e.cls.scaling < best->cls.scaling)) best = &e;
      if (e.admissible && e.p >= 4.0 / 3.0 - 1e-12) any_large_p = true;
    }
    if (!any_large_p) {
      ReportRow r{"admissibility", "a=" + fmt(a) + ": no admissible exponent pair with p >= 4/3", 0.0};
      rep.add(r);
      rep.extra["messages"].push_back("a=" + fmt(a) + ": no admissible exponent pair with p >= 4/3");
    }
    // Best admissible pair: p just below 2/a with large q, which maximises the moment window.
    ExponentPoint star;
    star.a = a;
    star.p = std::min(8.0, 0.95 * 2.0 / a);
    star.q = 100.0;
    star.cls = index_class(star.p, star.q, plan.base.d, 0.0);
    star.integrable = a * star.p < plan.base.d;
    star.admissible = star.integrable && star.cls.member;
    if (!star.admissible && best) star = *best;
    const double window = 2.0 / star.cls.scaling;
    const double beta = plan.tol("beta_fraction", 0.5) * window;

    SimulationConfig cfg = plan.base;
    cfg.kernel.id = a == 1.0 ? "biot_savart" : "rotational_power";
    cfg.kernel.exponent = a;
    cfg.kernel.exponents = {star.p, star.q};
    cfg.stride = std::max<std::size_t>(1, cfg.steps() / 20);
    const std::string par = "a=" + fmt(a) + ",p*=" + fmt(star.p, 4) + ",q*=" + fmt(star.q) + ",beta=" + fmt(beta, 4) +
                            ",regime=" + to_string(star.cls.regime);
    bool blew_up = false;
    MomentReport mom;
    try {
      const auto store = simulate(cfg);
      mom = sup_moment(store, beta, Exponents{star.p, star.q});
    } catch (const BlowUpError& e) {
      blew_up = true;
      if (log) log(std::string("blow-up: ") + e.what());
    }
    if (log) log("regime a=" + fmt(a) + (blew_up ? " blow-up" : " stable"));
    const bool asserted = star.admissible && mom.admissible;
    ReportRow r{"stable_run", par, blew_up ? 1.0 : 0.0, 0.0, 0.0, std::nan(""), asserted, !blew_up};
    rep.add(r);
    rep.add({"sup_moment_ratio", par, mom.ratio, mom.se, std::nan(""), std::nan(""), false, std::isfinite(mom.ratio)});
  }
  return rep;
}

/// Bare simulation as a study. Estimators named in the plan run on the stored
/// trajectory; the sup-moment is always reported.
inline Report simulation_study(const StudyPlan& plan, TrajectoryStore* store_out = nullptr) {
  Report rep;
  rep.study = "simulate";
  auto store = simulate(plan.base);
  auto wants = [&](const std::string& id) {
    return std::find(plan.estimators.begin(), plan.estimators.end(), id) != plan.estimators.end();
  };
  const auto mom = sup_moment(store, plan.tol("beta", 1.0));
  rep.add({"sup_moment", "beta=" + fmt(mom.beta), mom.value, mom.se, std::nan(""), mom.ratio});
  rep.add({"snapshots", "stride=" + std::to_string(plan.base.stride), static_cast<double>(store.size())});
  if (wants("second_moment"))
    rep.add({"second_moment", "t=" + fmt(store.times.back()), second_moment(store.snapshots.back(), store.d)});
  if (wants("krylov") && store.d == 2) {
    const auto suite = standard_bumps();
    std::vector<const TestFunction*> bumps;
    for (std::size_t m = 0; m + 1 < suite.size(); ++m) bumps.push_back(&suite[m]);
    LocalizedNormSpec spec;
    spec.p = plan.tol("krylov_p", 4.0);
    spec.q = plan.tol("krylov_q", 8.0);
    spec.T = plan.base.T;
    const auto kr = krylov_ratio(store, bumps, spec);
    rep.add({"krylov_worst_ratio", "p=" + fmt(kr.p) + ",q=" + fmt(kr.q), kr.worst_ratio});
    rep.extra["krylov"].push_back({{"n", plan.base.n}, {"worst_ratio", kr.worst_ratio}, {"p", kr.p}, {"q", kr.q}});
  }
  if (wants("weak_residual")) {
    const auto kernel = build_kernel(plan.base);
    const auto pts = weak_form_residual(store, gaussian_test(), *kernel, step_options(plan.base).drift,
                                        Executor(plan.base.workers));
    rep.add({"weak_residual", "t=" + fmt(pts.back().t) + ",f=exp(-|x|^2)", pts.back().residual});
  }
  if (store_out) *store_out = std::move(store);
  return rep;
}

/// Dispatches a plan by study id.
inline Report run_study(const StudyPlan& plan, const std::function<void(const std::string&)>& log = {}) {
  if (plan.id == "lamb_oseen") return lamb_oseen_study(plan, log);
  if (plan.id == "mollification_limit") return mollification_limit_study(plan, log);
  if (plan.id == "regime_sweep") return regime_sweep(plan, log);
  if (plan.id == "simulate") return simulation_study(plan);
  throw ConfigurationError("unknown study id '" + plan.id + "'");
}

}  // namespace mkv
