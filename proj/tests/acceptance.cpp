// Acceptance suite: nine criteria, one PASS/FAIL line each. Runtime budgets are
// part of every criterion. MKV_ACCEPTANCE_ONLY=3,7 restricts the run.
//
// Exit status is 0 when every selected criterion passes and 1 otherwise.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mkv/estimators.hpp"
#include "mkv/experiments.hpp"
#include "mkv/io.hpp"
#include "mkv/kernels.hpp"
#include "mkv/particles.hpp"
#include "mkv/tree.hpp"

using namespace mkv;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

void note(const std::string& s) {
  std::fprintf(stderr, "  %s\n", s.c_str());
  std::fflush(stderr);
}

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

constexpr double kEps = std::numeric_limits<double>::epsilon();

// 1 --------------------------------------------------------------------------

Outcome kernel_identities() {
  std::mt19937_64 gen(20240601);
  std::uniform_real_distribution<double> u(-3.0, 3.0), lam(0.1, 10.0);
  std::size_t odd_fail = 0;
  double homog = 0.0, tang = 0.0;
  for (int i = 0; i < 1000000; ++i) {
    const std::array<double, 2> z{u(gen), u(gen)};
    const auto k = eval_biot_savart(z);
    const auto km = eval_biot_savart({-z[0], -z[1]});
    if (km[0] != -k[0] || km[1] != -k[1]) ++odd_fail;
    const double l = lam(gen);
    const auto kl = eval_biot_savart({l * z[0], l * z[1]});
    const double mag = std::hypot(k[0], k[1]);
    homog = std::max(homog, std::hypot(l * kl[0] - k[0], l * kl[1] - k[1]) / mag);
    tang = std::max(tang, std::abs(z[0] * k[0] + z[1] * k[1]) / (mag * std::hypot(z[0], z[1])));
  }
  // Divergence of the closed-form mollified kernel at 100 probe points per n.
  double div = 0.0;
  std::uniform_real_distribution<double> box(-2.0, 2.0);
  for (double n : {10.0, 50.0}) {
    const auto k = mollify(std::make_shared<BiotSavartKernel>(), n, MollifyMode::closed_form_biot_savart);
    std::vector<double> pts(200);
    for (auto& p : pts) p = box(gen);
    const double y[2] = {0.0, 0.0};
    const auto probe = divergence_probe(*k, 0.0, pts, y, 1e-4);
    for (double v : probe.divergence) div = std::max(div, std::isfinite(v) ? std::abs(v) : 1.0);
  }
  const double mach = 16.0 * kEps;
  Outcome o;
  o.pass = odd_fail == 0 && homog <= mach && tang <= mach && div <= 1e-6;
  o.detail = "odd failures " + std::to_string(odd_fail) + "/1e6, homogeneity " + num(homog / kEps, 3) +
             " eps, tangentiality " + num(tang / kEps, 3) + " eps (limit 16 eps), max |div K_n| " + num(div, 3) +
             " (limit 1e-6, n in {10, 50})";
  return o;
}

// 2 --------------------------------------------------------------------------

Outcome annulus_integrals() {
  BiotSavartKernel k;
  double worst = 0.0;
  std::ostringstream os;
  for (double delta : {1e-1, 1e-2, 1e-3}) {
    const double v = majorant_integral(k, 0.0, 2.0, delta, 1.0);
    const double ref = std::log(1.0 / delta) / (2.0 * std::numbers::pi);
    worst = std::max(worst, std::abs(v / ref - 1.0));
    os << "p=2 delta=" << delta << ": " << num(v, 6) << " vs " << num(ref, 6) << "; ";
  }
  const double v = majorant_integral(k, 0.0, 1.5, 0.0, 1.0);
  const double ref = 2.0 / std::sqrt(2.0 * std::numbers::pi);
  worst = std::max(worst, std::abs(v / ref - 1.0));
  os << "p=1.5 disk: " << num(v, 6) << " vs " << num(ref, 6) << "; worst relative error " << num(worst, 3)
     << " (limit 1e-2)";
  return {worst <= 1e-2, os.str()};
}

// 3 --------------------------------------------------------------------------

SimulationConfig lamb_oseen_base() {
  SimulationConfig c;
  c.N = 20000;
  c.n = 50;
  c.dt = 1e-3;
  c.T = 0.5;
  c.summation = Summation::tree;
  c.tree.theta = 0.5;
  c.initial.kind = InitialLaw::Kind::point_mass;
  return c;
}

Outcome lamb_oseen_benchmark() {
  StudyPlan plan;
  plan.id = "lamb_oseen";
  plan.base = lamb_oseen_base();
  plan.N_list = {5000, 20000};
  plan.seeds = {1, 2, 3, 4, 5, 6, 7, 8};
  const auto res = lamb_oseen_study_detailed(plan, note);
  const auto& rep = res.report;
  bool ref_ok = false, l1_ok = false, m2_ok = true, dec_ok = false;
  double l1 = std::nan(""), l1_small = std::nan("");
  std::ostringstream m2s;
  for (const auto& r : rep.rows) {
    note(r.estimator + " " + r.params + " = " + num(r.value, 5) + (r.asserted ? (r.pass ? " ok" : " FAIL") : ""));
    const bool big = r.params.rfind("N=20000,", 0) == 0;
    if (r.estimator == "reference_pde_residual") ref_ok = r.pass;
    if (r.estimator == "l1_density" && r.asserted) {
      if (big) {
        l1 = r.value;
        l1_ok = r.pass;
      } else {
        l1_small = r.value;
      }
    }
    if (r.estimator == "second_moment" && big) {
      m2_ok = m2_ok && r.pass;
      m2s << num(r.value, 5) << "+-" << num(r.bound, 2) << " ";
    }
    if (r.estimator == "l1_decrease_in_N") dec_ok = r.pass;
  }
  Outcome o;
  o.pass = ref_ok && l1_ok && m2_ok && dec_ok;
  o.detail = std::string("reference residual ") + (ref_ok ? "ok" : "FAIL") + "; (a) L1 at t=0.5 " + num(l1, 4) +
             " (limit 0.05); (b) E|X|^2 at t=0.1,0.25,0.5: " + m2s.str() + (m2_ok ? "ok" : "FAIL") +
             "; (c) L1 N=5000 " + num(l1_small, 4) + " -> N=20000 " + num(l1, 4) + (dec_ok ? " decreasing" : " NOT decreasing");
  return o;
}

// 4 and 8: one set of runs over n = 10, 20, 40, 80 ------------------------------

struct MollificationShared {
  bool done = false;
  Report report;
  std::vector<MollificationRun> runs;
  double seconds = 0.0;
};

MollificationShared& mollification_runs() {
  static MollificationShared s;
  if (s.done) return s;
  StudyPlan plan;
  plan.id = "mollification_limit";
  plan.base = lamb_oseen_base();
  plan.base.seed = 11;
  plan.n_list = {10, 20, 40, 80};
  const auto t0 = Clock::now();
  s.report = mollification_limit_study(plan, note, &s.runs);
  s.seconds = since(t0);
  s.done = true;
  return s;
}

Outcome krylov_uniformity(double& seconds) {
  auto& s = mollification_runs();
  const double oracle = disk_occupation_oracle(0.5);
  double kmin = std::numeric_limits<double>::infinity(), kmax = 0.0, post = s.seconds;
  bool disk_ok = true;
  std::ostringstream os;
  for (const auto& r : s.runs) {
    if (r.n > 40.0) {
      post -= r.seconds;
      continue;
    }
    kmin = std::min(kmin, r.krylov.worst_ratio);
    kmax = std::max(kmax, r.krylov.worst_ratio);
    const double occ = r.occupation.back(), se = r.occupation_se.back();
    const bool ok = std::abs(occ - oracle) <= 3.0 * se + 0.01;
    disk_ok = disk_ok && ok;
    os << "n=" << r.n << ": ratio " << num(r.krylov.worst_ratio, 4) << ", disk " << num(occ, 5) << "+-" << num(se, 2)
       << (ok ? "" : " FAIL") << "; ";
  }
  // Criterion 4 is charged for the n <= 40 runs only.
  seconds = post;
  const double spread = kmax / kmin;
  Outcome o;
  o.pass = spread < 2.0 && disk_ok;
  o.detail = os.str() + "worst-ratio spread " + num(spread, 4) + " (limit 2); disk oracle " + num(oracle, 6) +
             " from the time integral (quoted 0.4134 disagrees with it), tolerance 3 SE + 0.01";
  return o;
}

Outcome mollification_limit(double& seconds) {
  auto& s = mollification_runs();
  seconds = s.seconds;
  std::vector<double> gaps;
  bool monotone = true, halved = false;
  for (const auto& r : s.report.rows) {
    if (r.estimator == "density_gap") {
      gaps.push_back(r.value);
      if (r.asserted) monotone = monotone && r.pass;
    }
    if (r.estimator == "density_gap_last_vs_first") halved = r.pass;
  }
  std::ostringstream os;
  os << "L1 gaps n=10->20->40->80:";
  for (double g : gaps) os << " " << num(g, 4);
  os << (monotone ? "; decreasing" : "; NOT decreasing") << " (10% noise floor per step); last/first "
     << num(gaps.back() / gaps.front(), 3) << " (limit 0.5)";
  return {monotone && halved, os.str()};
}

// 5 --------------------------------------------------------------------------

Outcome moment_bound() {
  const double beta = 1.5;
  bool ok = true;
  std::ostringstream os;
  for (const auto kind : {InitialLaw::Kind::point_mass, InitialLaw::Kind::gaussian}) {
    std::vector<double> ratios;
    for (double n : {10.0, 40.0})
      for (std::size_t N : {5000, 20000}) {
        SimulationConfig c = lamb_oseen_base();
        c.initial.kind = kind;
        c.n = n;
        c.N = N;
        c.seed = 5;
        c.stride = c.steps();
        SupMomentTracker tr(beta, N, 2);
        const auto t0 = Clock::now();
        simulate(c, &tr);
        const auto rep = tr.report(Exponents{1.9, 100.0});
        ratios.push_back(rep.ratio);
        note("moment " + to_string(kind) + " n=" + num(n) + " N=" + std::to_string(N) + ": ratio " + num(rep.ratio, 5) +
             " se " + num(rep.se / (rep.initial + 1.0), 2) + (rep.admissible ? "" : " (beta outside window)") + ", " +
             num(since(t0), 3) + " s");
      }
    double mean = 0.0;
    for (double r : ratios) mean += r / static_cast<double>(ratios.size());
    double dev = 0.0;
    for (double r : ratios) dev = std::max(dev, std::isfinite(r) ? std::abs(r / mean - 1.0) : 1e9);
    ok = ok && dev <= 0.2;
    os << to_string(kind) << ": ratios";
    for (double r : ratios) os << " " << num(r, 4);
    os << ", max deviation from mean " << num(100.0 * dev, 3) << "%; ";
  }
  os << "limit 20% over n in {10, 40}, N in {5000, 20000}";
  return {ok, os.str()};
}

// 6 --------------------------------------------------------------------------

Outcome weak_residual() {
  constexpr std::size_t kReplicates = 160;
  auto base = lamb_oseen_base();
  base.T = 0.1;
  auto replicate = [&](std::size_t N, double dt, unsigned substeps) {
    std::vector<ResidualPoint> out;
    for (std::size_t s = 1; s <= kReplicates; ++s) {
      SimulationConfig c = base;
      c.N = N;
      c.dt = dt;
      c.noise_substeps = substeps;
      c.seed = s;
      out.push_back(run_lamb_oseen(c, {c.T}).residual);
    }
    return out;
  };
  const auto t0 = Clock::now();
  // Two sub-increments per coarse step reproduce the fine run's Brownian path.
  const auto coarse = replicate(2000, 1e-3, 2);
  note("weak residual N=2000 dt=1e-3: " + num(since(t0), 3) + " s");
  const auto fine = replicate(2000, 5e-4, 1);
  note("weak residual N=2000 dt=5e-4: " + num(since(t0), 3) + " s");
  const auto small = replicate(500, 1e-3, 2);
  note("weak residual N=500 dt=1e-3: " + num(since(t0), 3) + " s");

  auto mean_abs = [](const std::vector<ResidualPoint>& v, bool compensated) {
    double s = 0.0;
    for (const auto& p : v) s += std::abs(compensated ? p.residual - p.martingale : p.residual);
    return s / static_cast<double>(v.size());
  };
  auto sd = [](const std::vector<ResidualPoint>& v) {
    std::vector<double> r;
    for (const auto& p : v) r.push_back(p.residual);
    return sample_sd(r);
  };
  const double dc = mean_abs(coarse, true), df = mean_abs(fine, true);
  const double sd_ratio = sd(small) / sd(coarse);
  Outcome o;
  o.pass = df < dc && sd_ratio >= 1.6 && sd_ratio <= 2.4;
  o.detail = "mean |R - M| dt=1e-3 " + num(dc, 4) + " -> dt=5e-4 " + num(df, 4) + (df < dc ? " decreasing" : " NOT decreasing") +
             " (raw mean |R| " + num(mean_abs(coarse, false), 4) + " -> " + num(mean_abs(fine, false), 4) + "); SD(R) N=500 " +
             num(sd(small), 4) + " / N=2000 " + num(sd(coarse), 4) + " = " + num(sd_ratio, 4) + " (band [1.6, 2.4]); " +
             std::to_string(kReplicates) + " replicates, T=0.1";
  return o;
}

// 7 --------------------------------------------------------------------------

Outcome tree_summation() {
  auto disk = [](std::size_t N, std::uint64_t seed) {
    SimulationConfig c;
    c.N = N;
    c.seed = seed;
    c.initial.kind = InitialLaw::Kind::uniform_ball;
    return sample_initial(c);
  };
  const auto k = std::dynamic_pointer_cast<const MollifiedKernel>(build_kernel(KernelSpec{}, 2, 50));
  TreeOptions opt;
  opt.theta = 0.5;
  const auto small = disk(4096, 9);
  const auto exact = ensemble_drift(small, *k, DriftOptions{}, Executor{});
  const auto approx = tree_drift(small.positions(), *k, opt);
  double worst = 0.0;
  for (std::size_t i = 0; i < small.size(); ++i)
    worst = std::max(worst, std::hypot(approx[2 * i] - exact[2 * i], approx[2 * i + 1] - exact[2 * i + 1]) /
                                std::hypot(exact[2 * i], exact[2 * i + 1]));

  const auto big = disk(65536, 10);
  auto t0 = Clock::now();
  const auto tb = tree_drift(big.positions(), *k, opt);
  const double t_tree = since(t0);
  t0 = Clock::now();
  const auto db = ensemble_drift(big, *k, DriftOptions{}, Executor{});
  const double t_direct = since(t0);
  double big_err = 0.0;
  for (std::size_t i = 0; i < big.size(); ++i)
    big_err = std::max(big_err, std::hypot(tb[2 * i] - db[2 * i], tb[2 * i + 1] - db[2 * i + 1]) /
                                    std::hypot(db[2 * i], db[2 * i + 1]));
  const double speedup = t_direct / t_tree;
  Outcome o;
  o.pass = worst <= 1e-2 && speedup >= 5.0;
  o.detail = "N=4096 theta=0.5 max relative error " + num(worst, 3) + " (limit 1e-2); N=65536 direct " + num(t_direct, 3) +
             " s, tree " + num(t_tree, 3) + " s, speedup " + num(speedup, 3) + "x (limit 5x, tree error there " +
             num(big_err, 3) + ")";
  return o;
}

// 9 --------------------------------------------------------------------------

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Outcome determinism() {
  const auto root = fs::temp_directory_path() / "mkv_acceptance_determinism";
  fs::remove_all(root);
  bool ok = true;
  std::size_t compared = 0;
  std::ostringstream os;
  for (const auto summation : {Summation::direct, Summation::tree}) {
    SimulationConfig c = lamb_oseen_base();
    c.N = 3000;
    c.T = 0.05;
    c.stride = 10;
    c.summation = summation;
    c.initial.kind = InitialLaw::Kind::gaussian;
    c.seed = 99;
    const std::string tag = summation == Summation::tree ? "tree" : "direct";
    std::vector<fs::path> dirs;
    for (unsigned w : {1u, 8u}) {
      c.workers = w;
      const auto store = simulate(c);
      const auto dir = root / (tag + "_w" + std::to_string(w));
      fs::create_directories(dir);
      for (std::size_t s = 0; s < store.size(); ++s)
        write_snapshot_file(dir / ("step_" + std::to_string(store.steps[s]) + ".bin"), store.ensemble(s));
      dirs.push_back(dir);
    }
    std::size_t same = 0, total = 0;
    for (const auto& e : fs::directory_iterator(dirs[0])) {
      ++total;
      const auto other = dirs[1] / e.path().filename();
      if (fs::exists(other) && file_bytes(e.path()) == file_bytes(other)) ++same;
    }
    const std::size_t other_count = static_cast<std::size_t>(std::distance(fs::directory_iterator(dirs[1]), fs::directory_iterator{}));
    ok = ok && same == total && other_count == total && total > 0;
    compared += total;
    os << tag << ": " << same << "/" << total << " snapshots byte-identical; ";
  }
  fs::remove_all(root);
  os << compared << " files compared at 1 vs 8 workers";
  return {ok, os.str()};
}

}  // namespace

int main() {
  std::set<int> only;
  if (const char* env = std::getenv("MKV_ACCEPTANCE_ONLY")) {
    std::stringstream ss(env);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) only.insert(std::atoi(tok.c_str()));
  }
  struct Criterion {
    int id;
    const char* name;
    double budget;  // seconds
    std::function<Outcome(double&)> run;
  };
  auto timed = [](std::function<Outcome()> f) { return [f](double&) { return f(); }; };
  const std::vector<Criterion> criteria = {
      {1, "kernel identities", 10, timed(kernel_identities)},
      {2, "supercritical annulus integrals", 5, timed(annulus_integrals)},
      {3, "Lamb-Oseen benchmark", 900, timed(lamb_oseen_benchmark)},
      {4, "Krylov uniformity", 600, krylov_uniformity},
      {5, "moment bound", 600, timed(moment_bound)},
      {6, "weak-form residual", 900, timed(weak_residual)},
      {7, "tree summation", 300, timed(tree_summation)},
      {8, "mollification limit", 900, mollification_limit},
      {9, "determinism", 120, timed(determinism)},
  };
  int failed = 0, ran = 0;
  std::vector<std::string> lines;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    ++ran;
    std::fprintf(stderr, "criterion %d: %s ...\n", c.id, c.name);
    std::fflush(stderr);
    const auto t0 = Clock::now();
    Outcome o;
    double charged = -1.0;
    try {
      o = c.run(charged);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = charged >= 0.0 ? charged : since(t0);
    const bool in_budget = secs <= c.budget;
    const bool pass = o.pass && in_budget;
    if (!pass) ++failed;
    char head[160];
    std::snprintf(head, sizeof head, "criterion %d %s  %s  [%.1f s, budget %.0f s%s]  ", c.id, pass ? "PASS" : "FAIL",
                  c.name, secs, c.budget, in_budget ? "" : ", OVER BUDGET");
    lines.push_back(head + o.detail);
    std::printf("%s\n", lines.back().c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
