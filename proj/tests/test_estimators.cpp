#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <vector>

#include "mkv/estimators.hpp"
#include "mkv/report.hpp"

using namespace mkv;
using std::numbers::pi;

namespace {

SimulationConfig brownian(std::size_t N, double dt, double T, std::uint64_t seed = 5) {
  SimulationConfig cfg;
  cfg.N = N;
  cfg.dt = dt;
  cfg.T = T;
  cfg.kernel.id = "zero";
  cfg.seed = seed;
  return cfg;
}

TestFunction bump(std::string id, double cx, double cy, double w) {
  const Axis a{-3.0, 3.0, 120};
  auto f = [=](std::span<const double> c) {
    const double r2 = ((c[0] - cx) * (c[0] - cx) + (c[1] - cy) * (c[1] - cy)) / (w * w);
    return r2 < 1.0 ? std::pow(1.0 - r2, 2) : 0.0;
  };
  TestFunction t;
  t.id = std::move(id);
  t.grid = GriddedFunction::sample({a, a}, false, f);
  t.exact = [f](double, std::span<const double> x) { return f(x); };
  return t;
}

// Least-squares slope of log y on log x.
double slope(const std::vector<double>& x, const std::vector<double>& y) {
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += std::log(x[k]) / double(x.size());
    my += std::log(y[k]) / double(x.size());
  }
  double sxy = 0, sxx = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxy += (std::log(x[k]) - mx) * (std::log(y[k]) - my);
    sxx += std::pow(std::log(x[k]) - mx, 2);
  }
  return sxy / sxx;
}

}  // namespace

TEST(BatchMeans, MeanAndErrorOfIidData) {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> g(3.0, 2.0);
  std::vector<double> v(100000);
  for (auto& x : v) x = g(gen);
  const auto e = batch_means(v);
  EXPECT_NEAR(e.value, 3.0, 4 * 2.0 / std::sqrt(1e5));
  EXPECT_NEAR(e.se, 2.0 / std::sqrt(1e5), 0.4 * 2.0 / std::sqrt(1e5));
  const auto r = replicate_mean(std::vector<double>{1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(r.value, 2.0);
  EXPECT_DOUBLE_EQ(r.se, 1.0 / std::sqrt(3.0));
  EXPECT_DOUBLE_EQ(sample_sd(std::vector<double>{1.0, 2.0, 3.0}), 1.0);
}

TEST(Kde, PointMassReproducesTheSmoothingKernel) {
  const std::vector<double> xy(2 * 1000, 0.0);
  const double s = 0.3;
  const Axis a{-3.0, 3.0, 200};
  const auto g = kde(xy, s, a, a);
  double worst = 0.0;
  const double peak = 1.0 / (2 * pi * s * s);
  for (std::size_t i = 0; i < a.n; ++i)
    for (std::size_t j = 0; j < a.n; ++j) {
      const double x = a.node(i), y = a.node(j);
      const double ref = peak * std::exp(-(x * x + y * y) / (2 * s * s));
      worst = std::max(worst, std::abs(g.density.values()[i * a.n + j] - ref));
    }
  EXPECT_LE(worst, 0.005 * peak);
  EXPECT_GE(g.mass, 0.99);
  EXPECT_LE(g.mass, 1.0 + 1e-9);
}

TEST(Kde, UniformDiskWithDefaultBandwidth) {
  SimulationConfig cfg;
  cfg.N = 100000;
  cfg.initial.kind = InitialLaw::Kind::uniform_ball;
  const auto e = sample_initial(cfg);
  const Axis a{-2.0, 2.0, 400};
  auto uniform = [](double x, double y) { return x * x + y * y <= 1.0 ? 1.0 / pi : 0.0; };
  const auto g = kde(e, 0.0, a, a);
  const double sigma = std::pow(1e5, -1.0 / 6) * 0.5;
  EXPECT_NEAR(g.bandwidth[0], sigma, 0.01);
  EXPECT_GE(g.mass, 0.99);
  EXPECT_LE(g.mass, 1.0 + 1e-9);
  for (double v : g.density.values()) ASSERT_GE(v, 0.0);
  // Two error terms, both closed form. The edge: smoothing a jump of height
  // 1/pi along a circle of length 2 pi costs (4 / sqrt(2 pi)) sigma. The
  // noise: E|Z| sd with sd^2 = rho / (4 pi N sigma^2), integrated over the disk.
  // Their sum is at least 0.09 for every sigma at this N, so the default
  // rule (about 0.13 here) sits near the best any Gaussian bandwidth can do.
  auto model = [](double s) {
    const double edge = 4.0 / std::sqrt(2 * pi) * s;
    const double noise = pi * std::sqrt(2 / pi) * std::sqrt(1.0 / pi / (4 * pi * 1e5 * s * s));
    return edge + noise;
  };
  EXPECT_NEAR(l1_distance(g, uniform), model(sigma), 0.15 * model(sigma));
  EXPECT_NEAR(l1_distance(kde(e, 0.02, a, a), uniform), model(0.02), 0.15 * model(0.02));
}

TEST(Kde, Errors) {
  const std::vector<double> xy = {0.0, 0.0, 1.0, 1.0};
  const Axis tiny{-0.5, 0.5, 20};
  EXPECT_THROW(kde(xy, 0.5, tiny, tiny), ExtentError);
  EXPECT_THROW(kde(std::vector<double>{}, 0.5, tiny, tiny), DomainError);
  EXPECT_THROW(kde(std::vector<double>(10, 0.0), 0.0, tiny, tiny), DomainError);
}

TEST(Kde, L1BetweenGridsAndReference) {
  const Axis a{-4.0, 4.0, 100};
  const auto g1 = kde(std::vector<double>{0.0, 0.0}, 0.5, a, a);
  const auto g2 = kde(std::vector<double>{0.0, 0.0}, 0.5, a, a);
  EXPECT_NEAR(l1_distance(g1, g2), 2 * g1.outside_mass, 1e-15);
  // Two unit Gaussians a distance 1 apart: L1 = 2 (2 Phi(1/2) - 1).
  const auto g3 = kde(std::vector<double>{1.0, 0.0}, 1.0, Axis{-7.0, 8.0, 300}, Axis{-7.5, 7.5, 300});
  const auto g4 = kde(std::vector<double>{0.0, 0.0}, 1.0, Axis{-7.0, 8.0, 300}, Axis{-7.5, 7.5, 300});
  EXPECT_NEAR(l1_distance(g3, g4), 2 * std::erf(0.5 / std::numbers::sqrt2), 2e-3);
  const Axis b{-4.0, 4.0, 50};
  EXPECT_THROW(l1_distance(g1, kde(std::vector<double>{0.0, 0.0}, 0.5, b, b)), ConfigurationError);
}

TEST(SupMoment, ZeroOrderAndFrozenParticles) {
  auto cfg = brownian(100, 0.01, 0.1);
  EXPECT_DOUBLE_EQ(sup_moment(simulate(cfg), 0.0).value, 1.0);
  cfg.noise_scale = 0.0;
  cfg.initial.center = {3.0, 4.0};
  const auto r = sup_moment(simulate(cfg), 1.5);
  EXPECT_NEAR(r.value, std::pow(5.0, 1.5), 1e-12);
  EXPECT_NEAR(r.ratio, std::pow(5.0, 1.5) / (std::pow(5.0, 1.5) + 1), 1e-12);
  EXPECT_THROW(sup_moment(TrajectoryStore{}, 1.0), DomainError);
  EXPECT_THROW(sup_moment(simulate(cfg), -1.0), DomainError);
}

TEST(SupMoment, BrownianSecondMomentAgainstIndependentSimulation) {
  const auto cfg = brownian(100000, 0.01, 1.0);
  const auto r = sup_moment(simulate(cfg), 2.0);
  EXPECT_GE(r.value, 4.0);
  EXPECT_LE(r.value, 16.0);
  // Independent path: std::mt19937 increments sampled on the same time grid.
  std::mt19937_64 gen(99);
  std::normal_distribution<double> g(0.0, std::sqrt(2 * cfg.dt));
  const std::size_t M = 40000;
  std::vector<double> sup(M);
  for (std::size_t i = 0; i < M; ++i) {
    double x = 0, y = 0, s = 0;
    for (std::size_t k = 0; k < cfg.steps(); ++k) {
      x += g(gen);
      y += g(gen);
      s = std::max(s, x * x + y * y);
    }
    sup[i] = s;
  }
  const auto e = batch_means(sup);
  EXPECT_NEAR(r.value, e.value, 3 * std::hypot(r.se, e.se));
}

TEST(SupMoment, AdmissibilityFlag) {
  const auto store = simulate(brownian(50, 0.01, 0.05));
  EXPECT_TRUE(sup_moment(store, 1.0, Exponents{1.5, 100}).admissible);
  // 2 / (2 / 1.5 + 2 / 100) = 1.478
  EXPECT_FALSE(sup_moment(store, 1.5, Exponents{1.5, 100}).admissible);
}

TEST(Krylov, ConstantOverAHugeBoxGivesTheHorizon) {
  const auto cfg = brownian(2000, 0.01, 0.3);
  const auto store = simulate(cfg);
  const Axis a{-50.0, 50.0, 60};
  auto one = [](std::span<const double> c) { return std::abs(c[0]) < 45 && std::abs(c[1]) < 45 ? 1.0 : 0.0; };
  TestFunction box{"box", GriddedFunction::sample({a, a}, false, one), nullptr};
  TestFunction zero{"zero", GriddedFunction::sample({a, a}, false, [](std::span<const double>) { return 0.0; }), nullptr};
  LocalizedNormSpec spec;
  spec.p = 4;
  spec.q = 8;
  spec.T = cfg.T;
  spec.lattice_spacing = 5.0;
  spec.r = 20.0;
  const auto rep = krylov_ratio(store, {&box, &zero}, spec);
  EXPECT_NEAR(rep.rows[0].estimate, cfg.T, 1e-12);
  EXPECT_GT(rep.rows[0].ratio, 0.0);
  EXPECT_EQ(rep.rows[1].estimate, 0.0);
  EXPECT_EQ(rep.rows[1].ratio, 0.0);
  EXPECT_EQ(rep.p, 4.0);
  EXPECT_EQ(rep.q, 8.0);
}

TEST(Krylov, ExponentsOutsideTheIndexSetAreRejected) {
  const auto store = simulate(brownian(10, 0.01, 0.05));
  const auto f = bump("b", 0, 0, 0.5);
  LocalizedNormSpec spec;
  spec.p = 2;
  spec.q = 2;
  EXPECT_THROW(krylov_ratio(store, {&f}, spec), DomainError);
}

TEST(Krylov, PathwiseOccupationMatchesDensityDuality) {
  // E int f(X_t) dt pathwise against int int f rho_hat computed from KDE snapshots.
  auto cfg = brownian(20000, 0.01, 0.2);
  cfg.stride = 2;
  cfg.initial.kind = InitialLaw::Kind::gaussian;
  cfg.initial.covariance = {0.25, 0.0, 0.0, 0.25};
  const auto store = simulate(cfg);
  std::vector<TestFunction> suite = {bump("c", 0, 0, 0.6), bump("e", 0.7, 0.2, 0.4), bump("w", -0.5, -0.6, 0.8)};
  std::vector<const TestFunction*> fs;
  for (const auto& f : suite) fs.push_back(&f);
  LocalizedNormSpec spec;
  spec.p = 4;
  spec.q = 8;
  spec.T = cfg.T;
  const auto rep = krylov_ratio(store, fs, spec);
  const Axis a{-3.0, 3.0, 120};
  for (std::size_t m = 0; m < fs.size(); ++m) {
    std::vector<double> slice(store.size());
    for (std::size_t k = 0; k < store.size(); ++k) {
      const auto g = kde(store.snapshots[k], 0.0, a, a);
      double s = 0.0;
      for (std::size_t c = 0; c < g.density.size(); ++c) s += g.density.values()[c] * fs[m]->grid.values()[c];
      slice[k] = s * g.density.cell_volume();
    }
    double dual = 0.0;
    for (std::size_t k = 1; k < store.size(); ++k)
      dual += 0.5 * (slice[k] + slice[k - 1]) * (store.times[k] - store.times[k - 1]);
    EXPECT_NEAR(rep.rows[m].estimate, dual, 3 * rep.rows[m].se + 0.05 * dual) << fs[m]->id;
    EXPECT_GT(rep.rows[m].ratio, 0.0);
    EXPECT_TRUE(std::isfinite(rep.rows[m].ratio));
  }
}

TEST(ProductKrylov, ZeroSeparableAndIndependence) {
  auto cfg = brownian(20000, 0.01, 0.2, 1);
  cfg.initial.kind = InitialLaw::Kind::gaussian;
  const auto X = simulate(cfg);
  cfg.seed = 2;
  const auto Y = simulate(cfg);
  auto zero = [](double, std::span<const double>, std::span<const double>) { return 0.0; };
  EXPECT_EQ(product_krylov(X, Y, zero, nullptr, 1, 1, 1, cfg.T).estimate, 0.0);

  auto g = [](std::span<const double> x) { return std::exp(-x[0] * x[0] - x[1] * x[1]); };
  auto h = [](std::span<const double> y) { return y[0] * y[0] < 1.0 ? 1.0 : 0.0; };
  const auto p = product_krylov(
      X, Y, [&](double, std::span<const double> x, std::span<const double> y) { return g(x) * h(y); }, nullptr, 1, 1, 1,
      cfg.T);
  // Factorization: int E g(X_t) E h(Y_t) dt from the two single-process means.
  double fact = 0.0;
  auto mean_of = [&](const TrajectoryStore& s, std::size_t k, auto&& fn) {
    double acc = 0.0;
    for (std::size_t i = 0; i < s.N; ++i) acc += fn(std::span<const double>(s.snapshots[k]).subspan(2 * i, 2));
    return acc / double(s.N);
  };
  for (std::size_t k = 1; k < X.size(); ++k)
    fact += 0.5 * (mean_of(X, k, g) * mean_of(Y, k, h) + mean_of(X, k - 1, g) * mean_of(Y, k - 1, h)) *
            (X.times[k] - X.times[k - 1]);
  EXPECT_NEAR(p.estimate, fact, 3 * p.se);
  EXPECT_THROW(product_krylov(X, X, zero, nullptr, 1, 1, 1, cfg.T), IndependenceError);
}

TEST(ProductKrylov, KernelGapPatternShrinksWithTheIndex) {
  auto cfg = brownian(20000, 0.01, 0.2, 11);
  cfg.initial.kind = InitialLaw::Kind::gaussian;
  cfg.initial.covariance = {0.1, 0.0, 0.0, 0.1};
  const auto X = simulate(cfg);
  cfg.seed = 12;
  const auto Y = simulate(cfg);
  const auto K = build_kernel([] {
    KernelSpec s;
    s.mollified = false;
    return s;
  }(), 2, 1.0);
  std::vector<double> est;
  for (double m : {10.0, 20.0, 40.0}) {
    const auto Km = build_kernel(KernelSpec{}, 2, m);
    auto gap = [&](double t, std::span<const double> x, std::span<const double> y) {
      const std::array<double, 2> z = {x[0] - y[0], x[1] - y[1]}, o = {0.0, 0.0};
      if (z[0] == 0.0 && z[1] == 0.0) return 0.0;
      std::array<double, 2> a{}, b{};
      Km->evaluate(t, z, o, a);
      K->evaluate(t, z, o, b);
      return std::hypot(a[0] - b[0], a[1] - b[1]);
    };
    const auto r = product_krylov(X, Y, gap, nullptr, 1, 1, 1, cfg.T);
    EXPECT_TRUE(std::isfinite(r.estimate));
    est.push_back(r.estimate);
  }
  EXPECT_GT(est[0], 0.0);
  EXPECT_LT(est[1], est[0]);
  EXPECT_LT(est[2], est[1]);
}

TEST(ProductKrylov, GriddedNormRatio) {
  auto cfg = brownian(500, 0.05, 0.2, 1);
  const auto X = simulate(cfg);
  cfg.seed = 3;
  const auto Y = simulate(cfg);
  const Axis t{0.0, 0.2, 4}, a{-3.0, 3.0, 12};
  const auto f = GriddedFunction::sample({t, a, a, a, a}, true, [](std::span<const double> c) {
    return c[1] * c[1] + c[2] * c[2] < 1 && c[3] * c[3] + c[4] * c[4] < 1 ? 1.0 : 0.0;
  });
  const auto r = product_krylov(X, Y, f, 1, 1, 1, cfg.T);
  EXPECT_GT(r.norm, 0.0);
  EXPECT_NEAR(r.ratio, r.estimate / r.norm, 1e-15);
}

TEST(PathModulus, BrownianExponentAgainstIndependentSimulation) {
  const double gamma = 1.5, theta = 0.5;
  const auto cfg = brownian(4000, 1e-3, 0.256);
  const auto store = simulate(cfg);
  const std::vector<double> deltas = {0.002, 0.004, 0.008, 0.016, 0.032, 0.064};
  const auto rep = path_modulus(store, gamma, theta, deltas);
  ASSERT_EQ(rep.rows.size(), deltas.size());
  // Independent oracle: the same functional over mt19937 Brownian paths.
  std::mt19937_64 gen(4);
  std::normal_distribution<double> g(0.0, std::sqrt(2 * cfg.dt));
  const std::size_t M = 1000, K = cfg.steps();
  std::vector<double> oracle(deltas.size(), 0.0);
  std::vector<double> px(K + 1), py(K + 1);
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t k = 1; k <= K; ++k) {
      px[k] = px[k - 1] + g(gen);
      py[k] = py[k - 1] + g(gen);
    }
    for (std::size_t m = 0; m < deltas.size(); ++m) {
      const auto w = static_cast<std::size_t>(std::llround(deltas[m] / cfg.dt));
      double s = 0.0;
      for (std::size_t a = 0; a <= K; ++a)
        for (std::size_t b = a + 1; b <= std::min(K, a + w); ++b)
          s = std::max(s, std::pow(px[b] - px[a], 2) + std::pow(py[b] - py[a], 2));
      oracle[m] += std::pow(s, theta * gamma / 2) / double(M);
    }
  }
  const double fitted_oracle = slope(deltas, oracle);
  EXPECT_NEAR(rep.exponent, fitted_oracle, 0.1);
  EXPECT_NEAR(rep.exponent, theta * gamma / 2, 0.1);
}

TEST(PathModulus, FrozenAndErrors) {
  auto cfg = brownian(20, 0.01, 0.1);
  cfg.noise_scale = 0.0;
  const auto store = simulate(cfg);
  const std::vector<double> deltas = {0.01, 0.05};
  const auto rep = path_modulus(store, 1.5, 0.5, deltas);
  for (const auto& r : rep.rows) EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(std::isnan(rep.exponent));
  const std::vector<double> fine = {0.001};
  EXPECT_THROW(path_modulus(store, 1.5, 0.5, fine), ResolutionError);
  EXPECT_THROW(path_modulus(store, 1.0, 0.5, deltas), DomainError);
  EXPECT_THROW(path_modulus(store, 1.5, 1.0, deltas), DomainError);
  EXPECT_THROW(path_modulus(store, 1.48, 0.5, deltas, Exponents{1.5, 100}), DomainError);
}

TEST(WeakResidual, ConstantTestFunctionIsExactlyZero) {
  SimulationConfig cfg;
  cfg.N = 300;
  cfg.T = 0.05;
  cfg.initial.kind = InitialLaw::Kind::gaussian;
  const auto store = simulate(cfg);
  SmoothTest one{[](std::span<const double>) { return 1.0; },
                 [](std::span<const double>, std::span<double> g) { std::fill(g.begin(), g.end(), 0.0); },
                 [](std::span<const double>) { return 0.0; }};
  for (const auto& p : weak_form_residual(store, one, *build_kernel(cfg))) EXPECT_EQ(p.residual, 0.0);
}

TEST(WeakResidual, LinearTestFunctionLeavesOnlyTheMartingale) {
  SimulationConfig cfg;
  cfg.N = 2000;
  cfg.n = 20;
  cfg.T = 0.1;
  cfg.initial.kind = InitialLaw::Kind::gaussian;
  SmoothTest lin{[](std::span<const double> x) { return x[0]; },
                 [](std::span<const double>, std::span<double> g) {
                   g[0] = 1.0;
                   g[1] = 0.0;
                 },
                 [](std::span<const double>) { return 0.0; }};
  WeakFormAccumulator acc(lin);
  const auto store = simulate(cfg, &acc);
  const auto fin = acc.final_point();
  EXPECT_NEAR(fin.residual, fin.martingale, 1e-13);
  EXPECT_LE(std::abs(fin.residual), 3 * std::sqrt(2 * cfg.T / double(cfg.N)));
  const auto series = weak_form_residual(store, lin, *build_kernel(cfg));
  EXPECT_NEAR(series.back().residual, fin.residual, 1e-13);
}

TEST(WeakResidual, OnlineAndStoreAgreeAtUnitStride) {
  SimulationConfig cfg;
  cfg.N = 400;
  cfg.n = 20;
  cfg.T = 0.03;
  cfg.initial.kind = InitialLaw::Kind::gaussian;
  WeakFormAccumulator acc(gaussian_test(), {0.01, 0.02, 0.03});
  const auto store = simulate(cfg, &acc);
  const auto series = weak_form_residual(store, gaussian_test(), *build_kernel(cfg));
  EXPECT_NEAR(series.back().residual, acc.final_point().residual, 1e-12);
  ASSERT_EQ(acc.series().size(), 3u);
  EXPECT_NEAR(acc.series()[2].t, 0.03, 1e-12);
}

TEST(Derived, AngularMomentumAndSecondMoment) {
  const std::vector<double> pos = {1.0, 0.0, 0.0, 2.0};
  const std::vector<double> drift = {0.0, 3.0, 1.0, 0.0};
  EXPECT_DOUBLE_EQ(angular_momentum(pos, drift), (3.0 - 2.0) / 2);
  EXPECT_DOUBLE_EQ(second_moment(pos, 2), 2.5);
}

TEST(Report, CsvQuotingAndJson) {
  Report rep;
  rep.study = "s";
  rep.check("a,b", "say \"hi\"", 1.5, 2.0, true, 0.1);
  ReportRow info;
  info.estimator = "plain";
  info.value = 3;
  rep.add(info);
  std::ostringstream os;
  write_csv(os, rep);
  EXPECT_EQ(os.str(),
            "study,estimator,params,value,stderr,bound,ratio,asserted,pass\r\n"
            "s,\"a,b\",\"say \"\"hi\"\"\",1.5,0.1,2,0.75,true,true\r\n"
            "s,plain,,3,0,,,false,true\r\n");
  const auto j = to_json(rep);
  EXPECT_TRUE(j["pass"].get<bool>());
  EXPECT_TRUE(j["rows"][1]["bound"].is_null());
  rep.check("x", "", 5, 1, false);
  EXPECT_FALSE(rep.pass());
  EXPECT_EQ(rep.failures().size(), 1u);
}
