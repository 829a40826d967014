// A point vortex released at the origin spreads into the Lamb-Oseen profile,
// whose vorticity is the heat kernel (4 pi t)^-1 exp(-|x|^2 / 4t). This run
// follows one cloud with a mollified Biot-Savart interaction and compares its
// density and second moment with that profile at a few times.
//
// usage: example_lamb_oseen [N] [n] [seed]

#include <cstdio>
#include <cstdlib>
#include <string>

#include "mkv/estimators.hpp"
#include "mkv/experiments.hpp"
#include "mkv/particles.hpp"

int main(int argc, char** argv) {
  mkv::SimulationConfig cfg;
  cfg.N = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 4000;
  cfg.n = argc > 2 ? std::strtod(argv[2], nullptr) : 20.0;
  cfg.seed = argc > 3 ? std::strtoull(argv[3], nullptr, 10) : 1;
  cfg.dt = 1e-3;
  cfg.T = 0.5;
  cfg.summation = mkv::Summation::tree;
  cfg.initial.kind = mkv::InitialLaw::Kind::point_mass;

  try {
    const auto checkpoints = mkv::lamb_oseen_checkpoints(cfg.T);
    const auto run = mkv::run_lamb_oseen(cfg, checkpoints);
    std::printf("N=%zu n=%g dt=%g, %.2f s\n", cfg.N, cfg.n, cfg.dt, run.seconds);
    std::printf("%6s %10s %10s %10s %12s\n", "t", "L1 error", "E|X|^2", "4t", "angular mom");
    for (std::size_t k = 0; k < run.frames.size(); ++k) {
      const auto& f = run.frames[k];
      const mkv::Axis ax{-5.0, 5.0, 200};
      const auto g = mkv::kde(f.positions, 0.0, ax, ax);
      std::printf("%6.3f %10.4f %10.4f %10.4f %12.3e\n", f.t, mkv::lamb_oseen_l1(g, f.t),
                  mkv::second_moment(f.positions, 2), 4.0 * f.t, mkv::angular_momentum(f.positions, f.drift));
    }
    std::printf("weak residual at T (f = exp(-|x|^2)): %.3e, Brownian part %.3e\n", run.residual.residual,
                run.residual.martingale);
  } catch (const mkv::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
