// mkv: run studies and simulations from a config file, sweep parameter grids,
// and verify/inspect the artifacts of earlier runs.

#include <CLI11.hpp>

#include "cli_app.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Mollified McKean-Vlasov particle simulations and studies"};
  app.require_subcommand(1);

  mkv::cli::RunRequest req;
  std::string out, seed;
  unsigned threads = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", req.config_path, "TOML or JSON config file")->required();
    sub->add_option("--set", req.overrides, "override a config field, key=value (repeatable)");
    sub->add_option("--out", out, std::string("output directory (default: $") + mkv::cli::kOutputRootEnv + "/<config>-<hash>)");
    sub->add_option("--threads", threads, "worker threads; results do not depend on it")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "root seed (unsigned 64-bit)");
  };
  auto* run = app.add_subcommand("run", "execute the configured study or a bare simulation");
  add_common(run);
  auto* sweep = app.add_subcommand("sweep", "bare simulations over the sweep lists");
  add_common(sweep);
  auto* inspect = app.add_subcommand("inspect", "verify a manifest and summarise its run");
  std::string manifest;
  inspect->add_option("manifest", manifest, "path to manifest.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return mkv::cli::kConfigError;
  }

  if (!out.empty()) req.out = out;
  if (threads > 0) req.threads = threads;
  if (!seed.empty()) {
    try {
      std::size_t used = 0;
      if (seed.front() == '-') throw std::invalid_argument("negative");
      req.seed = std::stoull(seed, &used, 0);
      if (used != seed.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      std::cerr << "configuration error: --seed must be an unsigned 64-bit integer\n";
      return mkv::cli::kConfigError;
    }
  }

  if (*run) return mkv::cli::run(req);
  if (*sweep) return mkv::cli::sweep(req);
  return mkv::cli::inspect(manifest);
}
