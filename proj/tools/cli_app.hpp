#pragma once

// The three verbs behind the mkv executable. Each returns a process exit code:
// 0 pass, 1 tolerance failure, 2 configuration error, 3 blow-up, 4 integrity.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "manifest.hpp"
#include "mkv/config.hpp"
#include "mkv/experiments.hpp"
#include "mkv/io.hpp"
#include "mkv/report.hpp"

namespace mkv::cli {

enum Exit : int { kPass = 0, kToleranceFail = 1, kConfigError = 2, kBlowUp = 3, kIntegrity = 4 };

inline constexpr const char* kOutputRootEnv = "MKV_OUTPUT_ROOT";

struct RunRequest {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::string> out;
  std::optional<unsigned> threads;
  std::optional<std::uint64_t> seed;
};

struct Resolved {
  nlohmann::json tree;
  StudyPlan plan;
  std::filesystem::path out;
};

/// Config tree with overrides applied, mapped to a plan, plus the output directory.
inline Resolved resolve(const RunRequest& req) {
  if (req.config_path.empty()) throw ConfigurationError("--config is required");
  Resolved r;
  r.tree = load_config_file(req.config_path);
  for (const auto& o : req.overrides) apply_override(r.tree, o);
  if (req.seed) r.tree["simulation"]["seed"] = *req.seed;
  if (req.threads) r.tree["simulation"]["workers"] = *req.threads;
  const auto base_dir = std::filesystem::path(req.config_path).parent_path();
  r.plan = plan_from_json(r.tree, base_dir);
  if (req.out) {
    r.out = *req.out;
  } else {
    const char* env = std::getenv(kOutputRootEnv);
    const std::filesystem::path root = env && *env ? env : "mkv-runs";
    r.out = root / (std::filesystem::path(req.config_path).stem().string() + "-" + hex64(r.plan.base.hash()).substr(0, 8));
  }
  return r;
}

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os << s;
}

inline void print_failures(const Report& rep, std::ostream& err) {
  for (const auto* r : rep.failures())
    err << "FAIL " << r->estimator << " [" << r->params << "] value=" << csv_number(r->value)
        << " bound=" << csv_number(r->bound) << "\n";
}

inline void print_blow_up(const BlowUpError& e, std::ostream& err) {
  const auto& d = e.diagnostics();
  err << "blow-up: " << e.what() << "\n  time=" << d.time << " max |drift|=" << d.max_drift << "\n";
  for (const auto& [idx, dist] : d.suspects) err << "  neighbour " << idx << " at distance " << dist << "\n";
}

/// Writes report, summary, metadata and config artifacts and the manifest.
inline void finish_run(RunManifest& m, const std::filesystem::path& out, const Report& rep,
                       const std::map<std::string, std::string>& meta, const std::string& config_text) {
  {
    std::ofstream os(out / "report.csv", std::ios::binary);
    write_csv(os, rep);
  }
  m.add(out, "report.csv", "report");
  write_text(out / "summary.json", to_json(rep).dump(2) + "\n");
  m.add(out, "summary.json", "summary");
  {
    std::ofstream os(out / "metadata.txt", std::ios::binary);
    write_metadata(os, meta);
  }
  m.add(out, "metadata.txt", "metadata");
  write_text(out / "config.resolved.json", m.config.dump(2) + "\n");
  m.add(out, "config.resolved.json", "config");
  write_text(out / "config.source", config_text);
  m.add(out, "config.source", "config");
  m.exit_status = rep.pass() ? kPass : kToleranceFail;
  write_text(out / "manifest.json", m.to_json().dump(2) + "\n");
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::map<std::string, std::string> base_metadata(const StudyPlan& plan) {
  return {{"study", plan.id},
          {"config_hash", hex64(plan.base.hash())},
          {"seed", std::to_string(plan.base.seed)},
          {"workers", std::to_string(plan.base.workers)},
          {"canonical_config", plan.base.canonical()}};
}

/// Runs the body and maps library errors onto exit codes.
template <class Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const ParseError& e) {
    err << "config parse error: " << e.what() << "\n";
    return kConfigError;
  } catch (const BlowUpError& e) {
    print_blow_up(e, err);
    return kBlowUp;
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << "\n";
    return kIntegrity;
  } catch (const ConfigurationError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DomainError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }
}

}  // namespace detail

inline int run(const RunRequest& req, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const auto r = resolve(req);
    std::filesystem::create_directories(r.out);
    RunManifest m;
    m.config_path = req.config_path;
    m.config = plan_to_json(r.plan);
    m.output_dir = std::filesystem::absolute(r.out).string();
    m.study = r.plan.id;
    m.config_hash = hex64(r.plan.base.hash());
    auto meta = detail::base_metadata(r.plan);
    const auto log = [&](const std::string& line) { err << "[" << r.plan.id << "] " << line << "\n"; };
    const auto t0 = std::chrono::steady_clock::now();
    Report rep;
    if (r.plan.id == "simulate") {
      TrajectoryStore store;
      rep = simulation_study(r.plan, &store);
      std::filesystem::create_directories(r.out / "snapshots");
      const SnapshotInfo info{r.plan.base.seed, r.plan.base.hash()};
      for (std::size_t k = 0; k < store.size(); ++k) {
        std::ostringstream name;
        name << "snapshots/step_" << std::setw(8) << std::setfill('0') << store.steps[k] << ".bin";
        write_snapshot_file(r.out / name.str(), store.ensemble(k), info);
        m.add(r.out, name.str(), "snapshot", "trajectory");
      }
      for (const auto& [k, v] : store.metadata) meta["trajectory." + k] = v;
    } else {
      rep = run_study(r.plan, log);
    }
    meta["seconds"] = fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 4);
    detail::finish_run(m, r.out, rep, meta, detail::read_text(req.config_path));
    out << "study " << r.plan.id << ": " << (rep.pass() ? "pass" : "FAIL") << " (" << rep.rows.size() << " rows)\n"
        << "manifest " << (r.out / "manifest.json").string() << "\n";
    if (!rep.pass()) detail::print_failures(rep, err);
    return m.exit_status;
  });
}

/// Bare simulations over the Cartesian product of the plan's sweep lists.
/// A point that blows up is recorded and the sweep continues; the exit code is
/// then 3.
inline int sweep(const RunRequest& req, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const auto r = resolve(req);
    std::filesystem::create_directories(r.out);
    RunManifest m;
    m.config_path = req.config_path;
    m.config = plan_to_json(r.plan);
    m.output_dir = std::filesystem::absolute(r.out).string();
    m.study = "sweep";
    m.config_hash = hex64(r.plan.base.hash());
    Report rep;
    rep.study = "sweep";
    const auto Ns = r.plan.sizes();
    const auto ns = r.plan.n_list.empty() ? std::vector<double>{r.plan.base.n} : r.plan.n_list;
    const auto dts = r.plan.dt_list.empty() ? std::vector<double>{r.plan.base.dt} : r.plan.dt_list;
    bool blown = false;
    std::size_t point = 0;
    for (auto N : Ns)
      for (double n : ns)
        for (double dt : dts)
          for (auto seed : r.plan.seed_list()) {
            StudyPlan p = r.plan;
            p.id = "simulate";
            p.base.N = N;
            p.base.n = n;
            p.base.dt = dt;
            p.base.seed = seed;
            p.base.stride = std::max<std::size_t>(1, p.base.steps());
            const std::string par = "N=" + std::to_string(N) + ",n=" + fmt(n) + ",dt=" + fmt(dt) + ",seed=" + std::to_string(seed);
            std::ostringstream dir;
            dir << "point_" << std::setw(4) << std::setfill('0') << point++;
            try {
              TrajectoryStore store;
              const auto sub = simulation_study(p, &store);
              for (auto row : sub.rows) {
                row.params = par + ";" + row.params;
                rep.add(row);
              }
              std::filesystem::create_directories(r.out / dir.str());
              const auto rel = dir.str() + "/terminal.bin";
              write_snapshot_file(r.out / rel, store.ensemble(store.size() - 1), {seed, p.base.hash()});
              m.add(r.out, rel, "snapshot", dir.str());
              rep.check("stable_run", par, 0.0, 0.0, true);
            } catch (const BlowUpError& e) {
              detail::print_blow_up(e, err);
              rep.check("stable_run", par, 1.0, 0.0, false);
              blown = true;
            }
            err << "[sweep] " << par << " done\n";
          }
    auto meta = detail::base_metadata(r.plan);
    meta["points"] = std::to_string(point);
    detail::finish_run(m, r.out, rep, meta, detail::read_text(req.config_path));
    if (blown) {
      m.exit_status = kBlowUp;
      detail::write_text(r.out / "manifest.json", m.to_json().dump(2) + "\n");
    }
    out << "sweep: " << point << " points, " << (rep.pass() ? "pass" : "FAIL") << "\nmanifest "
        << (r.out / "manifest.json").string() << "\n";
    if (!rep.pass()) detail::print_failures(rep, err);
    return m.exit_status;
  });
}

namespace detail {

inline void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    return;
  }
  out.emplace_back(prefix, j.dump());
}

}  // namespace detail

/// Verifies every artifact, then prints the config, the pass/fail table and headline numbers.
inline int inspect(const std::string& manifest_path, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const std::filesystem::path mp(manifest_path);
    const auto m = read_manifest(mp);
    const auto root = mp.parent_path().empty() ? std::filesystem::path(".") : mp.parent_path();
    verify(m, root);
    std::size_t snapshots = 0;
    for (const auto& a : m.artifacts)
      if (a.kind == "snapshot") {
        SnapshotInfo info;
        read_snapshot_file(root / a.path, &info);
        if (hex64(info.config_hash) != m.config_hash && m.study != "sweep")
          throw IntegrityError("snapshot " + a.path + " belongs to a different configuration");
        ++snapshots;
      }
    out << "study        " << m.study << "\n"
        << "config hash  " << m.config_hash << "\n"
        << "config file  " << m.config_path << "\n"
        << "artifacts    " << m.artifacts.size() << " verified (" << snapshots << " snapshots in "
        << m.to_json()["series"].size() << " series)\n"
        << "exit status  " << m.exit_status << "\n\n[config]\n";
    std::vector<std::pair<std::string, std::string>> flat;
    detail::flatten(m.config, "", flat);
    for (const auto& [k, v] : flat) out << k << " = " << v << "\n";
    for (const auto& a : m.artifacts) {
      if (a.kind != "summary") continue;
      const auto s = nlohmann::json::parse(detail::read_text(root / a.path));
      out << "\n[tolerances] overall " << (s.value("pass", false) ? "PASS" : "FAIL") << "\n";
      std::map<std::string, std::pair<std::size_t, double>> headline;
      for (const auto& row : s["rows"]) {
        const auto est = row["estimator"].get<std::string>();
        if (row["asserted"].get<bool>())
          out << (row["pass"].get<bool>() ? "  pass  " : "  FAIL  ") << est << " [" << row["params"].get<std::string>()
              << "] value=" << row["value"].dump() << " bound=" << row["bound"].dump() << "\n";
        auto& h = headline[est];
        ++h.first;
        if (row["value"].is_number()) h.second = row["value"].get<double>();
      }
      out << "\n[headline] last value per estimator\n";
      for (const auto& [est, h] : headline) out << "  " << est << " = " << h.second << " (" << h.first << " rows)\n";
      if (s.contains("extra") && s["extra"].contains("krylov")) {
        const nlohmann::json* worst = nullptr;
        for (const auto& k : s["extra"]["krylov"])
          if (!worst || k["worst_ratio"].get<double>() > (*worst)["worst_ratio"].get<double>()) worst = &k;
        if (worst)
          out << "  Krylov worst ratio = " << (*worst)["worst_ratio"].get<double>() << " at (p, q) = ("
              << (*worst)["p"].get<double>() << ", " << (*worst)["q"].get<double>() << "), n = "
              << (*worst)["n"].get<double>() << "\n";
      }
      if (s.contains("extra") && s["extra"].contains("messages"))
        for (const auto& msg : s["extra"]["messages"]) out << "  note: " << msg.get<std::string>() << "\n";
    }
    return kPass;
  });
}

}  // namespace mkv::cli
