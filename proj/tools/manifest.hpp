#pragma once

// Run manifests: an index of every artifact a run wrote, each with its SHA-256.

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mkv/error.hpp"

namespace mkv::cli {

inline std::string sha256_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IntegrityError("artifact missing: " + p.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha256 initialisation failed");
  }
  std::array<char, 1 << 16> buf{};
  while (is) {
    is.read(buf.data(), buf.size());
    if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xF];
  }
  return out;
}

struct Artifact {
  std::string path;  // relative to the output directory
  std::string kind;  // snapshot | report | summary | metadata | config | log
  std::string series;
  std::string sha256;
  std::uintmax_t bytes = 0;
};

struct RunManifest {
  std::string config_path;
  nlohmann::json config;  // resolved plan, every field explicit
  std::string output_dir;
  std::string study;
  std::string config_hash;
  int exit_status = 0;
  std::vector<Artifact> artifacts;

  void add(const std::filesystem::path& root, const std::string& rel, const std::string& kind,
           const std::string& series = {}) {
    const auto full = root / rel;
    artifacts.push_back({rel, kind, series, sha256_file(full), std::filesystem::file_size(full)});
  }

  std::vector<std::string> series() const {
    std::vector<std::string> out;
    for (const auto& a : artifacts)
      if (!a.series.empty() && std::find(out.begin(), out.end(), a.series) == out.end()) out.push_back(a.series);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["config_path"] = config_path;
    j["config"] = config;
    j["output_dir"] = output_dir;
    j["study"] = study;
    j["config_hash"] = config_hash;
    j["exit_status"] = exit_status;
    j["series"] = series();
    j["artifacts"] = nlohmann::json::array();
    for (const auto& a : artifacts)
      j["artifacts"].push_back({{"path", a.path}, {"kind", a.kind}, {"series", a.series}, {"sha256", a.sha256}, {"bytes", a.bytes}});
    return j;
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    try {
      m.config_path = j.at("config_path").get<std::string>();
      m.config = j.at("config");
      m.output_dir = j.at("output_dir").get<std::string>();
      m.study = j.at("study").get<std::string>();
      m.config_hash = j.at("config_hash").get<std::string>();
      m.exit_status = j.at("exit_status").get<int>();
      for (const auto& a : j.at("artifacts"))
        m.artifacts.push_back({a.at("path").get<std::string>(), a.at("kind").get<std::string>(),
                               a.value("series", std::string{}), a.at("sha256").get<std::string>(),
                               a.at("bytes").get<std::uintmax_t>()});
    } catch (const nlohmann::json::exception& e) {
      throw IntegrityError(std::string("malformed manifest: ") + e.what());
    }
    return m;
  }
};

inline RunManifest read_manifest(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw IntegrityError("cannot open manifest " + p.string());
  try {
    return RunManifest::from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw IntegrityError(std::string("manifest is not valid JSON: ") + e.what());
  }
}

/// Throws IntegrityError on the first missing or altered artifact.
inline void verify(const RunManifest& m, const std::filesystem::path& root) {
  for (const auto& a : m.artifacts) {
    const auto full = root / a.path;
    if (!std::filesystem::exists(full)) throw IntegrityError("artifact missing: " + a.path);
    if (std::filesystem::file_size(full) != a.bytes)
      throw IntegrityError("artifact size mismatch: " + a.path + " (expected " + std::to_string(a.bytes) + " bytes)");
    if (sha256_file(full) != a.sha256) throw IntegrityError("artifact hash mismatch: " + a.path);
  }
}

}  // namespace mkv::cli
