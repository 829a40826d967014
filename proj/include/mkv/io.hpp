#pragma once

// Ensemble snapshots (64-byte header, kind = ensemble, N x d float64 block),
// key=value metadata text, and loading of empirical initial samples.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mkv/error.hpp"
#include "mkv/grid.hpp"
#include "mkv/particles.hpp"

namespace mkv {

struct SnapshotInfo {
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

/// Header after magic: u16 version | u16 kind | u32 reserved | u64 N | u32 d |
/// u32 reserved | f64 time | u64 step | u64 seed | u64 config hash.
inline void write_snapshot(std::ostream& os, const Ensemble& e, const SnapshotInfo& info = {}) {
  binary::HeaderWriter h;
  h.put<std::uint16_t>(binary::kVersion);
  h.put<std::uint16_t>(static_cast<std::uint16_t>(binary::Kind::ensemble));
  h.put<std::uint32_t>(0);
  h.put<std::uint64_t>(e.size());
  h.put<std::uint32_t>(static_cast<std::uint32_t>(e.dimension()));
  h.put<std::uint32_t>(0);
  h.put<double>(e.time());
  h.put<std::uint64_t>(e.step());
  h.put<std::uint64_t>(info.seed);
  h.put<std::uint64_t>(info.config_hash);
  os.write(reinterpret_cast<const char*>(h.bytes().data()), binary::kHeaderSize);
  binary::write_doubles(os, e.positions());
}

inline Ensemble read_snapshot(std::istream& is, SnapshotInfo* info = nullptr) {
  binary::HeaderReader h(binary::read_header(is));
  if (h.get<std::uint16_t>() != binary::kVersion) throw IntegrityError("unsupported snapshot version");
  if (h.get<std::uint16_t>() != static_cast<std::uint16_t>(binary::Kind::ensemble)) throw IntegrityError("not an ensemble snapshot");
  h.get<std::uint32_t>();
  const auto N = h.get<std::uint64_t>();
  const auto d = h.get<std::uint32_t>();
  h.get<std::uint32_t>();
  const double t = h.get<double>();
  const auto step = h.get<std::uint64_t>();
  SnapshotInfo si;
  si.seed = h.get<std::uint64_t>();
  si.config_hash = h.get<std::uint64_t>();
  if (d == 0 || d > 8) throw IntegrityError("snapshot dimension out of range");
  if (N > (std::uint64_t{1} << 32)) throw IntegrityError("snapshot particle count out of range");
  std::vector<double> pos(N * d);
  binary::read_doubles(is, pos);
  if (is.peek() != std::char_traits<char>::eof()) throw IntegrityError("trailing bytes after snapshot payload");
  if (info) *info = si;
  return Ensemble(static_cast<int>(d), std::move(pos), t, step);
}

inline void write_snapshot_file(const std::filesystem::path& p, const Ensemble& e, const SnapshotInfo& info = {}) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot open " + p.string() + " for writing");
  write_snapshot(os, e, info);
}

inline Ensemble read_snapshot_file(const std::filesystem::path& p, SnapshotInfo* info = nullptr) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IntegrityError("cannot open snapshot " + p.string());
  return read_snapshot(is, info);
}

/// UTF-8 key=value lines; newlines in values are escaped as \n.
inline void write_metadata(std::ostream& os, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    std::string esc;
    for (char c : v) {
      if (c == '\n') esc += "\\n";
      else if (c == '\\') esc += "\\\\";
      else esc += c;
    }
    os << k << '=' << esc << '\n';
  }
}

inline std::map<std::string, std::string> read_metadata(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string v;
    for (std::size_t i = eq + 1; i < line.size(); ++i) {
      if (line[i] == '\\' && i + 1 < line.size()) {
        v += line[i + 1] == 'n' ? '\n' : line[i + 1];
        ++i;
      } else {
        v += line[i];
      }
    }
    kv[line.substr(0, eq)] = v;
  }
  return kv;
}

/// Samples for an empirical initial law: a binary ensemble snapshot, or text
/// with one point per line (comma or whitespace separated).
inline std::vector<double> load_samples(const std::filesystem::path& p, int d) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigurationError("cannot open initial sample file " + p.string());
  char head[8] = {};
  is.read(head, 8);
  is.clear();
  is.seekg(0);
  if (std::equal(head, head + 8, binary::kMagic.begin())) {
    const auto e = read_snapshot(is);
    if (e.dimension() != d) throw ConfigurationError("initial sample file has the wrong dimension");
    return {e.positions().begin(), e.positions().end()};
  }
  std::vector<double> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    for (auto& c : line)
      if (c == ',') c = ' ';
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (row.empty()) continue;
    if (row.size() != static_cast<std::size_t>(d))
      throw ConfigurationError("initial sample file line " + std::to_string(lineno) + " does not hold " + std::to_string(d) + " values");
    out.insert(out.end(), row.begin(), row.end());
  }
  if (out.empty()) throw ConfigurationError("initial sample file is empty");
  return out;
}

}  // namespace mkv
