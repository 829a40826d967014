#pragma once

// Rectangular cell-centred grids and the 64-byte binary header shared by
// gridded functions and ensemble snapshots.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "mkv/error.hpp"

namespace mkv {

struct Axis {
  double lo = 0.0;
  double hi = 1.0;
  std::size_t n = 1;

  double width() const { return (hi - lo) / static_cast<double>(n); }
  double node(std::size_t k) const { return lo + (static_cast<double>(k) + 0.5) * width(); }
};

/// Values on a rectangular cell-centred grid, row-major with the last axis
/// fastest. When `time_axis` is set, axis 0 is time and the rest are space.
class GriddedFunction {
 public:
  GriddedFunction() = default;
  GriddedFunction(std::vector<Axis> axes, bool time_axis = false)
      : axes_(std::move(axes)), time_axis_(time_axis) {
    if (axes_.empty()) throw ConfigurationError("grid needs at least one axis");
    if (time_axis_ && axes_.size() < 2) throw ConfigurationError("space-time grid needs a spatial axis");
    std::size_t total = 1;
    for (const auto& a : axes_) {
      if (a.n == 0 || !(a.hi > a.lo)) throw ConfigurationError("grid axis must have n > 0 and hi > lo");
      total *= a.n;
    }
    values_.assign(total, 0.0);
  }

  /// Fills the grid by evaluating f at every node; f receives the node coordinates
  /// (time first when a time axis is present).
  template <class F>
  static GriddedFunction sample(std::vector<Axis> axes, bool time_axis, F&& f) {
    GriddedFunction g(std::move(axes), time_axis);
    std::vector<double> coords(g.rank());
    std::vector<std::size_t> idx(g.rank(), 0);
    for (std::size_t flat = 0; flat < g.size(); ++flat) {
      g.unflatten(flat, idx);
      for (std::size_t k = 0; k < g.rank(); ++k) coords[k] = g.axes_[k].node(idx[k]);
      g.values_[flat] = f(std::span<const double>(coords));
    }
    return g;
  }

  std::size_t rank() const { return axes_.size(); }
  bool has_time_axis() const { return time_axis_; }
  std::size_t spatial_rank() const { return rank() - (time_axis_ ? 1 : 0); }
  std::size_t time_count() const { return time_axis_ ? axes_[0].n : 1; }
  const Axis& axis(std::size_t k) const { return axes_[k]; }
  const std::vector<Axis>& axes() const { return axes_; }
  std::span<const Axis> spatial_axes() const {
    return std::span<const Axis>(axes_).subspan(time_axis_ ? 1 : 0);
  }
  std::size_t size() const { return values_.size(); }
  std::size_t slice_size() const { return size() / time_count(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<const double> slice(std::size_t t) const { return values().subspan(t * slice_size(), slice_size()); }
  std::span<double> slice(std::size_t t) { return values().subspan(t * slice_size(), slice_size()); }

  /// Spatial cell volume.
  double cell_volume() const {
    double v = 1.0;
    for (const auto& a : spatial_axes()) v *= a.width();
    return v;
  }
  double time_step() const { return time_axis_ ? axes_[0].width() : 0.0; }

  void unflatten(std::size_t flat, std::span<std::size_t> idx) const {
    for (std::size_t k = rank(); k-- > 0;) {
      idx[k] = flat % axes_[k].n;
      flat /= axes_[k].n;
    }
  }

  bool same_layout(const GriddedFunction& o) const {
    if (o.rank() != rank() || o.time_axis_ != time_axis_) return false;
    for (std::size_t k = 0; k < rank(); ++k)
      if (o.axes_[k].n != axes_[k].n || o.axes_[k].lo != axes_[k].lo || o.axes_[k].hi != axes_[k].hi) return false;
    return true;
  }

 private:
  std::vector<Axis> axes_;
  bool time_axis_ = false;
  std::vector<double> values_;
};

namespace binary {

inline constexpr std::array<char, 8> kMagic = {'M', 'K', 'V', 'G', 'R', 'I', 'D', '1'};
inline constexpr std::size_t kHeaderSize = 64;
inline constexpr std::uint16_t kVersion = 1;

enum class Kind : std::uint16_t { grid = 0, ensemble = 1 };

/// Little-endian field writer over a fixed 64-byte block.
class HeaderWriter {
 public:
  HeaderWriter() { buf_.fill(0); std::memcpy(buf_.data(), kMagic.data(), kMagic.size()); pos_ = 8; }
  template <class T>
  void put(T v) {
    std::uint64_t bits = 0;
    if constexpr (std::is_floating_point_v<T>) {
      if constexpr (sizeof(T) == 8) bits = std::bit_cast<std::uint64_t>(v);
      else bits = std::bit_cast<std::uint32_t>(v);
    } else {
      bits = static_cast<std::uint64_t>(v);
    }
    for (std::size_t b = 0; b < sizeof(T); ++b) buf_[pos_++] = static_cast<unsigned char>(bits >> (8 * b));
  }
  const std::array<unsigned char, kHeaderSize>& bytes() const { return buf_; }

 private:
  std::array<unsigned char, kHeaderSize> buf_{};
  std::size_t pos_ = 0;
};

class HeaderReader {
 public:
  explicit HeaderReader(const std::array<unsigned char, kHeaderSize>& b) : buf_(b) {
    if (std::memcmp(buf_.data(), kMagic.data(), kMagic.size()) != 0) throw IntegrityError("bad magic in binary header");
    pos_ = 8;
  }
  template <class T>
  T get() {
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<std::uint64_t>(buf_[pos_++]) << (8 * b);
    if constexpr (std::is_floating_point_v<T>) {
      if constexpr (sizeof(T) == 8) return std::bit_cast<double>(bits);
      else return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
    } else {
      return static_cast<T>(bits);
    }
  }

 private:
  std::array<unsigned char, kHeaderSize> buf_;
  std::size_t pos_ = 0;
};

inline void write_doubles(std::ostream& os, std::span<const double> v) {
  std::vector<unsigned char> out(v.size() * 8);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(v[i]);
    for (int b = 0; b < 8; ++b) out[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

inline void read_doubles(std::istream& is, std::span<double> v) {
  std::vector<unsigned char> in(v.size() * 8);
  is.read(reinterpret_cast<char*>(in.data()), static_cast<std::streamsize>(in.size()));
  if (static_cast<std::size_t>(is.gcount()) != in.size()) throw IntegrityError("payload truncated");
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(in[i * 8 + b]) << (8 * b);
    v[i] = std::bit_cast<double>(bits);
  }
}

inline std::array<unsigned char, kHeaderSize> read_header(std::istream& is) {
  std::array<unsigned char, kHeaderSize> b{};
  is.read(reinterpret_cast<char*>(b.data()), kHeaderSize);
  if (static_cast<std::size_t>(is.gcount()) != kHeaderSize) throw IntegrityError("header truncated");
  return b;
}

}  // namespace binary

/// Header layout (kind = grid): magic[8] | u16 version | u16 kind | u16 rank |
/// u16 flags (bit 0: time axis) | 4 x (u32 n, f32 lo, f32 hi). Extents are stored
/// in single precision; at most four axes fit.
inline void write_grid(std::ostream& os, const GriddedFunction& g) {
  if (g.rank() > 4) throw ConfigurationError("binary grid format holds at most 4 axes");
  binary::HeaderWriter h;
  h.put<std::uint16_t>(binary::kVersion);
  h.put<std::uint16_t>(static_cast<std::uint16_t>(binary::Kind::grid));
  h.put<std::uint16_t>(static_cast<std::uint16_t>(g.rank()));
  h.put<std::uint16_t>(g.has_time_axis() ? 1 : 0);
  for (std::size_t k = 0; k < 4; ++k) {
    const Axis a = k < g.rank() ? g.axis(k) : Axis{0.0, 0.0, 0};
    h.put<std::uint32_t>(static_cast<std::uint32_t>(a.n));
    h.put<float>(static_cast<float>(a.lo));
    h.put<float>(static_cast<float>(a.hi));
  }
  os.write(reinterpret_cast<const char*>(h.bytes().data()), binary::kHeaderSize);
  binary::write_doubles(os, g.values());
}

inline GriddedFunction read_grid(std::istream& is) {
  binary::HeaderReader h(binary::read_header(is));
  if (h.get<std::uint16_t>() != binary::kVersion) throw IntegrityError("unsupported grid version");
  if (h.get<std::uint16_t>() != static_cast<std::uint16_t>(binary::Kind::grid)) throw IntegrityError("not a grid file");
  const auto rank = h.get<std::uint16_t>();
  const auto flags = h.get<std::uint16_t>();
  if (rank == 0 || rank > 4) throw IntegrityError("grid rank out of range");
  std::vector<Axis> axes;
  for (std::size_t k = 0; k < 4; ++k) {
    const auto n = h.get<std::uint32_t>();
    const auto lo = h.get<float>();
    const auto hi = h.get<float>();
    if (k < rank) axes.push_back({lo, hi, n});
  }
  GriddedFunction g(std::move(axes), (flags & 1u) != 0);
  binary::read_doubles(is, g.values());
  return g;
}

}  // namespace mkv
