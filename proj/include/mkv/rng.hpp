#pragma once

// Counter-based random streams. Every variate is a pure function of
// (key, counter), so results do not depend on evaluation order or thread count.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace mkv::rng {

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

namespace detail {

constexpr std::uint32_t kMulA = 0xD2511F53u;
constexpr std::uint32_t kMulB = 0xCD9E8D57u;
constexpr std::uint32_t kWeylA = 0x9E3779B9u;
constexpr std::uint32_t kWeylB = 0xBB67AE85u;

constexpr void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& lo, std::uint32_t& hi) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  lo = static_cast<std::uint32_t>(p);
  hi = static_cast<std::uint32_t>(p >> 32);
}

constexpr Counter round(const Counter& c, const Key& k) {
  std::uint32_t lo0 = 0, hi0 = 0, lo1 = 0, hi1 = 0;
  mulhilo(kMulA, c[0], lo0, hi0);
  mulhilo(kMulB, c[2], lo1, hi1);
  return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
}

}  // namespace detail

/// Philox4x32 with 10 rounds (Salmon et al., SC'11).
constexpr Counter philox4x32(Counter ctr, Key key) {
  for (int r = 0; r < 10; ++r) {
    if (r > 0) {
      key[0] += detail::kWeylA;
      key[1] += detail::kWeylB;
    }
    ctr = detail::round(ctr, key);
  }
  return ctr;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// FNV-1a, used for labels and config digests.
constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ull) {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ull;
  }
  return h;
}

/// Child seed for a labelled sub-stream; the same (root, label, index) always yields the same seed.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t index = 0) {
  return splitmix64(splitmix64(root ^ fnv1a(label)) + splitmix64(index + 0x632BE59BD9B4E019ull));
}

constexpr Key key_from_seed(std::uint64_t seed) {
  return {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
}

/// Maps 64 random bits to a double in the open interval (0, 1).
constexpr double to_open_unit(std::uint32_t hi, std::uint32_t lo) {
  // 52 bits keep (bits + 1/2) 2^-52 exactly representable, so 1 is never reached.
  const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 32 | lo) >> 12;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-52;
}

/// Stream purposes, folded into the top half of the last counter word.
enum class Tag : std::uint32_t { noise = 1, initial = 2, resample = 3, test = 0x7F };

/// Two independent standard normals from one Philox block (Box-Muller).
inline std::array<double, 2> gaussian_pair(const Counter& ctr, const Key& key) {
  const Counter r = philox4x32(ctr, key);
  const double u1 = to_open_unit(r[0], r[1]);
  const double u2 = to_open_unit(r[2], r[3]);
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

/// Two uniforms on (0, 1) from one Philox block.
inline std::array<double, 2> uniform_pair(const Counter& ctr, const Key& key) {
  const Counter r = philox4x32(ctr, key);
  return {to_open_unit(r[0], r[1]), to_open_unit(r[2], r[3])};
}

/// Counter layout: (particle, step low word, step high word, tag << 16 | block).
constexpr Counter make_counter(std::uint64_t particle, std::uint64_t step, Tag tag, std::uint32_t block) {
  return {static_cast<std::uint32_t>(particle), static_cast<std::uint32_t>(step),
          static_cast<std::uint32_t>(step >> 32),
          (static_cast<std::uint32_t>(tag) << 16) | (block & 0xFFFFu)};
}

/// The k-th standard normal of the stream keyed by (seed, particle, step, tag).
inline double stream_normal(std::uint64_t seed, std::uint64_t particle, std::uint64_t step, Tag tag,
                            std::uint32_t k) {
  return gaussian_pair(make_counter(particle, step, tag, k / 2), key_from_seed(seed))[k % 2];
}

inline double stream_uniform(std::uint64_t seed, std::uint64_t particle, std::uint64_t step, Tag tag,
                             std::uint32_t k) {
  return uniform_pair(make_counter(particle, step, tag, k / 2), key_from_seed(seed))[k % 2];
}

}  // namespace mkv::rng
