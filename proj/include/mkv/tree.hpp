#pragma once

// Barnes-Hut quadtree for the empirical Biot-Savart drift. Far cells are
// summed through a complex multipole expansion about the cell centroid,
// using the unmollified kernel: a cell is only treated as far when every
// member lies outside the mollification radius of the target.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "mkv/error.hpp"
#include "mkv/kernels.hpp"
#include "mkv/parallel.hpp"

namespace mkv {

struct TreeOptions {
  double theta = 0.5;          // opening angle: radius / distance < theta accepts a cell
  std::size_t leaf_size = 16;
  int order = 8;               // multipole terms beyond the monopole; 0 = aggregate weight at centroid
};

class QuadTree {
 public:
  struct Node {
    double box_x = 0.0, box_y = 0.0, half = 0.0;
    std::size_t begin = 0, end = 0;
    std::array<int, 4> child{-1, -1, -1, -1};
    double cx = 0.0, cy = 0.0;  // centroid
    double radius = 0.0;        // max distance from centroid to a member
    bool leaf() const { return child[0] < 0 && child[1] < 0 && child[2] < 0 && child[3] < 0; }
  };

  QuadTree(std::span<const double> positions, const TreeOptions& opt) : opt_(opt) {
    if (!(opt.theta > 0.0 && opt.theta <= 1.0)) throw DomainError("opening angle theta must lie in (0, 1]");
    if (opt.order < 0 || opt.order > 40) throw DomainError("multipole order must lie in [0, 40]");
    if (opt.leaf_size == 0) throw DomainError("leaf size must be positive");
    const std::size_t n = positions.size() / 2;
    perm_.resize(n);
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    if (n == 0) return;
    double lox = std::numeric_limits<double>::infinity(), loy = lox, hix = -lox, hiy = -lox;
    for (std::size_t i = 0; i < n; ++i) {
      lox = std::min(lox, positions[2 * i]);
      hix = std::max(hix, positions[2 * i]);
      loy = std::min(loy, positions[2 * i + 1]);
      hiy = std::max(hiy, positions[2 * i + 1]);
    }
    const double half = 0.5 * std::max(hix - lox, hiy - loy) * (1.0 + 1e-12) + 1e-300;
    nodes_.reserve(2 * n / std::max<std::size_t>(1, opt.leaf_size) + 16);
    build(positions, 0, n, 0.5 * (lox + hix), 0.5 * (loy + hiy), half, 0);
    sorted_.resize(2 * n);
    for (std::size_t k = 0; k < n; ++k) {
      sorted_[2 * k] = positions[2 * perm_[k]];
      sorted_[2 * k + 1] = positions[2 * perm_[k] + 1];
    }
    const std::size_t terms = static_cast<std::size_t>(opt.order) + 1;
    coeffs_.assign(nodes_.size() * terms, {0.0, 0.0});
    for (std::size_t id = 0; id < nodes_.size(); ++id) finalize(id, terms);
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<std::size_t>& permutation() const { return perm_; }

  /// Drift (1/N) sum_j K_n(x_i - x_j) for every particle, self term excluded.
  std::vector<double> drift(const MollifiedKernel& kernel, const Executor& exec) const {
    const std::size_t n = perm_.size();
    std::vector<double> out(2 * n, 0.0);
    if (n == 0) return out;
    const double near_radius = kernel.mollifier().support_radius();
    const double inv_n = 1.0 / static_cast<double>(n);
    exec.parallel_for(n, [&](std::size_t k) {
      const std::size_t i = perm_[k];
      const auto v = evaluate_at(kernel, k, near_radius);
      out[2 * i] = v[0] * inv_n;
      out[2 * i + 1] = v[1] * inv_n;
    });
    return out;
  }

 private:
  TreeOptions opt_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> perm_;
  std::vector<double> sorted_;
  std::vector<std::complex<double>> coeffs_;
  static constexpr int kMaxDepth = 60;

  int build(std::span<const double> pos, std::size_t begin, std::size_t end, double bx, double by, double half,
            int depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({bx, by, half, begin, end, {-1, -1, -1, -1}});
    if (end - begin <= opt_.leaf_size || depth >= kMaxDepth || half < 1e-14) return id;
    auto first = perm_.begin() + static_cast<std::ptrdiff_t>(begin);
    auto last = perm_.begin() + static_cast<std::ptrdiff_t>(end);
    auto x_of = [&](std::size_t i) { return pos[2 * i]; };
    auto y_of = [&](std::size_t i) { return pos[2 * i + 1]; };
    auto mid_y = std::stable_partition(first, last, [&](std::size_t i) { return y_of(i) < by; });
    auto q0 = std::stable_partition(first, mid_y, [&](std::size_t i) { return x_of(i) < bx; });
    auto q2 = std::stable_partition(mid_y, last, [&](std::size_t i) { return x_of(i) < bx; });
    const std::array<std::size_t, 5> cuts = {begin, static_cast<std::size_t>(q0 - perm_.begin()),
                                             static_cast<std::size_t>(mid_y - perm_.begin()),
                                             static_cast<std::size_t>(q2 - perm_.begin()), end};
    // All members on one side of both splits at full depth means coincident points.
    const double h2 = 0.5 * half;
    const std::array<double, 4> ox = {-h2, h2, -h2, h2}, oy = {-h2, -h2, h2, h2};
    for (int c = 0; c < 4; ++c) {
      if (cuts[c] == cuts[c + 1]) continue;
      const int child = build(pos, cuts[c], cuts[c + 1], bx + ox[c], by + oy[c], h2, depth + 1);
      nodes_[static_cast<std::size_t>(id)].child[c] = child;
    }
    return id;
  }

  void finalize(std::size_t id, std::size_t terms) {
    Node& node = nodes_[id];
    const auto count = static_cast<double>(node.end - node.begin);
    double sx = 0.0, sy = 0.0;
    for (std::size_t k = node.begin; k < node.end; ++k) {
      sx += sorted_[2 * k];
      sy += sorted_[2 * k + 1];
    }
    node.cx = sx / count;
    node.cy = sy / count;
    double r2 = 0.0;
    std::complex<double>* a = &coeffs_[id * terms];
    for (std::size_t k = node.begin; k < node.end; ++k) {
      const std::complex<double> off(sorted_[2 * k] - node.cx, sorted_[2 * k + 1] - node.cy);
      r2 = std::max(r2, std::norm(off));
      std::complex<double> pw(1.0, 0.0);
      for (std::size_t m = 0; m < terms; ++m) {
        a[m] += pw;
        pw *= off;
      }
    }
    node.radius = std::sqrt(r2);
  }

  std::array<double, 2> evaluate_at(const MollifiedKernel& kernel, std::size_t k, double near_radius) const {
    const double x = sorted_[2 * k], y = sorted_[2 * k + 1];
    const double xy[2] = {x, y};
    const std::size_t terms = static_cast<std::size_t>(opt_.order) + 1;
    std::complex<double> far(0.0, 0.0);
    double near[2] = {0.0, 0.0};
    std::array<int, 256> stack{};
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
      const auto id = static_cast<std::size_t>(stack[--top]);
      const Node& node = nodes_[id];
      const double dx = x - node.cx, dy = y - node.cy;
      const double dist = std::sqrt(dx * dx + dy * dy);
      if (node.radius < opt_.theta * dist && dist - node.radius >= near_radius) {
        const std::complex<double> inv = 1.0 / std::complex<double>(dx, dy);
        const std::complex<double>* a = &coeffs_[id * terms];
        // Horner in inv: sum_m a_m inv^{m+1}
        std::complex<double> acc = a[terms - 1];
        for (std::size_t m = terms - 1; m-- > 0;) acc = acc * inv + a[m];
        far += acc * inv;
        continue;
      }
      if (node.leaf()) {
        const std::size_t skip = (k >= node.begin && k < node.end) ? k - node.begin : std::numeric_limits<std::size_t>::max();
        kernel.accumulate(0.0, xy, std::span<const double>(sorted_).subspan(2 * node.begin, 2 * (node.end - node.begin)),
                          skip, near);
        continue;
      }
      for (int c = 3; c >= 0; --c)
        if (node.child[c] >= 0) stack[top++] = node.child[c];
    }
    // u1 + i u2 = (i / 2 pi) conj(sum 1 / (x - y_j))
    const std::complex<double> u = std::complex<double>(0.0, 1.0 / kTwoPi) * std::conj(far);
    return {near[0] + u.real(), near[1] + u.imag()};
  }
};

/// Tree-accelerated all-particle drift for a mollified Biot-Savart kernel in 2D.
inline std::vector<double> tree_drift(std::span<const double> positions, const MollifiedKernel& kernel,
                                      const TreeOptions& opt, const Executor& exec = Executor{}) {
  if (kernel.dimension() != 2) throw DomainError("tree summation requires d = 2");
  const auto* rot = dynamic_cast<const RotationalPowerKernel*>(&kernel.base());
  if (rot == nullptr || rot->exponent() != 1.0 || !kernel.base().autonomous())
    throw DomainError("tree summation requires a Biot-Savart base kernel");
  const QuadTree tree(positions, opt);
  return tree.drift(kernel, exec);
}

}  // namespace mkv
