#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

namespace mkv::quad {

struct Rule {
  std::vector<double> nodes;    // on [-1, 1]
  std::vector<double> weights;
};

/// Gauss-Legendre rule with `order` points (Newton on the three-term recurrence).
inline Rule gauss_legendre(std::size_t order) {
  Rule rule;
  if (order <= 1) {
    rule.nodes = {0.0};
    rule.weights = {2.0};
    return rule;
  }
  rule.nodes.resize(order);
  rule.weights.resize(order);
  const auto n = static_cast<double>(order);
  for (std::size_t i = 0; i < (order + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (static_cast<double>(i) + 0.75) / (n + 0.5));
    double dp = 1.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (std::size_t k = 2; k <= order; ++k) {
        const auto kk = static_cast<double>(k);
        const double pk = ((2.0 * kk - 1.0) * x * p1 - (kk - 1.0) * p0) / kk;
        p0 = p1;
        p1 = pk;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.nodes[i] = -x;
    rule.nodes[order - 1 - i] = x;
    rule.weights[i] = w;
    rule.weights[order - 1 - i] = w;
  }
  return rule;
}

/// Composite Gauss-Legendre integral of f over [a, b] split into `panels` equal pieces.
template <class F>
double integrate(F&& f, double a, double b, std::size_t panels = 16, std::size_t order = 16) {
  static thread_local Rule cached;
  if (cached.nodes.size() != order) cached = gauss_legendre(order);
  const double width = (b - a) / static_cast<double>(panels);
  double total = 0.0;
  for (std::size_t p = 0; p < panels; ++p) {
    const double lo = a + width * static_cast<double>(p);
    const double mid = lo + 0.5 * width;
    double s = 0.0;
    for (std::size_t k = 0; k < order; ++k) s += cached.weights[k] * f(mid + 0.5 * width * cached.nodes[k]);
    total += 0.5 * width * s;
  }
  return total;
}

}  // namespace mkv::quad
