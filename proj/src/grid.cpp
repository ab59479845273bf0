#include "mfam/grid.hpp"

#include "mfam/error.hpp"

#include <algorithm>
#include <cmath>

namespace mfam {

double Domain::wrap(double t) const {
  if (!cyclic) return t;
  const double len = length();
  double r = std::fmod(t - lo, len);
  if (r < 0) r += len;
  return lo + r;
}

std::vector<double> equidistant_grid(double lo, double hi, int n) {
  if (n < 2) throw ArgumentError("equidistant_grid: need at least 2 points");
  std::vector<double> g(static_cast<size_t>(n));
  const double h = (hi - lo) / (n - 1);
  for (int i = 0; i < n; ++i) g[i] = lo + h * i;
  g.back() = hi;
  return g;
}

Eigen::VectorXd quadrature_weights(std::span<const double> grid,
                                   const Domain& domain) {
  const auto n = static_cast<Eigen::Index>(grid.size());
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
  if (n == 0) return w;
  if (n == 1) {
    w[0] = domain.length();
    return w;
  }
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    const double h = grid[i + 1] - grid[i];
    w[i] += 0.5 * h;
    w[i + 1] += 0.5 * h;
  }
  if (domain.cyclic) {
    const double h = grid[0] + domain.length() - grid[n - 1];
    if (h > 1e-12) {
      w[0] += 0.5 * h;
      w[n - 1] += 0.5 * h;
    }
  }
  return w;
}

double interpolate_linear(std::span<const double> grid,
                          std::span<const double> values, double t,
                          const Domain& domain) {
  const size_t n = grid.size();
  if (n == 0 || values.size() != n)
    throw ArgumentError("interpolate_linear: grid/value size mismatch");
  if (!domain.contains(t)) throw DomainError("time outside domain");
  if (n == 1) return values[0];
  if (domain.cyclic) {
    t = domain.wrap(t);
    if (t < grid.front() || t > grid.back()) {
      // Segment between the last and the (shifted) first grid point.
      const double left = grid.back();
      const double right = grid.front() + domain.length();
      double tt = t < grid.front() ? t + domain.length() : t;
      const double h = right - left;
      if (h <= 0) return values.back();
      const double a = (tt - left) / h;
      return (1 - a) * values.back() + a * values.front();
    }
  } else {
    if (t <= grid.front()) return values.front();
    if (t >= grid.back()) return values.back();
  }
  auto it = std::upper_bound(grid.begin(), grid.end(), t);
  size_t j = static_cast<size_t>(it - grid.begin());
  if (j == 0) return values.front();
  if (j >= n) return values.back();
  const double h = grid[j] - grid[j - 1];
  const double a = h > 0 ? (t - grid[j - 1]) / h : 0.0;
  return (1 - a) * values[j - 1] + a * values[j];
}

}  // namespace mfam
