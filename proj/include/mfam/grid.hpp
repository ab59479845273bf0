#pragma once

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace mfam {

// Closed time interval. A cyclic domain identifies lo and hi.
struct Domain {
  double lo = 0.0;
  double hi = 1.0;
  bool cyclic = false;

  double length() const { return hi - lo; }
  bool contains(double t, double tol = 1e-9) const {
    return t >= lo - tol && t <= hi + tol;
  }
  // Maps t into [lo, hi) for cyclic domains, identity otherwise.
  double wrap(double t) const;
};

// Equidistant grid with n points on [lo, hi], endpoints included.
std::vector<double> equidistant_grid(double lo, double hi, int n);

// Trapezoid quadrature weights for an increasing grid. For a cyclic domain
// the grid is treated as a periodic sampling and the wrap-around interval
// is included.
Eigen::VectorXd quadrature_weights(std::span<const double> grid,
                                   const Domain& domain);

// Piecewise linear interpolation of values on grid at t. Outside the grid
// range (but inside the domain) the nearest value is used, except on cyclic
// domains where the interpolation wraps.
double interpolate_linear(std::span<const double> grid,
                          std::span<const double> values, double t,
                          const Domain& domain);

}  // namespace mfam
