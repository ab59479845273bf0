#pragma once

#include "mfam/grid.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mfam {

// P-spline style B-spline basis on [domain.lo, domain.hi] with `knots`
// equidistant interior knots. Non-cyclic: d = knots + degree + 1 columns.
// Cyclic: the knots + 1 intervals wrap around and d = knots + 1.
struct BSplineSpec {
  int knots = 10;
  int degree = 3;
  Domain domain;

  int size() const;
  // Inverse of size(): interior knot count giving d basis functions.
  static int knots_for_size(int d, int degree, bool cyclic);
};

Eigen::MatrixXd bspline_design(const BSplineSpec& spec, std::span<const double> points);

// Convenience overload matching the (knots, degree, points, cyclic) form on [lo, hi].
Eigen::MatrixXd bspline_design(int knots, int degree, std::span<const double> points,
                               bool cyclic, double lo = 0.0, double hi = 1.0);

// D'D for the order-th difference operator D.
Eigen::MatrixXd difference_penalty(int d, int order);
// Same, with differences taken cyclically (null space: constants).
Eigen::MatrixXd cyclic_difference_penalty(int d, int order);

// Row-wise Kronecker product; column (a, b) sits at a * W.cols() + b.
Eigen::MatrixXd row_tensor(const Eigen::MatrixXd& V, const Eigen::MatrixXd& W);

Eigen::MatrixXd kron(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

// inv_tau2_x * (Px kron I_dt) + inv_tau2_t * (I_dx kron Pt).
Eigen::MatrixXd tensor_penalty(const Eigen::MatrixXd& Px, const Eigen::MatrixXd& Pt,
                               double inv_tau2_x, double inv_tau2_t);

// Multivariate eigenfunctions on a shared grid. psi is M x (K * G) with the
// values of dimension k in columns [k * G, (k + 1) * G).
struct EigenBasis {
  std::string level = "L0";
  Domain domain;
  std::vector<double> grid;
  int K = 1;
  Eigen::MatrixXd psi;
  Eigen::VectorXd nu;
  Eigen::VectorXd weights;

  int M() const { return static_cast<int>(psi.rows()); }
  int G() const { return static_cast<int>(grid.size()); }
  double value(int m, int k, int g) const { return psi(m, k * G() + g); }
  Eigen::VectorXd component(int m, int k) const;

  // Weighted L2 Gram matrix under trapezoid quadrature.
  Eigen::MatrixXd gram() const;
  void check() const;
};

// Values of every eigenfunction of dimension k at `times`: |times| x M.
Eigen::MatrixXd evaluate_eigenbasis(const EigenBasis& basis, int k, std::span<const double> times);

// Sign convention: the entry of largest magnitude in each row of psi is
// made positive.
void normalize_signs(Eigen::MatrixXd& psi);

// First M Fourier functions on [0, K] (constant, then sin/cos pairs of
// increasing frequency, orthonormal on [0, K]), cut into K unit pieces that
// are mapped onto the grid of [0, 1]. Each piece is multiplied by an
// independent random sign. Eigenvalues default to 1 and weights to 1.
EigenBasis split_fourier_eigenbasis(int M, int K, const std::vector<double>& grid,
                                    std::mt19937_64& rng);

// CSV `level,m,dim,t,value` (m and dim one-based) with a JSON sidecar
// holding eigenvalues, weights and the domain of every level.
void write_eigenbases(const std::vector<EigenBasis>& bases, const std::filesystem::path& csv_path,
                      const std::filesystem::path& json_path);
std::vector<EigenBasis> read_eigenbases(const std::filesystem::path& csv_path,
                                        const std::filesystem::path& json_path);

}  // namespace mfam
