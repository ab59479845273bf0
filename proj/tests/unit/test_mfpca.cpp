#include <doctest.h>

#include "fixtures/application_spectra.hpp"
#include "mfam/error.hpp"
#include "mfam/mfpca.hpp"
#include "mfam/simulate.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <cmath>
#include <random>

using namespace mfam;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Orthonormal Fourier functions on the 101-grid of [0, 1], starting at
// frequency index `shift`.
UnivariateFPCA fourier_fpca(int M, int shift, const std::string& level = "L0") {
  UnivariateFPCA f;
  f.level = level;
  f.domain = Domain{};
  f.grid = equidistant_grid(0.0, 1.0, 101);
  f.phi.resize(M, 101);
  for (int m = 0; m < M; ++m) {
    const int j = m + shift;
    for (int g = 0; g < 101; ++g) {
      const double t = f.grid[g];
      f.phi(m, g) = j == 0 ? 1.0 : std::sqrt(2.0) * (j % 2 ? std::sin(M_PI * (j + 1) * t) : std::cos(M_PI * j * t));
    }
  }
  f.upsilon = VectorXd::LinSpaced(M, 1.0, 0.2);
  return f;
}

void attach_scores(UnivariateFPCA& f, const MatrixXd& s) {
  f.keys.clear();
  for (int i = 0; i < s.rows(); ++i) f.keys.push_back({i + 1, std::nullopt});
  f.scores = s;
}

// Three dimensions with correlated scores.
std::vector<UnivariateFPCA> correlated_dims(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  std::vector<UnivariateFPCA> dims = {fourier_fpca(3, 0), fourier_fpca(2, 1), fourier_fpca(4, 0)};
  MatrixXd A = MatrixXd::Zero(9, 9);
  for (int a = 0; a < 9; ++a)
    for (int b = 0; b < 9; ++b) A(a, b) = n01(rng);
  MatrixXd Z(n, 9);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 9; ++c) Z(i, c) = n01(rng);
  const MatrixXd S = Z * A / 3.0;
  attach_scores(dims[0], S.leftCols(3));
  attach_scores(dims[1], S.middleCols(3, 2));
  attach_scores(dims[2], S.rightCols(4));
  return dims;
}

std::vector<const UnivariateFPCA*> ptrs(const std::vector<UnivariateFPCA>& v) {
  std::vector<const UnivariateFPCA*> out;
  for (const auto& f : v) out.push_back(&f);
  return out;
}

}  // namespace

TEST_SUITE("mfpca") {
  TEST_CASE("inverse eigenvalue sums as weights") {
    const VectorXd w = eigenvalue_weights({0.5, 0.25});
    CHECK(w[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(w[1] == doctest::Approx(4.0).epsilon(1e-15));
    const auto& s = fixtures::kSiteUnivariateSums;
    const VectorXd app = eigenvalue_weights({s.begin(), s.end()});
    CHECK(app[0] == doctest::Approx(3.86).epsilon(5e-3));
    CHECK(app[1] == doctest::Approx(1.98).epsilon(5e-3));
    CHECK(app[2] == doctest::Approx(22.2).epsilon(5e-3));
    CHECK(app[3] == doctest::Approx(14.9).epsilon(5e-3));
    CHECK_THROWS_AS(eigenvalue_weights({0.5, 0.0}), DegenerateError);
  }

  TEST_CASE("truncation by explained variance") {
    CHECK(truncation_order(Eigen::Vector3d(0.9, 0.07, 0.03), 0.95) == 2);
    CHECK(truncation_order(Eigen::Vector3d(0.9, 0.07, 0.03), 1.0) == 3);
    CHECK(truncation_order(Eigen::Vector3d(0.9, 0.07, 0.03), 0.5) == 1);
    const auto& s1 = fixtures::kSiteSpectrum;
    CHECK(truncation_order(Eigen::Map<const VectorXd>(s1.data(), s1.size()), 0.98) == 9);
    const auto& s0 = fixtures::kSiteYearSpectrum;
    CHECK(truncation_order(Eigen::Map<const VectorXd>(s0.data(), s0.size()), 0.98) == 14);
    CHECK_THROWS_AS(truncation_order(Eigen::Vector2d(1, 0), 0.0), ArgumentError);

    EigenBasis b;
    b.grid = {0.0, 1.0};
    b.psi.resize(3, 2);
    b.psi << 1, 0, 0, 1, 1, 1;
    b.nu = Eigen::Vector3d(0.9, 0.07, 0.03);
    b.weights = VectorXd::Ones(1);
    const auto t = truncate(b, 0.95);
    CHECK(t.M() == 2);
    CHECK(t.psi == b.psi.topRows(2));
    const auto id = truncate(b, 1.0);
    CHECK(id.psi == b.psi);
    CHECK(id.nu == b.nu);
  }

  TEST_CASE("weighted orthonormality and the trace identity") {
    std::mt19937_64 rng(31);
    auto dims = correlated_dims(400, rng);
    const VectorXd w = Eigen::Vector3d(0.5, 2.0, 1.3);
    const auto sm = stack_scores(ptrs(dims));
    CHECK(sm.Mplus() == 9);
    const auto res = assemble_mfpca(sm, ptrs(dims), w);
    const auto& b = res.basis;
    b.check();
    CHECK(b.M() == 9);
    CHECK((b.gram() - MatrixXd::Identity(9, 9)).cwiseAbs().maxCoeff() < 1e-3);
    VectorXd d(9);
    d << VectorXd::Constant(3, std::sqrt(0.5)), VectorXd::Constant(2, std::sqrt(2.0)), VectorXd::Constant(4, std::sqrt(1.3));
    const MatrixXd c = sm.xi.rowwise() - sm.xi.colwise().mean();
    const double trace = (d.asDiagonal() * c.transpose() * c * d.asDiagonal()).trace() / 399.0;
    CHECK(std::abs(b.nu.sum() - trace) < 1e-8);
    for (int m = 0; m < b.M(); ++m) {
      Eigen::Index arg;
      b.psi.row(m).cwiseAbs().maxCoeff(&arg);
      CHECK(b.psi(m, arg) > 0);
    }
    // Multivariate scores are uncorrelated with variances nu.
    const MatrixXd cov = res.scores.transpose() * res.scores / 399.0;
    CHECK((cov - MatrixXd(b.nu.asDiagonal())).cwiseAbs().maxCoeff() < 1e-8);
  }

  TEST_CASE("common weight scaling") {
    std::mt19937_64 rng(32);
    auto dims = correlated_dims(200, rng);
    const VectorXd w = Eigen::Vector3d(0.5, 2.0, 1.3);
    const auto a = assemble_mfpca(stack_scores(ptrs(dims)), ptrs(dims), w).basis;
    const auto b = assemble_mfpca(stack_scores(ptrs(dims)), ptrs(dims), 3.0 * w).basis;
    CHECK((b.nu - 3.0 * a.nu).cwiseAbs().maxCoeff() < 1e-10 * a.nu[0]);
    // Same span: projecting the rows of one set onto the other loses nothing.
    const MatrixXd Qa = a.psi.transpose().householderQr().householderQ() * MatrixXd::Identity(a.psi.cols(), a.M());
    const MatrixXd resid = b.psi.transpose() - Qa * (Qa.transpose() * b.psi.transpose());
    CHECK(resid.norm() < 1e-8 * b.psi.norm());
    for (double pve : {0.5, 0.8, 0.95, 0.99}) CHECK(truncation_order(a.nu, pve) == truncation_order(b.nu, pve));
  }

  TEST_CASE("equal sums give the unweighted solution up to scale") {
    std::mt19937_64 rng(33);
    auto dims = correlated_dims(150, rng);
    const auto un = assemble_mfpca(stack_scores(ptrs(dims)), ptrs(dims), VectorXd::Ones(3)).basis;
    const auto eq = assemble_mfpca(stack_scores(ptrs(dims)), ptrs(dims), eigenvalue_weights({2.0, 2.0, 2.0})).basis;
    CHECK((eq.nu - 0.5 * un.nu).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((eq.psi * std::sqrt(0.5) - un.psi).cwiseAbs().maxCoeff() < 1e-8);
  }

  TEST_CASE("two rows give a single component") {
    std::mt19937_64 rng(34);
    auto dims = correlated_dims(2, rng);
    const auto res = assemble_mfpca(stack_scores(ptrs(dims)), ptrs(dims), VectorXd::Ones(3));
    CHECK(res.basis.M() == 1);
  }

  TEST_CASE("single dimension with whitened scores") {
    std::mt19937_64 rng(35);
    std::normal_distribution<double> n01;
    auto f = fourier_fpca(3, 0);
    MatrixXd Z(300, 3);
    for (int i = 0; i < 300; ++i)
      for (int c = 0; c < 3; ++c) Z(i, c) = n01(rng);
    Z = Z.rowwise() - Z.colwise().mean();
    const MatrixXd Q = Z.householderQr().householderQ() * MatrixXd::Identity(300, 3);
    const Eigen::Vector3d sd(2.0, 1.0, 0.5);
    attach_scores(f, Q * sd.asDiagonal() * std::sqrt(299.0));
    const auto b = assemble_mfpca(stack_scores({&f}), {&f}, VectorXd::Ones(1)).basis;
    REQUIRE(b.M() == 3);
    for (int m = 0; m < 3; ++m) {
      CHECK(b.nu[m] == doctest::Approx(sd[m] * sd[m]).epsilon(1e-10));
      const double dot = std::abs(b.psi.row(m).dot(f.phi.row(m))) / (b.psi.row(m).norm() * f.phi.row(m).norm());
      CHECK(dot == doctest::Approx(1.0).epsilon(1e-10));
    }
  }

  TEST_CASE("recovers the simulation eigenvalues from true univariate expansions") {
    std::mt19937_64 rng(36);
    const auto tr = simulate_dataset({.n = 1000}, rng).truth;
    std::vector<UnivariateFPCA> dims;
    const VectorXd q = quadrature_weights(tr.grid, Domain{});
    const VectorXd sq = q.cwiseSqrt();
    for (int k = 0; k < 3; ++k) {
      const MatrixXd P = tr.basis.psi.middleCols(k * 101, 101);  // 6 x G
      const MatrixXd cov = P.transpose() * tr.basis.nu.asDiagonal() * P;
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(sq.asDiagonal() * cov * sq.asDiagonal());
      const VectorXd ev = es.eigenvalues().reverse();
      int M = 0;
      while (M < 101 && ev[M] > 1e-10 * ev[0]) ++M;
      UnivariateFPCA f;
      f.domain = Domain{};
      f.grid = tr.grid;
      f.upsilon = ev.head(M);
      f.phi = (es.eigenvectors().rowwise().reverse().leftCols(M).array().colwise() / sq.array()).matrix().transpose();
      attach_scores(f, tr.latent[k] * q.asDiagonal() * f.phi.transpose());
      dims.push_back(std::move(f));
    }
    const auto b = assemble_mfpca(stack_scores(ptrs(dims)), ptrs(dims), VectorXd::Ones(3)).basis;
    REQUIRE(b.M() >= 6);
    for (int m = 0; m < 6; ++m) CHECK(b.nu[m] == doctest::Approx((6.0 - m) / 6.0).epsilon(0.10));
    CHECK(b.nu.tail(b.M() - 6).cwiseAbs().sum() < 1e-6);
  }

  TEST_CASE("score stacking aligns keys") {
    auto a = fourier_fpca(1, 0), b = fourier_fpca(2, 1);
    a.keys = {{1, std::nullopt}, {2, std::nullopt}};
    a.scores = Eigen::Vector2d(1.0, 2.0);
    b.keys = {{2, std::nullopt}, {3, std::nullopt}};
    b.scores.resize(2, 2);
    b.scores << 5, 6, 7, 8;
    const auto s = stack_scores({&a, &b});
    REQUIRE(s.keys.size() == 3u);
    MatrixXd expect(3, 3);
    expect << 1, 0, 0, 2, 5, 6, 0, 7, 8;
    CHECK(s.xi == expect);
    CHECK(s.block_sizes == std::vector<int>{1, 2});
    b.level = "L1";
    CHECK_THROWS_AS(stack_scores({&a, &b}), ArgumentError);
  }

  TEST_CASE("pipeline over levels") {
    std::mt19937_64 rng(37);
    auto d1 = correlated_dims(100, rng);
    std::vector<std::vector<UnivariateFPCA>> per_dim(3);
    for (int k = 0; k < 3; ++k) {
      auto l1 = d1[k];
      l1.level = "L1";
      per_dim[k] = {d1[k], l1};
    }
    MfpcaConfig cfg;
    cfg.weights = WeightScheme::InverseEigenvalueSum;
    cfg.pve = 0.9;
    const auto res = run_mfpca(per_dim, cfg);
    REQUIRE(res.size() == 2u);
    CHECK(res[0].basis.level == "L0");
    CHECK(res[1].basis.level == "L1");
    CHECK(res[0].basis.weights[0] == doctest::Approx(1.0 / d1[0].upsilon.sum()));
    CHECK(res[0].basis.M() < 9);
    CHECK(res[0].scores.cols() == res[0].basis.M());
    CHECK(mfpca_config_from_json(nlohmann::json::parse(R"({"weights": "inverse_eigenvalue_sum", "pve": 0.98})")).pve == 0.98);
    CHECK_THROWS_AS(mfpca_config_from_json(nlohmann::json::parse(R"({"weights": "other"})")), SchemaError);
  }
}
