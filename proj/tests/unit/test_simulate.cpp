#include <doctest.h>

#include "mfam/error.hpp"
#include "mfam/simulate.hpp"

#include <cmath>
#include <filesystem>

using namespace mfam;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_SUITE("simulate") {
  TEST_CASE("eigenvalues decrease linearly") {
    std::mt19937_64 rng(1);
    const auto sim = simulate_dataset({.n = 10}, rng);
    const VectorXd nu = sim.truth.basis.nu;
    REQUIRE(nu.size() == 6);
    for (int m = 0; m < 6; ++m) CHECK(nu[m] == doctest::Approx((6.0 - m) / 6.0).epsilon(1e-15));
    CHECK(sim.truth.basis.level == "L0");
  }

  TEST_CASE("dense dataset shape and families") {
    std::mt19937_64 rng(2);
    const auto sim = simulate_dataset({.n = 12}, rng);
    CHECK(sim.data.size() == 101u * 3u * 12u);
    CHECK(sim.data.K() == 3);
    CHECK(sim.data.families()[0].kind() == FamilyKind::Bernoulli);
    CHECK(sim.data.families()[1].kind() == FamilyKind::Poisson);
    CHECK(sim.data.families()[2].kind() == FamilyKind::Gaussian);
    for (const auto& o : sim.data.obs()) {
      if (o.dim == 0) CHECK((o.y == 0.0 || o.y == 1.0));
      if (o.dim == 1) CHECK((o.y >= 0.0 && o.y == std::floor(o.y)));
    }
  }

  TEST_CASE("fixed effects cancel at x = 1") {
    std::mt19937_64 rng(3);
    const auto tr = simulate_dataset({.n = 5}, rng).truth;
    CHECK((tr.beta0 + tr.beta1).cwiseAbs().maxCoeff() < 1e-15);
    for (int g = 0; g < 101; ++g) CHECK(tr.beta0[g] == doctest::Approx(std::cos(2 * M_PI * tr.grid[g])));
  }

  TEST_CASE("predictor reconstructs from its parts") {
    std::mt19937_64 rng(4);
    const auto tr = simulate_dataset({.n = 20}, rng).truth;
    for (int k = 0; k < 3; ++k) {
      const MatrixXd psi = tr.basis.psi.middleCols(k * 101, 101);
      const MatrixXd latent = tr.scores * psi;
      CHECK((latent - tr.latent[k]).cwiseAbs().maxCoeff() < 1e-12);
      for (int i = 0; i < tr.n(); ++i) {
        const VectorXd eta = tr.beta0 + tr.beta1 * tr.x[i] + latent.row(i).transpose();
        CHECK((eta - tr.eta[k].row(i).transpose()).cwiseAbs().maxCoeff() < 1e-12);
      }
    }
    for (int i = 0; i < tr.n(); ++i) {
      CHECK((tr.x[i] >= -1.0 && tr.x[i] <= 1.0));
      CHECK((tr.z[i] == 0.0 || tr.z[i] == 1.0));
      CHECK(tr.scale_eta[i] == doctest::Approx(-2.0 + 0.5 * tr.z[i]));
    }
  }

  TEST_CASE("gaussian noise level follows z") {
    std::mt19937_64 rng(5);
    const auto sim = simulate_dataset({.n = 150}, rng);
    const auto& tr = sim.truth;
    double ss[2] = {0, 0};
    int cnt[2] = {0, 0};
    for (const auto& o : sim.data.obs()) {
      if (o.dim != 2) continue;
      const int i = static_cast<int>(o.unit - 1);
      const int g = static_cast<int>(std::lround(o.t * 100));
      const int zi = static_cast<int>(tr.z[i]);
      const double r = o.y - tr.eta[2](i, g);
      ss[zi] += r * r;
      ++cnt[zi];
    }
    REQUIRE(cnt[0] > 1000);
    REQUIRE(cnt[1] > 1000);
    CHECK(std::exp(-1.5) == doctest::Approx(0.2231).epsilon(1e-3));
    CHECK(std::sqrt(ss[1] / cnt[1]) == doctest::Approx(std::exp(-1.5)).epsilon(0.05));
    CHECK(std::sqrt(ss[0] / cnt[0]) == doctest::Approx(std::exp(-2.0)).epsilon(0.05));
  }

  TEST_CASE("score variances and the mean predictor") {
    std::mt19937_64 rng(6);
    const int n = 10000;
    const auto tr = simulate_dataset({.n = n, .grid_points = 11}, rng).truth;
    for (int m = 0; m < 6; ++m) {
      const VectorXd s = tr.scores.col(m);
      const double mean = s.mean();
      const double var = (s.array() - mean).square().sum() / (n - 1);
      const double nu = (6.0 - m) / 6.0;
      CHECK(std::abs(var - nu) < 3.0 * nu * std::sqrt(2.0 / (n - 1)));
    }
    for (int k = 0; k < 3; ++k)
      for (int g = 0; g < 11; ++g) {
        const VectorXd col = tr.eta[k].col(g);
        const double mean = col.mean();
        const double se = std::sqrt((col.array() - mean).square().sum() / (n - 1) / n);
        CHECK(std::abs(mean - tr.beta0[g]) < 4.0 * se);
      }
  }

  TEST_CASE("same seed gives the same dataset") {
    std::mt19937_64 a(7), b(7), c(8);
    const auto s1 = simulate_dataset({.n = 8}, a);
    const auto s2 = simulate_dataset({.n = 8}, b);
    const auto s3 = simulate_dataset({.n = 8}, c);
    CHECK(s1.data.obs() == s2.data.obs());
    CHECK(s1.truth.basis.psi == s2.truth.basis.psi);
    CHECK(!(s1.data.obs() == s3.data.obs()));
  }

  TEST_CASE("replicate seeds") {
    CHECK(replicate_seed(1, 0) == replicate_seed(1, 0));
    CHECK(replicate_seed(1, 0) != replicate_seed(1, 1));
    CHECK(replicate_seed(1, 3) != replicate_seed(2, 3));
  }

  TEST_CASE("input validation") {
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(simulate_dataset({.n = 1}, rng), ArgumentError);
    CHECK_THROWS_AS(simulate_dataset({.n = 5, .M0 = 0}, rng), ArgumentError);
  }

  TEST_CASE("truth bundle round trip") {
    std::mt19937_64 rng(9);
    const auto tr = simulate_dataset({.n = 6}, rng).truth;
    const auto dir = std::filesystem::temp_directory_path() / "mfam_truth_test";
    std::filesystem::remove_all(dir);
    write_truth(tr, dir);
    const auto back = read_truth(dir);
    CHECK(back.n() == tr.n());
    CHECK(back.units == tr.units);
    CHECK((back.scores - tr.scores).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((back.x - tr.x).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(back.z == tr.z);
    CHECK((back.basis.psi - tr.basis.psi).cwiseAbs().maxCoeff() < 1e-12);
    for (int k = 0; k < 3; ++k) {
      CHECK((back.eta[k] - tr.eta[k]).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((back.latent[k] - tr.latent[k]).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(back.families[k].kind() == tr.families[k].kind());
    }
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("application demo") {
    std::mt19937_64 rng(10);
    const auto demo = simulate_app_demo({}, rng);
    const auto& d = demo.data;
    CHECK(d.K() == 4);
    CHECK(d.layers() == 1);
    CHECK(d.domain().cyclic);
    CHECK(d.domain().hi == 24.0);
    CHECK(d.size() == 4u * 3u * 4u * 24u);
    CHECK(d.units().size() == 4u);
    CHECK(d.curves().size() == 12u);
    CHECK(d.families()[0].kind() == FamilyKind::NegBinomial);
    CHECK(d.families()[3].kind() == FamilyKind::Gamma);
    for (const auto& o : d.obs()) {
      if (o.dim >= 2) CHECK(o.y > 0.0);
      CHECK(o.group.has_value());
    }
    REQUIRE(demo.true_bases.size() == 2u);
    CHECK(demo.true_bases[0].level == "L1");
    CHECK(demo.true_bases[1].level == "L0");
    // Orthonormal under the unweighted scalar product on the hourly grid.
    const auto& psi = demo.true_bases[0].psi;
    const MatrixXd gram = psi * psi.transpose();
    CHECK((gram - MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(d.covariates().value({1, 2021}, "lanes1") == 1.0);
    CHECK(d.covariates().value({2, 2023}, "limit30") == 1.0);
  }
}
