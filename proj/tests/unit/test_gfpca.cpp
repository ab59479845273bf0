#include <doctest.h>

#include "mfam/error.hpp"
#include "mfam/gfpca.hpp"
#include "mfam/simulate.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <random>

using namespace mfam;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

double corr(const VectorXd& a, const VectorXd& b) {
  const VectorXd ca = a.array() - a.mean(), cb = b.array() - b.mean();
  return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

std::vector<double> centers11() { return BinSpec::equidistant(11, 0.3, Domain{}).centers; }

// Rows xi_1 phi_1 + xi_2 phi_2 + xi_3 phi_3 at the points, xi_m ~ N(0, ev_m).
MatrixXd rank3_rows(int n, const std::vector<double>& pts, std::mt19937_64& rng, double noise = 0.0) {
  std::normal_distribution<double> n01;
  MatrixXd X(n, static_cast<Eigen::Index>(pts.size()));
  for (int i = 0; i < n; ++i) {
    const double a = n01(rng), b = 0.7 * n01(rng), c = 0.4 * n01(rng);
    for (size_t s = 0; s < pts.size(); ++s) {
      const double t = pts[s];
      X(i, s) = a * std::sqrt(2.0) * std::sin(M_PI * t) + b * std::sqrt(2.0) * std::cos(2 * M_PI * t) +
                c * std::sqrt(2.0) * std::sin(3 * M_PI * t) + noise * n01(rng);
    }
  }
  return X;
}

Dataset sparse_sim(int n, std::uint64_t seed, SimulatedData* full = nullptr) {
  std::mt19937_64 rng(seed);
  auto sim = simulate_dataset({.n = n}, rng);
  auto sparse = subsample_regime(sim.data, SamplingRegime::sparse(), rng);
  if (full) *full = sim;
  return sparse;
}

}  // namespace

TEST_SUITE("gfpca") {
  TEST_CASE("bin membership on the unit interval") {
    const auto bins = BinSpec::equidistant(11, 0.3, Domain{});
    REQUIRE(bins.size() == 11);
    const auto b = bin_data({{0, 1, std::nullopt, 0.05, 1.0}}, bins);
    std::vector<int> in;
    for (int s = 0; s < 11; ++s)
      if (!b.members[s].empty()) in.push_back(s);
    CHECK(in == std::vector<int>{0, 1, 2, 3});
  }

  TEST_CASE("cyclic bins wrap around") {
    BinSpec bins{{1.0}, 2.0, Domain{0.0, 24.0, true}};
    const auto b = bin_data({{0, 1, std::nullopt, 23.5, 1.0}}, bins);
    CHECK(b.members[0] == std::vector<int>{0});
    const auto eq = BinSpec::equidistant(24, 2.0, Domain{0.0, 24.0, true});
    CHECK(eq.centers.front() == 0.0);
    CHECK(eq.centers.back() == doctest::Approx(23.0));
    CHECK(eq.distance(23.5, 0) == doctest::Approx(0.5));
  }

  TEST_CASE("zero halfwidth partitions observed times") {
    std::vector<Observation> obs;
    std::vector<double> times = {0.0, 0.25, 0.5, 1.0};
    for (int i = 0; i < 12; ++i) obs.push_back({0, i + 1, std::nullopt, times[i % 4], 0.0});
    BinSpec bins{times, 0.0, Domain{}};
    const auto b = bin_data(obs, bins);
    size_t total = 0;
    for (const auto& m : b.members) total += m.size();
    CHECK(total == obs.size());
    for (int s = 0; s < 4; ++s)
      for (int i : b.members[s]) CHECK(obs[i].t == times[s]);
  }

  TEST_CASE("uncovered observations and empty bins") {
    BinSpec bins{{0.0, 0.5}, 0.1, Domain{}};
    CHECK_THROWS_AS(bin_data({{0, 1, std::nullopt, 0.3, 1.0}}, bins), ArgumentError);
    const auto b = bin_data({{0, 1, std::nullopt, 0.05, 1.0}}, bins);
    CHECK(b.warnings.size() == 1u);
    CHECK_THROWS_AS(BinSpec::equidistant(0, 0.3, Domain{}), ArgumentError);
  }

  TEST_CASE("gaussian random intercepts are the shrunk unit means") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n01;
    std::vector<Observation> obs;
    const int units = 10, per = 20;
    VectorXd ybar = VectorXd::Zero(units);
    for (int i = 0; i < units; ++i) {
      const double b = 0.8 * n01(rng);
      for (int j = 0; j < per; ++j) {
        const double y = 1.0 + b + 0.5 * n01(rng);
        obs.push_back({0, i + 1, std::nullopt, 0.5, y});
        ybar[i] += y / per;
      }
    }
    const auto fit = fit_local_mixed_model(obs, Family(FamilyKind::Gaussian), {}, {});
    REQUIRE(fit.converged);
    const double grand = ybar.mean();
    const double se2 = std::exp(2.0 * fit.scale_fixed[0]);
    const double shrink = fit.var_unit / (fit.var_unit + se2 / per);
    CHECK(fit.fixed[0] == doctest::Approx(grand).epsilon(1e-6));
    for (int i = 0; i < units; ++i) CHECK(fit.b_unit[i] == doctest::Approx(shrink * (ybar[i] - grand)).epsilon(1e-5));
    CHECK(fit.var_unit > 0.1);
    CHECK(std::sqrt(se2) == doctest::Approx(0.5).epsilon(0.15));
  }

  TEST_CASE("sampled local model agrees with the Laplace fit") {
    std::mt19937_64 rng(14);
    std::normal_distribution<double> n01;
    std::vector<Observation> obs;
    CovariateTable cov({"x"});
    VectorXd xs(30);
    for (int i = 0; i < 30; ++i) {
      const double b = 0.8 * n01(rng), x = n01(rng);
      xs[i] = x;
      cov.set({i + 1, std::nullopt}, {x});
      for (int j = 0; j < 15; ++j) obs.push_back({0, i + 1, std::nullopt, 0.4 + 0.01 * j, 1.0 + 0.5 * x + b + 0.5 * n01(rng)});
    }
    LocalModelSpec spec;
    spec.covariates = {"x"};
    const auto mode = fit_local_mixed_model(obs, Family(FamilyKind::Gaussian), cov, spec);
    LocalModelConfig cfg;
    cfg.sample = true;
    cfg.sampler.draws = 1000;
    cfg.sampler.seed = 5;
    const auto mc = fit_local_mixed_model(obs, Family(FamilyKind::Gaussian), cov, spec, cfg);
    REQUIRE(mc.b_unit.size() == 30);
    CHECK(corr(mc.b_unit, mode.b_unit) > 0.99);
    // Intercepts and the unit-level slope trade off in the posterior; the
    // centred unit effects b_i + beta_x x_i are identified.
    const VectorXd d = mc.b_unit + mc.fixed[1] * xs - mode.b_unit - mode.fixed[1] * xs;
    CHECK((d.array() - d.mean()).abs().maxCoeff() < 0.05);
    CHECK(mc.fixed[1] == doctest::Approx(mode.fixed[1]).epsilon(0.1));
    CHECK(mc.var_unit == doctest::Approx(mode.var_unit).epsilon(0.5));
    CHECK(mc.scale_fixed.size() == 1);
  }

  TEST_CASE("all-zero poisson unit is shrunk") {
    std::mt19937_64 rng(12);
    std::vector<Observation> obs;
    for (int i = 0; i < 8; ++i) {
      std::poisson_distribution<int> p(3.0 * std::exp(0.2 * (i - 3.5) / 3.5));
      for (int j = 0; j < 6; ++j) obs.push_back({0, i + 1, std::nullopt, 0.1, i == 0 ? 0.0 : double(p(rng))});
    }
    const auto fit = fit_local_mixed_model(obs, Family(FamilyKind::Poisson), {}, {});
    REQUIRE(std::isfinite(fit.b_unit[0]));
    CHECK(fit.b_unit[0] < 0.0);
    // The unpenalised estimate would diverge to minus infinity.
    CHECK(fit.b_unit[0] > -10.0);
    CHECK(std::exp(fit.fixed[0]) > 1.0);
  }

  TEST_CASE("local models need two units") {
    std::vector<Observation> obs = {{0, 1, std::nullopt, 0.1, 1.0}, {0, 1, std::nullopt, 0.2, 0.0}};
    CHECK_THROWS_AS(fit_local_mixed_model(obs, Family(FamilyKind::Bernoulli), {}, {}), DegenerateError);
  }

  TEST_CASE("bernoulli bin underestimates the latent variance") {
    std::mt19937_64 rng(13);
    const auto sim = simulate_dataset({.n = 150}, rng);
    const auto dim = sim.data.dimension_view(0);
    const auto bins = BinSpec::equidistant(11, 0.3, Domain{});
    const auto b = bin_data(dim.obs(), bins);
    std::vector<Observation> sub;
    for (int i : b.members[5]) sub.push_back(dim.obs()[i]);
    LocalModelSpec spec;
    spec.covariates = {"x"};
    const auto fit = fit_local_mixed_model(sub, dim.families()[0], dim.covariates(), spec);
    double truth = 0.0;
    int cnt = 0;
    for (int g = 20; g <= 80; ++g, ++cnt) {
      const VectorXd c = sim.truth.latent[0].col(g);
      truth += (c.array() - c.mean()).square().sum() / (c.size() - 1);
    }
    truth /= cnt;
    CHECK(fit.var_unit < truth);
    CHECK(fit.var_unit > 0.0);
  }

  TEST_CASE("pairwise covariance skips missing entries") {
    MatrixXd V(4, 2);
    V << 1, 2, 2, NAN, 3, 6, 4, 8;
    const MatrixXd C = pairwise_covariance(V);
    CHECK(C(0, 0) == doctest::Approx(5.0 / 3.0));
    // Column 2 without row 2: 2, 6, 8 with mean 16/3.
    CHECK(C(1, 1) == doctest::Approx((std::pow(2 - 16.0 / 3, 2) + std::pow(6 - 16.0 / 3, 2) + std::pow(8 - 16.0 / 3, 2)) / 2));
    CHECK(C(0, 1) == C(1, 0));
  }

  TEST_CASE("rank one oracle") {
    std::mt19937_64 rng(14);
    std::normal_distribution<double> n01;
    const auto c = centers11();
    LatentMatrix L{"L0", {}, MatrixXd(500, 11)};
    for (int i = 0; i < 500; ++i) {
      L.keys.push_back({i + 1, std::nullopt});
      const double xi = n01(rng);
      for (int s = 0; s < 11; ++s) L.values(i, s) = xi * std::sqrt(2.0) * std::sin(M_PI * c[s]);
    }
    const auto f = fast_covariance_fpca(L, c, Domain{}, 0.99, {});
    REQUIRE(f.M() >= 1);
    VectorXd phi(f.grid.size());
    for (size_t g = 0; g < f.grid.size(); ++g) phi[g] = std::sqrt(2.0) * std::sin(M_PI * f.grid[g]);
    CHECK(std::abs(corr(f.phi.row(0).transpose(), phi)) > 0.99);
    CHECK(f.upsilon[0] == doctest::Approx(1.0).epsilon(0.15));
    CHECK(f.scores.rows() == 500);
  }

  TEST_CASE("constant latent rows are degenerate") {
    LatentMatrix L{"L0", {}, MatrixXd::Constant(20, 11, 0.3)};
    for (int i = 0; i < 20; ++i) L.keys.push_back({i + 1, std::nullopt});
    CHECK_THROWS_AS(fast_covariance_fpca(L, centers11(), Domain{}, 0.99, {}), DegenerateError);
    LatentMatrix small{"L0", {}, MatrixXd::Ones(2, 11)};
    CHECK_THROWS_AS(fast_covariance_fpca(small, centers11(), Domain{}, 0.99, {}), ArgumentError);
  }

  TEST_CASE("eigenfunctions are orthonormal with ordered eigenvalues") {
    std::mt19937_64 rng(15);
    const auto c = centers11();
    LatentMatrix L{"L0", {}, rank3_rows(300, c, rng, 0.05)};
    for (int i = 0; i < 300; ++i) L.keys.push_back({i + 1, std::nullopt});
    const auto f = fast_covariance_fpca(L, c, Domain{}, 0.999, {});
    REQUIRE(f.M() >= 3);
    const VectorXd w = quadrature_weights(f.grid, f.domain);
    const MatrixXd gram = f.phi * w.asDiagonal() * f.phi.transpose();
    CHECK((gram - MatrixXd::Identity(f.M(), f.M())).cwiseAbs().maxCoeff() < 1e-3);
    for (int m = 1; m < f.eigenvalues.size(); ++m) CHECK(f.eigenvalues[m] <= f.eigenvalues[m - 1]);
    CHECK(f.eigenvalues.minCoeff() >= 0.0);
    CHECK(f.upsilon[0] == doctest::Approx(1.0).epsilon(0.2));
    CHECK(f.upsilon[1] == doctest::Approx(0.49).epsilon(0.25));
    for (int m = 0; m < f.M(); ++m) {
      Eigen::Index idx;
      f.phi.row(m).cwiseAbs().maxCoeff(&idx);
      CHECK(f.phi(m, idx) > 0.0);
    }
  }

  TEST_CASE("reconstruction error does not increase with M") {
    std::mt19937_64 rng(16);
    const auto c = centers11();
    LatentMatrix L{"L0", {}, rank3_rows(200, c, rng)};
    for (int i = 0; i < 200; ++i) L.keys.push_back({i + 1, std::nullopt});
    const auto f = fast_covariance_fpca(L, c, Domain{}, 1.0, {});
    REQUIRE(f.M() >= 3);
    const MatrixXd Pc = evaluate_eigenbasis(f.as_basis(), 0, c);
    MatrixXd centred = L.values.rowwise() - L.values.colwise().mean();
    double prev = centred.squaredNorm();
    for (int M = 1; M <= std::min(f.M(), 5); ++M) {
      const MatrixXd rec = f.scores.leftCols(M) * Pc.leftCols(M).transpose();
      const double err = (centred - rec).squaredNorm();
      CHECK(err <= prev * (1 + 1e-9));
      prev = err;
    }
  }

  TEST_CASE("multilevel split recovers both covariances") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> n01;
    const auto c = centers11();
    const int units = 100, groups = 9;
    auto phi = [&](int m, double t) {
      switch (m) {
        case 0: return 1.0;
        case 1: return std::sqrt(2.0) * std::sin(2 * M_PI * t);
        case 2: return std::sqrt(2.0) * std::cos(M_PI * t);
        default: return std::sqrt(2.0) * std::cos(2 * M_PI * t);
      }
    };
    const double v1[2] = {1.0, 0.5}, v0[2] = {0.6, 0.3};
    LatentMatrix L{"L0", {}, MatrixXd(units * groups, 11)};
    for (int i = 0; i < units; ++i) {
      const double u0 = std::sqrt(v1[0]) * n01(rng), u1 = std::sqrt(v1[1]) * n01(rng);
      for (int j = 0; j < groups; ++j) {
        const double w0 = std::sqrt(v0[0]) * n01(rng), w1 = std::sqrt(v0[1]) * n01(rng);
        const int r = i * groups + j;
        L.keys.push_back({i + 1, j + 1});
        for (int s = 0; s < 11; ++s)
          L.values(r, s) = u0 * phi(0, c[s]) + u1 * phi(1, c[s]) + w0 * phi(2, c[s]) + w1 * phi(3, c[s]);
      }
    }
    MatrixXd K1(11, 11), K0(11, 11);
    for (int a = 0; a < 11; ++a)
      for (int b = 0; b < 11; ++b) {
        K1(a, b) = v1[0] * phi(0, c[a]) * phi(0, c[b]) + v1[1] * phi(1, c[a]) * phi(1, c[b]);
        K0(a, b) = v0[0] * phi(2, c[a]) * phi(2, c[b]) + v0[1] * phi(3, c[a]) * phi(3, c[b]);
      }
    const auto sp = multilevel_split(L);
    CHECK((sp.cov_between - K1).norm() / K1.norm() < 0.2);
    CHECK((sp.cov_within - K0).norm() / K0.norm() < 0.2);
    CHECK(sp.between.values.rows() == units);
    CHECK(sp.within.values.rows() == units * groups);

    // Identical groups within each unit.
    LatentMatrix same = L;
    for (int i = 0; i < units; ++i)
      for (int j = 1; j < groups; ++j) same.values.row(i * groups + j) = same.values.row(i * groups);
    CHECK(multilevel_split(same).cov_within.cwiseAbs().maxCoeff() < 1e-12);

    // No unit effects.
    LatentMatrix noise = L;
    for (int i = 0; i < units; ++i)
      for (int j = 0; j < groups; ++j) {
        const double w0 = std::sqrt(v0[0]) * n01(rng), w1 = std::sqrt(v0[1]) * n01(rng);
        for (int s = 0; s < 11; ++s) noise.values(i * groups + j, s) = w0 * phi(2, c[s]) + w1 * phi(3, c[s]);
      }
    CHECK(multilevel_split(noise).cov_between.norm() < 0.1 * K0.norm());
  }

  TEST_CASE("a unit with a single group only informs the between level") {
    LatentMatrix L{"L0", {{1, 1}, {1, 2}, {2, 1}, {3, 1}, {3, 2}}, MatrixXd(5, 3)};
    L.values << 1, 2, 3, 2, 2, 2, 5, 1, 0, 0, 1, 1, 1, 0, 0;
    const auto sp = multilevel_split(L);
    CHECK(sp.within.values.row(2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(sp.between.values.row(1) == L.values.row(2));
  }

  TEST_CASE("refit scores track the true scores") {
    std::mt19937_64 rng(18);
    std::normal_distribution<double> n01;
    const auto grid = equidistant_grid(0.0, 1.0, 101);
    UnivariateFPCA f;
    f.domain = Domain{};
    f.grid = grid;
    f.phi.resize(3, 101);
    for (int g = 0; g < 101; ++g) {
      f.phi(0, g) = std::sqrt(2.0) * std::sin(M_PI * grid[g]);
      f.phi(1, g) = std::sqrt(2.0) * std::cos(2 * M_PI * grid[g]);
      f.phi(2, g) = std::sqrt(2.0) * std::sin(3 * M_PI * grid[g]);
    }
    f.upsilon = Eigen::Vector3d(1.0, 0.5, 0.0);
    const int n = 150;
    MatrixXd xi(n, 2);
    std::vector<Observation> obs;
    for (int i = 0; i < n; ++i) {
      xi(i, 0) = n01(rng);
      xi(i, 1) = std::sqrt(0.5) * n01(rng);
      for (int g = 0; g < 101; ++g)
        obs.push_back({0, i + 1, std::nullopt, grid[g], xi(i, 0) * f.phi(0, g) + xi(i, 1) * f.phi(1, g) + 0.5 * n01(rng)});
    }
    const Dataset d({Family(FamilyKind::Gaussian)}, Domain{}, obs);
    std::vector<UnivariateFPCA> fp = {f};
    RefitConfig rc;
    rc.n_basis_t = 8;
    rc.sampler.burnin = 100;
    rc.sampler.draws = 100;
    rc.sampler.thin = 1;
    refit_scores(d, d.families()[0], fp, {}, rc);
    REQUIRE(fp[0].scores.rows() == n);
    REQUIRE(fp[0].scores.cols() == 3);
    CHECK(corr(fp[0].scores.col(0), xi.col(0)) > 0.9);
    CHECK(corr(fp[0].scores.col(1), xi.col(1)) > 0.9);
    CHECK(fp[0].scores.col(2).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("refit widens the score spread on sparse binary data") {
    const auto data = sparse_sim(150, 19).dimension_view(0);
    GfpcaConfig cfg;
    cfg.local.covariates = {"x"};
    cfg.refit.enabled = false;
    const auto binned = run_gfpca(data, cfg);
    cfg.refit.enabled = true;
    cfg.refit.sampler.burnin = 200;
    cfg.refit.sampler.draws = 200;
    cfg.refit.sampler.thin = 1;
    const auto refit = run_gfpca(data, cfg);
    REQUIRE(binned[0].M() >= 1);
    REQUIRE(binned[0].M() == refit[0].M());
    auto var = [](const VectorXd& v) { return (v.array() - v.mean()).square().sum() / (v.size() - 1); };
    CHECK(var(refit[0].scores.col(0)) > var(binned[0].scores.col(0)));
  }

  TEST_CASE("simulated dimensions keep a handful of components") {
    std::mt19937_64 rng(20);
    const auto sim = simulate_dataset({.n = 150}, rng);
    const auto irr = subsample_regime(sim.data, SamplingRegime::irregular(), rng);
    GfpcaConfig cfg;
    cfg.local.covariates = {"x"};
    cfg.local.scale_covariates = {"z"};
    cfg.refit.enabled = false;
    for (int k = 0; k < 3; ++k) {
      const auto f = run_gfpca(irr.dimension_view(k), cfg);
      REQUIRE(f.size() == 1u);
      CHECK(f[0].M() >= 2);
      CHECK(f[0].M() <= 6);
    }
  }

  TEST_CASE("two-level pipeline on the cyclic demo") {
    std::mt19937_64 rng(21);
    const auto demo = simulate_app_demo({}, rng);
    GfpcaConfig cfg;
    cfg.n_bins = 24;
    cfg.halfwidth = 2.0;
    cfg.smoothing.n_basis = 10;
    cfg.smoothing.output_points = 24;
    cfg.local.covariates = {"year", "lanes1"};
    cfg.unit_level = "L1";
    cfg.curve_level = "L0";
    cfg.refit.enabled = false;
    const auto f = run_gfpca(demo.data.dimension_view(0), cfg);
    REQUIRE(f.size() == 2u);
    CHECK(f[0].level == "L1");
    CHECK(f[1].level == "L0");
    CHECK(f[0].keys.size() == 4u);
    CHECK(f[1].keys.size() == 12u);
    CHECK(f[0].grid.size() == 24u);
    CHECK(f[0].grid.back() == doctest::Approx(23.0));
  }

  TEST_CASE("deterministic output and serialization round trip") {
    const auto data = sparse_sim(60, 22).dimension_view(2);
    GfpcaConfig cfg;
    cfg.refit.sampler.burnin = 50;
    cfg.refit.sampler.draws = 50;
    cfg.refit.sampler.thin = 1;
    const auto a = run_gfpca(data, cfg);
    const auto b = run_gfpca(data, cfg);
    REQUIRE(a.size() == 1u);
    CHECK(a[0].phi == b[0].phi);
    CHECK(a[0].scores == b[0].scores);
    const auto dir = std::filesystem::temp_directory_path() / "mfam_gfpca_test";
    std::filesystem::create_directories(dir);
    write_univariate_fpcas(a, dir / "fpc.csv", dir / "fpc.json", dir / "scores.csv");
    const auto back = read_univariate_fpcas(dir / "fpc.csv", dir / "fpc.json", dir / "scores.csv");
    REQUIRE(back.size() == 1u);
    CHECK(back[0].M() == a[0].M());
    CHECK((back[0].phi - a[0].phi).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((back[0].upsilon - a[0].upsilon).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((back[0].scores - a[0].scores).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(back[0].keys == a[0].keys);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("configuration parsing") {
    const auto c = gfpca_config_from_json(nlohmann::json::parse(R"({"n_bins": 24, "halfwidth": 2, "pve": 0.95,
      "covariates": ["year"], "smoothing": {"n_basis": 10}})"));
    CHECK(c.n_bins == 24);
    CHECK(c.halfwidth == 2.0);
    CHECK(c.smoothing.n_basis == 10);
    CHECK(c.local.covariates == std::vector<std::string>{"year"});
    CHECK_THROWS_AS(gfpca_config_from_json(nlohmann::json::parse(R"({"pve": 1.5})")), SchemaError);
    CHECK_THROWS_AS(gfpca_config_from_json(nlohmann::json::parse(R"({"n_bins": "x"})")), SchemaError);
  }
}
