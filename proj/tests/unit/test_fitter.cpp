#include <doctest.h>

#include "mfam/bases.hpp"
#include "mfam/error.hpp"
#include "mfam/fitter.hpp"

#include <Eigen/Eigenvalues>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

using namespace mfam;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::vector<double> unit_grid(int n) {
  std::vector<double> g(n);
  for (int i = 0; i < n; ++i) g[i] = double(i) / (n - 1);
  return g;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0}); }

// Poisson + Gaussian, 20 units, scalar covariates x and z.
Dataset small_bivariate(std::uint64_t seed, bool shuffle = false) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> gi(0, 100);
  std::uniform_real_distribution<double> ux(-1, 1);
  std::normal_distribution<double> n01;
  CovariateTable cov({"x", "z"});
  std::vector<Observation> obs;
  for (long i = 1; i <= 20; ++i) {
    const double x = ux(rng), z = i % 2;
    cov.set({i, std::nullopt}, {x, z});
    for (int j = 0; j < 8; ++j) {
      const double t = gi(rng) / 100.0;
      std::poisson_distribution<int> pois(std::exp(0.5 + std::sin(2 * M_PI * t) * x));
      obs.push_back({0, i, std::nullopt, t, double(pois(rng))});
      obs.push_back({1, i, std::nullopt, t, std::cos(2 * M_PI * t) + 0.3 * x + std::exp(-1 + 0.4 * z) * n01(rng)});
    }
  }
  if (shuffle) std::shuffle(obs.begin(), obs.end(), rng);
  return Dataset({Family(FamilyKind::Poisson), Family(FamilyKind::Gaussian)}, Domain{}, obs, cov);
}

ModelSpec small_spec() {
  ModelSpec s;
  s.families = {Family(FamilyKind::Poisson), Family(FamilyKind::Gaussian)};
  TermSpec fi{TermKind::FunctionalIntercept};
  fi.n_basis_t = 8;
  TermSpec lf = fi;
  lf.kind = TermKind::LinearFunctional;
  lf.covariate = "x";
  TermSpec lat{TermKind::MfpcRandom};
  lat.latent = "L0";
  TermSpec cz{TermKind::Constant};
  cz.covariate = "z";
  s.predictors = {{0, 0, {fi, lf, lat}}, {1, 0, {fi, lat}}, {1, 1, {TermSpec{}, cz}}};
  s.latent = {LatentSpec{"L0", LatentLevel::Unit, "L0", std::nullopt}};
  s.finalize();
  return s;
}

EigenBasis small_basis(int M = 3) {
  std::mt19937_64 rng(7);
  auto b = split_fourier_eigenbasis(M, 2, unit_grid(101), rng);
  for (int m = 0; m < M; ++m) b.nu[m] = 1.0 / (m + 1);
  return b;
}

ModelState random_state(const ModelDesign& d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  auto s = initial_state(d);
  for (auto& b : s.beta)
    for (auto& v : b) v = 0.3 * n01(rng);
  for (auto& t : s.tau2)
    for (auto& v : t) v = std::exp(n01(rng));
  for (auto& sc : s.scores)
    for (Eigen::Index i = 0; i < sc.size(); ++i) sc.data()[i] = 0.5 * n01(rng);
  return s;
}

// Batch-means Monte Carlo standard error.
double mcse(const VectorXd& x, int batches = 50) {
  const int len = static_cast<int>(x.size()) / batches;
  VectorXd m(batches);
  for (int b = 0; b < batches; ++b) m[b] = x.segment(b * len, len).mean();
  const double var = (m.array() - m.mean()).square().sum() / (batches - 1);
  return std::sqrt(var / batches);
}

double ks_statistic(std::vector<double> x, const std::function<double(double)>& cdf) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double F = cdf(x[i]);
    d = std::max({d, std::abs(F - i / n), std::abs((i + 1) / n - F)});
  }
  return d;
}

Dataset gaussian_scalar(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::vector<Observation> obs;
  for (long i = 1; i <= n; ++i) obs.push_back({0, i, std::nullopt, 0.5, 2.0 + 0.7 * n01(rng)});
  return Dataset({Family(FamilyKind::Gaussian)}, Domain{}, obs);
}

}  // namespace

TEST_SUITE("fitter") {
  TEST_CASE("default constant terms and design structure") {
    const auto data = small_bivariate(1);
    ModelSpec s;
    s.families = data.families();
    s.finalize();
    REQUIRE(s.predictors.size() == 3);
    const auto d = build_design(data, s, {});
    REQUIRE(d.terms.size() == 3);
    for (const auto& t : d.terms) {
      CHECK(t.spec.kind == TermKind::Constant);
      CHECK(t.X.cols() == 1);
      CHECK(t.X.isOnes());
    }
  }

  TEST_CASE("linear-functional rows are x times the time basis") {
    const auto data = small_bivariate(2);
    const auto d = build_design(data, small_spec(), {small_basis()});
    const auto& lf = d.terms[1];
    REQUIRE(lf.spec.kind == TermKind::LinearFunctional);
    const MatrixXd B = bspline_design(BSplineSpec{4, 3, Domain{}}, d.t[0]);
    REQUIRE(B.cols() == 8);
    for (int i = 0; i < d.n_rows(0); ++i) {
      const double x = data.covariates().value(d.curve[0][i], "x");
      CHECK((lf.X.row(i) - x * B.row(i)).cwiseAbs().maxCoeff() < 1e-14);
    }
  }

  TEST_CASE("latent design rows touch one entity block") {
    const auto data = small_bivariate(3);
    const auto basis = small_basis();
    const auto d = build_design(data, small_spec(), {basis});
    const auto& l = d.latents[0];
    CHECK(l.J() == 20);
    CHECK(l.M() == 3);
    for (int k = 0; k < 2; ++k) {
      const MatrixXd Z = latent_design_matrix(d, 0, k);
      const MatrixXd P = evaluate_eigenbasis(basis, k, d.t[k]);
      for (int i = 0; i < d.n_rows(k); ++i) {
        const int e = static_cast<int>(d.curve[k][i].unit) - 1;
        CHECK((Z.block(i, e * 3, 1, 3) - P.row(i)).cwiseAbs().maxCoeff() < 1e-14);
        CHECK(Z.row(i).cwiseAbs().sum() == doctest::Approx(P.row(i).cwiseAbs().sum()));
      }
    }
  }

  TEST_CASE("zero-eigenvalue components are dropped") {
    auto basis = small_basis(4);
    basis.nu[3] = 0.0;
    const auto d = build_design(small_bivariate(4), small_spec(), {basis});
    CHECK(d.latents[0].M() == 3);
    CHECK(d.latents[0].dropped == 1);
  }

  TEST_CASE("design errors") {
    const auto data = small_bivariate(5);
    CHECK_THROWS_AS(build_design(data, small_spec(), {}), SchemaError);
    auto s = small_spec();
    s.predictors[0].terms[1].covariate = "nope";
    CHECK_THROWS_AS(build_design(data, s, {small_basis()}), SchemaError);
    auto s2 = small_spec();
    s2.families[0] = Family(FamilyKind::Bernoulli);
    CHECK_THROWS_AS(build_design(data, s2, {small_basis()}), SchemaError);
  }

  TEST_CASE("log-likelihood factorises over observations") {
    const auto data = small_bivariate(6);
    const auto basis = small_basis();
    const auto d = build_design(data, small_spec(), {basis});
    const auto st = random_state(d, 11);
    double oracle = 0.0;
    for (int k = 0; k < 2; ++k) {
      const MatrixXd P = evaluate_eigenbasis(basis, k, d.t[k]);
      for (int i = 0; i < d.n_rows(k); ++i) {
        double eta[2] = {0.0, 0.0};
        for (size_t j = 0; j < d.terms.size(); ++j) {
          const auto& p = d.predictors[d.terms[j].predictor];
          if (p.dim == k) eta[p.param] += d.terms[j].X.row(i).dot(st.beta[j]);
        }
        const int e = static_cast<int>(d.curve[k][i].unit) - 1;
        eta[0] += P.row(i).dot(st.scores[0].row(e));
        const auto& f = d.families[k];
        std::vector<double> theta;
        for (int r = 0; r < f.n_params(); ++r) theta.push_back(inverse_link(f.link(r), eta[r]));
        oracle += logpdf(f, d.y[k][i], theta);
      }
    }
    CHECK(log_likelihood(d, st) == doctest::Approx(oracle).epsilon(1e-12));
  }

  TEST_CASE("block derivatives match finite differences") {
    const auto d = build_design(small_bivariate(7), small_spec(), {small_basis()});
    const auto st = random_state(d, 12);
    const double h = 1e-5;
    std::vector<BlockRef> refs;
    for (size_t j = 0; j < d.terms.size(); ++j) refs.push_back({BlockRef::Kind::Term, static_cast<int>(j), 0});
    for (int e : {0, 7, 19}) refs.push_back({BlockRef::Kind::Scores, 0, e});
    for (const auto& ref : refs) {
      const auto bd = block_derivatives(d, st, ref);
      auto coord = [&](ModelState& s, int c) -> double& {
        return ref.kind == BlockRef::Kind::Term ? s.beta[ref.index][c] : s.scores[ref.index](ref.entity, c);
      };
      for (int c = 0; c < bd.grad.size(); ++c) {
        auto sp = st, sm = st;
        coord(sp, c) += h;
        coord(sm, c) -= h;
        const double fd = (log_posterior(d, sp) - log_posterior(d, sm)) / (2 * h);
        CHECK(rel_err(bd.grad[c], fd) < 1e-5);
        const auto gp = block_derivatives(d, sp, ref).grad, gm = block_derivatives(d, sm, ref).grad;
        for (int c2 = 0; c2 < bd.grad.size(); ++c2)
          CHECK(rel_err(bd.hess(c2, c), (gp[c2] - gm[c2]) / (2 * h)) < 1e-5);
      }
    }
  }

  TEST_CASE("single-penalty variance update is inverse gamma") {
    const auto d = build_design(small_bivariate(8), small_spec(), {small_basis()});
    const auto& term = d.terms[0];
    REQUIRE(term.n_penalties() == 1);
    CHECK(term.rank[0] == 6);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01;
    VectorXd beta(term.size());
    for (auto& v : beta) v = n01(rng);
    SamplerConfig cfg;
    const double a = cfg.ig_a + 0.5 * term.rank[0], b = cfg.ig_b + 0.5 * beta.dot(term.P[0] * beta);
    std::vector<double> draws;
    std::vector<double> tau{1.0};
    for (int i = 0; i < 10000; ++i) {
      tau = draw_smoothing_variances(term, beta, tau, cfg, rng);
      draws.push_back(tau[0]);
    }
    const double D = ks_statistic(draws, [&](double x) { return boost::math::gamma_q(a, b / x); });
    CHECK(D < 0.02);
  }

  TEST_CASE("anisotropic variance update targets its conditional") {
    auto s = small_spec();
    TermSpec si{TermKind::SmoothInteraction};
    si.covariate = "x";
    si.n_basis_t = 8;
    si.n_basis_x = 5;
    s.predictors[1].terms.insert(s.predictors[1].terms.begin() + 1, si);
    const auto d = build_design(small_bivariate(9), s, {small_basis()});
    const TermDesign* term = nullptr;
    for (const auto& t : d.terms)
      if (t.spec.kind == TermKind::SmoothInteraction) term = &t;
    REQUIRE(term);
    REQUIRE(term->size() == 4 * 8);
    // Sum-to-zero constraint over the observed rows.
    CHECK((term->X.colwise().sum().reshaped(8, 4).colwise().sum()).cwiseAbs().maxCoeff() < 1e-10);

    // log det+ of the full prior precision equals the marginal-eigenvalue form.
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n01;
    auto logdet_full = [&](double t1, double t2) {
      const MatrixXd Q = term->P[0] / t1 + term->P[1] / t2;
      const VectorXd ev = Eigen::SelfAdjointEigenSolver<MatrixXd>(Q).eigenvalues();
      double s = 0.0;
      for (double v : ev)
        if (v > 1e-9 * ev.maxCoeff()) s += std::log(v);
      return s;
    };
    auto logdet_marg = [&](double t1, double t2) {
      double s = 0.0;
      for (double ex : term->eig_x)
        for (double et : term->eig_t) {
          const double lam = (ex > 1e-10 ? ex : 0.0) / t1 + (et > 1e-10 ? et : 0.0) / t2;
          if (lam > 0) s += std::log(lam);
        }
      return s;
    };
    for (int r = 0; r < 5; ++r) {
      const double t1 = std::exp(n01(rng)), t2 = std::exp(n01(rng));
      CHECK(logdet_full(t1, t2) == doctest::Approx(logdet_marg(t1, t2)).epsilon(1e-8));
    }

    VectorXd beta(term->size());
    for (auto& v : beta) v = 0.5 * n01(rng);
    SamplerConfig cfg;
    const double q1 = beta.dot(term->P[0] * beta), q2 = beta.dot(term->P[1] * beta);
    std::vector<double> tau{1.0, 1.0}, draws;
    for (int i = 0; i < 500; ++i) tau = draw_smoothing_variances(*term, beta, tau, cfg, rng);
    for (int i = 0; i < 50000; ++i) {
      tau = draw_smoothing_variances(*term, beta, tau, cfg, rng);
      if (i % 5 == 4) draws.push_back(std::log(tau[0]));
    }
    // Marginal of v1 = log tau1 by two-dimensional quadrature.
    const auto [mn, mx] = std::minmax_element(draws.begin(), draws.end());
    const double lo1 = *mn - 2, hi1 = *mx + 2, lo2 = -25, hi2 = 25;
    const int n1 = 600, n2 = 1500;
    auto ig = [&](double x) { return cfg.ig_a * std::log(cfg.ig_b) - std::lgamma(cfg.ig_a) -
                                     (cfg.ig_a + 1) * std::log(x) - cfg.ig_b / x; };
    std::vector<double> logm(n1);
    for (int a = 0; a < n1; ++a) {
      const double v1 = lo1 + (hi1 - lo1) * a / (n1 - 1);
      std::vector<double> lj(n2);
      for (int b = 0; b < n2; ++b) {
        const double v2 = lo2 + (hi2 - lo2) * b / (n2 - 1);
        const double t1 = std::exp(v1), t2 = std::exp(v2);
        lj[b] = 0.5 * logdet_marg(t1, t2) - 0.5 * q1 / t1 - 0.5 * q2 / t2 + ig(t1) + v1 + ig(t2) + v2;
      }
      const double m = *std::max_element(lj.begin(), lj.end());
      double sum = 0.0;
      for (double v : lj) sum += std::exp(v - m);
      logm[a] = m + std::log(sum);
    }
    const double mm = *std::max_element(logm.begin(), logm.end());
    std::vector<double> cdf(n1, 0.0);
    for (int a = 1; a < n1; ++a) cdf[a] = cdf[a - 1] + 0.5 * (std::exp(logm[a] - mm) + std::exp(logm[a - 1] - mm));
    for (auto& c : cdf) c /= cdf.back();
    auto F = [&](double v) {
      const double pos = (v - lo1) / (hi1 - lo1) * (n1 - 1);
      const int a = std::clamp(static_cast<int>(pos), 0, n1 - 2);
      return cdf[a] + (pos - a) * (cdf[a + 1] - cdf[a]);
    };
    CHECK(ks_statistic(draws, F) < 0.02);
  }

  TEST_CASE("Gaussian mean block is accepted exactly and conjugate moments hold") {
    const int n = 50;
    const auto data = gaussian_scalar(n, 21);
    ModelSpec s;
    s.families = data.families();
    s.finalize();
    const auto d = build_design(data, s, {});
    const auto init = backfit_init(d, s.backfit);
    SamplerConfig cfg;
    cfg.burnin = 500;
    cfg.draws = 5000;
    cfg.thin = 1;
    cfg.chains = 2;
    cfg.seed = 9;
    const auto smp = mcmc_sample(d, init.state, cfg);
    for (double a : smp.acceptance.at(beta_block_name(d, 0))) CHECK(a > 0.999);

    const double ybar = d.y[0].mean();
    const double s2 = (d.y[0].array() - ybar).square().sum() / (n - 1);
    const double e_log_sd = 0.5 * (std::log((n - 1) * s2 / 2) - boost::math::digamma((n - 1) / 2.0));
    const VectorXd mu = smp.block(beta_block_name(d, 0)).draws.col(0);
    const VectorXd lsd = smp.block(beta_block_name(d, 1)).draws.col(0);
    CHECK(std::abs(mu.mean() - ybar) < 3 * mcse(mu));
    CHECK(std::abs(lsd.mean() - e_log_sd) < 3 * mcse(lsd));
    // Posterior variance of the mean: s^2 / n * (n - 1) / (n - 3).
    const double var_mu = (mu.array() - mu.mean()).square().sum() / (mu.size() - 1);
    CHECK(var_mu == doctest::Approx(s2 / n * (n - 1.0) / (n - 3.0)).epsilon(0.1));
    CHECK(rhat(smp, beta_block_name(d, 0))[0] < 1.05);
  }

  TEST_CASE("backfitting: Poisson intercept is the log mean") {
    std::mt19937_64 rng(4);
    std::poisson_distribution<int> pois(3.7);
    std::vector<Observation> obs;
    for (long i = 1; i <= 200; ++i) obs.push_back({0, i, std::nullopt, 0.25, double(pois(rng))});
    const Dataset data({Family(FamilyKind::Poisson)}, Domain{}, obs);
    ModelSpec s;
    s.families = data.families();
    s.finalize();
    const auto d = build_design(data, s, {});
    const auto res = backfit_init(d, s.backfit);
    CHECK(res.converged);
    CHECK(res.state.beta[0][0] == doctest::Approx(std::log(d.y[0].mean())).epsilon(1e-6));
  }

  TEST_CASE("backfitting: Gaussian smooth satisfies penalised least squares") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n01;
    std::vector<Observation> obs;
    for (long i = 1; i <= 30; ++i)
      for (int g = 0; g <= 100; g += 5) obs.push_back({0, i, std::nullopt, g / 100.0, std::sin(6 * g / 100.0) + 0.2 * n01(rng)});
    const Dataset data({Family(FamilyKind::Gaussian)}, Domain{}, obs);
    ModelSpec s;
    s.families = data.families();
    TermSpec fi{TermKind::FunctionalIntercept};
    s.predictors = {{0, 0, {fi}}};
    s.backfit.tol = 1e-10;
    s.backfit.max_cycles = 200;
    s.finalize();
    const auto d = build_design(data, s, {});
    const auto res = backfit_init(d, s.backfit);
    CHECK(res.converged);
    const auto& X = d.terms[0].X;
    const VectorXd& beta = res.state.beta[0];
    const double w = std::exp(-2 * res.state.beta[1][0]);
    const MatrixXd Q = d.terms[0].P[0] / res.state.tau2[0][0];
    const VectorXd resid = w * X.transpose() * (d.y[0] - X * beta) - Q * beta;
    CHECK(resid.norm() < 1e-6 * (w * X.transpose() * d.y[0]).norm());
    // Residual sd estimate agrees with the noise level.
    CHECK(std::exp(res.state.beta[1][0]) == doctest::Approx(0.2).epsilon(0.1));
  }

  TEST_CASE("row order does not change the fit") {
    const auto s = small_spec();
    const auto b = small_basis();
    const auto d1 = build_design(small_bivariate(10), s, {b});
    const auto d2 = build_design(small_bivariate(10, true), s, {b});
    const auto st = random_state(d1, 3);
    CHECK(log_posterior(d1, st) == doctest::Approx(log_posterior(d2, st)).epsilon(1e-13));
    const auto r1 = backfit_init(d1, s.backfit), r2 = backfit_init(d2, s.backfit);
    for (size_t j = 0; j < r1.state.beta.size(); ++j)
      CHECK((r1.state.beta[j] - r2.state.beta[j]).cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("sampling is reproducible and independent of threads") {
    const auto s = small_spec();
    const auto d = build_design(small_bivariate(11), s, {small_basis()});
    const auto init = backfit_init(d, s.backfit).state;
    SamplerConfig cfg;
    cfg.burnin = 20;
    cfg.draws = 30;
    cfg.thin = 2;
    cfg.chains = 2;
    cfg.seed = 77;
    const auto a = mcmc_sample(d, init, cfg);
    cfg.threads = 2;
    const auto b = mcmc_sample(d, init, cfg);
    REQUIRE(a.blocks.size() == b.blocks.size());
    for (size_t i = 0; i < a.blocks.size(); ++i) CHECK(a.blocks[i].draws == b.blocks[i].draws);
    CHECK(a.chain_seeds[0] == chain_seed(77, 0));
    CHECK(chain_seed(77, 0) != chain_seed(77, 1));
    CHECK(chain_seed(77, 1) != chain_seed(78, 1));

    const auto dir = std::filesystem::temp_directory_path() / "mfam_unit" / "samples";
    std::filesystem::remove_all(dir);
    a.write(dir);
    const auto r = PosteriorSamples::read(dir);
    CHECK(r.chains == 2);
    CHECK(r.draws_per_chain == 30);
    CHECK(r.chain_seeds == a.chain_seeds);
    for (size_t i = 0; i < a.blocks.size(); ++i) {
      CHECK(r.blocks[i].name == a.blocks[i].name);
      CHECK((r.blocks[i].draws - a.blocks[i].draws).cwiseAbs().maxCoeff() <=
            1e-15 * (1.0 + a.blocks[i].draws.cwiseAbs().maxCoeff()));
    }
  }

  TEST_CASE("prediction: Jensen ordering, quantile order, unknown units") {
    const auto s = small_spec();
    const auto d = build_design(small_bivariate(12), s, {small_basis()});
    const auto init = backfit_init(d, s.backfit).state;
    SamplerConfig cfg;
    cfg.burnin = 50;
    cfg.draws = 100;
    cfg.thin = 1;
    const auto smp = mcmc_sample(d, init, cfg);
    std::vector<NewPoint> pts;
    for (int k = 0; k < 2; ++k)
      for (double t : {0.0, 0.33, 0.9}) pts.push_back({k, CurveKey{4, std::nullopt}, t});
    const auto pd = build_prediction_design(d, pts, d.covariates);
    const auto pr = predict(d, smp, pd, {0.05, 0.5, 0.95}, init);
    for (size_t i = 0; i < pts.size(); ++i) {
      if (pts[i].dim == 0) {
        CHECK(std::isnan(pr.theta_mean(i, 1)));
        CHECK(pr.theta_mean(i, 0) >= std::exp(pr.eta_mean(i, 0)));
      } else {
        CHECK(pr.theta_mean(i, 0) == doctest::Approx(pr.eta_mean(i, 0)));
        CHECK(pr.theta_mean(i, 1) >= std::exp(pr.eta_mean(i, 1)));
      }
      const int R = pts[i].dim == 0 ? 1 : 2;
      for (int r = 0; r < R; ++r) {
        CHECK(pr.theta_q[0](i, r) <= pr.theta_q[1](i, r));
        CHECK(pr.theta_q[1](i, r) <= pr.theta_q[2](i, r));
      }
    }
    // Eta at the observed rows agrees with the model predictor.
    std::vector<NewPoint> obs_pts;
    for (int i = 0; i < d.n_rows(1); ++i) obs_pts.push_back({1, d.curve[1][i], d.t[1][i]});
    const auto st = state_at_draw(d, smp, 17, init);
    const MatrixXd e1 = predict_eta(d, build_prediction_design(d, obs_pts, d.covariates), st);
    const auto eta = compute_eta(d, st);
    CHECK((e1.leftCols(2) - eta[1]).cwiseAbs().maxCoeff() < 1e-10);

    std::vector<NewPoint> bad{{0, CurveKey{999, std::nullopt}, 0.5}};
    CovariateTable cov({"x", "z"});
    cov.set({999, std::nullopt}, {0.0, 1.0});
    CHECK_THROWS_AS(build_prediction_design(d, bad, cov), ArgumentError);
  }

  TEST_CASE("term curves and quantiles") {
    CHECK(empirical_quantile({3, 1, 2}, 0.5) == 2);
    CHECK(empirical_quantile({1, 2, 3, 4}, 0.25) == doctest::Approx(1.75));
    CHECK_THROWS_AS(empirical_quantile({}, 0.5), ArgumentError);
    const auto s = small_spec();
    const auto d = build_design(small_bivariate(13), s, {small_basis()});
    SamplerConfig cfg;
    cfg.burnin = 5;
    cfg.draws = 10;
    cfg.thin = 1;
    const auto smp = mcmc_sample(d, backfit_init(d, s.backfit).state, cfg);
    const auto times = unit_grid(11);
    const MatrixXd c = term_curve_draws(d, smp, 1, times);
    CHECK(c.rows() == 10);
    CHECK(c.cols() == 11);
    const MatrixXd B = bspline_design(d.terms[1].basis_t, times);
    CHECK((c.row(3).transpose() - B * smp.block(beta_block_name(d, 1)).draws.row(3).transpose()).norm() < 1e-12);
  }
}
