#include "mfam/gfpca.hpp"

#include "mfam/csv.hpp"
#include "mfam/error.hpp"
#include "mfam/fitter.hpp"

#include <Eigen/Eigenvalues>
#include <boost/math/tools/minima.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace mfam {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

BinSpec BinSpec::equidistant(int n, double halfwidth, const Domain& domain) {
  if (n < 1) throw ArgumentError("BinSpec: need at least one bin");
  if (!(halfwidth >= 0)) throw ArgumentError("BinSpec: halfwidth must be nonnegative");
  BinSpec b;
  b.halfwidth = halfwidth;
  b.domain = domain;
  if (domain.cyclic) {
    for (int j = 0; j < n; ++j) b.centers.push_back(domain.lo + domain.length() * j / n);
  } else {
    b.centers = n == 1 ? std::vector<double>{0.5 * (domain.lo + domain.hi)} : equidistant_grid(domain.lo, domain.hi, n);
  }
  return b;
}

double BinSpec::distance(double t, int bin) const {
  const double d = std::abs(t - centers[bin]);
  if (!domain.cyclic) return d;
  const double L = domain.length();
  const double r = std::fmod(d, L);
  return std::min(r, L - r);
}

BinnedData bin_data(const std::vector<Observation>& obs, const BinSpec& bins) {
  if (!std::is_sorted(bins.centers.begin(), bins.centers.end())) throw ArgumentError("bin_data: centers not sorted");
  BinnedData out;
  out.members.resize(bins.size());
  // A tiny slack keeps grid points on the bin boundary inside.
  const double tol = 1e-9 * std::max(1.0, bins.domain.length());
  for (size_t i = 0; i < obs.size(); ++i) {
    bool any = false;
    for (int s = 0; s < bins.size(); ++s)
      if (bins.distance(obs[i].t, s) <= bins.halfwidth + tol) {
        out.members[s].push_back(static_cast<int>(i));
        any = true;
      }
    if (!any) throw ArgumentError("bin_data: observation at t=" + fmt(obs[i].t) + " falls in no bin");
  }
  for (int s = 0; s < bins.size(); ++s)
    if (out.members[s].empty()) out.warnings.push_back("bin " + std::to_string(s + 1) + " is empty");
  return out;
}

namespace {

// Working problem of one local mixed model.
struct LocalProblem {
  const Family& family;
  VectorXd y;
  MatrixXd X, S;  // fixed parts of the two predictors
  std::vector<int> uidx, cidx;
  int Ju = 0, Jc = 0;

  VectorXd beta, b, gamma;

  int p() const { return static_cast<int>(X.cols()); }
  int J() const { return Ju + Jc; }
  int R() const { return family.n_params(); }

  ParamTuple eta(int i) const {
    double e1 = X.row(i).dot(beta) + b[uidx[i]];
    if (Jc) e1 += b[Ju + cidx[i]];
    return {e1, R() > 1 ? S.row(i).dot(gamma) : 0.0};
  }

  double loglik() const {
    double ll = 0.0;
    for (int i = 0; i < y.size(); ++i) ll += loglik_eta(family, y[i], eta(i));
    return ll;
  }

  double penalty(double vu, double vc) const {
    return 0.5 * b.head(Ju).squaredNorm() / vu + (Jc ? 0.5 * b.tail(Jc).squaredNorm() / vc : 0.0);
  }

  // Joint Newton step on (beta, b) with step halving. Returns the Hessian
  // of the negative penalised objective at the start point.
  MatrixXd newton_location(double vu, double vc) {
    const int P = p(), D = P + J();
    MatrixXd H = MatrixXd::Zero(D, D);
    VectorXd g = VectorXd::Zero(D);
    for (int i = 0; i < y.size(); ++i) {
      const auto d = param_derivative(family, y[i], eta(i), 0);
      const double w = std::max(-d.hess, 1e-10);
      int idx[2] = {P + uidx[i], Jc ? P + Ju + cidx[i] : -1};
      const auto xi = X.row(i);
      H.topLeftCorner(P, P).noalias() += w * xi.transpose() * xi;
      g.head(P) += d.score * xi.transpose();
      for (int a : idx) {
        if (a < 0) continue;
        g[a] += d.score;
        H.block(0, a, P, 1) += w * xi.transpose();
        for (int c : idx)
          if (c >= 0) H(a, c) += w;
      }
    }
    for (int a = 0; a < P; ++a)
      for (int c = 0; c < J(); ++c) H(P + c, a) = H(a, P + c);
    for (int u = 0; u < Ju; ++u) {
      H(P + u, P + u) += 1.0 / vu;
      g[P + u] -= b[u] / vu;
    }
    for (int c = 0; c < Jc; ++c) {
      H(P + Ju + c, P + Ju + c) += 1.0 / vc;
      g[P + Ju + c] -= b[Ju + c] / vc;
    }
    MatrixXd Hr = H;
    Hr.diagonal().head(P).array() += 1e-8;
    const VectorXd delta = Hr.ldlt().solve(g);
    const VectorXd beta0 = beta, b0 = b;
    const double f0 = loglik() - penalty(vu, vc);
    double step = 1.0;
    for (int h = 0; h < 30; ++h, step *= 0.5) {
      beta = beta0 + step * delta.head(P);
      b = b0 + step * delta.tail(J());
      const double f = loglik() - penalty(vu, vc);
      if (std::isfinite(f) && f >= f0 - 1e-12 * std::abs(f0)) return H;
    }
    beta = beta0;
    b = b0;
    return H;
  }

  void newton_scale() {
    if (R() < 2) return;
    const int Q = static_cast<int>(S.cols());
    MatrixXd H = MatrixXd::Zero(Q, Q);
    VectorXd g = VectorXd::Zero(Q);
    for (int i = 0; i < y.size(); ++i) {
      const auto d = param_derivative(family, y[i], eta(i), 1);
      const auto si = S.row(i);
      H.noalias() += std::max(-d.hess, 1e-10) * si.transpose() * si;
      g += d.score * si.transpose();
    }
    H.diagonal().array() += 1e-8;
    const VectorXd delta = H.ldlt().solve(g);
    const VectorXd g0 = gamma;
    const double f0 = loglik();
    double step = 1.0;
    for (int h = 0; h < 30; ++h, step *= 0.5) {
      gamma = g0 + step * delta;
      const double f = loglik();
      if (std::isfinite(f) && f >= f0 - 1e-12 * std::abs(f0)) return;
    }
    gamma = g0;
  }

  // Mode given the variances; returns the Laplace marginal log-likelihood.
  double laplace(double vu, double vc, const LocalModelConfig& cfg, bool& converged) {
    double f_old = -std::numeric_limits<double>::infinity();
    MatrixXd H;
    converged = false;
    for (int it = 0; it < cfg.max_iter; ++it) {
      H = newton_location(vu, vc);
      newton_scale();
      const double f = loglik() - penalty(vu, vc);
      if (std::abs(f - f_old) < cfg.tol * (1.0 + std::abs(f))) {
        converged = true;
        break;
      }
      f_old = f;
    }
    H = newton_location(vu, vc);
    const MatrixXd Hbb = H.bottomRightCorner(J(), J());
    Eigen::LLT<MatrixXd> llt(Hbb);
    const MatrixXd L = llt.matrixL();
    const double logdet = 2.0 * L.diagonal().array().log().sum();
    return loglik() - penalty(vu, vc) - 0.5 * Ju * std::log(vu) - (Jc ? 0.5 * Jc * std::log(vc) : 0.0) -
           0.5 * logdet;
  }
};

}  // namespace

namespace {

// Random intercepts as a latent process with one constant basis function.
EigenBasis intercept_basis(const std::string& level, const Domain& domain) {
  EigenBasis b;
  b.level = level;
  b.domain = domain;
  b.grid = {domain.lo, domain.hi};
  b.K = 1;
  b.psi = MatrixXd::Ones(1, 2);
  b.nu = VectorXd::Ones(1);
  b.weights = VectorXd::Ones(1);
  return b;
}

void sample_local_model(const std::vector<Observation>& obs, const Family& family, const CovariateTable& covariates,
                        const LocalModelSpec& spec, const LocalModelConfig& cfg, LocalFit& fit) {
  double lo = obs.front().t, hi = lo;
  std::vector<Observation> rows;
  for (const auto& o : obs) {
    lo = std::min(lo, o.t);
    hi = std::max(hi, o.t);
    auto c = o;
    c.dim = 0;
    if (spec.levels == 1) c.group.reset();
    rows.push_back(c);
  }
  const Domain domain{lo, hi > lo ? hi : lo + 1.0, false};
  const Dataset data({family}, domain, std::move(rows), covariates, spec.levels == 2 ? 1 : 0);

  ModelSpec ms;
  ms.families = {family};
  ms.domain = domain;
  ms.sampler = cfg.sampler;
  PredictorSpec loc{0, 0, {TermSpec{}}};
  for (const auto& c : spec.covariates) {
    TermSpec t;
    t.covariate = c;
    loc.terms.push_back(t);
  }
  std::vector<EigenBasis> bases = {intercept_basis("unit", domain)};
  ms.latent.push_back({"unit", LatentLevel::Unit, "unit", std::nullopt});
  if (spec.levels == 2) {
    bases.push_back(intercept_basis("curve", domain));
    ms.latent.push_back({"curve", LatentLevel::Curve, "curve", std::nullopt});
  }
  for (const auto& l : ms.latent) {
    TermSpec t{TermKind::MfpcRandom};
    t.latent = l.name;
    loc.terms.push_back(t);
  }
  ms.predictors.push_back(loc);
  if (family.n_params() > 1) {
    PredictorSpec sc{0, 1, {TermSpec{}}};
    for (const auto& c : spec.scale_covariates) {
      TermSpec t;
      t.covariate = c;
      sc.terms.push_back(t);
    }
    ms.predictors.push_back(sc);
  }
  ms.finalize();
  const auto design = build_design(data, ms, bases);
  const auto init = backfit_init(design, ms.backfit);
  const auto samples = mcmc_sample(design, init.state, ms.sampler);
  const auto pm = posterior_mean_state(design, samples, init.state);

  const auto& lu = design.latents[0];
  fit.b_unit = VectorXd::Zero(static_cast<Eigen::Index>(fit.units.size()));
  for (size_t a = 0; a < fit.units.size(); ++a) fit.b_unit[a] = pm.scores[0](lu.entity_index(fit.units[a]), 0);
  fit.var_unit = pm.nu[0][0];
  if (spec.levels == 2) {
    const auto& lc = design.latents[1];
    fit.b_curve = VectorXd::Zero(static_cast<Eigen::Index>(fit.curves.size()));
    for (size_t c = 0; c < fit.curves.size(); ++c) fit.b_curve[c] = pm.scores[1](lc.entity_index(fit.curves[c]), 0);
    fit.var_curve = pm.nu[1][0];
  }
  const int nf = 1 + static_cast<int>(spec.covariates.size());
  fit.fixed.resize(nf);
  for (int j = 0; j < nf; ++j) fit.fixed[j] = pm.beta[j][0];
  if (family.n_params() > 1) {
    const int ns = 1 + static_cast<int>(spec.scale_covariates.size());
    fit.scale_fixed.resize(ns);
    for (int j = 0; j < ns; ++j) fit.scale_fixed[j] = pm.beta[nf + j][0];
  }
  fit.converged = true;
}

}  // namespace

LocalFit fit_local_mixed_model(const std::vector<Observation>& obs, const Family& family,
                               const CovariateTable& covariates, const LocalModelSpec& spec,
                               const LocalModelConfig& cfg) {
  if (spec.levels != 1 && spec.levels != 2) throw ArgumentError("local model: levels must be 1 or 2");
  std::set<CurveKey> units, curves;
  for (const auto& o : obs) {
    units.insert({o.unit, std::nullopt});
    curves.insert({o.unit, o.group});
  }
  if (units.size() < 2) throw DegenerateError("local model: fewer than two units with data");
  LocalFit fit;
  fit.units.assign(units.begin(), units.end());
  if (spec.levels == 2) fit.curves.assign(curves.begin(), curves.end());
  if (cfg.sample) {
    sample_local_model(obs, family, covariates, spec, cfg, fit);
    return fit;
  }

  LocalProblem pr{family};
  const auto n = static_cast<Eigen::Index>(obs.size());
  pr.y.resize(n);
  pr.X.resize(n, 1 + static_cast<Eigen::Index>(spec.covariates.size()));
  pr.S.resize(n, 1 + static_cast<Eigen::Index>(spec.scale_covariates.size()));
  pr.Ju = static_cast<int>(fit.units.size());
  pr.Jc = static_cast<int>(fit.curves.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& o = obs[i];
    const CurveKey key{o.unit, o.group};
    pr.y[i] = o.y;
    pr.X(i, 0) = 1.0;
    for (size_t c = 0; c < spec.covariates.size(); ++c) pr.X(i, c + 1) = covariates.value(key, spec.covariates[c]);
    pr.S(i, 0) = 1.0;
    for (size_t c = 0; c < spec.scale_covariates.size(); ++c)
      pr.S(i, c + 1) = covariates.value(key, spec.scale_covariates[c]);
    pr.uidx.push_back(static_cast<int>(std::lower_bound(fit.units.begin(), fit.units.end(), CurveKey{o.unit, std::nullopt}) -
                                       fit.units.begin()));
    pr.cidx.push_back(pr.Jc ? static_cast<int>(std::lower_bound(fit.curves.begin(), fit.curves.end(), key) - fit.curves.begin())
                            : 0);
  }
  if (family.n_params() < 2) pr.S.resize(n, 0);
  pr.beta = VectorXd::Zero(pr.X.cols());
  pr.gamma = VectorXd::Zero(pr.S.cols());
  pr.b = VectorXd::Zero(pr.J());
  std::vector<double> yv(pr.y.data(), pr.y.data() + n);
  pr.beta[0] = moment_start(family, 0, yv);
  if (family.n_params() > 1) pr.gamma[0] = moment_start(family, 1, yv);

  double lvu = 0.0, lvc = 0.0;
  bool conv = true;
  auto objective_u = [&](double lv) {
    bool c = true;
    const double v = -pr.laplace(std::exp(lv), std::exp(lvc), cfg, c);
    return std::isfinite(v) ? v : std::numeric_limits<double>::max();
  };
  auto objective_c = [&](double lv) {
    bool c = true;
    const double v = -pr.laplace(std::exp(lvu), std::exp(lv), cfg, c);
    return std::isfinite(v) ? v : std::numeric_limits<double>::max();
  };
  const int sweeps = pr.Jc ? cfg.variance_sweeps : 1;
  for (int sw = 0; sw < sweeps; ++sw) {
    std::uintmax_t iters = 100;
    lvu = boost::math::tools::brent_find_minima(objective_u, cfg.log_var_lo, cfg.log_var_hi, 30, iters).first;
    if (pr.Jc) {
      iters = 100;
      lvc = boost::math::tools::brent_find_minima(objective_c, cfg.log_var_lo, cfg.log_var_hi, 30, iters).first;
    }
  }
  pr.laplace(std::exp(lvu), std::exp(lvc), cfg, conv);
  fit.converged = conv;
  fit.var_unit = std::exp(lvu);
  fit.var_curve = pr.Jc ? std::exp(lvc) : 0.0;
  fit.b_unit = pr.b.head(pr.Ju);
  fit.b_curve = pr.b.tail(pr.Jc);
  fit.fixed = pr.beta;
  fit.scale_fixed = pr.gamma;
  return fit;
}

EigenBasis UnivariateFPCA::as_basis() const {
  EigenBasis b;
  b.level = level;
  b.domain = domain;
  b.grid = grid;
  b.K = 1;
  b.psi = phi;
  b.nu = upsilon;
  b.weights = VectorXd::Ones(1);
  return b;
}

Eigen::MatrixXd pairwise_covariance(const Eigen::MatrixXd& values) {
  const auto n = values.rows(), S = values.cols();
  VectorXd mean(S);
  for (Eigen::Index s = 0; s < S; ++s) {
    double sum = 0.0;
    int cnt = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (std::isfinite(values(i, s))) {
        sum += values(i, s);
        ++cnt;
      }
    mean[s] = cnt ? sum / cnt : kNaN;
  }
  MatrixXd C(S, S);
  for (Eigen::Index a = 0; a < S; ++a)
    for (Eigen::Index b = a; b < S; ++b) {
      double sum = 0.0;
      int cnt = 0;
      for (Eigen::Index i = 0; i < n; ++i)
        if (std::isfinite(values(i, a)) && std::isfinite(values(i, b))) {
          sum += (values(i, a) - mean[a]) * (values(i, b) - mean[b]);
          ++cnt;
        }
      C(a, b) = C(b, a) = cnt > 1 ? sum / (cnt - 1) : kNaN;
    }
  return C;
}

UnivariateFPCA covariance_fpca(const Eigen::MatrixXd& cov, const std::vector<double>& centers, const Domain& domain,
                               double pve, const SmoothingConfig& sm) {
  const int S = static_cast<int>(centers.size());
  if (S < 3 || cov.rows() != S || cov.cols() != S) throw ArgumentError("covariance_fpca: need at least 3 bins");
  if (!(pve > 0 && pve <= 1)) throw ArgumentError("covariance_fpca: pve must lie in (0, 1]");
  const BSplineSpec spec{BSplineSpec::knots_for_size(sm.n_basis, sm.degree, domain.cyclic), sm.degree, domain};
  const MatrixXd B = bspline_design(spec, centers);
  const int d = static_cast<int>(B.cols());
  // Symmetric coefficient matrix Theta parameterised by its upper triangle.
  std::vector<std::pair<int, int>> par;
  for (int a = 0; a < d; ++a)
    for (int b = a; b < d; ++b) par.push_back({a, b});
  const int np = static_cast<int>(par.size());
  MatrixXd E = MatrixXd::Zero(d * d, np);
  for (int q = 0; q < np; ++q) {
    E(par[q].first * d + par[q].second, q) = 1.0;
    E(par[q].second * d + par[q].first, q) = 1.0;
  }
  std::vector<std::array<int, 2>> pairs;
  for (int s = 0; s < S; ++s)
    for (int s2 = s + 1; s2 < S; ++s2)
      if (std::isfinite(cov(s, s2))) pairs.push_back({s, s2});
  const int N = static_cast<int>(pairs.size());
  if (N < 3) throw DegenerateError("covariance_fpca: too few covariance entries");
  MatrixXd Xf(N, d * d);
  VectorXd yv(N);
  for (int r = 0; r < N; ++r) {
    const auto [s, s2] = pairs[r];
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b) Xf(r, a * d + b) = B(s, a) * B(s2, b);
    yv[r] = cov(s, s2);
  }
  if (yv.cwiseAbs().maxCoeff() == 0.0 && cov.diagonal().cwiseAbs().maxCoeff() == 0.0)
    throw DegenerateError("covariance_fpca: zero variance");
  const MatrixXd X = Xf * E;
  const MatrixXd P1 = domain.cyclic ? cyclic_difference_penalty(d, sm.order) : difference_penalty(d, sm.order);
  const MatrixXd Pf = kron(P1, MatrixXd::Identity(d, d)) + kron(MatrixXd::Identity(d, d), P1);
  const MatrixXd P = E.transpose() * Pf * E;
  const MatrixXd XtX = X.transpose() * X;
  const VectorXd Xty = X.transpose() * yv;
  const double scale = std::max(XtX.trace() / np, 1e-300);

  double best_gcv = std::numeric_limits<double>::infinity();
  VectorXd theta;
  for (int g = 0; g <= 64; ++g) {
    const double lambda = scale * std::pow(10.0, -8.0 + 0.25 * g);
    MatrixXd A = XtX + lambda * P;
    A.diagonal().array() += 1e-10 * scale;
    Eigen::LDLT<MatrixXd> ldlt(A);
    const VectorXd th = ldlt.solve(Xty);
    const double edf = ldlt.solve(XtX).trace();
    if (N - edf <= 0.5) continue;
    const double rss = (yv - X * th).squaredNorm();
    const double gcv = N * rss / ((N - edf) * (N - edf));
    if (gcv < best_gcv) {
      best_gcv = gcv;
      theta = th;
    }
  }
  if (theta.size() == 0) throw DegenerateError("covariance_fpca: smoothing failed");
  const VectorXd full = E * theta;
  const MatrixXd Theta = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(full.data(), d, d);

  UnivariateFPCA f;
  f.domain = domain;
  f.pve = pve;
  const int G = sm.output_points;
  if (domain.cyclic) {
    for (int j = 0; j < G; ++j) f.grid.push_back(domain.lo + domain.length() * j / G);
  } else {
    f.grid = equidistant_grid(domain.lo, domain.hi, G);
  }
  const MatrixXd Bg = bspline_design(spec, f.grid);
  const MatrixXd Kg = Bg * Theta * Bg.transpose();
  const VectorXd w = quadrature_weights(f.grid, domain);
  const VectorXd sw = w.cwiseSqrt();
  const MatrixXd Kw = sw.asDiagonal() * Kg * sw.asDiagonal();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (Kw + Kw.transpose()));
  const VectorXd ev = es.eigenvalues().reverse().cwiseMax(0.0);
  const MatrixXd V = es.eigenvectors().rowwise().reverse();
  const double total = ev.sum();
  if (!(total > 1e-14 * std::max(1.0, Kw.diagonal().cwiseAbs().sum()))) throw DegenerateError("covariance_fpca: zero variance");
  int M = 0;
  double cum = 0.0;
  while (M < G) {
    cum += ev[M++];
    if (cum / total >= pve - 1e-12) break;
  }
  while (M > 0 && ev[M - 1] <= 0.0) --M;
  f.eigenvalues = ev.head((ev.array() > 0).count());
  f.upsilon = ev.head(M);
  f.phi.resize(M, G);
  for (int m = 0; m < M; ++m) f.phi.row(m) = V.col(m).cwiseQuotient(sw).transpose();
  normalize_signs(f.phi);
  return f;
}

namespace {

// Quadrature projection of rows (missing entries as zero) onto phi at the
// bin centers.
MatrixXd project_rows(const MatrixXd& centred, const std::vector<double>& centers, const UnivariateFPCA& f) {
  const VectorXd w = quadrature_weights(centers, f.domain);
  const EigenBasis b = f.as_basis();
  const MatrixXd Pc = evaluate_eigenbasis(b, 0, centers);  // S x M
  MatrixXd X = centred;
  for (Eigen::Index i = 0; i < X.size(); ++i)
    if (!std::isfinite(X.data()[i])) X.data()[i] = 0.0;
  return X * w.asDiagonal() * Pc;
}

MatrixXd centre_columns(const MatrixXd& v) {
  MatrixXd out = v;
  for (Eigen::Index s = 0; s < v.cols(); ++s) {
    double sum = 0.0;
    int cnt = 0;
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      if (std::isfinite(v(i, s))) {
        sum += v(i, s);
        ++cnt;
      }
    if (cnt) out.col(s).array() -= sum / cnt;
  }
  return out;
}

}  // namespace

UnivariateFPCA fast_covariance_fpca(const LatentMatrix& latent, const std::vector<double>& centers,
                                    const Domain& domain, double pve, const SmoothingConfig& smoothing) {
  if (latent.values.rows() < 3 || latent.values.cols() < 3)
    throw ArgumentError("fast_covariance_fpca: need at least 3 rows and 3 bins");
  if (static_cast<int>(centers.size()) != latent.values.cols())
    throw ArgumentError("fast_covariance_fpca: bin count mismatch");
  auto f = covariance_fpca(pairwise_covariance(latent.values), centers, domain, pve, smoothing);
  f.level = latent.level;
  f.keys = latent.keys;
  f.scores = project_rows(centre_columns(latent.values), centers, f);
  return f;
}

MultilevelSplit multilevel_split(const LatentMatrix& curve_level) {
  const auto& keys = curve_level.keys;
  const MatrixXd& V = curve_level.values;
  const auto S = V.cols();
  std::map<long, std::vector<int>> by_unit;
  for (size_t r = 0; r < keys.size(); ++r) by_unit[keys[r].unit].push_back(static_cast<int>(r));
  if (by_unit.size() < 2) throw DegenerateError("multilevel_split: need at least two units");

  MultilevelSplit out;
  out.between.level = "between";
  out.within.level = "within";
  out.within.keys = keys;
  out.between.values = MatrixXd::Constant(static_cast<Eigen::Index>(by_unit.size()), S, kNaN);
  out.within.values = MatrixXd::Constant(V.rows(), S, kNaN);
  int u = 0;
  for (const auto& [unit, rows] : by_unit) {
    out.between.keys.push_back({unit, std::nullopt});
    for (Eigen::Index s = 0; s < S; ++s) {
      double sum = 0.0;
      int cnt = 0;
      for (int r : rows)
        if (std::isfinite(V(r, s))) {
          sum += V(r, s);
          ++cnt;
        }
      if (!cnt) continue;
      out.between.values(u, s) = sum / cnt;
      for (int r : rows)
        if (std::isfinite(V(r, s))) out.within.values(r, s) = V(r, s) - sum / cnt;
    }
    ++u;
  }

  // Per pair of bins, only curves observed in both enter.
  out.cov_within = MatrixXd::Zero(S, S);
  out.cov_between = MatrixXd::Zero(S, S);
  for (Eigen::Index a = 0; a < S; ++a)
    for (Eigen::Index b = a; b < S; ++b) {
      double num_w = 0.0, den_w = 0.0;
      std::vector<double> ma, mb, inv_j;
      for (const auto& [unit, rows] : by_unit) {
        std::vector<int> both;
        for (int r : rows)
          if (std::isfinite(V(r, a)) && std::isfinite(V(r, b))) both.push_back(r);
        if (both.empty()) continue;
        double sa = 0.0, sb = 0.0;
        for (int r : both) {
          sa += V(r, a);
          sb += V(r, b);
        }
        const double J = static_cast<double>(both.size());
        sa /= J;
        sb /= J;
        for (int r : both) num_w += (V(r, a) - sa) * (V(r, b) - sb);
        den_w += J - 1;
        ma.push_back(sa);
        mb.push_back(sb);
        inv_j.push_back(1.0 / J);
      }
      const double kw = den_w > 0 ? num_w / den_w : 0.0;
      double kb = kNaN;
      if (ma.size() > 1) {
        const double n = static_cast<double>(ma.size());
        double mean_a = 0.0, mean_b = 0.0, mean_inv = 0.0;
        for (size_t i = 0; i < ma.size(); ++i) {
          mean_a += ma[i] / n;
          mean_b += mb[i] / n;
          mean_inv += inv_j[i] / n;
        }
        double c = 0.0;
        for (size_t i = 0; i < ma.size(); ++i) c += (ma[i] - mean_a) * (mb[i] - mean_b);
        kb = c / (n - 1) - mean_inv * kw;
      }
      out.cov_within(a, b) = out.cov_within(b, a) = kw;
      out.cov_between(a, b) = out.cov_between(b, a) = kb;
    }
  return out;
}

void refit_scores(const Dataset& data_dim, const Family& family, std::vector<UnivariateFPCA>& fpcas,
                  const LocalModelSpec& fixed, const RefitConfig& config) {
  if (data_dim.K() != 1) throw ArgumentError("refit_scores: expected a single-dimension dataset");
  if (fpcas.empty()) return;
  ModelSpec spec;
  spec.families = {family};
  spec.domain = data_dim.domain();
  spec.sampler = config.sampler;
  spec.backfit = config.backfit;
  PredictorSpec loc{0, 0, {}};
  TermSpec fi{TermKind::FunctionalIntercept};
  fi.n_basis_t = config.n_basis_t;
  loc.terms.push_back(fi);
  for (const auto& c : fixed.covariates) {
    TermSpec lf = fi;
    lf.kind = TermKind::LinearFunctional;
    lf.covariate = c;
    loc.terms.push_back(lf);
  }
  std::vector<EigenBasis> bases;
  for (size_t l = 0; l < fpcas.size(); ++l) {
    if (fpcas[l].M() == 0) continue;
    TermSpec lat{TermKind::MfpcRandom};
    lat.latent = fpcas[l].level;
    loc.terms.push_back(lat);
    spec.latent.push_back({fpcas[l].level, l == 0 ? LatentLevel::Unit : LatentLevel::Curve, fpcas[l].level, std::nullopt});
    bases.push_back(fpcas[l].as_basis());
  }
  spec.predictors.push_back(loc);
  if (family.n_params() > 1) {
    PredictorSpec sc{0, 1, {TermSpec{}}};
    for (const auto& c : fixed.scale_covariates) {
      TermSpec t{TermKind::Constant};
      t.covariate = c;
      sc.terms.push_back(t);
    }
    spec.predictors.push_back(sc);
  }
  spec.finalize();
  const auto design = build_design(data_dim, spec, bases);
  const auto init = backfit_init(design, spec.backfit);
  ModelState est = init.state;
  if (config.sample) {
    auto sc = config.sampler;
    sc.store_scores = true;
    const auto samples = mcmc_sample(design, init.state, sc);
    est = posterior_mean_state(design, samples, init.state);
  }
  for (size_t u = 0; u < design.latents.size(); ++u) {
    const auto& ld = design.latents[u];
    for (auto& f : fpcas) {
      if (f.level != ld.spec.name) continue;
      f.keys = ld.entities;
      f.scores = MatrixXd::Zero(ld.J(), f.M());
      f.scores.leftCols(ld.M()) = est.scores[u];
    }
  }
}

namespace {

std::vector<std::string> read_strings(const json& j, const char* key, const std::vector<std::string>& dflt) {
  if (!j.contains(key)) return dflt;
  try {
    return j.at(key).get<std::vector<std::string>>();
  } catch (const json::exception&) {
    throw SchemaError(std::string("/gfpca/") + key + ": expected a list of names");
  }
}

template <class T>
void read_value(const json& j, const char* key, T& out, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw SchemaError(path + "/" + key + ": wrong type");
  }
}

// Fills unusable bin columns by linear interpolation between the nearest
// usable neighbours (wrapping on cyclic domains).
void impute_columns(MatrixXd& values, const std::vector<bool>& ok, const std::vector<double>& centers,
                    const Domain& domain) {
  const int S = static_cast<int>(ok.size());
  std::vector<int> good;
  for (int s = 0; s < S; ++s)
    if (ok[s]) good.push_back(s);
  if (good.size() < 2) throw DegenerateError("gfpca: fewer than two usable bins");
  for (int s = 0; s < S; ++s) {
    if (ok[s]) continue;
    int left = -1, right = -1;
    for (int g : good) {
      if (g < s) left = g;
      if (g > s && right < 0) right = g;
    }
    double tl = 0, tr = 0;
    if (domain.cyclic) {
      if (left < 0) {
        left = good.back();
        tl = centers[left] - domain.length();
      } else {
        tl = centers[left];
      }
      if (right < 0) {
        right = good.front();
        tr = centers[right] + domain.length();
      } else {
        tr = centers[right];
      }
    } else {
      if (left < 0) left = right;
      if (right < 0) right = left;
      tl = centers[left];
      tr = centers[right];
    }
    const double a = tr > tl ? (centers[s] - tl) / (tr - tl) : 0.0;
    values.col(s) = (1 - a) * values.col(left) + a * values.col(right);
  }
}

}  // namespace

GfpcaConfig gfpca_config_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("/gfpca: expected an object");
  GfpcaConfig c;
  read_value(j, "n_bins", c.n_bins, "/gfpca");
  read_value(j, "halfwidth", c.halfwidth, "/gfpca");
  read_value(j, "pve", c.pve, "/gfpca");
  c.local.covariates = read_strings(j, "covariates", c.local.covariates);
  c.local.scale_covariates = read_strings(j, "scale_covariates", c.local.scale_covariates);
  read_value(j, "levels", c.local.levels, "/gfpca");
  read_value(j, "unit_level", c.unit_level, "/gfpca");
  read_value(j, "curve_level", c.curve_level, "/gfpca");
  if (j.contains("smoothing")) {
    const auto& s = j["smoothing"];
    read_value(s, "n_basis", c.smoothing.n_basis, "/gfpca/smoothing");
    read_value(s, "degree", c.smoothing.degree, "/gfpca/smoothing");
    read_value(s, "order", c.smoothing.order, "/gfpca/smoothing");
    read_value(s, "output_points", c.smoothing.output_points, "/gfpca/smoothing");
  }
  if (j.contains("local")) {
    const auto& s = j["local"];
    read_value(s, "max_iter", c.local_config.max_iter, "/gfpca/local");
    read_value(s, "tol", c.local_config.tol, "/gfpca/local");
    if (s.contains("method")) {
      const auto m = s["method"].is_string() ? s["method"].get<std::string>() : std::string();
      if (m != "laplace" && m != "mcmc") throw SchemaError("/gfpca/local/method: expected 'laplace' or 'mcmc'");
      c.local_config.sample = m == "mcmc";
    }
    if (s.contains("sampler")) c.local_config.sampler = sampler_config_from_json(s["sampler"], c.local_config.sampler);
  }
  if (j.contains("refit")) {
    const auto& r = j["refit"];
    read_value(r, "enabled", c.refit.enabled, "/gfpca/refit");
    read_value(r, "sample", c.refit.sample, "/gfpca/refit");
    read_value(r, "n_basis_t", c.refit.n_basis_t, "/gfpca/refit");
    if (r.contains("sampler")) c.refit.sampler = sampler_config_from_json(r["sampler"], c.refit.sampler);
    if (r.contains("backfit")) c.refit.backfit = backfit_config_from_json(r["backfit"], c.refit.backfit);
  }
  if (c.n_bins < 3) throw SchemaError("/gfpca/n_bins: need at least 3 bins");
  if (!(c.halfwidth > 0)) throw SchemaError("/gfpca/halfwidth: must be positive");
  if (!(c.pve > 0 && c.pve <= 1)) throw SchemaError("/gfpca/pve: must lie in (0, 1]");
  return c;
}

std::vector<UnivariateFPCA> run_gfpca(const Dataset& data, const GfpcaConfig& cfg) {
  if (data.K() != 1) throw ArgumentError("run_gfpca: expected a single-dimension dataset");
  const Family& family = data.families()[0];
  const Domain& domain = data.domain();
  const auto bins = BinSpec::equidistant(cfg.n_bins, cfg.halfwidth, domain);
  const auto& obs = data.obs();
  const auto binned = bin_data(obs, bins);
  std::vector<std::string> warnings = binned.warnings;

  LocalModelSpec local = cfg.local;
  local.levels = data.layers() > 0 ? 2 : 1;
  if (family.n_params() < 2) local.scale_covariates.clear();

  std::vector<CurveKey> units, curves;
  for (long u : data.units()) units.push_back({u, std::nullopt});
  curves = data.curves();
  const int S = bins.size();
  LatentMatrix unit_m{cfg.unit_level, units, MatrixXd::Constant(static_cast<Eigen::Index>(units.size()), S, kNaN)};
  LatentMatrix curve_m{cfg.curve_level, curves, MatrixXd::Constant(static_cast<Eigen::Index>(curves.size()), S, kNaN)};
  std::vector<bool> ok(S, false);
  for (int s = 0; s < S; ++s) {
    if (binned.members[s].empty()) continue;
    std::vector<Observation> sub;
    for (int i : binned.members[s]) sub.push_back(obs[i]);
    try {
      LocalModelConfig lc = cfg.local_config;
      lc.sampler.seed = chain_seed(cfg.local_config.sampler.seed, 1000 + s);
      const auto fit = fit_local_mixed_model(sub, family, data.covariates(), local, lc);
      if (!fit.converged) warnings.push_back("bin " + std::to_string(s + 1) + ": local model did not converge");
      for (size_t a = 0; a < fit.units.size(); ++a) {
        const auto r = std::lower_bound(units.begin(), units.end(), fit.units[a]) - units.begin();
        unit_m.values(r, s) = fit.b_unit[a];
      }
      if (local.levels == 2)
        for (size_t c = 0; c < fit.curves.size(); ++c) {
          const auto r = std::lower_bound(curves.begin(), curves.end(), fit.curves[c]) - curves.begin();
          const auto ua = std::lower_bound(fit.units.begin(), fit.units.end(), CurveKey{fit.curves[c].unit, std::nullopt}) -
                          fit.units.begin();
          curve_m.values(r, s) = fit.b_unit[ua] + fit.b_curve[c];
        }
      ok[s] = true;
    } catch (const DegenerateError& e) {
      warnings.push_back("bin " + std::to_string(s + 1) + ": " + e.what() + "; column imputed");
    }
  }

  std::vector<UnivariateFPCA> out;
  if (local.levels == 1) {
    impute_columns(unit_m.values, ok, bins.centers, domain);
    out.push_back(fast_covariance_fpca(unit_m, bins.centers, domain, cfg.pve, cfg.smoothing));
  } else {
    impute_columns(curve_m.values, ok, bins.centers, domain);
    auto split = multilevel_split(curve_m);
    auto between = covariance_fpca(split.cov_between, bins.centers, domain, cfg.pve, cfg.smoothing);
    between.level = cfg.unit_level;
    between.keys = split.between.keys;
    between.scores = project_rows(centre_columns(split.between.values), bins.centers, between);
    auto within = covariance_fpca(split.cov_within, bins.centers, domain, cfg.pve, cfg.smoothing);
    within.level = cfg.curve_level;
    within.keys = split.within.keys;
    within.scores = project_rows(split.within.values, bins.centers, within);
    out.push_back(std::move(between));
    out.push_back(std::move(within));
  }
  for (auto& f : out) f.warnings = warnings;
  if (cfg.refit.enabled) refit_scores(data, family, out, local, cfg.refit);
  return out;
}

void write_univariate_fpcas(const std::vector<UnivariateFPCA>& fpcas, const std::filesystem::path& csv_path,
                            const std::filesystem::path& json_path, const std::filesystem::path& scores_path) {
  std::ostringstream fn, sc;
  fn << "level,m,t,value\n";
  sc << "level,unit,group,m,score\n";
  json meta;
  meta["levels"] = json::array();
  for (const auto& f : fpcas) {
    for (int m = 0; m < f.M(); ++m)
      for (size_t g = 0; g < f.grid.size(); ++g)
        fn << f.level << ',' << m + 1 << ',' << csv::format(f.grid[g]) << ',' << csv::format(f.phi(m, g)) << '\n';
    for (size_t i = 0; i < f.keys.size(); ++i)
      for (int m = 0; m < f.scores.cols(); ++m)
        sc << f.level << ',' << f.keys[i].unit << ',' << (f.keys[i].group ? std::to_string(*f.keys[i].group) : "")
           << ',' << m + 1 << ',' << csv::format(f.scores(i, m)) << '\n';
    meta["levels"].push_back({{"level", f.level},
                              {"M", f.M()},
                              {"pve", f.pve},
                              {"grid_size", f.grid.size()},
                              {"upsilon", std::vector<double>(f.upsilon.data(), f.upsilon.data() + f.upsilon.size())},
                              {"eigenvalues", std::vector<double>(f.eigenvalues.data(), f.eigenvalues.data() + f.eigenvalues.size())},
                              {"domain", {{"lo", f.domain.lo}, {"hi", f.domain.hi}, {"cyclic", f.domain.cyclic}}},
                              {"grid", f.grid},
                              {"warnings", f.warnings}});
  }
  csv::write_atomic(csv_path, fn.str());
  csv::write_atomic(scores_path, sc.str());
  csv::write_atomic(json_path, meta.dump(2) + "\n");
}

std::vector<UnivariateFPCA> read_univariate_fpcas(const std::filesystem::path& csv_path,
                                                  const std::filesystem::path& json_path,
                                                  const std::filesystem::path& scores_path) {
  std::ifstream in(json_path);
  if (!in) throw SchemaError("cannot open '" + json_path.string() + "'");
  json meta;
  std::vector<UnivariateFPCA> out;
  std::map<std::string, size_t> index;
  try {
    in >> meta;
    for (const auto& l : meta.at("levels")) {
      UnivariateFPCA f;
      f.level = l.at("level").get<std::string>();
      f.pve = l.at("pve").get<double>();
      f.grid = l.at("grid").get<std::vector<double>>();
      const auto ups = l.at("upsilon").get<std::vector<double>>();
      const auto ev = l.at("eigenvalues").get<std::vector<double>>();
      f.upsilon = Eigen::Map<const VectorXd>(ups.data(), static_cast<Eigen::Index>(ups.size()));
      f.eigenvalues = Eigen::Map<const VectorXd>(ev.data(), static_cast<Eigen::Index>(ev.size()));
      const auto& d = l.at("domain");
      f.domain = Domain{d.at("lo").get<double>(), d.at("hi").get<double>(), d.at("cyclic").get<bool>()};
      f.warnings = l.value("warnings", std::vector<std::string>{});
      const int M = l.at("M").get<int>();
      if (M != static_cast<int>(ups.size())) throw SchemaError(json_path.string() + ": M does not match upsilon");
      f.phi = MatrixXd::Constant(M, static_cast<Eigen::Index>(f.grid.size()), kNaN);
      index[f.level] = out.size();
      out.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw SchemaError(json_path.string() + ": " + e.what());
  }
  const auto fn = csv::read(csv_path);
  if (fn.header != std::vector<std::string>{"level", "m", "t", "value"})
    throw SchemaError(csv_path.string() + ": expected header level,m,t,value");
  std::map<std::string, int> cursor;
  for (const auto& row : fn.rows) {
    auto it = index.find(row[0]);
    if (it == index.end()) throw SchemaError(csv_path.string() + ": unknown level '" + row[0] + "'");
    auto& f = out[it->second];
    const long m = csv::parse_long(row[1]) - 1;
    const double t = csv::parse_double(row[2]);
    const auto g = std::lower_bound(f.grid.begin(), f.grid.end(), t - 1e-12) - f.grid.begin();
    if (m < 0 || m >= f.M() || g >= static_cast<long>(f.grid.size()) || std::abs(f.grid[g] - t) > 1e-9)
      throw SchemaError(csv_path.string() + ": row outside the declared grid");
    f.phi(m, g) = csv::parse_double(row[3]);
  }
  for (const auto& f : out)
    if (!f.phi.allFinite()) throw SchemaError(csv_path.string() + ": missing eigenfunction values");
  const auto sc = csv::read(scores_path);
  std::map<std::string, std::map<CurveKey, std::map<int, double>>> vals;
  for (const auto& row : sc.rows) {
    CurveKey key{csv::parse_long(row[1]), row[2].empty() ? std::nullopt : std::optional<long>(csv::parse_long(row[2]))};
    vals[row[0]][key][static_cast<int>(csv::parse_long(row[3])) - 1] = csv::parse_double(row[4]);
  }
  for (auto& f : out) {
    const auto& v = vals[f.level];
    f.scores = MatrixXd::Zero(static_cast<Eigen::Index>(v.size()), f.M());
    int i = 0;
    for (const auto& [key, ms] : v) {
      f.keys.push_back(key);
      for (const auto& [m, val] : ms)
        if (m >= 0 && m < f.M()) f.scores(i, m) = val;
      ++i;
    }
  }
  return out;
}

}  // namespace mfam
