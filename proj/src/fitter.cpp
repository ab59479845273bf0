#include "mfam/fitter.hpp"

#include "mfam/csv.hpp"
#include "mfam/error.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace mfam {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double ig_logpdf(double x, double a, double b) {
  return a * std::log(b) - std::lgamma(a) - (a + 1) * std::log(x) - b / x;
}

int count_positive(const VectorXd& ev, double scale) {
  const double tol = 1e-10 * std::max(1.0, scale);
  return static_cast<int>((ev.array() > tol).count());
}

// Orthonormal basis of the null space of the row vector c (length d).
MatrixXd sum_to_zero_basis(const VectorXd& c) {
  const int d = static_cast<int>(c.size());
  const MatrixXd cm = c;
  Eigen::HouseholderQR<MatrixXd> qr(cm);
  const MatrixXd Q = qr.householderQ() * MatrixXd::Identity(d, d);
  return Q.rightCols(d - 1);
}

std::vector<double> covariate_values(const CovariateTable& table, int index, const std::vector<CurveKey>& keys) {
  std::vector<double> out(keys.size(), 1.0);
  if (index < 0) return out;
  for (size_t i = 0; i < keys.size(); ++i) out[i] = table.value(keys[i], index);
  return out;
}

// Basis rows of a non-latent term at (t, x) pairs.
MatrixXd term_rows(const TermDesign& term, const std::vector<double>& t, const std::vector<double>& x) {
  const auto n = static_cast<Eigen::Index>(t.size());
  switch (term.spec.kind) {
    case TermKind::Constant: {
      MatrixXd X(n, 1);
      for (Eigen::Index i = 0; i < n; ++i) X(i, 0) = x[i];
      return X;
    }
    case TermKind::FunctionalIntercept:
      return bspline_design(term.basis_t, t);
    case TermKind::LinearFunctional: {
      MatrixXd B = bspline_design(term.basis_t, t);
      for (Eigen::Index i = 0; i < n; ++i) B.row(i) *= x[i];
      return B;
    }
    case TermKind::SmoothInteraction: {
      const MatrixXd Bx = bspline_design(term.basis_x, x) * term.Zx;
      return row_tensor(Bx, bspline_design(term.basis_t, t));
    }
    case TermKind::MfpcRandom: break;
  }
  throw ArgumentError("term_rows: latent terms have no fixed basis");
}

MatrixXd time_penalty(const TermSpec& spec, bool cyclic) {
  return cyclic ? cyclic_difference_penalty(spec.n_basis_t, spec.order_t)
                : difference_penalty(spec.n_basis_t, spec.order_t);
}

MatrixXd prior_precision(const TermDesign& term, const std::vector<double>& tau2, double vague_sd) {
  const int d = term.size();
  if (term.P.empty()) return MatrixXd::Identity(d, d) / (vague_sd * vague_sd);
  MatrixXd Q = MatrixXd::Zero(d, d);
  for (int l = 0; l < term.n_penalties(); ++l) Q += term.P[l] / tau2[l];
  return Q;
}

// Log prior of a term's coefficients and smoothing variances.
double term_log_prior(const TermDesign& term, const VectorXd& beta, const std::vector<double>& tau2,
                      const SamplerConfig& cfg) {
  if (term.P.empty()) {
    const double v = cfg.vague_sd * cfg.vague_sd;
    return -0.5 * term.size() * (kLog2Pi + std::log(v)) - 0.5 * beta.squaredNorm() / v;
  }
  for (double t2 : tau2)
    if (!(t2 > 0)) throw DomainError("log_prior: smoothing variances must be positive");
  double lp = 0.0;
  double quad = 0.0;
  for (int l = 0; l < term.n_penalties(); ++l) {
    quad += beta.dot(term.P[l] * beta) / tau2[l];
    lp += ig_logpdf(tau2[l], cfg.ig_a, cfg.ig_b);
  }
  if (term.n_penalties() == 1) {
    lp += -0.5 * term.rank[0] * (kLog2Pi + std::log(tau2[0]));
  } else {
    const double sx = term.eig_x.size() ? term.eig_x.maxCoeff() : 1.0;
    const double st = term.eig_t.size() ? term.eig_t.maxCoeff() : 1.0;
    for (Eigen::Index i = 0; i < term.eig_x.size(); ++i)
      for (Eigen::Index j = 0; j < term.eig_t.size(); ++j) {
        const double ex = term.eig_x[i] > 1e-10 * sx ? term.eig_x[i] : 0.0;
        const double et = term.eig_t[j] > 1e-10 * st ? term.eig_t[j] : 0.0;
        const double lam = ex / tau2[0] + et / tau2[1];
        if (lam > 0) lp += 0.5 * (std::log(lam) - kLog2Pi);
      }
  }
  return lp - 0.5 * quad;
}

double latent_log_prior(const MatrixXd& scores, const VectorXd& nu, const SamplerConfig& cfg) {
  double lp = 0.0;
  for (Eigen::Index m = 0; m < nu.size(); ++m) {
    if (!(nu[m] > 0)) throw DomainError("log_prior: score variances must be positive");
    lp += -0.5 * scores.rows() * (kLog2Pi + std::log(nu[m])) - 0.5 * scores.col(m).squaredNorm() / nu[m];
    lp += ig_logpdf(nu[m], cfg.ig_a, cfg.ig_b);
  }
  return lp;
}

ParamTuple eta_row(const MatrixXd& eta, Eigen::Index i) {
  ParamTuple e{eta(i, 0), eta.cols() > 1 ? eta(i, 1) : 0.0};
  return e;
}

// Score and negative Hessian of the log-likelihood of every row of one
// dimension with respect to parameter r.
double dim_derivatives(const Family& f, const VectorXd& y, const MatrixXd& eta, int r, VectorXd& s, VectorXd& w) {
  const auto n = y.size();
  s.resize(n);
  w.resize(n);
  double ll = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto d = param_derivative(f, y[i], eta_row(eta, i), r);
    s[i] = d.score;
    w[i] = -d.hess;
    ll += d.loglik;
  }
  return ll;
}

double dim_loglik(const Family& f, const VectorXd& y, const MatrixXd& eta) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) ll += loglik_eta(f, y[i], eta_row(eta, i));
  return ll;
}

MatrixXd weighted_cross(const MatrixXd& X, const VectorXd& w) {
  return X.transpose() * (X.array().colwise() * w.array()).matrix();
}

// Gaussian proposal N(x + negH^{-1} grad, negH^{-1}); negH is ridged until
// positive definite.
struct Proposal {
  VectorXd mean;
  Eigen::LLT<MatrixXd> llt;
  double half_logdet = 0.0;
  bool ridged = false;
};

Proposal make_proposal(const VectorXd& x, const VectorXd& grad, const MatrixXd& negH) {
  Proposal p;
  p.llt.compute(negH);
  double lam = 0.0;
  const double scale = std::max(1.0, negH.diagonal().cwiseAbs().maxCoeff());
  while (p.llt.info() != Eigen::Success || !p.llt.matrixL().toDenseMatrix().diagonal().allFinite()) {
    lam = lam == 0.0 ? 1e-8 * scale : 2.0 * lam;
    if (lam > 1e12 * scale) throw ConvergenceError("proposal Hessian could not be regularised");
    p.llt.compute(negH + lam * MatrixXd::Identity(negH.rows(), negH.cols()));
    p.ridged = true;
  }
  p.mean = x + p.llt.solve(grad);
  const MatrixXd L = p.llt.matrixL();
  p.half_logdet = L.diagonal().array().log().sum();
  return p;
}

double log_q(const Proposal& p, const VectorXd& x) {
  const VectorXd z = p.llt.matrixU() * (x - p.mean);
  return p.half_logdet - 0.5 * z.squaredNorm();
}

VectorXd draw(const Proposal& p, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  VectorXd z(p.mean.size());
  for (auto& v : z) v = n01(rng);
  return p.mean + p.llt.matrixU().solve(z);
}

double draw_inverse_gamma(double shape, double rate, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(shape, 1.0 / rate);
  return 1.0 / g(rng);
}

// Univariate slice sampler with the doubling procedure and its
// reversibility check.
template <class F>
double slice_sample(double x0, F&& logf, double w, int max_doublings, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  const double y = logf(x0) - expo(rng);
  double L = x0 - w * unif(rng);
  double R = L + w;
  double fL = logf(L), fR = logf(R);
  for (int k = max_doublings; k > 0 && (y < fL || y < fR); --k) {
    if (unif(rng) < 0.5) {
      L -= R - L;
      fL = logf(L);
    } else {
      R += R - L;
      fR = logf(R);
    }
  }
  auto acceptable = [&](double x1) {
    double Lh = L, Rh = R;
    bool differ = false;
    while (Rh - Lh > 1.1 * w) {
      const double Mid = 0.5 * (Lh + Rh);
      if ((x0 < Mid && x1 >= Mid) || (x0 >= Mid && x1 < Mid)) differ = true;
      if (x1 < Mid) Rh = Mid;
      else Lh = Mid;
      if (differ && y >= logf(Lh) && y >= logf(Rh)) return false;
    }
    return true;
  };
  double Lb = L, Rb = R;
  for (int iter = 0; iter < 1000; ++iter) {
    const double x1 = Lb + unif(rng) * (Rb - Lb);
    if (y < logf(x1) && acceptable(x1)) return x1;
    if (x1 < x0) Lb = x1;
    else Rb = x1;
  }
  return x0;
}

std::string entity_label(const CurveKey& key) {
  std::string s = "u" + std::to_string(key.unit);
  if (key.group) s += "g" + std::to_string(*key.group);
  return s;
}

}  // namespace

std::string TermDesign::name() const {
  return std::string(term_kind_name(spec.kind)) + (spec.covariate.empty() ? "" : "(" + spec.covariate + ")");
}

int LatentDesign::entity_index(const CurveKey& key) const {
  const CurveKey k = spec.level == LatentLevel::Unit ? CurveKey{key.unit, std::nullopt} : key;
  auto it = std::lower_bound(entities.begin(), entities.end(), k);
  if (it == entities.end() || *it != k) return -1;
  return static_cast<int>(it - entities.begin());
}

int ModelDesign::predictor_index(int dim, int param) const {
  for (size_t p = 0; p < predictors.size(); ++p)
    if (predictors[p].dim == dim && predictors[p].param == param) return static_cast<int>(p);
  return -1;
}

ModelDesign build_design(const Dataset& data, const ModelSpec& spec_in, const std::vector<EigenBasis>& bases) {
  ModelSpec spec = spec_in;
  spec.finalize();
  if (spec.K() != data.K()) throw SchemaError("model has " + std::to_string(spec.K()) + " dimensions, data has " +
                                              std::to_string(data.K()));
  for (int k = 0; k < spec.K(); ++k)
    if (!(spec.families[k] == data.families()[k]))
      throw SchemaError("family of dimension " + std::to_string(k + 1) + " differs between model and data");
  const Domain& dom = data.domain();
  if (std::abs(dom.lo - spec.domain.lo) > 1e-12 || std::abs(dom.hi - spec.domain.hi) > 1e-12 ||
      dom.cyclic != spec.domain.cyclic)
    throw SchemaError("model domain differs from the data domain");

  ModelDesign d;
  d.spec = spec;
  d.families = spec.families;
  d.domain = dom;
  d.covariates = data.covariates();
  const int K = spec.K();
  d.y.resize(K);
  d.t.resize(K);
  d.curve.resize(K);
  {
    std::vector<std::vector<double>> ys(K);
    for (const auto& o : data.obs()) {
      ys[o.dim].push_back(o.y);
      d.t[o.dim].push_back(o.t);
      d.curve[o.dim].push_back(CurveKey{o.unit, o.group});
    }
    for (int k = 0; k < K; ++k) {
      if (ys[k].empty()) throw DegenerateError("dimension " + std::to_string(k + 1) + " has no observations");
      d.y[k] = Eigen::Map<VectorXd>(ys[k].data(), static_cast<Eigen::Index>(ys[k].size()));
    }
  }

  auto preds = spec.predictors;
  std::sort(preds.begin(), preds.end(),
            [](const auto& a, const auto& b) { return std::tie(a.dim, a.param) < std::tie(b.dim, b.param); });

  std::vector<std::vector<int>> latent_dims(spec.latent.size());
  for (const auto& ps : preds) {
    PredictorDesign pd{ps.dim, ps.param, {}};
    const int pidx = static_cast<int>(d.predictors.size());
    const int k = ps.dim;
    std::set<std::string> used_latents;
    for (size_t l = 0; l < ps.terms.size(); ++l) {
      const auto& ts = ps.terms[l];
      if (ts.kind == TermKind::MfpcRandom) {
        if (!used_latents.insert(ts.latent).second)
          throw SchemaError("latent process '" + ts.latent + "' used twice in one predictor");
        for (size_t u = 0; u < spec.latent.size(); ++u)
          if (spec.latent[u].name == ts.latent) latent_dims[u].push_back(k);
        continue;
      }
      TermDesign td;
      td.predictor = pidx;
      td.index_in_predictor = static_cast<int>(l);
      td.spec = ts;
      if (!ts.covariate.empty()) {
        td.covariate = d.covariates.index(ts.covariate);
        if (td.covariate < 0) throw SchemaError("unknown covariate '" + ts.covariate + "'");
      }
      if (ts.kind != TermKind::Constant) {
        const int knots = BSplineSpec::knots_for_size(ts.n_basis_t, ts.degree_t, dom.cyclic);
        td.basis_t = BSplineSpec{knots, ts.degree_t, dom};
      }
      const auto x = covariate_values(d.covariates, td.covariate, d.curve[k]);
      switch (ts.kind) {
        case TermKind::Constant:
          td.X = term_rows(td, d.t[k], x);
          break;
        case TermKind::FunctionalIntercept:
        case TermKind::LinearFunctional: {
          td.X = term_rows(td, d.t[k], x);
          td.P.push_back(time_penalty(ts, dom.cyclic));
          td.rank.push_back(ts.n_basis_t - (dom.cyclic ? 1 : ts.order_t));
          break;
        }
        case TermKind::SmoothInteraction: {
          // Covariate margin over the range of the covariate table.
          double lo = INFINITY, hi = -INFINITY;
          for (const auto& [key, vals] : d.covariates.rows()) {
            lo = std::min(lo, vals[td.covariate]);
            hi = std::max(hi, vals[td.covariate]);
          }
          if (!(hi > lo)) throw DegenerateError("covariate '" + ts.covariate + "' is constant");
          td.basis_x = BSplineSpec{BSplineSpec::knots_for_size(ts.n_basis_x, ts.degree_x, false), ts.degree_x,
                                   Domain{lo, hi, false}};
          const MatrixXd Bx = bspline_design(td.basis_x, x);
          td.Zx = sum_to_zero_basis(Bx.colwise().sum().transpose());
          td.X = term_rows(td, d.t[k], x);
          const MatrixXd Px = td.Zx.transpose() * difference_penalty(ts.n_basis_x, ts.order_x) * td.Zx;
          const MatrixXd Pt = time_penalty(ts, dom.cyclic);
          const auto dx = Px.rows(), dt = Pt.rows();
          td.P.push_back(kron(Px, MatrixXd::Identity(dt, dt)));
          td.P.push_back(kron(MatrixXd::Identity(dx, dx), Pt));
          td.eig_x = Eigen::SelfAdjointEigenSolver<MatrixXd>(Px).eigenvalues().cwiseMax(0.0);
          td.eig_t = Eigen::SelfAdjointEigenSolver<MatrixXd>(Pt).eigenvalues().cwiseMax(0.0);
          td.rank.push_back(static_cast<int>(dt) * count_positive(td.eig_x, td.eig_x.maxCoeff()));
          td.rank.push_back(static_cast<int>(dx) * count_positive(td.eig_t, td.eig_t.maxCoeff()));
          break;
        }
        case TermKind::MfpcRandom: break;
      }
      pd.terms.push_back(static_cast<int>(d.terms.size()));
      d.terms.push_back(std::move(td));
    }
    d.predictors.push_back(std::move(pd));
  }

  for (size_t u = 0; u < spec.latent.size(); ++u) {
    const auto& ls = spec.latent[u];
    LatentDesign ld;
    ld.spec = ls;
    const EigenBasis* src = nullptr;
    for (const auto& b : bases)
      if (b.level == ls.basis) src = &b;
    if (!src) throw SchemaError("no eigenbasis with level '" + ls.basis + "' for latent '" + ls.name + "'");
    if (src->K != K) throw SchemaError("eigenbasis '" + ls.basis + "' has a different dimension count");
    EigenBasis b = *src;
    int M = b.M();
    if (ls.n_components) {
      if (*ls.n_components < 1 || *ls.n_components > M)
        throw SchemaError("latent '" + ls.name + "': n_components out of range");
      M = *ls.n_components;
    }
    const double numax = M > 0 ? b.nu.head(M).maxCoeff() : 0.0;
    int keep = 0;
    while (keep < M && b.nu[keep] > 1e-12 * std::max(numax, 1e-300)) ++keep;
    ld.dropped = M - keep;
    b.psi = b.psi.topRows(keep).eval();
    b.nu = b.nu.head(keep).eval();
    ld.basis = std::move(b);

    std::set<CurveKey> ents;
    for (int k : latent_dims[u])
      for (const auto& c : d.curve[k]) ents.insert(ls.level == LatentLevel::Unit ? CurveKey{c.unit, std::nullopt} : c);
    ld.entities.assign(ents.begin(), ents.end());
    ld.psi.assign(K, MatrixXd());
    ld.entity_of_row.assign(K, {});
    ld.rows_of_entity.assign(ld.entities.size(), {});
    for (int k : latent_dims[u]) {
      ld.psi[k] = evaluate_eigenbasis(ld.basis, k, d.t[k]);
      auto& eor = ld.entity_of_row[k];
      eor.resize(d.curve[k].size());
      for (size_t i = 0; i < d.curve[k].size(); ++i) {
        eor[i] = ld.entity_index(d.curve[k][i]);
        ld.rows_of_entity[eor[i]].push_back({k, static_cast<int>(i)});
      }
    }
    d.latents.push_back(std::move(ld));
  }
  return d;
}

Eigen::MatrixXd latent_design_matrix(const ModelDesign& design, int latent, int k) {
  const auto& ld = design.latents.at(latent);
  const int M = ld.M();
  MatrixXd out = MatrixXd::Zero(design.n_rows(k), static_cast<Eigen::Index>(ld.J()) * M);
  if (!ld.uses_dim(k)) return out;
  for (int i = 0; i < design.n_rows(k); ++i)
    out.block(i, static_cast<Eigen::Index>(ld.entity_of_row[k][i]) * M, 1, M) = ld.psi[k].row(i);
  return out;
}

ModelState initial_state(const ModelDesign& design) {
  ModelState s;
  for (const auto& t : design.terms) {
    s.beta.push_back(VectorXd::Zero(t.size()));
    s.tau2.push_back(std::vector<double>(t.n_penalties(), 1.0));
  }
  for (const auto& l : design.latents) {
    s.scores.push_back(MatrixXd::Zero(l.J(), l.M()));
    s.nu.push_back(l.basis.nu);
  }
  return s;
}

std::vector<Eigen::MatrixXd> compute_eta(const ModelDesign& design, const ModelState& state) {
  std::vector<MatrixXd> eta(design.K());
  for (int k = 0; k < design.K(); ++k) eta[k] = MatrixXd::Zero(design.n_rows(k), design.families[k].n_params());
  for (size_t j = 0; j < design.terms.size(); ++j) {
    const auto& t = design.terms[j];
    const auto& p = design.predictors[t.predictor];
    eta[p.dim].col(p.param) += t.X * state.beta[j];
  }
  for (size_t u = 0; u < design.latents.size(); ++u) {
    const auto& l = design.latents[u];
    for (int k = 0; k < design.K(); ++k) {
      if (!l.uses_dim(k)) continue;
      for (int i = 0; i < design.n_rows(k); ++i)
        eta[k](i, 0) += l.psi[k].row(i).dot(state.scores[u].row(l.entity_of_row[k][i]));
    }
  }
  return eta;
}

double log_likelihood(const ModelDesign& design, const ModelState& state) {
  const auto eta = compute_eta(design, state);
  double ll = 0.0;
  for (int k = 0; k < design.K(); ++k) ll += dim_loglik(design.families[k], design.y[k], eta[k]);
  return ll;
}

double log_prior(const ModelDesign& design, const ModelState& state) {
  double lp = 0.0;
  for (size_t j = 0; j < design.terms.size(); ++j)
    lp += term_log_prior(design.terms[j], state.beta[j], state.tau2[j], design.spec.sampler);
  for (size_t u = 0; u < design.latents.size(); ++u)
    lp += latent_log_prior(state.scores[u], state.nu[u], design.spec.sampler);
  return lp;
}

double log_posterior(const ModelDesign& design, const ModelState& state) {
  return log_likelihood(design, state) + log_prior(design, state);
}

BlockDerivatives block_derivatives(const ModelDesign& design, const ModelState& state, const BlockRef& block) {
  const auto eta = compute_eta(design, state);
  BlockDerivatives out;
  if (block.kind == BlockRef::Kind::Term) {
    const auto& t = design.terms.at(block.index);
    const auto& p = design.predictors[t.predictor];
    VectorXd s, w;
    dim_derivatives(design.families[p.dim], design.y[p.dim], eta[p.dim], p.param, s, w);
    const MatrixXd Q = prior_precision(t, state.tau2[block.index], design.spec.sampler.vague_sd);
    out.grad = t.X.transpose() * s - Q * state.beta[block.index];
    out.hess = -weighted_cross(t.X, w) - Q;
    return out;
  }
  const auto& l = design.latents.at(block.index);
  const VectorXd& nu = state.nu[block.index];
  const VectorXd rho = state.scores[block.index].row(block.entity).transpose();
  out.grad = -rho.cwiseQuotient(nu);
  out.hess = MatrixXd(nu.cwiseInverse().asDiagonal()) * -1.0;
  for (const auto& [k, i] : l.rows_of_entity.at(block.entity)) {
    const auto dv = param_derivative(design.families[k], design.y[k][i], eta_row(eta[k], i), 0);
    const VectorXd psi = l.psi[k].row(i).transpose();
    out.grad += dv.score * psi;
    out.hess += dv.hess * psi * psi.transpose();
  }
  return out;
}

std::vector<double> draw_smoothing_variances(const TermDesign& t, const VectorXd& beta, std::vector<double> tau2,
                                             const SamplerConfig& cfg, std::mt19937_64& rng) {
  if (static_cast<int>(tau2.size()) != t.n_penalties()) throw ArgumentError("smoothing variance count mismatch");
  if (t.n_penalties() == 1) {
    const double quad = beta.dot(t.P[0] * beta);
    tau2[0] = draw_inverse_gamma(cfg.ig_a + 0.5 * t.rank[0], cfg.ig_b + 0.5 * quad, rng);
  } else if (t.n_penalties() == 2) {
    const double q[2] = {beta.dot(t.P[0] * beta), beta.dot(t.P[1] * beta)};
    const double sx = std::max(t.eig_x.maxCoeff(), 1e-300), st = std::max(t.eig_t.maxCoeff(), 1e-300);
    for (int l = 0; l < 2; ++l) {
      // Conditional log density of v = log tau2[l].
      auto logf = [&](double v) {
        if (!std::isfinite(v) || std::abs(v) > 700) return -std::numeric_limits<double>::infinity();
        double tau[2] = {tau2[0], tau2[1]};
        tau[l] = std::exp(v);
        double f = 0.0;
        for (Eigen::Index a = 0; a < t.eig_x.size(); ++a)
          for (Eigen::Index b = 0; b < t.eig_t.size(); ++b) {
            const double ex = t.eig_x[a] > 1e-10 * sx ? t.eig_x[a] : 0.0;
            const double et = t.eig_t[b] > 1e-10 * st ? t.eig_t[b] : 0.0;
            const double lam = ex / tau[0] + et / tau[1];
            if (lam > 0) f += 0.5 * std::log(lam);
          }
        f -= 0.5 * q[l] / tau[l];
        f += ig_logpdf(tau[l], cfg.ig_a, cfg.ig_b) + v;
        return f;
      };
      tau2[l] = std::exp(slice_sample(std::log(tau2[l]), logf, cfg.slice_width, cfg.slice_max_doublings, rng));
    }
  }
  return tau2;
}

namespace {

// Working state shared by backfitting and the samplers.
class Engine {
 public:
  Engine(const ModelDesign& d, ModelState s) : d_(d), s_(std::move(s)) { eta_ = compute_eta(d_, s_); }

  const ModelState& state() const { return s_; }
  ModelState& state() { return s_; }
  const std::vector<MatrixXd>& eta() const { return eta_; }

  // --- backfitting -------------------------------------------------------

  void set_intercepts() {
    for (const auto& p : d_.predictors) {
      for (int j : p.terms) {
        const auto& t = d_.terms[j];
        const bool carrier = (t.spec.kind == TermKind::Constant && t.covariate < 0) ||
                             t.spec.kind == TermKind::FunctionalIntercept;
        if (!carrier) continue;
        s_.beta[j].setConstant(moment_start(d_.families[p.dim], p.param, std::span<const double>(d_.y[p.dim].data(), d_.y[p.dim].size())));
        break;
      }
    }
    eta_ = compute_eta(d_, s_);
  }

  void backfit_term(int j, const BackfitConfig& cfg, std::vector<double>& edf) {
    const auto& t = d_.terms[j];
    const auto& p = d_.predictors[t.predictor];
    const int k = p.dim, r = p.param;
    const auto& fam = d_.families[k];
    VectorXd s, w;
    const double ll0 = dim_derivatives(fam, d_.y[k], eta_[k], r, s, w);
    const VectorXd wpos = w.cwiseMax(1e-10);
    const MatrixXd XtWX = weighted_cross(t.X, wpos);
    const VectorXd Xts = t.X.transpose() * s;
    const VectorXd beta0 = s_.beta[j];
    const double n = static_cast<double>(d_.n_rows(k));
    double other_edf = 0.0;
    for (const auto& q : d_.predictors)
      if (q.dim == k)
        for (int jj : q.terms)
          if (jj != j) other_edf += edf[jj];

    struct Candidate {
      std::vector<double> tau2;
      VectorXd beta;
      double ll = -INFINITY, edf = 0, caic = INFINITY;
    };
    auto evaluate = [&](const std::vector<double>& tau2) {
      Candidate c;
      c.tau2 = tau2;
      const MatrixXd Q = prior_precision(t, tau2, d_.spec.sampler.vague_sd);
      Eigen::LLT<MatrixXd> llt(XtWX + Q);
      if (llt.info() != Eigen::Success) return c;
      const VectorXd delta = llt.solve(Xts - Q * beta0);
      const double f0 = ll0 - 0.5 * beta0.dot(Q * beta0);
      MatrixXd eta = eta_[k];
      const VectorXd xd = t.X * delta;
      double step = 1.0;
      for (int h = 0; h <= cfg.max_halving; ++h, step *= 0.5) {
        eta.col(r) = eta_[k].col(r) + step * xd;
        const double ll = dim_loglik(fam, d_.y[k], eta);
        const VectorXd b = beta0 + step * delta;
        const double f = ll - 0.5 * b.dot(Q * b);
        if (std::isfinite(f) && f >= f0 - 1e-10 * std::abs(f0)) {
          c.beta = b;
          c.ll = ll;
          break;
        }
      }
      if (c.beta.size() == 0) {
        c.beta = beta0;
        c.ll = ll0;
      }
      c.edf = llt.solve(XtWX).trace();
      const double df = c.edf + other_edf;
      c.caic = n - df - 1 > 0 ? -2 * c.ll + 2 * df + 2 * df * (df + 1) / (n - df - 1) : INFINITY;
      if (!std::isfinite(c.caic)) c.caic = -2 * c.ll + 2 * df + 1e12;
      return c;
    };

    Candidate best;
    if (t.n_penalties() == 0) {
      best = evaluate({});
    } else {
      std::vector<double> grid(cfg.grid_points);
      for (int g = 0; g < cfg.grid_points; ++g)
        grid[g] = cfg.grid_points == 1
                      ? cfg.grid_lo
                      : cfg.grid_lo * std::pow(cfg.grid_hi / cfg.grid_lo, double(g) / (cfg.grid_points - 1));
      std::vector<double> tau2 = s_.tau2[j];
      for (int l = 0; l < t.n_penalties(); ++l) {
        Candidate local;
        for (double g : grid) {
          auto cand = tau2;
          cand[l] = g;
          auto c = evaluate(cand);
          if (c.caic < local.caic) local = std::move(c);
        }
        if (std::isfinite(local.caic)) {
          tau2 = local.tau2;
          best = std::move(local);
        }
      }
      if (best.beta.size() == 0) best = evaluate(s_.tau2[j]);
    }
    if (best.beta.size() == 0) return;
    const VectorXd delta = best.beta - s_.beta[j];
    eta_[k].col(r) += t.X * delta;
    s_.beta[j] = best.beta;
    if (!best.tau2.empty()) s_.tau2[j] = best.tau2;
    edf[j] = best.edf;
  }

  void backfit_entity(int u, int e, int max_halving) {
    const auto& l = d_.latents[u];
    const auto& rows = l.rows_of_entity[e];
    if (rows.empty()) return;
    const VectorXd& nu = s_.nu[u];
    const VectorXd rho = s_.scores[u].row(e).transpose();
    VectorXd g = -rho.cwiseQuotient(nu);
    MatrixXd A = MatrixXd(nu.cwiseInverse().asDiagonal());
    double ll0 = 0.0;
    for (const auto& [k, i] : rows) {
      const auto dv = param_derivative(d_.families[k], d_.y[k][i], eta_row(eta_[k], i), 0);
      const VectorXd psi = l.psi[k].row(i).transpose();
      g += dv.score * psi;
      A += std::max(-dv.hess, 1e-10) * psi * psi.transpose();
      ll0 += dv.loglik;
    }
    const VectorXd delta = A.llt().solve(g);
    const double f0 = ll0 - 0.5 * rho.cwiseProduct(rho).cwiseQuotient(nu).sum();
    double step = 1.0;
    for (int h = 0; h <= max_halving; ++h, step *= 0.5) {
      const VectorXd cand = rho + step * delta;
      double ll = 0.0;
      for (const auto& [k, i] : rows) {
        auto er = eta_row(eta_[k], i);
        er[0] += l.psi[k].row(i).dot(step * delta);
        ll += loglik_eta(d_.families[k], d_.y[k][i], er);
      }
      const double f = ll - 0.5 * cand.cwiseProduct(cand).cwiseQuotient(nu).sum();
      if (std::isfinite(f) && f >= f0 - 1e-10 * std::abs(f0)) {
        apply_score_change(u, e, step * delta);
        return;
      }
    }
  }

  // --- sampling ----------------------------------------------------------

  void sample_term(int j, std::mt19937_64& rng, long& accepted, int& ridged) {
    const auto& t = d_.terms[j];
    const auto& p = d_.predictors[t.predictor];
    const int k = p.dim, r = p.param;
    const auto& fam = d_.families[k];
    const MatrixXd Q = prior_precision(t, s_.tau2[j], d_.spec.sampler.vague_sd);
    const VectorXd& beta = s_.beta[j];

    VectorXd s, w;
    const double ll0 = dim_derivatives(fam, d_.y[k], eta_[k], r, s, w);
    const Proposal fwd = make_proposal(beta, t.X.transpose() * s - Q * beta, weighted_cross(t.X, w) + Q);
    const VectorXd cand = draw(fwd, rng);

    MatrixXd eta_c = eta_[k];
    eta_c.col(r) += t.X * (cand - beta);
    VectorXd s1, w1;
    const double ll1 = dim_derivatives(fam, d_.y[k], eta_c, r, s1, w1);
    if (!std::isfinite(ll1)) return;
    const Proposal rev = make_proposal(cand, t.X.transpose() * s1 - Q * cand, weighted_cross(t.X, w1) + Q);
    ridged += fwd.ridged + rev.ridged;

    const double lp0 = ll0 - 0.5 * beta.dot(Q * beta);
    const double lp1 = ll1 - 0.5 * cand.dot(Q * cand);
    const double log_alpha = lp1 - lp0 + log_q(rev, beta) - log_q(fwd, cand);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    if (std::isfinite(log_alpha) && std::log(unif(rng)) < log_alpha) {
      s_.beta[j] = cand;
      eta_[k] = std::move(eta_c);
      ++accepted;
    }
  }

  void sample_variances(int j, std::mt19937_64& rng) {
    if (d_.terms[j].n_penalties() == 0) return;
    s_.tau2[j] = draw_smoothing_variances(d_.terms[j], s_.beta[j], std::move(s_.tau2[j]), d_.spec.sampler, rng);
  }

  void sample_scores(int u, std::mt19937_64& rng, long& accepted, int& ridged) {
    const auto& l = d_.latents[u];
    const VectorXd& nu = s_.nu[u];
    const int M = l.M();
    if (M == 0) return;
    const MatrixXd prior = nu.cwiseInverse().asDiagonal();
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    VectorXd g(M), g1(M), delta(M);
    MatrixXd A(M, M), A1(M, M);
    for (int e = 0; e < l.J(); ++e) {
      const auto& rows = l.rows_of_entity[e];
      const VectorXd rho = s_.scores[u].row(e).transpose();
      g = -rho.cwiseQuotient(nu);
      A = prior;
      double ll0 = 0.0;
      for (const auto& [k, i] : rows) {
        const auto dv = param_derivative(d_.families[k], d_.y[k][i], eta_row(eta_[k], i), 0);
        const auto psi = l.psi[k].row(i);
        g += dv.score * psi.transpose();
        A.noalias() -= dv.hess * psi.transpose() * psi;
        ll0 += dv.loglik;
      }
      const Proposal fwd = make_proposal(rho, g, A);
      const VectorXd cand = draw(fwd, rng);
      delta = cand - rho;
      g1 = -cand.cwiseQuotient(nu);
      A1 = prior;
      double ll1 = 0.0;
      for (const auto& [k, i] : rows) {
        auto er = eta_row(eta_[k], i);
        const auto psi = l.psi[k].row(i);
        er[0] += psi.dot(delta);
        const auto dv = param_derivative(d_.families[k], d_.y[k][i], er, 0);
        g1 += dv.score * psi.transpose();
        A1.noalias() -= dv.hess * psi.transpose() * psi;
        ll1 += dv.loglik;
      }
      if (!std::isfinite(ll1)) continue;
      const Proposal rev = make_proposal(cand, g1, A1);
      ridged += fwd.ridged + rev.ridged;
      const double lp0 = ll0 - 0.5 * rho.cwiseProduct(rho).cwiseQuotient(nu).sum();
      const double lp1 = ll1 - 0.5 * cand.cwiseProduct(cand).cwiseQuotient(nu).sum();
      const double log_alpha = lp1 - lp0 + log_q(rev, rho) - log_q(fwd, cand);
      if (std::isfinite(log_alpha) && std::log(unif(rng)) < log_alpha) {
        apply_score_change(u, e, delta);
        ++accepted;
      }
    }
  }

  void sample_nu(int u, std::mt19937_64& rng) {
    const auto& cfg = d_.spec.sampler;
    const auto& sc = s_.scores[u];
    for (Eigen::Index m = 0; m < sc.cols(); ++m)
      s_.nu[u][m] = draw_inverse_gamma(cfg.ig_a + 0.5 * sc.rows(), cfg.ig_b + 0.5 * sc.col(m).squaredNorm(), rng);
  }

 private:
  void apply_score_change(int u, int e, const VectorXd& delta) {
    const auto& l = d_.latents[u];
    s_.scores[u].row(e) += delta.transpose();
    for (const auto& [k, i] : l.rows_of_entity[e]) eta_[k](i, 0) += l.psi[k].row(i).dot(delta);
  }

  const ModelDesign& d_;
  ModelState s_;
  std::vector<MatrixXd> eta_;
};

}  // namespace

BackfitResult backfit_init(const ModelDesign& design, const BackfitConfig& cfg) {
  Engine eng(design, initial_state(design));
  eng.set_intercepts();
  std::vector<double> edf(design.terms.size());
  for (size_t j = 0; j < design.terms.size(); ++j) edf[j] = design.terms[j].size();

  BackfitResult res;
  int decreases = 0;
  for (int cycle = 1; cycle <= cfg.max_cycles; ++cycle) {
    const auto eta_old = eng.eta();
    ModelState start = eng.state();
    for (size_t j = 0; j < design.terms.size(); ++j) eng.backfit_term(static_cast<int>(j), cfg, edf);
    for (size_t u = 0; u < design.latents.size(); ++u)
      for (int e = 0; e < design.latents[u].J(); ++e) eng.backfit_entity(static_cast<int>(u), e, cfg.max_halving);
    const double lp = log_posterior(design, eng.state());
    if (!std::isfinite(lp)) throw ConvergenceError("backfitting produced a non-finite log posterior");
    // Compared at equal variance parameters: the grid search may move them
    // to values with lower prior density.
    start.tau2 = eng.state().tau2;
    const double ref = log_posterior(design, start);
    decreases = lp < ref - cfg.divergence_tol * std::max(1.0, std::abs(ref)) ? decreases + 1 : 0;
    res.log_posterior_trace.push_back(lp);
    res.cycles = cycle;
    if (decreases >= 2) {
      std::ostringstream os;
      os << "backfitting diverged; log posterior trace:";
      for (double v : res.log_posterior_trace) os << ' ' << v;
      throw ConvergenceError(os.str());
    }
    double num = 0.0, den = 0.0;
    for (int k = 0; k < design.K(); ++k) {
      num += (eng.eta()[k] - eta_old[k]).squaredNorm();
      den += eta_old[k].squaredNorm();
    }
    if (std::sqrt(num) <= cfg.tol * std::max(std::sqrt(den), 1e-8)) {
      res.converged = true;
      break;
    }
  }
  res.state = eng.state();
  return res;
}

std::string beta_block_name(const ModelDesign& design, int term) {
  const auto& t = design.terms.at(term);
  const auto& p = design.predictors[t.predictor];
  return "beta_d" + std::to_string(p.dim + 1) + "_p" + std::to_string(p.param + 1) + "_t" +
         std::to_string(t.index_in_predictor + 1);
}

std::string tau2_block_name(const ModelDesign& design, int term) {
  return "tau2" + beta_block_name(design, term).substr(4);
}

std::string scores_block_name(const LatentDesign& latent) { return "scores_" + latent.spec.name; }
std::string nu_block_name(const LatentDesign& latent) { return "nu_" + latent.spec.name; }

std::uint64_t chain_seed(std::uint64_t seed, int chain) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(chain), 0x6d66616du};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

const PosteriorSamples::Block& PosteriorSamples::block(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.name == name) return b;
  throw ArgumentError("no posterior block '" + name + "'");
}

bool PosteriorSamples::has_block(const std::string& name) const {
  return std::any_of(blocks.begin(), blocks.end(), [&](const auto& b) { return b.name == name; });
}

PosteriorSamples mcmc_sample(const ModelDesign& design, const ModelState& init, const SamplerConfig& cfg) {
  if (cfg.draws < 1 || cfg.thin < 1 || cfg.burnin < 0 || cfg.chains < 1)
    throw ArgumentError("mcmc_sample: invalid sampler budget");
  for (const auto& b : init.beta)
    if (!b.allFinite()) throw ArgumentError("mcmc_sample: non-finite initial coefficients");
  for (const auto& sc : init.scores)
    if (!sc.allFinite()) throw ArgumentError("mcmc_sample: non-finite initial scores");

  PosteriorSamples out;
  out.chains = cfg.chains;
  out.draws_per_chain = cfg.draws;
  const int rows = cfg.chains * cfg.draws;
  struct Slot {
    int block;
    enum { Beta, Tau, Scores, Nu } what;
    int index;
  };
  std::vector<Slot> slots;
  for (size_t j = 0; j < design.terms.size(); ++j) {
    const auto& t = design.terms[j];
    PosteriorSamples::Block b{beta_block_name(design, static_cast<int>(j)), {}, MatrixXd(rows, t.size())};
    for (int c = 0; c < t.size(); ++c) b.columns.push_back("b" + std::to_string(c + 1));
    slots.push_back({static_cast<int>(out.blocks.size()), Slot::Beta, static_cast<int>(j)});
    out.blocks.push_back(std::move(b));
    if (t.n_penalties() > 0) {
      PosteriorSamples::Block v{tau2_block_name(design, static_cast<int>(j)), {}, MatrixXd(rows, t.n_penalties())};
      for (int c = 0; c < t.n_penalties(); ++c) v.columns.push_back("tau2_" + std::to_string(c + 1));
      slots.push_back({static_cast<int>(out.blocks.size()), Slot::Tau, static_cast<int>(j)});
      out.blocks.push_back(std::move(v));
    }
  }
  for (size_t u = 0; u < design.latents.size(); ++u) {
    const auto& l = design.latents[u];
    if (cfg.store_scores) {
      PosteriorSamples::Block b{scores_block_name(l), {}, MatrixXd(rows, static_cast<Eigen::Index>(l.J()) * l.M())};
      for (int e = 0; e < l.J(); ++e)
        for (int m = 0; m < l.M(); ++m) b.columns.push_back(entity_label(l.entities[e]) + "_m" + std::to_string(m + 1));
      slots.push_back({static_cast<int>(out.blocks.size()), Slot::Scores, static_cast<int>(u)});
      out.blocks.push_back(std::move(b));
    }
    PosteriorSamples::Block v{nu_block_name(l), {}, MatrixXd(rows, l.M())};
    for (int m = 0; m < l.M(); ++m) v.columns.push_back("nu" + std::to_string(m + 1));
    slots.push_back({static_cast<int>(out.blocks.size()), Slot::Nu, static_cast<int>(u)});
    out.blocks.push_back(std::move(v));
  }

  out.chain_seeds.resize(cfg.chains);
  out.ridge_events.assign(cfg.chains, 0);
  std::vector<std::vector<double>> term_acc(design.terms.size(), std::vector<double>(cfg.chains, 0.0));
  std::vector<std::vector<double>> score_acc(design.latents.size(), std::vector<double>(cfg.chains, 0.0));

  auto run_chain = [&](int c) {
    const std::uint64_t seed = chain_seed(cfg.seed, c);
    out.chain_seeds[c] = seed;
    std::mt19937_64 rng(seed);
    Engine eng(design, init);
    std::vector<long> t_acc(design.terms.size(), 0), s_acc(design.latents.size(), 0);
    int ridged = 0;
    const long total = cfg.burnin + static_cast<long>(cfg.draws) * cfg.thin;
    int stored = 0;
    for (long it = 0; it < total; ++it) {
      for (size_t j = 0; j < design.terms.size(); ++j) {
        eng.sample_term(static_cast<int>(j), rng, t_acc[j], ridged);
        eng.sample_variances(static_cast<int>(j), rng);
      }
      for (size_t u = 0; u < design.latents.size(); ++u) {
        eng.sample_scores(static_cast<int>(u), rng, s_acc[u], ridged);
        eng.sample_nu(static_cast<int>(u), rng);
      }
      if (it >= cfg.burnin && (it - cfg.burnin + 1) % cfg.thin == 0) {
        const int row = c * cfg.draws + stored++;
        const auto& st = eng.state();
        for (const auto& sl : slots) {
          auto& dst = out.blocks[sl.block].draws;
          switch (sl.what) {
            case Slot::Beta: dst.row(row) = st.beta[sl.index].transpose(); break;
            case Slot::Tau:
              for (size_t l = 0; l < st.tau2[sl.index].size(); ++l) dst(row, l) = st.tau2[sl.index][l];
              break;
            case Slot::Scores: {
              const auto& sc = st.scores[sl.index];
              for (Eigen::Index e = 0; e < sc.rows(); ++e) dst.block(row, e * sc.cols(), 1, sc.cols()) = sc.row(e);
              break;
            }
            case Slot::Nu: dst.row(row) = st.nu[sl.index].transpose(); break;
          }
        }
      }
    }
    for (size_t j = 0; j < design.terms.size(); ++j) term_acc[j][c] = double(t_acc[j]) / total;
    for (size_t u = 0; u < design.latents.size(); ++u)
      score_acc[u][c] = design.latents[u].J() ? double(s_acc[u]) / (double(total) * design.latents[u].J()) : 0.0;
    out.ridge_events[c] = ridged;
  };

  const int n_threads = std::max(1, std::min(cfg.threads, cfg.chains));
  if (n_threads == 1) {
    for (int c = 0; c < cfg.chains; ++c) run_chain(c);
  } else {
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < n_threads; ++w)
      pool.emplace_back([&] {
        for (int c = next++; c < cfg.chains; c = next++) {
          try {
            run_chain(c);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
  }
  for (size_t j = 0; j < design.terms.size(); ++j)
    out.acceptance[beta_block_name(design, static_cast<int>(j))] = term_acc[j];
  for (size_t u = 0; u < design.latents.size(); ++u)
    out.acceptance[scores_block_name(design.latents[u])] = score_acc[u];
  return out;
}

ModelState state_at_draw(const ModelDesign& design, const PosteriorSamples& samples, int row,
                         const ModelState& fallback) {
  ModelState s = fallback;
  for (size_t j = 0; j < design.terms.size(); ++j) {
    s.beta[j] = samples.block(beta_block_name(design, static_cast<int>(j))).draws.row(row).transpose();
    if (design.terms[j].n_penalties() > 0) {
      const auto& d = samples.block(tau2_block_name(design, static_cast<int>(j))).draws;
      for (Eigen::Index l = 0; l < d.cols(); ++l) s.tau2[j][l] = d(row, l);
    }
  }
  for (size_t u = 0; u < design.latents.size(); ++u) {
    const auto& l = design.latents[u];
    const auto name = scores_block_name(l);
    if (samples.has_block(name)) {
      const auto& d = samples.block(name).draws;
      for (int e = 0; e < l.J(); ++e) s.scores[u].row(e) = d.block(row, static_cast<Eigen::Index>(e) * l.M(), 1, l.M());
    }
    s.nu[u] = samples.block(nu_block_name(l)).draws.row(row).transpose();
  }
  return s;
}

ModelState posterior_mean_state(const ModelDesign& design, const PosteriorSamples& samples,
                                const ModelState& fallback) {
  ModelState s = fallback;
  for (size_t j = 0; j < design.terms.size(); ++j) {
    s.beta[j] = samples.block(beta_block_name(design, static_cast<int>(j))).draws.colwise().mean().transpose();
    if (design.terms[j].n_penalties() > 0) {
      const VectorXd m = samples.block(tau2_block_name(design, static_cast<int>(j))).draws.colwise().mean();
      for (Eigen::Index l = 0; l < m.size(); ++l) s.tau2[j][l] = m[l];
    }
  }
  for (size_t u = 0; u < design.latents.size(); ++u) {
    const auto& l = design.latents[u];
    const auto name = scores_block_name(l);
    if (samples.has_block(name)) {
      const VectorXd m = samples.block(name).draws.colwise().mean();
      for (int e = 0; e < l.J(); ++e) s.scores[u].row(e) = m.segment(static_cast<Eigen::Index>(e) * l.M(), l.M());
    }
    s.nu[u] = samples.block(nu_block_name(l)).draws.colwise().mean().transpose();
  }
  return s;
}

Eigen::VectorXd rhat(const PosteriorSamples& samples, const std::string& name) {
  const auto& d = samples.block(name).draws;
  const int m = samples.chains, n = samples.draws_per_chain;
  if (m < 2 || n < 2) throw ArgumentError("rhat: need at least two chains with two draws");
  VectorXd out(d.cols());
  for (Eigen::Index c = 0; c < d.cols(); ++c) {
    VectorXd means(m), vars(m);
    for (int ch = 0; ch < m; ++ch) {
      const auto seg = d.col(c).segment(static_cast<Eigen::Index>(ch) * n, n);
      means[ch] = seg.mean();
      vars[ch] = (seg.array() - means[ch]).square().sum() / (n - 1);
    }
    const double W = vars.mean();
    const double B = n * (means.array() - means.mean()).square().sum() / (m - 1);
    const double var_plus = (n - 1.0) / n * W + B / n;
    out[c] = W > 0 ? std::sqrt(var_plus / W) : 1.0;
  }
  return out;
}

PredictionDesign build_prediction_design(const ModelDesign& design, const std::vector<NewPoint>& points,
                                         const CovariateTable& covariates) {
  PredictionDesign pd;
  pd.points = points;
  for (const auto& p : points) {
    if (p.dim < 0 || p.dim >= design.K()) throw ArgumentError("prediction: dimension out of range");
    if (!design.domain.contains(p.t)) throw DomainError("prediction: time outside the domain");
  }
  for (const auto& t : design.terms) {
    const auto& pr = design.predictors[t.predictor];
    std::vector<int> rows;
    std::vector<double> ts;
    std::vector<CurveKey> keys;
    for (size_t i = 0; i < points.size(); ++i)
      if (points[i].dim == pr.dim) {
        rows.push_back(static_cast<int>(i));
        ts.push_back(points[i].t);
        keys.push_back(points[i].curve);
      }
    int cov = -1;
    if (t.covariate >= 0) {
      cov = covariates.index(t.spec.covariate);
      if (cov < 0) throw ArgumentError("prediction: covariate '" + t.spec.covariate + "' missing");
    }
    std::vector<double> x(keys.size(), 1.0);
    if (cov >= 0)
      for (size_t i = 0; i < keys.size(); ++i) {
        try {
          x[i] = covariates.value(keys[i], cov);
        } catch (const SchemaError& e) {
          throw ArgumentError(std::string("prediction: ") + e.what());
        }
      }
    pd.term_rows.push_back(rows);
    pd.term_X.push_back(rows.empty() ? MatrixXd(0, t.size()) : term_rows(t, ts, x));
  }
  for (const auto& l : design.latents) {
    std::vector<int> rows, ents;
    MatrixXd psi(0, l.M());
    std::vector<std::vector<double>> by_dim_t(design.K());
    std::vector<std::vector<int>> by_dim_row(design.K());
    for (size_t i = 0; i < points.size(); ++i) {
      const int k = points[i].dim;
      if (!l.uses_dim(k)) continue;
      by_dim_t[k].push_back(points[i].t);
      by_dim_row[k].push_back(static_cast<int>(i));
    }
    for (int k = 0; k < design.K(); ++k) {
      if (by_dim_t[k].empty()) continue;
      const MatrixXd P = evaluate_eigenbasis(l.basis, k, by_dim_t[k]);
      const auto old = psi.rows();
      psi.conservativeResize(old + P.rows(), l.M());
      psi.bottomRows(P.rows()) = P;
      for (int i : by_dim_row[k]) {
        const int e = l.entity_index(points[i].curve);
        if (e < 0)
          throw ArgumentError("prediction: unknown level for latent '" + l.spec.name + "' (unit " +
                              std::to_string(points[i].curve.unit) + ")");
        rows.push_back(i);
        ents.push_back(e);
      }
    }
    pd.latent_rows.push_back(std::move(rows));
    pd.latent_entity.push_back(std::move(ents));
    pd.latent_psi.push_back(std::move(psi));
  }
  return pd;
}

Eigen::MatrixXd predict_eta(const ModelDesign& design, const PredictionDesign& pd, const ModelState& state) {
  MatrixXd eta = MatrixXd::Constant(static_cast<Eigen::Index>(pd.points.size()), kMaxParams, std::nan(""));
  for (size_t i = 0; i < pd.points.size(); ++i)
    for (int r = 0; r < design.families[pd.points[i].dim].n_params(); ++r) eta(i, r) = 0.0;
  for (size_t j = 0; j < design.terms.size(); ++j) {
    const int r = design.predictors[design.terms[j].predictor].param;
    const VectorXd v = pd.term_X[j] * state.beta[j];
    for (size_t a = 0; a < pd.term_rows[j].size(); ++a) eta(pd.term_rows[j][a], r) += v[a];
  }
  for (size_t u = 0; u < design.latents.size(); ++u)
    for (size_t a = 0; a < pd.latent_rows[u].size(); ++a)
      eta(pd.latent_rows[u][a], 0) += pd.latent_psi[u].row(a).dot(state.scores[u].row(pd.latent_entity[u][a]));
  return eta;
}

double empirical_quantile(std::vector<double> v, double p) {
  if (v.empty()) throw ArgumentError("empirical_quantile: no values");
  if (!(p >= 0 && p <= 1)) throw ArgumentError("empirical_quantile: probability outside [0,1]");
  std::sort(v.begin(), v.end());
  const double h = (v.size() - 1) * p;
  const auto lo = static_cast<size_t>(std::floor(h));
  const size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - lo) * (v[hi] - v[lo]);
}

Prediction predict(const ModelDesign& design, const PosteriorSamples& samples, const PredictionDesign& pd,
                   const std::vector<double>& quantiles, const ModelState& fallback) {
  const auto n = static_cast<Eigen::Index>(pd.points.size());
  const int S = samples.n_draws();
  Prediction out;
  out.quantiles = quantiles;
  out.eta_mean = MatrixXd::Zero(n, kMaxParams);
  out.theta_mean = MatrixXd::Zero(n, kMaxParams);
  std::vector<MatrixXd> theta(kMaxParams, MatrixXd(n, S));
  for (int s = 0; s < S; ++s) {
    const auto st = state_at_draw(design, samples, s, fallback);
    const MatrixXd eta = predict_eta(design, pd, st);
    out.eta_mean += eta;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& fam = design.families[pd.points[i].dim];
      for (int r = 0; r < kMaxParams; ++r)
        theta[r](i, s) = r < fam.n_params() ? inverse_link(fam.link(r), eta(i, r)) : std::nan("");
    }
  }
  out.eta_mean /= S;
  for (int r = 0; r < kMaxParams; ++r) out.theta_mean.col(r) = theta[r].rowwise().mean();
  for (double q : quantiles) {
    MatrixXd Q = MatrixXd::Constant(n, kMaxParams, std::nan(""));
    for (Eigen::Index i = 0; i < n; ++i)
      for (int r = 0; r < design.families[pd.points[i].dim].n_params(); ++r) {
        std::vector<double> v(S);
        for (int s = 0; s < S; ++s) v[s] = theta[r](i, s);
        Q(i, r) = empirical_quantile(std::move(v), q);
      }
    out.theta_q.push_back(std::move(Q));
  }
  return out;
}

Eigen::MatrixXd term_curve_draws(const ModelDesign& design, const PosteriorSamples& samples, int term,
                                 const std::vector<double>& times) {
  const auto& t = design.terms.at(term);
  if (t.spec.kind == TermKind::SmoothInteraction)
    throw ArgumentError("term_curve_draws: smooth interactions need a covariate value");
  const std::vector<double> ones(times.size(), 1.0);
  const MatrixXd B = term_rows(t, times, ones);
  return samples.block(beta_block_name(design, term)).draws * B.transpose();
}

void PosteriorSamples::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["chains"] = chains;
  meta["draws_per_chain"] = draws_per_chain;
  meta["chain_seeds"] = chain_seeds;
  meta["ridge_events"] = ridge_events;
  meta["acceptance"] = acceptance;
  meta["blocks"] = nlohmann::json::array();
  for (const auto& b : blocks) {
    meta["blocks"].push_back({{"name", b.name}, {"file", b.name + ".csv"}, {"columns", b.columns}});
    std::ostringstream os;
    os << "chain,draw";
    for (const auto& c : b.columns) os << ',' << c;
    os << '\n';
    for (Eigen::Index r = 0; r < b.draws.rows(); ++r) {
      os << r / draws_per_chain + 1 << ',' << r % draws_per_chain + 1;
      for (Eigen::Index c = 0; c < b.draws.cols(); ++c) os << ',' << csv::format(b.draws(r, c));
      os << '\n';
    }
    csv::write_atomic(dir / (b.name + ".csv"), os.str());
  }
  csv::write_atomic(dir / "samples.json", meta.dump(2) + "\n");
}

PosteriorSamples PosteriorSamples::read(const std::filesystem::path& dir) {
  std::ifstream in(dir / "samples.json");
  if (!in) throw SchemaError("cannot open '" + (dir / "samples.json").string() + "'");
  nlohmann::json meta;
  PosteriorSamples s;
  try {
    in >> meta;
    s.chains = meta.at("chains").get<int>();
    s.draws_per_chain = meta.at("draws_per_chain").get<int>();
    s.chain_seeds = meta.at("chain_seeds").get<std::vector<std::uint64_t>>();
    s.ridge_events = meta.at("ridge_events").get<std::vector<int>>();
    s.acceptance = meta.at("acceptance").get<std::map<std::string, std::vector<double>>>();
    for (const auto& bj : meta.at("blocks")) {
      Block b;
      b.name = bj.at("name").get<std::string>();
      b.columns = bj.at("columns").get<std::vector<std::string>>();
      const auto table = csv::read(dir / bj.at("file").get<std::string>());
      if (table.header.size() != b.columns.size() + 2)
        throw SchemaError("block '" + b.name + "': column count mismatch");
      if (static_cast<int>(table.rows.size()) != s.n_draws())
        throw SchemaError("block '" + b.name + "': draw count mismatch");
      b.draws.resize(s.n_draws(), static_cast<Eigen::Index>(b.columns.size()));
      for (size_t r = 0; r < table.rows.size(); ++r)
        for (size_t c = 0; c < b.columns.size(); ++c) b.draws(r, c) = csv::parse_double(table.rows[r][c + 2]);
      s.blocks.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError((dir / "samples.json").string() + ": " + e.what());
  }
  return s;
}

}  // namespace mfam
