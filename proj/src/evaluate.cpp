#include "mfam/evaluate.hpp"

#include "mfam/csv.hpp"
#include "mfam/error.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mfam {

using Eigen::MatrixXd;
using Eigen::VectorXd;

double rrmse(const MatrixXd& truth, const MatrixXd& est, const VectorXd& q) {
  if (truth.rows() != est.rows() || truth.cols() != est.cols()) throw ArgumentError("rrmse: shape mismatch");
  if (truth.cols() != q.size()) throw ArgumentError("rrmse: grid mismatch");
  const double num = ((truth - est).array().square().matrix() * q).sum();
  const double den = (truth.array().square().matrix() * q).sum();
  if (!(den > 0)) throw DegenerateError("rrmse: truth has zero norm");
  return std::sqrt(num / den);
}

VectorXd rrmse(const CurveSet& truth, const CurveSet& est) {
  if (truth.K() != est.K()) throw ArgumentError("rrmse: dimension count mismatch");
  if (truth.grid != est.grid) throw ArgumentError("rrmse: truth and estimate grids differ");
  if (truth.keys != est.keys) throw ArgumentError("rrmse: truth and estimate index sets differ");
  const VectorXd q = quadrature_weights(truth.grid, truth.domain);
  VectorXd out(truth.K());
  for (int k = 0; k < truth.K(); ++k) out[k] = rrmse(truth.values[k], est.values[k], q);
  return out;
}

namespace {

std::pair<double, double> interval(const MatrixXd& draws, Eigen::Index g, double level) {
  std::vector<double> v(draws.col(g).data(), draws.col(g).data() + draws.rows());
  const double a = 0.5 * (1.0 - level);
  return {empirical_quantile(v, a), empirical_quantile(v, 1.0 - a)};
}

void check_draws(const std::vector<MatrixXd>& draws, double level) {
  if (draws.empty()) throw ArgumentError("coverage: no curves");
  if (!(level > 0 && level < 1)) throw ArgumentError("coverage: level must lie in (0, 1)");
  for (const auto& d : draws) {
    if (d.rows() < 100) throw ArgumentError("coverage: need at least 100 draws");
    if (d.cols() != draws.front().cols()) throw ArgumentError("coverage: grid mismatch");
  }
}

}  // namespace

VectorXd pointwise_coverage(const std::vector<MatrixXd>& draws, const MatrixXd& truth, double level) {
  check_draws(draws, level);
  if (truth.rows() != static_cast<Eigen::Index>(draws.size()) || truth.cols() != draws.front().cols())
    throw ArgumentError("coverage: truth shape mismatch");
  VectorXd fc = VectorXd::Zero(truth.cols());
  for (size_t i = 0; i < draws.size(); ++i)
    for (Eigen::Index g = 0; g < truth.cols(); ++g) {
      const auto [lo, hi] = interval(draws[i], g, level);
      const double f = truth(static_cast<Eigen::Index>(i), g);
      if (lo <= f && f <= hi) fc[g] += 1.0;
    }
  return fc / double(draws.size());
}

VectorXd interval_width(const std::vector<MatrixXd>& draws, double level) {
  check_draws(draws, level);
  VectorXd w = VectorXd::Zero(draws.front().cols());
  for (const auto& d : draws)
    for (Eigen::Index g = 0; g < d.cols(); ++g) {
      const auto [lo, hi] = interval(d, g, level);
      w[g] += hi - lo;
    }
  return w / double(draws.size());
}

ScalarSummary summarize_draws(const VectorXd& draws, double level) {
  if (draws.size() == 0) throw ArgumentError("summarize_draws: no draws");
  std::vector<double> v(draws.data(), draws.data() + draws.size());
  const double a = 0.5 * (1.0 - level);
  return {draws.mean(), empirical_quantile(v, a), empirical_quantile(v, 1.0 - a)};
}

ScalarMetrics scalar_metrics(const std::vector<ScalarSummary>& reps, double truth) {
  if (reps.size() < 2) throw ArgumentError("scalar_metrics: need at least two replicates");
  ScalarMetrics m;
  for (const auto& r : reps) {
    m.bias += r.mean - truth;
    m.rmse += (r.mean - truth) * (r.mean - truth);
    if (r.lo <= truth && truth <= r.hi) m.coverage += 1.0;
  }
  const double n = static_cast<double>(reps.size());
  m.bias /= n;
  m.rmse = std::sqrt(m.rmse / n);
  m.coverage /= n;
  return m;
}

Reconstruction reconstruct_latent_ls(const CurveSet& truth, const EigenBasis& basis) {
  if (truth.K() != basis.K) throw ArgumentError("reconstruct_latent_ls: dimension count mismatch");
  const int K = truth.K();
  const auto n = static_cast<Eigen::Index>(truth.keys.size());
  const int M = basis.M();
  const VectorXd q = quadrature_weights(truth.grid, truth.domain);
  std::vector<MatrixXd> psi(K);  // G x M per dimension
  MatrixXd gram = MatrixXd::Zero(M, M);
  for (int k = 0; k < K; ++k) {
    psi[k] = evaluate_eigenbasis(basis, k, truth.grid);
    gram += basis.weights[k] * psi[k].transpose() * q.asDiagonal() * psi[k];
  }
  MatrixXd rhs = MatrixXd::Zero(M, n);
  for (int k = 0; k < K; ++k) rhs += basis.weights[k] * psi[k].transpose() * q.asDiagonal() * truth.values[k].transpose();
  Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(gram);
  cod.setThreshold(1e-10);
  Reconstruction out;
  out.rank_deficient = cod.rank() < M;
  out.scores = cod.solve(rhs).transpose();
  out.rrmse.resize(K);
  for (int k = 0; k < K; ++k) out.rrmse[k] = rrmse(truth.values[k], out.scores * psi[k].transpose(), q);
  return out;
}

namespace {

std::vector<NewPoint> curve_points(int K, const std::vector<CurveKey>& keys, const std::vector<double>& grid) {
  std::vector<NewPoint> pts;
  pts.reserve(static_cast<size_t>(K) * keys.size() * grid.size());
  for (int k = 0; k < K; ++k)
    for (const auto& key : keys)
      for (double t : grid) pts.push_back({k, key, t});
  return pts;
}

CurveSet empty_set(int K, const ModelDesign& design, const std::vector<CurveKey>& keys, const std::vector<double>& grid) {
  CurveSet cs;
  cs.grid = grid;
  cs.domain = design.spec.domain;
  cs.keys = keys;
  cs.values.assign(K, MatrixXd(static_cast<Eigen::Index>(keys.size()), static_cast<Eigen::Index>(grid.size())));
  return cs;
}

void scatter(const MatrixXd& eta, int param, CurveSet& cs) {
  const auto n = static_cast<Eigen::Index>(cs.keys.size()), G = static_cast<Eigen::Index>(cs.grid.size());
  Eigen::Index p = 0;
  for (int k = 0; k < cs.K(); ++k)
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index g = 0; g < G; ++g) cs.values[k](i, g) = eta(p++, param);
}

}  // namespace

CurveSet eta_curves(const ModelDesign& design, const ModelState& state, const std::vector<CurveKey>& keys,
                    const std::vector<double>& grid, const CovariateTable& covariates, int param) {
  const int K = static_cast<int>(design.spec.families.size());
  const auto pd = build_prediction_design(design, curve_points(K, keys, grid), covariates);
  CurveSet cs = empty_set(K, design, keys, grid);
  scatter(predict_eta(design, pd, state), param, cs);
  return cs;
}

std::vector<std::vector<MatrixXd>> eta_curve_draws(const ModelDesign& design, const PosteriorSamples& samples,
                                                   const ModelState& fallback, const std::vector<CurveKey>& keys,
                                                   const std::vector<double>& grid, const CovariateTable& covariates,
                                                   int param) {
  const int K = static_cast<int>(design.spec.families.size());
  const auto pd = build_prediction_design(design, curve_points(K, keys, grid), covariates);
  const int S = samples.n_draws();
  const auto G = static_cast<Eigen::Index>(grid.size());
  std::vector<std::vector<MatrixXd>> out(K, std::vector<MatrixXd>(keys.size(), MatrixXd(S, G)));
  for (int s = 0; s < S; ++s) {
    const MatrixXd eta = predict_eta(design, pd, state_at_draw(design, samples, s, fallback));
    Eigen::Index p = 0;
    for (int k = 0; k < K; ++k)
      for (size_t i = 0; i < keys.size(); ++i)
        for (Eigen::Index g = 0; g < G; ++g) out[k][i](s, g) = eta(p++, param);
  }
  return out;
}

CurveSet latent_curves(const ModelDesign& design, const ModelState& state, const std::vector<CurveKey>& keys,
                       const std::vector<double>& grid, const CovariateTable& covariates) {
  ModelState latent_only = state;
  for (auto& b : latent_only.beta) b.setZero();
  return eta_curves(design, latent_only, keys, grid, covariates, 0);
}

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "scenario,component,dim,replicate,metric,value\n";
  for (const auto& r : rows)
    os << r.scenario << ',' << r.component << ',' << r.dim << ',' << r.replicate << ',' << r.metric << ','
       << csv::format(r.value) << '\n';
  csv::write_atomic(path, os.str());
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  if (t.header != std::vector<std::string>{"scenario", "component", "dim", "replicate", "metric", "value"})
    throw SchemaError(path.string() + ": expected header scenario,component,dim,replicate,metric,value");
  std::vector<MetricRow> out;
  for (const auto& r : t.rows)
    out.push_back({r[0], r[1], static_cast<int>(csv::parse_long(r[2])), static_cast<int>(csv::parse_long(r[3])), r[4],
                   csv::parse_double(r[5])});
  return out;
}

}  // namespace mfam
