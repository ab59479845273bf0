#pragma once

#include "mfam/bases.hpp"
#include "mfam/fitter.hpp"
#include "mfam/funcdata.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <vector>

namespace mfam {

// Curves of every dimension on a shared grid: values[k] is keys x G.
struct CurveSet {
  std::vector<double> grid;
  Domain domain;
  std::vector<CurveKey> keys;
  std::vector<Eigen::MatrixXd> values;

  int K() const { return static_cast<int>(values.size()); }
};

// sqrt(mean_i ||f_i - g_i||^2 / mean_i ||f_i||^2) with trapezoid norms.
// Throws DegenerateError when every truth curve is zero.
double rrmse(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& est, const Eigen::VectorXd& quadrature);
Eigen::VectorXd rrmse(const CurveSet& truth, const CurveSet& est);

// draws[i] holds the draws of curve i (draws x G). Returns the share of
// curves whose central `level` interval contains the truth, per grid point.
Eigen::VectorXd pointwise_coverage(const std::vector<Eigen::MatrixXd>& draws, const Eigen::MatrixXd& truth,
                                   double level = 0.95);
// Mean width of the central intervals over curves, per grid point.
Eigen::VectorXd interval_width(const std::vector<Eigen::MatrixXd>& draws, double level = 0.95);

struct ScalarSummary {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

ScalarSummary summarize_draws(const Eigen::VectorXd& draws, double level = 0.95);

struct ScalarMetrics {
  double bias = 0.0;
  double rmse = 0.0;
  double coverage = 0.0;
};

// Bias and root mean squared error of the posterior means and the share of
// intervals covering the truth, over replicates.
ScalarMetrics scalar_metrics(const std::vector<ScalarSummary>& replicates, double truth);

struct Reconstruction {
  Eigen::VectorXd rrmse;   // per dimension
  Eigen::MatrixXd scores;  // keys x M
  bool rank_deficient = false;
};

// Least-squares scores of each true multivariate curve under the weighted
// scalar product of `basis`, then rrMSE of the reconstruction. The basis is
// interpolated onto the grid of the truth.
Reconstruction reconstruct_latent_ls(const CurveSet& truth, const EigenBasis& basis);

// Predictor of parameter `param` of every dimension for the given curves on
// `grid` at a fixed parameter state.
CurveSet eta_curves(const ModelDesign& design, const ModelState& state, const std::vector<CurveKey>& keys,
                    const std::vector<double>& grid, const CovariateTable& covariates, int param = 0);

// Draws of the same predictor: result[k][i] is draws x G.
std::vector<std::vector<Eigen::MatrixXd>> eta_curve_draws(const ModelDesign& design, const PosteriorSamples& samples,
                                                          const ModelState& fallback, const std::vector<CurveKey>& keys,
                                                          const std::vector<double>& grid,
                                                          const CovariateTable& covariates, int param = 0);

// Latent part of the location predictor at a fixed state.
CurveSet latent_curves(const ModelDesign& design, const ModelState& state, const std::vector<CurveKey>& keys,
                       const std::vector<double>& grid, const CovariateTable& covariates);

struct MetricRow {
  std::string scenario;
  std::string component;
  int dim = 0;  // one-based; 0 for scalar components
  int replicate = 0;
  std::string metric;
  double value = 0.0;
};

// CSV `scenario,component,dim,replicate,metric,value`.
void write_metrics_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace mfam
