#pragma once

#include "mfam/bases.hpp"
#include "mfam/funcdata.hpp"
#include "mfam/model.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mfam {

struct BinSpec {
  std::vector<double> centers;
  double halfwidth = 0.3;
  Domain domain;

  // n equidistant centers: endpoints included on an interval, lo + j L / n
  // on a cyclic domain.
  static BinSpec equidistant(int n, double halfwidth, const Domain& domain);
  int size() const { return static_cast<int>(centers.size()); }
  // Distance in time units, wrapping around on cyclic domains.
  double distance(double t, int bin) const;
};

struct BinnedData {
  std::vector<std::vector<int>> members;  // per bin: indices into the observation vector
  std::vector<std::string> warnings;
};

// Assigns every observation to all bins within halfwidth of its time.
// Throws ArgumentError if an observation falls in no bin.
BinnedData bin_data(const std::vector<Observation>& obs, const BinSpec& bins);

// Fixed part of a local model: intercept plus the named covariates on the
// first parameter, intercept plus `scale_covariates` on the second.
struct LocalModelSpec {
  std::vector<std::string> covariates;
  std::vector<std::string> scale_covariates;
  int levels = 1;  // 1: unit intercepts; 2: unit and nested curve intercepts
};

struct LocalModelConfig {
  int max_iter = 100;
  double tol = 1e-8;
  double log_var_lo = -14.0;
  double log_var_hi = 8.0;
  int variance_sweeps = 3;  // coordinate sweeps over the two variances
  // Posterior means from a short MCMC run of the fitter instead of the
  // Laplace mode; the variances are posterior means of the score variances.
  bool sample = false;
  SamplerConfig sampler{200, 300, 1};
};

struct LocalFit {
  std::vector<CurveKey> units;  // (unit, none)
  Eigen::VectorXd b_unit;
  std::vector<CurveKey> curves;  // levels == 2 only
  Eigen::VectorXd b_curve;
  double var_unit = 0.0;
  double var_curve = 0.0;
  Eigen::VectorXd fixed;        // intercept, covariates
  Eigen::VectorXd scale_fixed;  // empty for one-parameter families
  bool converged = true;
};

// Laplace-approximate random-intercept GLMM for the observations of one
// bin: modes of the fixed effects and random intercepts given the variances,
// variances maximising the Laplace marginal likelihood.
LocalFit fit_local_mixed_model(const std::vector<Observation>& obs, const Family& family,
                               const CovariateTable& covariates, const LocalModelSpec& spec,
                               const LocalModelConfig& config = {});

// Rows are units (or curves), columns bins; NaN where a row has no data in
// a bin.
struct LatentMatrix {
  std::string level;
  std::vector<CurveKey> keys;
  Eigen::MatrixXd values;
};

struct UnivariateFPCA {
  std::string level = "L0";
  Domain domain;
  std::vector<double> grid;
  Eigen::MatrixXd phi;          // M x G
  Eigen::VectorXd upsilon;      // M
  Eigen::VectorXd eigenvalues;  // all nonnegative eigenvalues of the smoothed covariance
  double pve = 0.99;
  std::vector<CurveKey> keys;
  Eigen::MatrixXd scores;  // keys x M
  std::vector<std::string> warnings;

  int M() const { return static_cast<int>(phi.rows()); }
  // One-dimensional EigenBasis with eigenvalues upsilon.
  EigenBasis as_basis() const;
};

struct SmoothingConfig {
  int n_basis = 7;
  int degree = 3;
  int order = 2;
  int output_points = 101;
};

// Smooths a bin-level covariance (off-diagonal entries only) with a tensor
// P-spline whose smoothing parameter minimises GCV, evaluates it on an
// output grid and eigendecomposes it under trapezoid quadrature.
UnivariateFPCA covariance_fpca(const Eigen::MatrixXd& cov, const std::vector<double>& centers, const Domain& domain,
                               double pve, const SmoothingConfig& smoothing);

// Pairwise-complete sample covariance (divisor n_pairs - 1) of centred
// columns, followed by covariance_fpca. Scores are quadrature projections
// of the centred rows with missing entries set to zero.
UnivariateFPCA fast_covariance_fpca(const LatentMatrix& latent, const std::vector<double>& centers,
                                    const Domain& domain, double pve, const SmoothingConfig& smoothing);

// Pairwise-complete covariance of the columns of `values`.
Eigen::MatrixXd pairwise_covariance(const Eigen::MatrixXd& values);

struct MultilevelSplit {
  LatentMatrix between;  // unit means of curve-level intercepts
  LatentMatrix within;   // deviations from the unit mean
  Eigen::MatrixXd cov_between;
  Eigen::MatrixXd cov_within;
};

// Method-of-moments split of curve-level intercepts b_ij = u_i + v_ij into
// unit-level and curve-level covariances.
MultilevelSplit multilevel_split(const LatentMatrix& curve_level);

struct RefitConfig {
  bool enabled = true;
  bool sample = true;  // posterior means from MCMC; otherwise the backfitting mode
  int n_basis_t = 14;
  SamplerConfig sampler;
  BackfitConfig backfit;
};

// Re-estimates the scores of one dimension in a univariate functional
// additive model with the estimated eigenfunctions as random-effect basis.
// `fpcas` holds one FPCA per latent level: the first at the unit level and,
// for grouped data, the second at the curve level.
void refit_scores(const Dataset& data_dim, const Family& family, std::vector<UnivariateFPCA>& fpcas,
                  const LocalModelSpec& fixed, const RefitConfig& config);

struct GfpcaConfig {
  int n_bins = 11;
  double halfwidth = 0.3;
  double pve = 0.99;
  LocalModelSpec local;
  LocalModelConfig local_config;
  SmoothingConfig smoothing;
  RefitConfig refit;
  // Level tags of the unit- and curve-level processes.
  std::string unit_level = "L0";
  std::string curve_level = "L1";
};

GfpcaConfig gfpca_config_from_json(const nlohmann::json& j);

// Full univariate pipeline for one single-dimension dataset: binning, local
// models, covariance smoothing, eigendecomposition and score refit. Returns
// one FPCA per latent level.
std::vector<UnivariateFPCA> run_gfpca(const Dataset& data_dim, const GfpcaConfig& config);

// CSV `level,m,t,value` with a JSON sidecar (eigenvalues, pve, M, domain)
// and a scores CSV `level,unit,group,m,score`.
void write_univariate_fpcas(const std::vector<UnivariateFPCA>& fpcas, const std::filesystem::path& csv_path,
                            const std::filesystem::path& json_path, const std::filesystem::path& scores_path);
std::vector<UnivariateFPCA> read_univariate_fpcas(const std::filesystem::path& csv_path,
                                                  const std::filesystem::path& json_path,
                                                  const std::filesystem::path& scores_path);

}  // namespace mfam
