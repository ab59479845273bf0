#pragma once

#include "mfam/bases.hpp"
#include "mfam/funcdata.hpp"
#include "mfam/model.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace mfam {

// Evaluated basis and prior structure of one non-latent term. Rows are the
// observations of the term's dimension in dataset order.
struct TermDesign {
  int predictor = 0;
  int index_in_predictor = 0;
  TermSpec spec;
  Eigen::MatrixXd X;
  // Prior precision is sum_l P[l] / tau2[l]; without penalties the
  // coefficients get independent vague normal priors.
  std::vector<Eigen::MatrixXd> P;
  std::vector<int> rank;
  // Eigenvalues of the two marginal penalties of an anisotropic term.
  Eigen::VectorXd eig_x, eig_t;
  // Needed to evaluate the term at new points.
  BSplineSpec basis_t, basis_x;
  Eigen::MatrixXd Zx;  // sum-to-zero reparameterisation of the covariate margin
  int covariate = -1;

  int size() const { return static_cast<int>(X.cols()); }
  int n_penalties() const { return static_cast<int>(P.size()); }
  std::string name() const;
};

struct PredictorDesign {
  int dim = 0;
  int param = 0;
  std::vector<int> terms;
};

// Functional random effect sum_m rho_{em} psi_m^(k)(t) for entity e (a unit
// or a curve). Components with zero eigenvalue are dropped.
struct LatentDesign {
  LatentSpec spec;
  EigenBasis basis;
  std::vector<CurveKey> entities;
  std::vector<Eigen::MatrixXd> psi;             // per dimension: n_k x M (empty if unused)
  std::vector<std::vector<int>> entity_of_row;  // per dimension
  std::vector<std::vector<std::pair<int, int>>> rows_of_entity;  // (dim, row)
  int dropped = 0;                              // zero-eigenvalue components removed

  int M() const { return basis.M(); }
  int J() const { return static_cast<int>(entities.size()); }
  bool uses_dim(int k) const { return psi[k].rows() > 0; }
  int entity_index(const CurveKey& key) const;
};

struct ModelDesign {
  ModelSpec spec;
  std::vector<Family> families;
  std::vector<Eigen::VectorXd> y;                    // per dimension
  std::vector<std::vector<double>> t;                // per dimension
  std::vector<std::vector<CurveKey>> curve;          // per dimension
  std::vector<PredictorDesign> predictors;
  std::vector<TermDesign> terms;
  std::vector<LatentDesign> latents;
  CovariateTable covariates;
  Domain domain;

  int K() const { return static_cast<int>(families.size()); }
  int n_rows(int k) const { return static_cast<int>(y[k].size()); }
  int predictor_index(int dim, int param) const;
};

// Assembles every term of `spec` for `data`. `bases` are looked up by their
// level tag through each latent declaration.
ModelDesign build_design(const Dataset& data, const ModelSpec& spec, const std::vector<EigenBasis>& bases);

// Indicator-expanded latent design of dimension k: n_k x (J * M), entity
// blocks of M columns. Only used for inspection and tests.
Eigen::MatrixXd latent_design_matrix(const ModelDesign& design, int latent, int k);

struct ModelState {
  std::vector<Eigen::VectorXd> beta;      // per term
  std::vector<std::vector<double>> tau2;  // per term, one per penalty
  std::vector<Eigen::MatrixXd> scores;    // per latent: J x M
  std::vector<Eigen::VectorXd> nu;        // per latent
};

// Zero coefficients, unit smoothing variances, eigenvalues as score variances.
ModelState initial_state(const ModelDesign& design);

// Additive predictors per dimension: n_k x R_k.
std::vector<Eigen::MatrixXd> compute_eta(const ModelDesign& design, const ModelState& state);

double log_likelihood(const ModelDesign& design, const ModelState& state);
double log_prior(const ModelDesign& design, const ModelState& state);
double log_posterior(const ModelDesign& design, const ModelState& state);

struct BlockRef {
  enum class Kind { Term, Scores } kind = Kind::Term;
  int index = 0;   // term or latent index
  int entity = 0;  // for scores
};

// Gradient and Hessian of the log posterior with respect to one
// coefficient block, all other parameters held fixed.
struct BlockDerivatives {
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
};
BlockDerivatives block_derivatives(const ModelDesign& design, const ModelState& state, const BlockRef& block);

struct BackfitResult {
  ModelState state;
  int cycles = 0;
  bool converged = false;
  std::vector<double> log_posterior_trace;
};

BackfitResult backfit_init(const ModelDesign& design, const BackfitConfig& config);

// One conditional update of a term's smoothing variances given beta:
// conjugate inverse gamma for a single penalty, slice sampling on the log
// scale for the two penalties of an anisotropic term.
std::vector<double> draw_smoothing_variances(const TermDesign& term, const Eigen::VectorXd& beta,
                                             std::vector<double> tau2, const SamplerConfig& config,
                                             std::mt19937_64& rng);

struct PosteriorSamples {
  struct Block {
    std::string name;
    std::vector<std::string> columns;
    Eigen::MatrixXd draws;  // (chains * draws) x columns, chain-major
  };
  int chains = 0;
  int draws_per_chain = 0;
  std::vector<std::uint64_t> chain_seeds;
  std::vector<Block> blocks;
  // Mean MH acceptance rate per coefficient block and chain.
  std::map<std::string, std::vector<double>> acceptance;
  std::vector<int> ridge_events;  // proposals that needed Hessian regularisation, per chain

  int n_draws() const { return chains * draws_per_chain; }
  const Block& block(const std::string& name) const;
  bool has_block(const std::string& name) const;

  void write(const std::filesystem::path& dir) const;
  static PosteriorSamples read(const std::filesystem::path& dir);
};

// Seed of chain c, derived from (seed, c) only.
std::uint64_t chain_seed(std::uint64_t seed, int chain);

PosteriorSamples mcmc_sample(const ModelDesign& design, const ModelState& init, const SamplerConfig& config);

// Block names used in PosteriorSamples.
std::string beta_block_name(const ModelDesign& design, int term);
std::string tau2_block_name(const ModelDesign& design, int term);
std::string scores_block_name(const LatentDesign& latent);
std::string nu_block_name(const LatentDesign& latent);

ModelState state_at_draw(const ModelDesign& design, const PosteriorSamples& samples, int row,
                         const ModelState& fallback);
ModelState posterior_mean_state(const ModelDesign& design, const PosteriorSamples& samples,
                                const ModelState& fallback);

// Potential scale reduction factor of every column of a block (needs >= 2 chains).
Eigen::VectorXd rhat(const PosteriorSamples& samples, const std::string& block);

struct NewPoint {
  int dim = 0;
  CurveKey curve;
  double t = 0.0;
};

struct PredictionDesign {
  std::vector<NewPoint> points;
  // Per design term: rows (indices into points) and basis rows.
  std::vector<std::vector<int>> term_rows;
  std::vector<Eigen::MatrixXd> term_X;
  // Per latent: rows, entity index per row, psi rows.
  std::vector<std::vector<int>> latent_rows;
  std::vector<std::vector<int>> latent_entity;
  std::vector<Eigen::MatrixXd> latent_psi;
};

// Evaluates every term at new points. Covariates are looked up by curve.
// Throws ArgumentError for curves whose latent entity was not in the fit.
PredictionDesign build_prediction_design(const ModelDesign& design, const std::vector<NewPoint>& points,
                                         const CovariateTable& covariates);

// points x kMaxParams; NaN for parameters the dimension does not have.
Eigen::MatrixXd predict_eta(const ModelDesign& design, const PredictionDesign& pd, const ModelState& state);

struct Prediction {
  std::vector<double> quantiles;
  Eigen::MatrixXd eta_mean;                 // points x kMaxParams
  Eigen::MatrixXd theta_mean;               // mean of h(eta) over draws
  std::vector<Eigen::MatrixXd> theta_q;     // per requested quantile
};

Prediction predict(const ModelDesign& design, const PosteriorSamples& samples, const PredictionDesign& pd,
                   const std::vector<double>& quantiles, const ModelState& fallback);

// Values of one term's coefficient function on `times` (covariate = 1 for
// linear-functional terms) for every draw: draws x |times|.
Eigen::MatrixXd term_curve_draws(const ModelDesign& design, const PosteriorSamples& samples, int term,
                                 const std::vector<double>& times);

// Empirical quantile with linear interpolation (type 7).
double empirical_quantile(std::vector<double> values, double p);

}  // namespace mfam
