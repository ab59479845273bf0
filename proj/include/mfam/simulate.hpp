#pragma once

#include "mfam/bases.hpp"
#include "mfam/funcdata.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace mfam {

struct SimulationConfig {
  int n = 150;
  int K = 3;
  int M0 = 6;
  int grid_points = 101;
  std::uint64_t seed = 1;
};

// Ground truth of one simulated dataset. Curves are on `grid`.
struct SimulationTruth {
  std::vector<Family> families;
  std::vector<double> grid;
  EigenBasis basis;             // level "L0", nu = (M0 + 1 - m) / M0
  std::vector<long> units;      // 1..n
  Eigen::MatrixXd scores;       // n x M0
  Eigen::VectorXd x, z;         // scalar covariates
  Eigen::VectorXd beta0, beta1; // shared by all dimensions
  double gamma0 = -2.0, gamma1 = 0.5;
  std::vector<Eigen::MatrixXd> latent;  // per dimension: n x G
  std::vector<Eigen::MatrixXd> eta;     // per dimension: n x G, location predictor
  Eigen::VectorXd scale_eta;            // per unit, predictor of the Gaussian log sd

  int n() const { return static_cast<int>(units.size()); }
  CovariateTable covariates() const;
};

struct SimulatedData {
  Dataset data;  // dense, every curve on the full grid
  SimulationTruth truth;
};

// Draw order: eigenbasis signs, covariates x then z, scores, responses.
SimulatedData simulate_dataset(const SimulationConfig& config, std::mt19937_64& rng);

// Seed of replicate r derived from the base seed only.
std::uint64_t replicate_seed(std::uint64_t seed, int replicate);

// Truth bundle: truth_curves.csv `dim,unit,t,latent,eta`, truth.json with
// the scalars, covariates.csv and the eigenbasis files.
void write_truth(const SimulationTruth& truth, const std::filesystem::path& dir);
SimulationTruth read_truth(const std::filesystem::path& dir);

// Small application-format example: counts and mean speeds of two vehicle
// classes (negative binomial and Gamma) at `sites` sites observed in
// `years` years on the hours of a cyclic [0, 24] day, with site and
// site-year latent processes.
struct AppDemoConfig {
  int sites = 4;
  int years = 3;
  std::uint64_t seed = 1;
};

struct AppDemo {
  Dataset data;
  std::vector<EigenBasis> true_bases;  // site level "L1", site-year level "L0"
};

AppDemo simulate_app_demo(const AppDemoConfig& config, std::mt19937_64& rng);

}  // namespace mfam
