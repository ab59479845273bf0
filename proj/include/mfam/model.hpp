#pragma once

#include "mfam/families.hpp"
#include "mfam/grid.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mfam {

enum class TermKind { Constant, FunctionalIntercept, LinearFunctional, SmoothInteraction, MfpcRandom };

std::string_view term_kind_name(TermKind kind);
TermKind term_kind_from_name(std::string_view name);

// One additive term. Only the fields relevant for `kind` are used:
//   constant            optional covariate; beta * (1 or x)
//   functional-intercept  B_t(t) beta
//   linear-functional   x * B_t(t) beta
//   smooth-interaction  (B_x(x) row-tensor B_t(t)) beta, anisotropic penalty
//   mfpc-random         sum_m rho_m psi_m^(k)(t) for the named latent process
struct TermSpec {
  TermKind kind = TermKind::Constant;
  std::string covariate;
  int n_basis_t = 14;
  int degree_t = 3;
  int order_t = 2;
  int n_basis_x = 7;
  int degree_x = 3;
  int order_x = 2;
  std::string latent;
};

// Terms of the additive predictor of parameter `param` of dimension `dim`
// (both zero-based in memory, one-based in JSON).
struct PredictorSpec {
  int dim = 0;
  int param = 0;
  std::vector<TermSpec> terms;
};

enum class LatentLevel { Unit, Curve };

struct LatentSpec {
  std::string name = "L0";
  LatentLevel level = LatentLevel::Unit;
  std::string basis;           // level tag of the EigenBasis to use
  std::optional<int> n_components;  // first M functions, default all
};

struct SamplerConfig {
  int burnin = 1000;
  int draws = 1000;
  int thin = 5;
  int chains = 1;
  std::uint64_t seed = 1;
  int threads = 1;
  double slice_width = 1.0;
  int slice_max_doublings = 10;
  double ig_a = 0.001;
  double ig_b = 0.001;
  double vague_sd = 1000.0;
  bool store_scores = true;
};

struct BackfitConfig {
  int max_cycles = 100;
  double tol = 1e-4;
  double grid_lo = 1e-4;
  double grid_hi = 1e4;
  int grid_points = 8;
  int max_halving = 20;
  // Two consecutive cycles lowering the log posterior (at the variance
  // parameters they selected) by more than this relative to max(1, |lp|)
  // abort the fit.
  double divergence_tol = 1e-3;
};

struct ModelSpec {
  std::vector<Family> families;
  Domain domain;
  std::vector<PredictorSpec> predictors;
  std::vector<LatentSpec> latent;
  SamplerConfig sampler;
  BackfitConfig backfit;

  int K() const { return static_cast<int>(families.size()); }
  // Adds a constant term to every (dim, param) without an explicit predictor
  // and checks the structural invariants.
  void finalize();
  const PredictorSpec* find(int dim, int param) const;
};

// Missing keys keep the values of `base`.
SamplerConfig sampler_config_from_json(const nlohmann::json& j, SamplerConfig base = {});
BackfitConfig backfit_config_from_json(const nlohmann::json& j, BackfitConfig base = {});
nlohmann::json sampler_config_to_json(const SamplerConfig& config);
nlohmann::json backfit_config_to_json(const BackfitConfig& config);

ModelSpec model_spec_from_json(const nlohmann::json& j);
nlohmann::json model_spec_to_json(const ModelSpec& spec);

}  // namespace mfam
