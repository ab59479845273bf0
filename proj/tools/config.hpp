#pragma once

#include "mfam/funcdata.hpp"
#include "mfam/gfpca.hpp"
#include "mfam/mfpca.hpp"
#include "mfam/model.hpp"
#include "mfam/simulate.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfam::cli {

namespace fs = std::filesystem;

// Invalid configuration; every message carries a JSON pointer. Exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> messages);
  const std::vector<std::string>& messages() const { return messages_; }

 private:
  std::vector<std::string> messages_;
};

inline const std::vector<std::string> kStageOrder = {"simulate", "gfpca", "mfpca", "fit", "evaluate"};

struct DataInput {
  fs::path path;
  std::optional<fs::path> covariates;
  ZeroReplacement zeros;
};

struct SimulateSettings {
  std::string kind = "multivariate";
  SimulationConfig sim;
  std::string regime = "sparse";
  AppDemoConfig app;
};

struct FitSettings {
  std::string basis = "mfpca";
  int output_points = 101;
  double level = 0.95;
  bool interval_draws = true;
  ModelSpec model;
  bool sampler_seed_given = false;
};

// Paths relative to a replicate directory.
struct EvaluateSettings {
  std::string truth = "simulate/truth";
  std::string curves = "fit/curves.csv";
  std::string terms = "fit/terms.csv";
  std::string scalars = "fit/scalars.csv";
  std::string basis = "mfpca/basis";
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> chains;
  std::optional<std::string> out;
  std::optional<int> threads;
};

struct RunConfig {
  nlohmann::json resolved;  // validated config with overrides applied and absolute paths
  fs::path source;
  std::string name = "run";
  std::uint64_t seed = 0;
  fs::path out;
  int threads = 1;
  int replicates = 1;
  std::vector<std::string> stages;
  std::optional<DataInput> data;
  std::optional<SimulateSettings> simulate;
  std::vector<Family> families;
  Domain domain;
  GfpcaConfig gfpca;
  bool gfpca_seed_given = false;
  bool gfpca_local_seed_given = false;
  MfpcaConfig mfpca;
  FitSettings fit;
  nlohmann::json fit_model_json;  // model section without families and domain
  EvaluateSettings evaluate;

  fs::path replicate_dir(int r) const;
};

// Reads a config file (or a manifest written by an earlier run), applies
// command-line overrides, validates it against the shipped schema and the
// stage dependency rules and builds every stage configuration.
RunConfig load_config(const fs::path& path, const Overrides& overrides);

// Model specification for data with the given families and domain.
ModelSpec model_for(const nlohmann::json& model, const std::vector<Family>& families, const Domain& domain);

}  // namespace mfam::cli
