#include "config.hpp"

#include "schema.hpp"

#include "mfam/error.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace mfam::cli {

using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : "\n") + x;
  return s;
}

fs::path absolute_from(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal();
}

std::vector<Family> simulated_families(const SimulateSettings& s) {
  if (s.kind == "app_demo")
    return {Family(FamilyKind::NegBinomial), Family(FamilyKind::NegBinomial), Family(FamilyKind::Gamma),
            Family(FamilyKind::Gamma)};
  const Family cycle[] = {Family(FamilyKind::Bernoulli), Family(FamilyKind::Poisson), Family(FamilyKind::Gaussian)};
  std::vector<Family> f;
  for (int k = 0; k < s.sim.K; ++k) f.push_back(cycle[k % 3]);
  return f;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> messages)
    : std::runtime_error(join(messages)), messages_(std::move(messages)) {}

fs::path RunConfig::replicate_dir(int r) const {
  char buf[16];
  std::snprintf(buf, sizeof buf, "rep%03d", r + 1);
  return out / buf;
}

RunConfig load_config(const fs::path& path, const Overrides& ov) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"/: cannot open config '" + path.string() + "'"});
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError({"/: invalid JSON in '" + path.string() + "': " + e.what()});
  }
  RunConfig c;
  c.source = fs::absolute(path).lexically_normal();
  const fs::path base = c.source.parent_path();
  if (j.is_object() && j.contains("manifest_version")) {
    if (!j.contains("config")) throw ConfigError({"/config: manifest without a config"});
    j = j["config"];
  }
  if (!j.is_object()) throw ConfigError({"/: expected an object"});

  if (ov.seed) j["seed"] = *ov.seed;
  if (ov.threads) j["threads"] = *ov.threads;
  if (ov.chains) j["fit"]["model"]["sampler"]["chains"] = *ov.chains;
  if (ov.out) j["out"] = fs::absolute(*ov.out).lexically_normal().string();

  const auto errors = SchemaValidator(config_schema()).validate(j);
  if (!errors.empty()) throw ConfigError(errors);

  std::vector<std::string> problems;
  c.name = j.value("name", "run");
  c.seed = j["seed"].get<std::uint64_t>();
  c.out = absolute_from(base, j.value("out", "out"));
  j["out"] = c.out.string();
  c.threads = j.value("threads", 1);
  c.replicates = j.value("replicates", 1);

  if (j.contains("data") == j.contains("simulate"))
    problems.push_back("/: exactly one of 'data' and 'simulate' is required");
  if (j.contains("data")) {
    auto& d = j["data"];
    DataInput di;
    di.path = absolute_from(base, d["path"].get<std::string>());
    d["path"] = di.path.string();
    if (d.contains("covariates")) {
      di.covariates = absolute_from(base, d["covariates"].get<std::string>());
      d["covariates"] = di.covariates->string();
    }
    for (const auto& f : d["families"]) c.families.push_back(Family::from_name(f.get<std::string>()));
    if (d.contains("domain")) {
      c.domain.lo = d["domain"].value("lo", 0.0);
      c.domain.hi = d["domain"].value("hi", 1.0);
      c.domain.cyclic = d["domain"].value("cyclic", false);
      if (!(c.domain.hi > c.domain.lo)) problems.push_back("/data/domain: hi must exceed lo");
    }
    if (d.contains("zero_replacement"))
      for (const auto& z : d["zero_replacement"]) {
        const int dim = z["dim"].get<int>();
        if (dim > static_cast<int>(c.families.size()))
          problems.push_back("/data/zero_replacement: dimension " + std::to_string(dim) + " out of range");
        di.zeros[dim - 1] = z["value"].get<double>();
      }
    c.data = di;
    if (c.replicates != 1) problems.push_back("/replicates: observed data has a single replicate");
  }
  if (j.contains("simulate")) {
    const auto& s = j["simulate"];
    SimulateSettings ss;
    ss.kind = s.value("kind", "multivariate");
    ss.sim.n = s.value("n", ss.sim.n);
    ss.sim.K = s.value("K", ss.sim.K);
    ss.sim.M0 = s.value("M0", ss.sim.M0);
    ss.sim.grid_points = s.value("grid_points", ss.sim.grid_points);
    ss.regime = s.value("regime", ss.regime);
    ss.app.sites = s.value("sites", ss.app.sites);
    ss.app.years = s.value("years", ss.app.years);
    if (ss.kind == "multivariate" && ss.regime != "dense" && ss.sim.grid_points != 101)
      problems.push_back("/simulate/regime: subsampling regimes need the 101-point grid");
    if (ss.kind == "app_demo" && s.contains("regime")) problems.push_back("/simulate/regime: not used by app_demo");
    c.families = simulated_families(ss);
    if (ss.kind == "app_demo") c.domain = Domain{0.0, 24.0, true};
    c.simulate = ss;
  }

  // Stage list and dependencies.
  if (j.contains("stages")) {
    for (const auto& s : j["stages"]) c.stages.push_back(s.get<std::string>());
  } else {
    const bool truth = c.simulate && c.simulate->kind == "multivariate";
    for (const auto& s : kStageOrder)
      if ((s != "simulate" || c.simulate) && (s != "evaluate" || truth)) c.stages.push_back(s);
  }
  auto pos = [&](const std::string& s) {
    return std::find(kStageOrder.begin(), kStageOrder.end(), s) - kStageOrder.begin();
  };
  for (size_t i = 1; i < c.stages.size(); ++i)
    if (pos(c.stages[i]) < pos(c.stages[i - 1])) problems.push_back("/stages: stages must follow the order simulate, gfpca, mfpca, fit, evaluate");
  auto listed = [&](const std::string& s) { return std::find(c.stages.begin(), c.stages.end(), s) != c.stages.end(); };

  // Stage configurations.
  try {
    c.gfpca = gfpca_config_from_json(j.value("gfpca", json::object()));
    c.gfpca_seed_given = j.contains("/gfpca/refit/sampler/seed"_json_pointer);
    c.gfpca_local_seed_given = j.contains("/gfpca/local/sampler/seed"_json_pointer);
  } catch (const Error& e) {
    problems.push_back(e.what());
  }
  try {
    c.mfpca = mfpca_config_from_json(j.value("mfpca", json::object()));
  } catch (const Error& e) {
    problems.push_back(e.what());
  }
  const json fit = j.value("fit", json::object());
  c.fit.basis = fit.value("basis", "mfpca");
  c.fit.output_points = fit.value("output_points", c.domain.cyclic ? 24 : 101);
  c.fit.level = fit.value("level", 0.95);
  c.fit.interval_draws = fit.value("interval_draws", true);
  c.fit_model_json = fit.value("model", json::object());
  c.fit.sampler_seed_given = c.fit_model_json.contains("/sampler/seed"_json_pointer);
  if (!c.fit_model_json.contains("latent")) {
    const bool truth_app = c.fit.basis == "truth" && c.simulate && c.simulate->kind == "app_demo";
    std::string unit = c.fit.basis == "truth" ? (truth_app ? "L1" : "L0") : c.gfpca.unit_level;
    c.fit_model_json["latent"] = json::array({{{"name", unit}, {"level", "unit"}}});
  }
  if (!c.fit_model_json.contains("predictors")) {
    c.fit_model_json["predictors"] = json::array();
    for (size_t k = 0; k < c.families.size(); ++k) {
      json terms = json::array({{{"kind", "functional-intercept"}}});
      for (const auto& l : c.fit_model_json["latent"]) terms.push_back({{"kind", "mfpc-random"}, {"latent", l["name"]}});
      c.fit_model_json["predictors"].push_back({{"dim", k + 1}, {"terms", terms}});
    }
  }
  if (!c.families.empty()) {
    try {
      c.fit.model = model_for(c.fit_model_json, c.families, c.domain);
    } catch (const Error& e) {
      problems.push_back(std::string("/fit/model: ") + e.what());
    }
  }
  if (c.fit.basis == "truth" && !c.simulate) problems.push_back("/fit/basis: 'truth' needs a simulate section");
  if (c.domain.cyclic && c.fit.output_points < 2) problems.push_back("/fit/output_points: too few points");

  const json ev = j.value("evaluate", json::object());
  c.evaluate.truth = ev.value("truth", c.evaluate.truth);
  c.evaluate.curves = ev.value("curves", c.evaluate.curves);
  c.evaluate.terms = ev.value("terms", c.evaluate.terms);
  c.evaluate.scalars = ev.value("scalars", c.evaluate.scalars);
  c.evaluate.basis = ev.value("basis", c.evaluate.basis);

  for (size_t i = 0; i < c.stages.size(); ++i) {
    const auto& s = c.stages[i];
    if (s == "mfpca" && !listed("gfpca")) problems.push_back("/stages: 'mfpca' needs 'gfpca'");
    if (s == "fit" && c.fit.basis == "mfpca" && !listed("mfpca"))
      problems.push_back("/stages: 'fit' with the estimated basis needs 'mfpca'");
    if (s == "fit" && c.fit.basis == "truth" && !listed("simulate"))
      problems.push_back("/stages: 'fit' with the true basis needs 'simulate'");
    if (s == "evaluate" && !(c.simulate && c.simulate->kind == "multivariate") && !ev.contains("truth"))
      problems.push_back("/stages: 'evaluate' needs a multivariate simulation truth");
  }
  if (!problems.empty()) throw ConfigError(problems);
  c.resolved = j;
  return c;
}

ModelSpec model_for(const json& model, const std::vector<Family>& families, const Domain& domain) {
  json m = model;
  m["families"] = json::array();
  for (const auto& f : families) m["families"].push_back(std::string(f.name()));
  m["domain"] = {{"lo", domain.lo}, {"hi", domain.hi}, {"cyclic", domain.cyclic}};
  return model_spec_from_json(m);
}

}  // namespace mfam::cli
