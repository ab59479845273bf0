#include "config.hpp"
#include "stages.hpp"

#include "mfam/error.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

using namespace mfam::cli;

struct Options {
  std::string config;
  Overrides overrides;
  std::uint64_t seed = 0;
  int chains = 0;
  std::string out;
  int threads = 0;
  bool dry_run = false;
};

void add_options(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "Run configuration (JSON) or a manifest of an earlier run")->required();
  sub->add_option("--seed", o.seed, "Override the run seed");
  sub->add_option("--chains", o.chains, "Override the number of MCMC chains of the fit")->check(CLI::PositiveNumber);
  sub->add_option("--out", o.out, "Override the output directory");
  sub->add_option("--threads", o.threads, "Replicates processed in parallel")->check(CLI::PositiveNumber);
  sub->add_flag("--dry-run", o.dry_run, "Validate the configuration and print the plan");
}

int run(const std::string& command, const Options& o, const CLI::App& sub) {
  Overrides ov;
  if (sub.count("--seed")) ov.seed = o.seed;
  if (sub.count("--chains")) ov.chains = o.chains;
  if (sub.count("--out")) ov.out = o.out;
  if (sub.count("--threads")) ov.threads = o.threads;
  RunConfig cfg;
  try {
    cfg = load_config(o.config, ov);
  } catch (const ConfigError& e) {
    for (const auto& m : e.messages()) std::fprintf(stderr, "config error: %s\n", m.c_str());
    return 2;
  } catch (const mfam::SchemaError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  }
  const std::vector<std::string> stages = command == "pipeline" ? cfg.stages : std::vector<std::string>{command};
  if (o.dry_run) {
    for (const auto& line : plan(cfg, stages)) std::printf("%s\n", line.c_str());
    return 0;
  }
  try {
    fs::create_directories(cfg.out);
    for (const auto& s : stages) run_stage(cfg, s);
    if (std::find(stages.begin(), stages.end(), "evaluate") != stages.end()) aggregate_metrics(cfg);
    write_manifest(cfg, command, stages);
  } catch (const StageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multivariate functional additive mixed models: simulation, eigenbasis estimation, fitting and evaluation"};
  app.require_subcommand(1);
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"simulate", "Simulate datasets"},
      {"gfpca", "Univariate generalized FPCA per dimension"},
      {"mfpca", "Multivariate FPCA from the univariate results"},
      {"fit", "Fit the multivariate functional regression model"},
      {"evaluate", "Compare fits with the simulation truth"},
      {"pipeline", "Run every stage listed in the config"}};
  Options opts;
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_options(sub, opts);
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  for (size_t i = 0; i < subs.size(); ++i)
    if (subs[i]->parsed()) return run(commands[i].first, opts, *subs[i]);
  return 2;
}
