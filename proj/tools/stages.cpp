#include "stages.hpp"

#include "mfam/csv.hpp"
#include "mfam/error.hpp"
#include "mfam/evaluate.hpp"
#include "mfam/fitter.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

namespace mfam::cli {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

StageError::StageError(std::string stage, int replicate, const std::string& message)
    : std::runtime_error("stage '" + stage + "' failed" +
                         (replicate >= 0 ? " (replicate " + std::to_string(replicate + 1) + ")" : std::string()) +
                         ": " + message),
      stage_(std::move(stage)) {}

std::uint64_t stage_seed(std::uint64_t seed, int replicate, int tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(replicate), static_cast<std::uint32_t>(tag), 0x636c69u};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace {

constexpr int kTagFit = 4;
constexpr int kTagGfpca = 100;
constexpr int kTagGfpcaLocal = 200;

std::string dim_prefix(int k) { return "dim" + std::to_string(k + 1); }

void require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p))
    throw ArgumentError("missing input '" + p.string() + "'" +
                        (producer.empty() ? std::string() : "; run the '" + producer + "' stage first"));
}

std::vector<double> output_grid(const Domain& d, int n) {
  if (!d.cyclic) return equidistant_grid(d.lo, d.hi, n);
  std::vector<double> g(n);
  for (int j = 0; j < n; ++j) g[j] = d.lo + j * d.length() / n;
  return g;
}

std::string key_group(const CurveKey& k) { return k.group ? std::to_string(*k.group) : std::string(); }

// ---------------------------------------------------------------- data

Dataset load_data(const RunConfig& c, int r) {
  if (c.simulate) {
    const fs::path dir = c.replicate_dir(r) / "simulate";
    require(dir / "data.json", "simulate");
    json meta;
    std::ifstream(dir / "data.json") >> meta;
    std::vector<Family> fams;
    for (const auto& f : meta.at("families")) fams.push_back(Family::from_name(f.get<std::string>()));
    const Domain dom{meta.at("domain").at("lo").get<double>(), meta.at("domain").at("hi").get<double>(),
                     meta.at("domain").at("cyclic").get<bool>()};
    auto data = load_long_csv(dir / "data.csv", {}, fams, dom);
    return data.with_covariates(load_covariates_csv(dir / "covariates.csv"));
  }
  require(c.data->path, "");
  auto data = load_long_csv(c.data->path, {}, c.families, c.domain, c.data->zeros);
  if (c.data->covariates) {
    require(*c.data->covariates, "");
    data = data.with_covariates(load_covariates_csv(*c.data->covariates));
  }
  return data;
}

void write_data(const Dataset& data, const fs::path& dir) {
  write_long_csv(data, dir / "data.csv");
  write_covariates_csv(data.covariates(), dir / "covariates.csv");
  json meta;
  meta["families"] = json::array();
  for (const auto& f : data.families()) meta["families"].push_back(std::string(f.name()));
  meta["domain"] = {{"lo", data.domain().lo}, {"hi", data.domain().hi}, {"cyclic", data.domain().cyclic}};
  meta["observations"] = data.size();
  meta["curves"] = data.curves().size();
  csv::write_atomic(dir / "data.json", meta.dump(2) + "\n");
}

// ---------------------------------------------------------------- stages

void stage_simulate(const RunConfig& c, int r, const fs::path& dir) {
  const auto& s = *c.simulate;
  std::mt19937_64 rng(replicate_seed(c.seed, r));
  if (s.kind == "app_demo") {
    const auto demo = simulate_app_demo(s.app, rng);
    write_data(demo.data, dir);
    fs::create_directories(dir / "truth");
    write_eigenbases(demo.true_bases, dir / "truth" / "truth_basis.csv", dir / "truth" / "truth_basis.json");
    return;
  }
  auto sim = simulate_dataset(s.sim, rng);
  const Dataset data =
      s.regime == "dense" ? sim.data : subsample_regime(sim.data, SamplingRegime::from_name(s.regime), rng);
  write_data(data, dir);
  write_truth(sim.truth, dir / "truth");
}

void stage_gfpca(const RunConfig& c, int r, const fs::path& dir) {
  const Dataset data = load_data(c, r);
  json summary = json::array();
  for (int k = 0; k < data.K(); ++k) {
    GfpcaConfig g = c.gfpca;
    if (!c.gfpca_seed_given) g.refit.sampler.seed = stage_seed(c.seed, r, kTagGfpca + k);
    if (!c.gfpca_local_seed_given) g.local_config.sampler.seed = stage_seed(c.seed, r, kTagGfpcaLocal + k);
    const auto fpcas = run_gfpca(data.dimension_view(k), g);
    const auto p = dim_prefix(k);
    write_univariate_fpcas(fpcas, dir / (p + ".fpc.csv"), dir / (p + ".fpc.json"), dir / (p + ".scores.csv"));
    for (const auto& f : fpcas)
      summary.push_back({{"dim", k + 1},
                         {"level", f.level},
                         {"M", f.M()},
                         {"upsilon", std::vector<double>(f.upsilon.data(), f.upsilon.data() + f.upsilon.size())},
                         {"refit_seed", g.refit.sampler.seed},
                         {"warnings", f.warnings}});
  }
  csv::write_atomic(dir / "summary.json", summary.dump(2) + "\n");
}

std::vector<std::vector<UnivariateFPCA>> read_gfpca(const RunConfig& c, int r) {
  const fs::path dir = c.replicate_dir(r) / "gfpca";
  std::vector<std::vector<UnivariateFPCA>> per_dim;
  for (int k = 0; k < static_cast<int>(c.families.size()); ++k) {
    const auto p = dim_prefix(k);
    require(dir / (p + ".fpc.csv"), "gfpca");
    per_dim.push_back(read_univariate_fpcas(dir / (p + ".fpc.csv"), dir / (p + ".fpc.json"), dir / (p + ".scores.csv")));
  }
  return per_dim;
}

void stage_mfpca(const RunConfig& c, int r, const fs::path& dir) {
  const auto results = run_mfpca(read_gfpca(c, r), c.mfpca);
  std::vector<EigenBasis> bases;
  for (const auto& res : results) bases.push_back(res.basis);
  write_eigenbases(bases, dir / "basis.csv", dir / "basis.json");
  write_mfpca_scores(results, dir / "scores.csv");
}

std::vector<EigenBasis> fit_bases(const RunConfig& c, int r) {
  const fs::path rep = c.replicate_dir(r);
  if (c.fit.basis == "truth") {
    require(rep / "simulate" / "truth" / "truth_basis.csv", "simulate");
    return read_eigenbases(rep / "simulate" / "truth" / "truth_basis.csv", rep / "simulate" / "truth" / "truth_basis.json");
  }
  require(rep / "mfpca" / "basis.csv", "mfpca");
  return read_eigenbases(rep / "mfpca" / "basis.csv", rep / "mfpca" / "basis.json");
}

std::pair<double, double> interval(std::vector<double> v, double level) {
  const double a = 0.5 * (1.0 - level);
  return {empirical_quantile(v, a), empirical_quantile(std::move(v), 1.0 - a)};
}

std::vector<double> column(const MatrixXd& m, Eigen::Index j) {
  return std::vector<double>(m.col(j).data(), m.col(j).data() + m.rows());
}

void stage_fit(const RunConfig& c, int r, const fs::path& dir) {
  const Dataset data = load_data(c, r);
  ModelSpec spec = model_for(c.fit_model_json, data.families(), data.domain());
  if (!c.fit.sampler_seed_given) spec.sampler.seed = stage_seed(c.seed, r, kTagFit);
  const auto design = build_design(data, spec, fit_bases(c, r));
  const auto bf = backfit_init(design, spec.backfit);
  const auto samples = mcmc_sample(design, bf.state, spec.sampler);
  csv::write_atomic(dir / "model.json", model_spec_to_json(spec).dump(2) + "\n");
  csv::write_atomic(dir / "backfit.json", json{{"cycles", bf.cycles},
                                               {"converged", bf.converged},
                                               {"log_posterior", bf.log_posterior_trace}}
                                                  .dump(2) + "\n");
  samples.write(dir / "posterior");

  const auto pm = posterior_mean_state(design, samples, bf.state);
  const auto grid = output_grid(data.domain(), c.fit.output_points);
  const auto keys = data.curves();
  const auto eta = eta_curves(design, pm, keys, grid, data.covariates());
  const auto lat = latent_curves(design, pm, keys, grid, data.covariates());
  const int K = design.K();
  const auto G = static_cast<Eigen::Index>(grid.size());
  std::vector<MatrixXd> lo(K, MatrixXd::Constant(keys.size(), G, std::nan(""))), hi = lo;
  if (c.fit.interval_draws) {
    for (size_t i = 0; i < keys.size(); ++i) {
      const auto draws = eta_curve_draws(design, samples, bf.state, {keys[i]}, grid, data.covariates());
      for (int k = 0; k < K; ++k)
        for (Eigen::Index g = 0; g < G; ++g) {
          const auto [a, b] = interval(column(draws[k][0], g), c.fit.level);
          lo[k](i, g) = a;
          hi[k](i, g) = b;
        }
    }
  }
  std::ostringstream os;
  os << "dim,unit,group,t,latent,eta,eta_lo,eta_hi\n";
  for (int k = 0; k < K; ++k)
    for (size_t i = 0; i < keys.size(); ++i)
      for (Eigen::Index g = 0; g < G; ++g)
        os << k + 1 << ',' << keys[i].unit << ',' << key_group(keys[i]) << ',' << csv::format(grid[g]) << ','
           << csv::format(lat.values[k](i, g)) << ',' << csv::format(eta.values[k](i, g)) << ','
           << csv::format(lo[k](i, g)) << ',' << csv::format(hi[k](i, g)) << '\n';
  csv::write_atomic(dir / "curves.csv", os.str());

  std::ostringstream ts, ss;
  ts << "dim,param,term,kind,covariate,t,mean,lo,hi\n";
  ss << "dim,param,term,kind,covariate,mean,lo,hi\n";
  for (int j = 0; j < static_cast<int>(design.terms.size()); ++j) {
    const auto& t = design.terms[j];
    const auto& p = design.predictors[t.predictor];
    const std::string head = std::to_string(p.dim + 1) + ',' + std::to_string(p.param + 1) + ',' +
                             std::to_string(t.index_in_predictor + 1) + ',' +
                             std::string(term_kind_name(t.spec.kind)) + ',' + t.spec.covariate + ',';
    if (t.spec.kind == TermKind::FunctionalIntercept || t.spec.kind == TermKind::LinearFunctional) {
      const MatrixXd d = term_curve_draws(design, samples, j, grid);
      for (Eigen::Index g = 0; g < G; ++g) {
        const auto [a, b] = interval(column(d, g), c.fit.level);
        ts << head << csv::format(grid[g]) << ',' << csv::format(d.col(g).mean()) << ',' << csv::format(a) << ','
           << csv::format(b) << '\n';
      }
    } else if (t.spec.kind == TermKind::Constant) {
      const MatrixXd& d = samples.block(beta_block_name(design, j)).draws;
      const auto [a, b] = interval(column(d, 0), c.fit.level);
      ss << head << csv::format(d.col(0).mean()) << ',' << csv::format(a) << ',' << csv::format(b) << '\n';
    }
  }
  csv::write_atomic(dir / "terms.csv", ts.str());
  csv::write_atomic(dir / "scalars.csv", ss.str());

  std::ostringstream sm;
  sm << "block,column,mean,sd,q025,q500,q975\n";
  for (const auto& b : samples.blocks)
    for (Eigen::Index j = 0; j < b.draws.cols(); ++j) {
      const auto v = column(b.draws, j);
      const double mean = b.draws.col(j).mean();
      const double sd = b.draws.rows() > 1
                            ? std::sqrt((b.draws.col(j).array() - mean).square().sum() / double(b.draws.rows() - 1))
                            : 0.0;
      sm << b.name << ',' << b.columns[j] << ',' << csv::format(mean) << ',' << csv::format(sd) << ','
         << csv::format(empirical_quantile(v, 0.025)) << ',' << csv::format(empirical_quantile(v, 0.5)) << ','
         << csv::format(empirical_quantile(v, 0.975)) << '\n';
    }
  csv::write_atomic(dir / "summary.csv", sm.str());
}

// Estimated curves on the truth grid: values[0] latent, values[1] eta,
// values[2], values[3] interval bounds (NaN when absent), per dimension.
struct EstimatedCurves {
  std::vector<std::array<MatrixXd, 4>> dims;
  bool has_interval = false;
};

Eigen::Index grid_index(const std::vector<double>& grid, double t, const fs::path& file) {
  const auto it = std::lower_bound(grid.begin(), grid.end(), t - 1e-9);
  if (it == grid.end() || std::abs(*it - t) > 1e-9)
    throw ValidationError(file.string() + ": time " + csv::format(t) + " is not on the truth grid");
  return it - grid.begin();
}

EstimatedCurves read_curves(const fs::path& file, const SimulationTruth& tr) {
  const auto tab = csv::read(file);
  const int cd = tab.column("dim"), cu = tab.column("unit"), cg = tab.column("group"), ct = tab.column("t"),
            cl = tab.column("latent"), ce = tab.column("eta"), clo = tab.column("eta_lo"), chi = tab.column("eta_hi");
  if (cd < 0 || cu < 0 || ct < 0 || cl < 0 || ce < 0)
    throw SchemaError(file.string() + ": expected columns dim,unit,t,latent,eta");
  const int K = static_cast<int>(tr.eta.size()), n = tr.n();
  const auto G = static_cast<Eigen::Index>(tr.grid.size());
  std::map<long, int> row_of;
  for (int i = 0; i < n; ++i) row_of[tr.units[i]] = i;
  EstimatedCurves e;
  e.dims.assign(K, {MatrixXd::Constant(n, G, std::nan("")), MatrixXd::Constant(n, G, std::nan("")),
                    MatrixXd::Constant(n, G, std::nan("")), MatrixXd::Constant(n, G, std::nan(""))});
  for (size_t r = 0; r < tab.rows.size(); ++r) {
    const auto& row = tab.rows[r];
    const long k = csv::parse_long(row[cd]) - 1;
    const auto it = row_of.find(csv::parse_long(row[cu]));
    if (k < 0 || k >= K || it == row_of.end() || (cg >= 0 && !row[cg].empty()))
      throw ValidationError(file.string() + ":" + std::to_string(tab.line_numbers[r]) + ": curve not in the truth");
    const auto g = grid_index(tr.grid, csv::parse_double(row[ct]), file);
    auto& d = e.dims[k];
    d[0](it->second, g) = csv::parse_double(row[cl]);
    d[1](it->second, g) = csv::parse_double(row[ce]);
    if (clo >= 0 && chi >= 0) {
      d[2](it->second, g) = csv::parse_double(row[clo]);
      d[3](it->second, g) = csv::parse_double(row[chi]);
    }
  }
  for (const auto& d : e.dims)
    if (!d[0].allFinite() || !d[1].allFinite())
      throw ValidationError(file.string() + ": estimates do not cover every truth curve and grid point");
  e.has_interval = true;
  for (const auto& d : e.dims) e.has_interval = e.has_interval && d[2].allFinite() && d[3].allFinite();
  return e;
}

CurveSet truth_set(const SimulationTruth& tr, const std::vector<MatrixXd>& values) {
  CurveSet cs;
  cs.grid = tr.grid;
  for (long u : tr.units) cs.keys.push_back({u, std::nullopt});
  cs.values = values;
  return cs;
}

void stage_evaluate(const RunConfig& c, int r, const fs::path& dir) {
  const fs::path rep = c.replicate_dir(r);
  require(rep / c.evaluate.truth / "truth.json", "simulate");
  const auto tr = read_truth(rep / c.evaluate.truth);
  require(rep / c.evaluate.curves, "fit");
  const auto est = read_curves(rep / c.evaluate.curves, tr);
  const int K = static_cast<int>(tr.eta.size());
  const auto G = static_cast<Eigen::Index>(tr.grid.size());
  std::vector<MetricRow> rows;
  std::ostringstream cov;
  cov << "component,dim,t,value\n";
  auto add = [&](const std::string& comp, int dim, const std::string& metric, double v) {
    rows.push_back({c.name, comp, dim, r + 1, metric, v});
  };
  std::vector<MatrixXd> eta_hat(K), lat_hat(K);
  for (int k = 0; k < K; ++k) {
    lat_hat[k] = est.dims[k][0];
    eta_hat[k] = est.dims[k][1];
  }
  const VectorXd r_eta = rrmse(truth_set(tr, tr.eta), truth_set(tr, eta_hat));
  const VectorXd r_lat = rrmse(truth_set(tr, tr.latent), truth_set(tr, lat_hat));
  for (int k = 0; k < K; ++k) {
    add("eta", k + 1, "rrmse", r_eta[k]);
    add("latent", k + 1, "rrmse", r_lat[k]);
    if (est.has_interval) {
      const auto inside = (est.dims[k][2].array() <= tr.eta[k].array() && tr.eta[k].array() <= est.dims[k][3].array())
                              .cast<double>();
      add("eta", k + 1, "coverage", inside.mean());
      const VectorXd per_t = inside.colwise().mean();
      for (Eigen::Index g = 0; g < G; ++g)
        cov << "eta," << k + 1 << ',' << csv::format(tr.grid[g]) << ',' << csv::format(per_t[g]) << '\n';
    }
  }

  const VectorXd q = quadrature_weights(tr.grid, Domain{});
  if (fs::exists(rep / c.evaluate.terms)) {
    const auto tab = csv::read(rep / c.evaluate.terms);
    std::map<std::pair<std::string, int>, std::array<VectorXd, 3>> fn;
    for (const auto& row : tab.rows) {
      const int dim = static_cast<int>(csv::parse_long(row[0]));
      if (csv::parse_long(row[1]) != 1) continue;
      std::string comp;
      if (row[3] == "functional-intercept") comp = "beta0";
      else if (row[3] == "linear-functional" && row[4] == "x") comp = "beta1";
      else continue;
      auto& f = fn[{comp, dim}];
      if (f[0].size() == 0)
        for (auto& v : f) v = VectorXd::Constant(G, std::nan(""));
      const auto g = grid_index(tr.grid, csv::parse_double(row[5]), rep / c.evaluate.terms);
      for (int j = 0; j < 3; ++j) f[j][g] = csv::parse_double(row[6 + j]);
    }
    for (const auto& [key, f] : fn) {
      const VectorXd& truth = key.first == "beta0" ? tr.beta0 : tr.beta1;
      if (!f[0].allFinite()) throw ValidationError("terms: incomplete curve for " + key.first);
      add(key.first, key.second, "rrmse", rrmse(truth.transpose(), f[0].transpose(), q));
      const VectorXd inside = (f[1].array() <= truth.array() && truth.array() <= f[2].array()).cast<double>();
      add(key.first, key.second, "coverage", inside.mean());
      for (Eigen::Index g = 0; g < G; ++g)
        cov << key.first << ',' << key.second << ',' << csv::format(tr.grid[g]) << ',' << csv::format(inside[g]) << '\n';
    }
  }
  if (fs::exists(rep / c.evaluate.scalars)) {
    for (const auto& row : csv::read(rep / c.evaluate.scalars).rows) {
      const int dim = static_cast<int>(csv::parse_long(row[0]));
      if (dim < 1 || dim > K || tr.families[dim - 1].kind() != FamilyKind::Gaussian || csv::parse_long(row[1]) != 2 ||
          row[3] != "constant")
        continue;
      const std::string comp = row[4].empty() ? "gamma0" : row[4] == "z" ? "gamma1" : "";
      if (comp.empty()) continue;
      add(comp, dim, "mean", csv::parse_double(row[5]));
      add(comp, dim, "lo", csv::parse_double(row[6]));
      add(comp, dim, "hi", csv::parse_double(row[7]));
    }
  }
  const fs::path basis = rep / c.evaluate.basis;
  if (fs::exists(basis.string() + ".csv")) {
    for (const auto& b : read_eigenbases(basis.string() + ".csv", basis.string() + ".json")) {
      if (b.level != tr.basis.level) continue;
      const auto rec = reconstruct_latent_ls(truth_set(tr, tr.latent), b);
      for (int k = 0; k < K; ++k) add("basis", k + 1, "rrmse", rec.rrmse[k]);
    }
  }
  write_metrics_csv(rows, dir / "metrics.csv");
  csv::write_atomic(dir / "coverage.csv", cov.str());
}

// ---------------------------------------------------------------- driver

using StageFn = void (*)(const RunConfig&, int, const fs::path&);

StageFn stage_fn(const std::string& s) {
  if (s == "simulate") return stage_simulate;
  if (s == "gfpca") return stage_gfpca;
  if (s == "mfpca") return stage_mfpca;
  if (s == "fit") return stage_fit;
  if (s == "evaluate") return stage_evaluate;
  throw ArgumentError("unknown stage '" + s + "'");
}

void run_one(const RunConfig& c, const std::string& stage, int r) {
  const fs::path rep = c.replicate_dir(r);
  const fs::path partial = rep / ("." + stage + ".partial");
  const fs::path final_dir = rep / stage;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fs::remove_all(partial);
    fs::create_directories(partial);
    stage_fn(stage)(c, r, partial);
    fs::remove_all(final_dir);
    fs::rename(partial, final_dir);
  } catch (const std::exception& e) {
    std::error_code ec;
    fs::remove_all(partial, ec);
    throw StageError(stage, r, e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  static std::mutex log_mutex;
  std::lock_guard lock(log_mutex);
  std::fprintf(stderr, "[%s] replicate %d/%d done in %.1f s\n", stage.c_str(), r + 1, c.replicates, secs);
}

}  // namespace

void run_stage(const RunConfig& c, const std::string& stage) {
  if (stage == "simulate" && !c.simulate) throw StageError(stage, -1, "the config has no simulate section");
  stage_fn(stage);
  const int workers = std::max(1, std::min(c.threads, c.replicates));
  if (workers == 1) {
    for (int r = 0; r < c.replicates; ++r) run_one(c, stage, r);
    return;
  }
  std::atomic<int> next{0};
  std::mutex m;
  std::map<int, std::exception_ptr> failures;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int r = next++; r < c.replicates; r = next++) {
        try {
          run_one(c, stage, r);
        } catch (...) {
          std::lock_guard lock(m);
          failures[r] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (!failures.empty()) std::rethrow_exception(failures.begin()->second);
}

void aggregate_metrics(const RunConfig& c) {
  try {
    std::vector<MetricRow> all;
    std::map<std::tuple<std::string, int, double>, std::pair<double, int>> cov;
    for (int r = 0; r < c.replicates; ++r) {
      const fs::path dir = c.replicate_dir(r) / "evaluate";
      require(dir / "metrics.csv", "evaluate");
      const auto rows = read_metrics_csv(dir / "metrics.csv");
      all.insert(all.end(), rows.begin(), rows.end());
      for (const auto& row : csv::read(dir / "coverage.csv").rows) {
        auto& a = cov[{row[0], static_cast<int>(csv::parse_long(row[1])), csv::parse_double(row[2])}];
        a.first += csv::parse_double(row[3]);
        a.second += 1;
      }
    }
    write_metrics_csv(all, c.out / "metrics.csv");

    std::map<std::tuple<std::string, int, std::string>, std::vector<double>> groups;
    for (const auto& m : all) groups[{m.component, m.dim, m.metric}].push_back(m.value);
    std::ostringstream os;
    os << "scenario,component,dim,metric,mean,mc_se,n\n";
    for (const auto& [key, v] : groups) {
      const auto& [comp, dim, metric] = key;
      if (metric == "mean" || metric == "lo" || metric == "hi") continue;
      double mean = 0;
      for (double x : v) mean += x;
      mean /= double(v.size());
      double ss = 0;
      for (double x : v) ss += (x - mean) * (x - mean);
      const std::string se = v.size() > 1 ? csv::format(std::sqrt(ss / double(v.size() - 1) / double(v.size()))) : "";
      os << c.name << ',' << comp << ',' << dim << ',' << metric << ',' << csv::format(mean) << ',' << se << ','
         << v.size() << '\n';
    }
    // Scalar coefficients: bias, rMSE and coverage over replicates.
    const fs::path truth_dir = c.replicate_dir(0) / c.evaluate.truth;
    for (const std::string comp : {"gamma0", "gamma1"}) {
      std::map<int, std::map<int, ScalarSummary>> by_dim;
      for (const auto& m : all) {
        if (m.component != comp) continue;
        auto& s = by_dim[m.dim][m.replicate];
        if (m.metric == "mean") s.mean = m.value;
        if (m.metric == "lo") s.lo = m.value;
        if (m.metric == "hi") s.hi = m.value;
      }
      if (by_dim.empty()) continue;
      const auto tr = read_truth(truth_dir);
      const double truth = comp == "gamma0" ? tr.gamma0 : tr.gamma1;
      for (const auto& [dim, reps] : by_dim) {
        if (reps.size() < 2) continue;
        std::vector<ScalarSummary> v;
        for (const auto& [rep, s] : reps) v.push_back(s);
        const auto sm = scalar_metrics(v, truth);
        os << c.name << ',' << comp << ',' << dim << ",bias," << csv::format(sm.bias) << ",," << v.size() << '\n';
        os << c.name << ',' << comp << ',' << dim << ",rmse," << csv::format(sm.rmse) << ",," << v.size() << '\n';
        os << c.name << ',' << comp << ',' << dim << ",fc," << csv::format(sm.coverage) << ",," << v.size() << '\n';
      }
    }
    csv::write_atomic(c.out / "metrics_summary.csv", os.str());

    std::ostringstream co;
    co << "component,dim,t,fc\n";
    for (const auto& [key, a] : cov)
      co << std::get<0>(key) << ',' << std::get<1>(key) << ',' << csv::format(std::get<2>(key)) << ','
         << csv::format(a.first / a.second) << '\n';
    csv::write_atomic(c.out / "coverage.csv", co.str());
  } catch (const std::exception& e) {
    throw StageError("evaluate", -1, std::string("aggregation: ") + e.what());
  }
}

std::vector<std::string> plan(const RunConfig& c, const std::vector<std::string>& stages) {
  std::vector<std::string> lines;
  lines.push_back("config '" + c.source.string() + "' is valid");
  lines.push_back("scenario " + c.name + ", seed " + std::to_string(c.seed) + ", " + std::to_string(c.replicates) +
                  " replicate(s), " + std::to_string(c.threads) + " thread(s)");
  for (const auto& s : stages)
    lines.push_back("stage " + s + " -> " + (c.out / "repNNN" / s).string());
  if (std::find(stages.begin(), stages.end(), "evaluate") != stages.end())
    lines.push_back("aggregate -> " + (c.out / "metrics_summary.csv").string());
  return lines;
}

}  // namespace mfam::cli
