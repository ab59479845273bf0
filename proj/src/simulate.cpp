#include "mfam/simulate.hpp"

#include "mfam/csv.hpp"
#include "mfam/error.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace mfam {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

namespace {

const Family kSimFamilies[] = {Family(FamilyKind::Bernoulli), Family(FamilyKind::Poisson), Family(FamilyKind::Gaussian)};

}  // namespace

CovariateTable SimulationTruth::covariates() const {
  CovariateTable t({"x", "z"});
  for (int i = 0; i < n(); ++i) t.set({units[i], std::nullopt}, {x[i], z[i]});
  return t;
}

std::uint64_t replicate_seed(std::uint64_t seed, int replicate) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(replicate), 0x73696d75u};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

SimulatedData simulate_dataset(const SimulationConfig& cfg, std::mt19937_64& rng) {
  if (cfg.n < 2) throw ArgumentError("simulate: need at least two units");
  if (cfg.K < 1 || cfg.M0 < 1 || cfg.grid_points < 2) throw ArgumentError("simulate: invalid dimensions");
  SimulationTruth tr;
  for (int k = 0; k < cfg.K; ++k) tr.families.push_back(kSimFamilies[k % 3]);
  tr.grid = equidistant_grid(0.0, 1.0, cfg.grid_points);
  const int G = cfg.grid_points, n = cfg.n, M = cfg.M0;
  tr.basis = split_fourier_eigenbasis(M, cfg.K, tr.grid, rng);
  for (int m = 0; m < M; ++m) tr.basis.nu[m] = double(M - m) / M;

  std::uniform_real_distribution<double> ux(-1.0, 1.0);
  std::bernoulli_distribution bz(0.5);
  std::normal_distribution<double> n01;
  tr.x.resize(n);
  tr.z.resize(n);
  for (int i = 0; i < n; ++i) tr.x[i] = ux(rng);
  for (int i = 0; i < n; ++i) tr.z[i] = bz(rng) ? 1.0 : 0.0;
  tr.scores.resize(n, M);
  for (int i = 0; i < n; ++i)
    for (int m = 0; m < M; ++m) tr.scores(i, m) = std::sqrt(tr.basis.nu[m]) * n01(rng);
  for (int i = 0; i < n; ++i) tr.units.push_back(i + 1);

  tr.beta0.resize(G);
  tr.beta1.resize(G);
  for (int g = 0; g < G; ++g) {
    tr.beta0[g] = std::cos(2 * std::numbers::pi * tr.grid[g]);
    tr.beta1[g] = -tr.beta0[g];
  }
  tr.scale_eta = (tr.gamma0 + tr.gamma1 * tr.z.array()).matrix();
  for (int k = 0; k < cfg.K; ++k) {
    MatrixXd psi(M, G);
    for (int m = 0; m < M; ++m) psi.row(m) = tr.basis.psi.block(m, k * G, 1, G);
    tr.latent.push_back(tr.scores * psi);
    MatrixXd eta = tr.latent.back();
    for (int i = 0; i < n; ++i) eta.row(i) += (tr.beta0 + tr.beta1 * tr.x[i]).transpose();
    tr.eta.push_back(std::move(eta));
  }

  std::vector<Observation> obs;
  obs.reserve(static_cast<size_t>(cfg.K) * n * G);
  for (int k = 0; k < cfg.K; ++k) {
    const auto& f = tr.families[k];
    for (int i = 0; i < n; ++i)
      for (int g = 0; g < G; ++g) {
        ParamTuple theta{inverse_link(f.link(0), tr.eta[k](i, g)), 0.0};
        if (f.n_params() > 1) theta[1] = inverse_link(f.link(1), tr.scale_eta[i]);
        obs.push_back({k, tr.units[i], std::nullopt, tr.grid[g], sample_family(f, theta, rng)});
      }
  }
  Dataset data(tr.families, Domain{0.0, 1.0, false}, std::move(obs), tr.covariates());
  return {std::move(data), std::move(tr)};
}

void write_truth(const SimulationTruth& tr, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream os;
  os << "dim,unit,t,latent,eta\n";
  const int G = static_cast<int>(tr.grid.size());
  for (size_t k = 0; k < tr.eta.size(); ++k)
    for (int i = 0; i < tr.n(); ++i)
      for (int g = 0; g < G; ++g)
        os << k + 1 << ',' << tr.units[i] << ',' << csv::format(tr.grid[g]) << ',' << csv::format(tr.latent[k](i, g))
           << ',' << csv::format(tr.eta[k](i, g)) << '\n';
  csv::write_atomic(dir / "truth_curves.csv", os.str());
  std::ostringstream sc;
  sc << "unit,m,score\n";
  for (int i = 0; i < tr.n(); ++i)
    for (int m = 0; m < tr.scores.cols(); ++m)
      sc << tr.units[i] << ',' << m + 1 << ',' << csv::format(tr.scores(i, m)) << '\n';
  csv::write_atomic(dir / "truth_scores.csv", sc.str());
  write_covariates_csv(tr.covariates(), dir / "covariates.csv");
  write_eigenbases({tr.basis}, dir / "truth_basis.csv", dir / "truth_basis.json");
  json j;
  j["n"] = tr.n();
  j["K"] = tr.eta.size();
  j["M0"] = tr.scores.cols();
  j["grid_size"] = G;
  j["gamma0"] = tr.gamma0;
  j["gamma1"] = tr.gamma1;
  j["families"] = json::array();
  for (const auto& f : tr.families) j["families"].push_back(std::string(f.name()));
  csv::write_atomic(dir / "truth.json", j.dump(2) + "\n");
}

SimulationTruth read_truth(const std::filesystem::path& dir) {
  std::ifstream in(dir / "truth.json");
  if (!in) throw SchemaError("cannot open '" + (dir / "truth.json").string() + "'");
  json j;
  SimulationTruth tr;
  int n = 0, K = 0, M = 0, G = 0;
  try {
    in >> j;
    n = j.at("n").get<int>();
    K = j.at("K").get<int>();
    M = j.at("M0").get<int>();
    G = j.at("grid_size").get<int>();
    tr.gamma0 = j.at("gamma0").get<double>();
    tr.gamma1 = j.at("gamma1").get<double>();
    for (const auto& f : j.at("families")) tr.families.push_back(Family::from_name(f.get<std::string>()));
  } catch (const json::exception& e) {
    throw SchemaError((dir / "truth.json").string() + ": " + e.what());
  }
  auto bases = read_eigenbases(dir / "truth_basis.csv", dir / "truth_basis.json");
  if (bases.empty()) throw SchemaError("truth bundle without eigenbasis");
  tr.basis = bases.front();
  tr.grid = tr.basis.grid;
  if (static_cast<int>(tr.grid.size()) != G) throw SchemaError("truth bundle: grid size mismatch");

  const auto cov = load_covariates_csv(dir / "covariates.csv");
  const auto curves = csv::read(dir / "truth_curves.csv");
  std::map<long, int> row_of;
  for (const auto& [key, vals] : cov.rows()) {
    row_of[key.unit] = static_cast<int>(tr.units.size());
    tr.units.push_back(key.unit);
  }
  if (static_cast<int>(tr.units.size()) != n) throw SchemaError("truth bundle: covariate rows do not match n");
  tr.x.resize(n);
  tr.z.resize(n);
  for (int i = 0; i < n; ++i) {
    tr.x[i] = cov.value({tr.units[i], std::nullopt}, "x");
    tr.z[i] = cov.value({tr.units[i], std::nullopt}, "z");
  }
  tr.latent.assign(K, MatrixXd::Constant(n, G, std::nan("")));
  tr.eta.assign(K, MatrixXd::Constant(n, G, std::nan("")));
  for (const auto& r : curves.rows) {
    const long k = csv::parse_long(r[0]) - 1;
    const auto it = row_of.find(csv::parse_long(r[1]));
    const double t = csv::parse_double(r[2]);
    const long g = std::lround(t * (G - 1));
    if (k < 0 || k >= K || it == row_of.end() || g < 0 || g >= G) throw SchemaError("truth_curves.csv: bad row");
    tr.latent[k](it->second, g) = csv::parse_double(r[3]);
    tr.eta[k](it->second, g) = csv::parse_double(r[4]);
  }
  tr.scores = MatrixXd::Zero(n, M);
  for (const auto& r : csv::read(dir / "truth_scores.csv").rows) {
    const auto it = row_of.find(csv::parse_long(r[0]));
    const long m = csv::parse_long(r[1]) - 1;
    if (it == row_of.end() || m < 0 || m >= M) throw SchemaError("truth_scores.csv: bad row");
    tr.scores(it->second, m) = csv::parse_double(r[2]);
  }
  tr.beta0.resize(G);
  tr.beta1.resize(G);
  for (int g = 0; g < G; ++g) {
    tr.beta0[g] = std::cos(2 * std::numbers::pi * tr.grid[g]);
    tr.beta1[g] = -tr.beta0[g];
  }
  tr.scale_eta = (tr.gamma0 + tr.gamma1 * tr.z.array()).matrix();
  return tr;
}

namespace {

double circ_bump(double t, double centre, double width) {
  double d = std::abs(t - centre);
  d = std::min(d, 24.0 - d);
  return std::exp(-0.5 * d * d / (width * width));
}

double daylight(double t) { return 0.5 * (1.0 - std::cos(2 * std::numbers::pi * t / 24.0)); }

// Two-component multivariate basis on the hours, orthonormal under the
// unweighted scalar product: a level shift and a morning/evening contrast.
EigenBasis demo_basis(const std::string& level, const std::vector<double>& grid, int K, double nu1, double nu2) {
  EigenBasis b;
  b.level = level;
  b.domain = Domain{0.0, 24.0, true};
  b.grid = grid;
  b.K = K;
  const int G = static_cast<int>(grid.size());
  b.psi.resize(2, K * G);
  const double c0 = 1.0 / std::sqrt(24.0 * K), c1 = std::sqrt(2.0 / (24.0 * K));
  for (int k = 0; k < K; ++k)
    for (int g = 0; g < G; ++g) {
      b.psi(0, k * G + g) = c0;
      b.psi(1, k * G + g) = c1 * std::sin(2 * std::numbers::pi * grid[g] / 24.0) * (k % 2 ? -1.0 : 1.0);
    }
  b.nu = Eigen::Vector2d(nu1, nu2);
  b.weights = VectorXd::Ones(K);
  return b;
}

}  // namespace

AppDemo simulate_app_demo(const AppDemoConfig& cfg, std::mt19937_64& rng) {
  if (cfg.sites < 2 || cfg.years < 2) throw ArgumentError("app demo: need at least two sites and two years");
  const int K = 4;
  const std::vector<Family> fams = {Family(FamilyKind::NegBinomial), Family(FamilyKind::NegBinomial),
                                    Family(FamilyKind::Gamma), Family(FamilyKind::Gamma)};
  const double dispersion[K] = {20.0, 6.0, 150.0, 60.0};
  std::vector<double> hours(24);
  for (int h = 0; h < 24; ++h) hours[h] = h;
  AppDemo out;
  out.true_bases = {demo_basis("L1", hours, K, 4.0, 1.5), demo_basis("L0", hours, K, 1.0, 0.4)};

  std::normal_distribution<double> n01;
  const int first_year = 2021;
  CovariateTable cov({"year", "lanes1", "limit30"});
  MatrixXd site_scores(cfg.sites, 2), year_scores(cfg.sites * cfg.years, 2);
  for (int i = 0; i < cfg.sites; ++i)
    for (int m = 0; m < 2; ++m) site_scores(i, m) = std::sqrt(out.true_bases[0].nu[m]) * n01(rng);
  for (int r = 0; r < cfg.sites * cfg.years; ++r)
    for (int m = 0; m < 2; ++m) year_scores(r, m) = std::sqrt(out.true_bases[1].nu[m]) * n01(rng);

  std::vector<Observation> obs;
  for (int i = 0; i < cfg.sites; ++i) {
    const double lanes1 = i == 0 ? 1.0 : 0.0, limit30 = i == 1 ? 1.0 : 0.0;
    for (int j = 0; j < cfg.years; ++j) {
      const long year = first_year + j;
      const double yc = j - 0.5 * (cfg.years - 1);
      cov.set({i + 1, year}, {double(year), lanes1, limit30});
      for (int k = 0; k < K; ++k)
        for (int h = 0; h < 24; ++h) {
          const double t = hours[h];
          double eta = 0.0;
          switch (k) {
            case 0: eta = 3.5 + 2.0 * daylight(t) + 1.0 * circ_bump(t, 8, 1.5) + 0.8 * circ_bump(t, 17, 2.5) - 0.4 * lanes1; break;
            case 1: eta = 1.5 + 1.6 * daylight(t) + 0.5 * circ_bump(t, 10, 3) - 0.4 * lanes1; break;
            case 2: eta = std::log(50.0) - 0.15 * circ_bump(t, 8, 1.5) - 0.1 * circ_bump(t, 17, 2.5) - 0.3 * limit30; break;
            case 3: eta = std::log(45.0) - 0.1 * circ_bump(t, 8, 1.5) - 0.3 * limit30; break;
          }
          eta += (k < 2 ? 0.06 : -0.02) * yc * daylight(t);
          for (int m = 0; m < 2; ++m) {
            eta += site_scores(i, m) * out.true_bases[0].psi(m, k * 24 + h) * (k < 2 ? 1.0 : 0.3);
            eta += year_scores(i * cfg.years + j, m) * out.true_bases[1].psi(m, k * 24 + h) * (k < 2 ? 1.0 : 0.3);
          }
          const ParamTuple theta{std::exp(eta), dispersion[k]};
          double y = sample_family(fams[k], theta, rng);
          if (k >= 2) y = std::max(0.5, std::round(y));
          obs.push_back({k, i + 1, year, t, y});
        }
    }
  }
  out.data = Dataset(fams, Domain{0.0, 24.0, true}, std::move(obs), cov, 1);
  return out;
}

}  // namespace mfam
