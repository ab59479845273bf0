#include "config.hpp"
#include "stages.hpp"

#include "mfam/bases.hpp"
#include "mfam/error.hpp"
#include "mfam/evaluate.hpp"
#include "mfam/families.hpp"
#include "mfam/simulate.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <random>

namespace py = pybind11;
using namespace mfam;

namespace {

// Long-format columns of a dataset; dim and unit stay zero- and one-based
// as in memory.
py::dict dataset_columns(const Dataset& data) {
  const auto n = static_cast<Eigen::Index>(data.size());
  Eigen::VectorXi dim(n);
  Eigen::Matrix<long, Eigen::Dynamic, 1> unit(n);
  Eigen::VectorXd t(n), y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& o = data.obs()[i];
    dim[i] = o.dim;
    unit[i] = o.unit;
    t[i] = o.t;
    y[i] = o.y;
  }
  py::list families;
  for (const auto& f : data.families()) families.append(std::string(f.name()));
  py::dict d;
  d["dim"] = dim;
  d["unit"] = unit;
  d["t"] = t;
  d["y"] = y;
  d["families"] = families;
  return d;
}

py::dict basis_dict(const EigenBasis& b) {
  py::dict d;
  d["level"] = b.level;
  d["grid"] = b.grid;
  d["K"] = b.K;
  d["psi"] = b.psi;
  d["nu"] = b.nu;
  d["weights"] = b.weights;
  return d;
}

py::dict simulate(int n, int K, int M0, const std::string& regime, std::uint64_t seed) {
  SimulationConfig cfg;
  cfg.n = n;
  cfg.K = K;
  cfg.M0 = M0;
  cfg.seed = seed;
  std::mt19937_64 rng(seed);
  auto sim = simulate_dataset(cfg, rng);
  const Dataset data = subsample_regime(sim.data, SamplingRegime::from_name(regime), rng);
  py::dict truth;
  truth["grid"] = sim.truth.grid;
  truth["basis"] = basis_dict(sim.truth.basis);
  truth["scores"] = sim.truth.scores;
  truth["x"] = sim.truth.x;
  truth["z"] = sim.truth.z;
  truth["beta0"] = sim.truth.beta0;
  truth["beta1"] = sim.truth.beta1;
  truth["latent"] = sim.truth.latent;
  truth["eta"] = sim.truth.eta;
  py::dict out;
  out["data"] = dataset_columns(data);
  out["truth"] = truth;
  return out;
}

Eigen::VectorXd trapezoid_weights(const std::vector<double>& grid) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(grid.size());
  for (size_t g = 0; g + 1 < grid.size(); ++g) {
    const double h = 0.5 * (grid[g + 1] - grid[g]);
    w[g] += h;
    w[g + 1] += h;
  }
  return w;
}

void run_pipeline(const std::filesystem::path& config, const std::optional<std::string>& out,
                  std::optional<std::vector<std::string>> stages) {
  cli::Overrides ov;
  ov.out = out;
  const cli::RunConfig cfg = cli::load_config(config, ov);
  const auto list = stages ? *stages : cfg.stages;
  std::filesystem::create_directories(cfg.out);
  {
    py::gil_scoped_release release;
    for (const auto& s : list) cli::run_stage(cfg, s);
    if (std::find(list.begin(), list.end(), "evaluate") != list.end()) cli::aggregate_metrics(cfg);
  }
  cli::write_manifest(cfg, "pipeline", list);
}

}  // namespace

PYBIND11_MODULE(_mfam, m) {
  m.doc() = "Multivariate functional additive mixed models";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<SchemaError>(m, "SchemaError", PyExc_ValueError);
  py::register_exception<cli::ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("logpdf",
        [](const std::string& family, double y, std::vector<double> theta) {
          return logpdf(Family::from_name(family), y, theta);
        },
        py::arg("family"), py::arg("y"), py::arg("theta"));
  m.def("predictor_derivatives",
        [](const std::string& family, double y, std::vector<double> eta) {
          const auto d = predictor_derivatives(Family::from_name(family), y, eta);
          return py::make_tuple(d.loglik, d.score, d.hess);
        },
        py::arg("family"), py::arg("y"), py::arg("eta"),
        "Log-likelihood, score and Hessian with respect to each predictor.");

  m.def("bspline_design",
        [](int knots, int degree, std::vector<double> points, bool cyclic, double lo, double hi) {
          return bspline_design(knots, degree, points, cyclic, lo, hi);
        },
        py::arg("knots"), py::arg("degree"), py::arg("points"), py::arg("cyclic") = false, py::arg("lo") = 0.0,
        py::arg("hi") = 1.0);
  m.def("difference_penalty", &difference_penalty, py::arg("d"), py::arg("order"));
  m.def("cyclic_difference_penalty", &cyclic_difference_penalty, py::arg("d"), py::arg("order"));
  m.def("split_fourier_eigenbasis",
        [](int M, int K, std::vector<double> grid, std::uint64_t seed) {
          std::mt19937_64 rng(seed);
          return basis_dict(split_fourier_eigenbasis(M, K, grid, rng));
        },
        py::arg("M"), py::arg("K"), py::arg("grid"), py::arg("seed") = 1);

  m.def("simulate", &simulate, py::arg("n") = 150, py::arg("K") = 3, py::arg("M0") = 6,
        py::arg("regime") = "sparse", py::arg("seed") = 1,
        "Simulated dataset in long format with its ground truth.");

  m.def("rrmse",
        [](const Eigen::MatrixXd& truth, const Eigen::MatrixXd& est, std::vector<double> grid) {
          return rrmse(truth, est, trapezoid_weights(grid));
        },
        py::arg("truth"), py::arg("est"), py::arg("grid"));
  m.def("pointwise_coverage", &pointwise_coverage, py::arg("draws"), py::arg("truth"), py::arg("level") = 0.95);

  m.def("run_pipeline", &run_pipeline, py::arg("config"), py::arg("out") = py::none(),
        py::arg("stages") = py::none(), "Runs pipeline stages exactly as the command line tool does.");
}
