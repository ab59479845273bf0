#include "mfam/bases.hpp"

#include "mfam/csv.hpp"
#include "mfam/error.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace mfam {

using Eigen::MatrixXd;
using Eigen::VectorXd;

int BSplineSpec::size() const { return domain.cyclic ? knots + 1 : knots + degree + 1; }

int BSplineSpec::knots_for_size(int d, int degree, bool cyclic) {
  const int k = cyclic ? d - 1 : d - degree - 1;
  if (k < 0) throw ArgumentError("basis size too small for the spline degree");
  return k;
}

namespace {

// Nonzero B-spline values N_{i-p..i}(t) on the uniform knot sequence
// tau_j = lo + (j - p) h, for t in [tau_i, tau_{i+1}).
void deboor_uniform(double lo, double h, int p, int i, double t, double* out) {
  auto tau = [&](int j) { return lo + (j - p) * h; };
  std::vector<double> left(p + 1), right(p + 1);
  out[0] = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = t - tau(i + 1 - j);
    right[j] = tau(i + j) - t;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double tmp = out[r] / (right[r + 1] + left[j - r]);
      out[r] = saved + right[r + 1] * tmp;
      saved = left[j - r] * tmp;
    }
    out[j] = saved;
  }
}

}  // namespace

Eigen::MatrixXd bspline_design(const BSplineSpec& spec, std::span<const double> points) {
  const int p = spec.degree;
  if (p < 1) throw ArgumentError("bspline_design: degree must be >= 1");
  if (spec.knots < 0) throw ArgumentError("bspline_design: negative knot count");
  const Domain& dom = spec.domain;
  if (!(dom.hi > dom.lo)) throw ArgumentError("bspline_design: empty domain");
  const int J = spec.knots + 1;  // intervals
  if (dom.cyclic && J <= p)
    throw ArgumentError("bspline_design: cyclic basis needs more intervals than the degree");
  const double h = dom.length() / J;
  const int d = spec.size();

  MatrixXd B = MatrixXd::Zero(static_cast<Eigen::Index>(points.size()), d);
  std::vector<double> vals(p + 1);
  const double tol = 1e-9 * dom.length();
  for (size_t r = 0; r < points.size(); ++r) {
    double t = points[r];
    if (!std::isfinite(t) || t < dom.lo - tol || t > dom.hi + tol)
      throw DomainError("bspline_design: point " + std::to_string(t) + " outside the knot span");
    if (dom.cyclic) t = dom.wrap(t);
    t = std::clamp(t, dom.lo, dom.hi);
    int interval = static_cast<int>(std::floor((t - dom.lo) / h));
    interval = std::clamp(interval, 0, J - 1);
    const int i = interval + p;
    deboor_uniform(dom.lo, h, p, i, t, vals.data());
    for (int j = 0; j <= p; ++j) {
      int c = i - p + j;
      if (dom.cyclic) c %= J;
      B(static_cast<Eigen::Index>(r), c) += vals[j];
    }
  }
  return B;
}

Eigen::MatrixXd bspline_design(int knots, int degree, std::span<const double> points, bool cyclic,
                               double lo, double hi) {
  return bspline_design(BSplineSpec{knots, degree, Domain{lo, hi, cyclic}}, points);
}

Eigen::MatrixXd difference_penalty(int d, int order) {
  if (order < 0 || order >= d) throw ArgumentError("difference_penalty: need 0 <= order < d");
  MatrixXd D = MatrixXd::Identity(d, d);
  for (int o = 0; o < order; ++o) {
    const auto rows = D.rows() - 1;
    MatrixXd Dn = D.bottomRows(rows) - D.topRows(rows);
    D = std::move(Dn);
  }
  return D.transpose() * D;
}

Eigen::MatrixXd cyclic_difference_penalty(int d, int order) {
  if (order < 0 || order >= d) throw ArgumentError("cyclic_difference_penalty: need 0 <= order < d");
  MatrixXd D1 = MatrixXd::Zero(d, d);
  for (int i = 0; i < d; ++i) {
    D1(i, i) = -1.0;
    D1(i, (i + 1) % d) = 1.0;
  }
  MatrixXd D = MatrixXd::Identity(d, d);
  for (int o = 0; o < order; ++o) D = D1 * D;
  return D.transpose() * D;
}

Eigen::MatrixXd row_tensor(const Eigen::MatrixXd& V, const Eigen::MatrixXd& W) {
  if (V.rows() != W.rows()) throw ArgumentError("row_tensor: row-count mismatch");
  MatrixXd out(V.rows(), V.cols() * W.cols());
  for (Eigen::Index a = 0; a < V.cols(); ++a)
    out.middleCols(a * W.cols(), W.cols()) = W.array().colwise() * V.col(a).array();
  return out;
}

Eigen::MatrixXd kron(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  MatrixXd out(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return out;
}

Eigen::MatrixXd tensor_penalty(const Eigen::MatrixXd& Px, const Eigen::MatrixXd& Pt, double inv_tau2_x,
                               double inv_tau2_t) {
  if (!(inv_tau2_x > 0) || !(inv_tau2_t > 0))
    throw ArgumentError("tensor_penalty: smoothing parameters must be positive");
  if (Px.rows() != Px.cols() || Pt.rows() != Pt.cols())
    throw ArgumentError("tensor_penalty: penalties must be square");
  const auto dx = Px.rows(), dt = Pt.rows();
  return inv_tau2_x * kron(Px, MatrixXd::Identity(dt, dt)) + inv_tau2_t * kron(MatrixXd::Identity(dx, dx), Pt);
}

Eigen::VectorXd EigenBasis::component(int m, int k) const {
  return psi.row(m).segment(static_cast<Eigen::Index>(k) * G(), G()).transpose();
}

Eigen::MatrixXd EigenBasis::gram() const {
  const VectorXd q = quadrature_weights(grid, domain);
  MatrixXd out = MatrixXd::Zero(M(), M());
  for (int k = 0; k < K; ++k) {
    const auto block = psi.middleCols(static_cast<Eigen::Index>(k) * G(), G());
    out += weights[k] * block * q.asDiagonal() * block.transpose();
  }
  return out;
}

void EigenBasis::check() const {
  if (K < 1) throw ArgumentError("EigenBasis: K must be positive");
  if (G() < 1) throw ArgumentError("EigenBasis: empty grid");
  if (psi.cols() != static_cast<Eigen::Index>(K) * G())
    throw ArgumentError("EigenBasis: psi has wrong column count");
  if (nu.size() != psi.rows()) throw ArgumentError("EigenBasis: eigenvalue count mismatch");
  if (weights.size() != K) throw ArgumentError("EigenBasis: weight count mismatch");
  for (int k = 0; k < K; ++k)
    if (!(weights[k] > 0)) throw ArgumentError("EigenBasis: weights must be positive");
  for (Eigen::Index m = 0; m < nu.size(); ++m)
    if (!(nu[m] >= 0) || (m > 0 && nu[m] > nu[m - 1] * (1 + 1e-12) + 1e-300))
      throw ArgumentError("EigenBasis: eigenvalues must be nonnegative and nonincreasing");
  if (!psi.allFinite()) throw ArgumentError("EigenBasis: non-finite eigenfunction values");
}

Eigen::MatrixXd evaluate_eigenbasis(const EigenBasis& basis, int k, std::span<const double> times) {
  if (k < 0 || k >= basis.K) throw ArgumentError("evaluate_eigenbasis: dimension out of range");
  MatrixXd out(static_cast<Eigen::Index>(times.size()), basis.M());
  std::vector<double> vals(basis.G());
  for (int m = 0; m < basis.M(); ++m) {
    for (int g = 0; g < basis.G(); ++g) vals[g] = basis.value(m, k, g);
    for (size_t i = 0; i < times.size(); ++i)
      out(static_cast<Eigen::Index>(i), m) = interpolate_linear(basis.grid, vals, times[i], basis.domain);
  }
  return out;
}

void normalize_signs(Eigen::MatrixXd& psi) {
  for (Eigen::Index m = 0; m < psi.rows(); ++m) {
    Eigen::Index arg = 0;
    psi.row(m).cwiseAbs().maxCoeff(&arg);
    if (psi(m, arg) < 0) psi.row(m) *= -1.0;
  }
}

EigenBasis split_fourier_eigenbasis(int M, int K, const std::vector<double>& grid, std::mt19937_64& rng) {
  if (M < 1 || K < 1) throw ArgumentError("split_fourier_eigenbasis: need M >= 1 and K >= 1");
  if (grid.size() < 2) throw ArgumentError("split_fourier_eigenbasis: grid too short");
  const int G = static_cast<int>(grid.size());
  const double a = grid.front(), len = grid.back() - grid.front();
  // Piece k covers [k, k + 1] of the extended interval [0, K].
  // phi_1 = 1/sqrt(K), phi_{2j} = sqrt(2/K) sin(2 pi j x / K),
  // phi_{2j+1} = sqrt(2/K) cos(2 pi j x / K).
  EigenBasis out;
  out.domain = Domain{a, grid.back(), false};
  out.grid = grid;
  out.K = K;
  out.psi.resize(M, static_cast<Eigen::Index>(K) * G);
  std::bernoulli_distribution flip(0.5);
  std::vector<double> sign(K, 1.0);
  if (K > 1)
    for (int k = 0; k < K; ++k) sign[k] = flip(rng) ? -1.0 : 1.0;
  const double c0 = 1.0 / std::sqrt(K * len), c1 = std::sqrt(2.0 / (K * len));
  for (int k = 0; k < K; ++k)
    for (int g = 0; g < G; ++g) {
      const double x = k + (grid[g] - a) / len;
      for (int m = 0; m < M; ++m) {
        double v;
        if (m == 0) {
          v = c0;
        } else {
          const int j = (m + 1) / 2;
          const double arg = 2.0 * std::numbers::pi * j * x / K;
          v = c1 * (m % 2 == 1 ? std::sin(arg) : std::cos(arg));
        }
        out.psi(m, static_cast<Eigen::Index>(k) * G + g) = sign[k] * v;
      }
    }
  out.nu = VectorXd::Ones(M);
  out.weights = VectorXd::Ones(K);
  return out;
}

void write_eigenbases(const std::vector<EigenBasis>& bases, const std::filesystem::path& csv_path,
                      const std::filesystem::path& json_path) {
  std::ostringstream os;
  os << "level,m,dim,t,value\n";
  nlohmann::json meta = nlohmann::json::object();
  meta["levels"] = nlohmann::json::array();
  for (const auto& b : bases) {
    b.check();
    for (int m = 0; m < b.M(); ++m)
      for (int k = 0; k < b.K; ++k)
        for (int g = 0; g < b.G(); ++g)
          os << b.level << ',' << m + 1 << ',' << k + 1 << ',' << csv::format(b.grid[g]) << ','
             << csv::format(b.value(m, k, g)) << '\n';
    nlohmann::json lv;
    lv["level"] = b.level;
    lv["K"] = b.K;
    lv["M"] = b.M();
    lv["grid_size"] = b.G();
    lv["domain"] = {{"lo", b.domain.lo}, {"hi", b.domain.hi}, {"cyclic", b.domain.cyclic}};
    lv["nu"] = std::vector<double>(b.nu.data(), b.nu.data() + b.nu.size());
    lv["weights"] = std::vector<double>(b.weights.data(), b.weights.data() + b.weights.size());
    meta["levels"].push_back(lv);
  }
  csv::write_atomic(csv_path, os.str());
  csv::write_atomic(json_path, meta.dump(2) + "\n");
}

std::vector<EigenBasis> read_eigenbases(const std::filesystem::path& csv_path,
                                        const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw SchemaError("cannot open '" + json_path.string() + "'");
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(json_path.string() + ": " + e.what());
  }
  if (!meta.contains("levels") || !meta["levels"].is_array())
    throw SchemaError(json_path.string() + ": missing 'levels' array");

  std::vector<EigenBasis> bases;
  std::map<std::string, size_t> index;
  for (const auto& lv : meta["levels"]) {
    try {
      EigenBasis b;
      b.level = lv.at("level").get<std::string>();
      b.K = lv.at("K").get<int>();
      const int M = lv.at("M").get<int>();
      const int G = lv.at("grid_size").get<int>();
      const auto& dom = lv.at("domain");
      b.domain = Domain{dom.at("lo").get<double>(), dom.at("hi").get<double>(), dom.at("cyclic").get<bool>()};
      const auto nu = lv.at("nu").get<std::vector<double>>();
      const auto w = lv.at("weights").get<std::vector<double>>();
      if (static_cast<int>(nu.size()) != M || static_cast<int>(w.size()) != b.K)
        throw SchemaError("eigenvalue or weight count mismatch for level " + b.level);
      b.nu = Eigen::Map<const VectorXd>(nu.data(), M);
      b.weights = Eigen::Map<const VectorXd>(w.data(), b.K);
      b.psi = MatrixXd::Constant(M, static_cast<Eigen::Index>(b.K) * G, std::nan(""));
      b.grid.assign(G, std::nan(""));
      index[b.level] = bases.size();
      bases.push_back(std::move(b));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(json_path.string() + ": " + e.what());
    }
  }

  const auto table = csv::read(csv_path);
  const int cl = table.column("level"), cm = table.column("m"), cd = table.column("dim"),
            ct = table.column("t"), cv = table.column("value");
  if (cl < 0 || cm < 0 || cd < 0 || ct < 0 || cv < 0)
    throw SchemaError(csv_path.string() + ": expected columns level,m,dim,t,value");
  // Rows of each (level, m, dim) appear in grid order.
  std::map<std::tuple<std::string, long, long>, int> cursor;
  for (size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    auto it = index.find(row[cl]);
    if (it == index.end()) throw SchemaError(csv_path.string() + ": unknown level '" + row[cl] + "'");
    auto& b = bases[it->second];
    const long m = csv::parse_long(row[cm]) - 1, k = csv::parse_long(row[cd]) - 1;
    if (m < 0 || m >= b.M() || k < 0 || k >= b.K)
      throw ValidationError(csv_path.string() + ":" + std::to_string(table.line_numbers[r]) +
                            ": index out of range");
    int& g = cursor[{row[cl], m, k}];
    if (g >= b.G())
      throw ValidationError(csv_path.string() + ":" + std::to_string(table.line_numbers[r]) +
                            ": more grid points than declared");
    const double t = csv::parse_double(row[ct]);
    if (std::isnan(b.grid[g])) b.grid[g] = t;
    else if (std::abs(b.grid[g] - t) > 1e-12)
      throw ValidationError(csv_path.string() + ": grids differ across functions of level " + b.level);
    b.psi(m, k * b.G() + g) = csv::parse_double(row[cv]);
    ++g;
  }
  for (auto& b : bases) {
    if (!b.psi.allFinite())
      throw ValidationError(csv_path.string() + ": missing values for level " + b.level);
    b.check();
  }
  return bases;
}

}  // namespace mfam
