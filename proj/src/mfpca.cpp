#include "mfam/mfpca.hpp"

#include "mfam/csv.hpp"
#include "mfam/error.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

namespace mfam {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

int ScoreMatrix::Mplus() const {
  int s = 0;
  for (int b : block_sizes) s += b;
  return s;
}

ScoreMatrix stack_scores(const std::vector<const UnivariateFPCA*>& per_dim) {
  if (per_dim.empty()) throw ArgumentError("stack_scores: no dimensions");
  ScoreMatrix out;
  out.level = per_dim.front()->level;
  std::set<CurveKey> keys;
  for (const auto* f : per_dim) {
    if (f->level != out.level) throw ArgumentError("stack_scores: mixed latent levels");
    if (f->scores.rows() != static_cast<Eigen::Index>(f->keys.size()) || f->scores.cols() != f->M())
      throw ArgumentError("stack_scores: scores do not match keys and eigenfunctions of level " + f->level);
    keys.insert(f->keys.begin(), f->keys.end());
    out.block_sizes.push_back(f->M());
  }
  out.keys.assign(keys.begin(), keys.end());
  out.xi = MatrixXd::Zero(static_cast<Eigen::Index>(out.keys.size()), out.Mplus());
  int col = 0;
  for (const auto* f : per_dim) {
    for (size_t i = 0; i < f->keys.size(); ++i) {
      const auto r = std::lower_bound(out.keys.begin(), out.keys.end(), f->keys[i]) - out.keys.begin();
      out.xi.block(r, col, 1, f->M()) = f->scores.row(static_cast<Eigen::Index>(i));
    }
    col += f->M();
  }
  return out;
}

Eigen::VectorXd eigenvalue_weights(const std::vector<double>& sums) {
  if (sums.empty()) throw ArgumentError("eigenvalue_weights: no dimensions");
  VectorXd w(static_cast<Eigen::Index>(sums.size()));
  for (size_t k = 0; k < sums.size(); ++k) {
    if (!(sums[k] > 0)) throw DegenerateError("eigenvalue_weights: dimension " + std::to_string(k + 1) + " has no variation");
    w[static_cast<Eigen::Index>(k)] = 1.0 / sums[k];
  }
  return w;
}

MfpcaResult assemble_mfpca(const ScoreMatrix& sm, const std::vector<const UnivariateFPCA*>& uni,
                           const Eigen::VectorXd& weights) {
  const int K = static_cast<int>(uni.size());
  if (K == 0 || static_cast<int>(sm.block_sizes.size()) != K) throw ArgumentError("assemble_mfpca: dimension count mismatch");
  if (weights.size() != K) throw ArgumentError("assemble_mfpca: weight count mismatch");
  for (int k = 0; k < K; ++k) {
    if (sm.block_sizes[k] != uni[k]->M()) throw ArgumentError("assemble_mfpca: score blocks do not match eigenfunctions");
    if (!(weights[k] > 0)) throw ArgumentError("assemble_mfpca: weights must be positive");
  }
  const auto n = sm.xi.rows();
  if (n < 2) throw ArgumentError("assemble_mfpca: need at least two rows of scores");
  const int Mp = sm.Mplus();
  if (Mp == 0) throw DegenerateError("assemble_mfpca: no univariate components");

  VectorXd d(Mp);
  for (int k = 0, c = 0; k < K; ++k)
    for (int m = 0; m < sm.block_sizes[k]; ++m) d[c++] = std::sqrt(weights[k]);
  const MatrixXd centred = sm.xi.rowwise() - sm.xi.colwise().mean();
  const MatrixXd Z = d.asDiagonal() * (centred.transpose() * centred) * d.asDiagonal() / double(n - 1);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(Z);
  const VectorXd ev = es.eigenvalues().reverse();
  const MatrixXd C = es.eigenvectors().rowwise().reverse();
  const double top = std::max(ev[0], 0.0);
  int M = 0;
  while (M < Mp && ev[M] > 1e-10 * top && top > 0) ++M;
  if (M == 0) throw DegenerateError("assemble_mfpca: scores have no variation");

  MfpcaResult out;
  EigenBasis& b = out.basis;
  b.level = sm.level;
  b.domain = uni[0]->domain;
  b.grid = uni[0]->grid;
  b.K = K;
  b.weights = weights;
  b.nu = ev.head(M);
  const int G = b.G();
  b.psi.resize(M, static_cast<Eigen::Index>(K) * G);
  for (int k = 0, off = 0; k < K; ++k) {
    const int Mk = sm.block_sizes[k];
    MatrixXd phi;  // Mk x G on the output grid
    if (uni[k]->grid == b.grid) {
      phi = uni[k]->phi;
    } else {
      phi = evaluate_eigenbasis(uni[k]->as_basis(), 0, b.grid).transpose();
    }
    if (Mk > 0)
      b.psi.middleCols(static_cast<Eigen::Index>(k) * G, G) =
          C.block(off, 0, Mk, M).transpose() * phi / std::sqrt(weights[k]);
    else
      b.psi.middleCols(static_cast<Eigen::Index>(k) * G, G).setZero();
    off += Mk;
  }
  MatrixXd Cm = C.leftCols(M);
  for (int m = 0; m < M; ++m) {
    Eigen::Index arg = 0;
    b.psi.row(m).cwiseAbs().maxCoeff(&arg);
    if (b.psi(m, arg) < 0) {
      b.psi.row(m) *= -1.0;
      Cm.col(m) *= -1.0;
    }
  }
  out.keys = sm.keys;
  out.scores = centred * d.asDiagonal() * Cm;
  return out;
}

int truncation_order(const Eigen::VectorXd& nu, double pve) {
  if (!(pve > 0 && pve <= 1)) throw ArgumentError("truncate: pve must lie in (0, 1]");
  const double total = nu.sum();
  if (!(total > 0)) return static_cast<int>(nu.size());
  if (pve >= 1.0) return static_cast<int>(nu.size());
  double cum = 0.0;
  for (Eigen::Index m = 0; m < nu.size(); ++m) {
    cum += nu[m];
    if (cum / total >= pve) return static_cast<int>(m + 1);
  }
  return static_cast<int>(nu.size());
}

EigenBasis truncate(const EigenBasis& basis, double pve) {
  const int M = truncation_order(basis.nu, pve);
  EigenBasis out = basis;
  out.psi = basis.psi.topRows(M);
  out.nu = basis.nu.head(M);
  return out;
}

MfpcaConfig mfpca_config_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("/mfpca: expected an object");
  MfpcaConfig c;
  if (j.contains("weights")) {
    const auto& w = j["weights"];
    if (!w.is_string()) throw SchemaError("/mfpca/weights: expected a string");
    const auto s = w.get<std::string>();
    if (s == "equal")
      c.weights = WeightScheme::Equal;
    else if (s == "inverse_eigenvalue_sum")
      c.weights = WeightScheme::InverseEigenvalueSum;
    else
      throw SchemaError("/mfpca/weights: unknown scheme '" + s + "'");
  }
  if (j.contains("pve")) {
    if (!j["pve"].is_number()) throw SchemaError("/mfpca/pve: expected a number");
    c.pve = j["pve"].get<double>();
    if (!(c.pve > 0 && c.pve <= 1)) throw SchemaError("/mfpca/pve: must lie in (0, 1]");
  }
  return c;
}

std::vector<MfpcaResult> run_mfpca(const std::vector<std::vector<UnivariateFPCA>>& per_dim, const MfpcaConfig& cfg) {
  if (per_dim.empty()) throw ArgumentError("run_mfpca: no dimensions");
  std::vector<std::string> levels;
  for (const auto& f : per_dim.front()) levels.push_back(f.level);
  std::vector<MfpcaResult> out;
  for (const auto& level : levels) {
    std::vector<const UnivariateFPCA*> uni;
    for (size_t k = 0; k < per_dim.size(); ++k) {
      const auto it = std::find_if(per_dim[k].begin(), per_dim[k].end(), [&](const auto& f) { return f.level == level; });
      if (it == per_dim[k].end())
        throw ArgumentError("run_mfpca: dimension " + std::to_string(k + 1) + " lacks level " + level);
      uni.push_back(&*it);
    }
    VectorXd w = VectorXd::Ones(static_cast<Eigen::Index>(uni.size()));
    if (cfg.weights == WeightScheme::InverseEigenvalueSum) {
      std::vector<double> sums;
      for (const auto* f : uni) sums.push_back(f->upsilon.sum());
      w = eigenvalue_weights(sums);
    }
    auto res = assemble_mfpca(stack_scores(uni), uni, w);
    const int M = truncation_order(res.basis.nu, cfg.pve);
    res.basis = truncate(res.basis, cfg.pve);
    res.scores = res.scores.leftCols(M).eval();
    out.push_back(std::move(res));
  }
  return out;
}

void write_mfpca_scores(const std::vector<MfpcaResult>& results, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "level,unit,group,m,score\n";
  for (const auto& r : results)
    for (size_t i = 0; i < r.keys.size(); ++i)
      for (Eigen::Index m = 0; m < r.scores.cols(); ++m)
        os << r.basis.level << ',' << r.keys[i].unit << ',' << (r.keys[i].group ? std::to_string(*r.keys[i].group) : "")
           << ',' << m + 1 << ',' << csv::format(r.scores(static_cast<Eigen::Index>(i), m)) << '\n';
  csv::write_atomic(path, os.str());
}

}  // namespace mfam
