#pragma once

#include "mfam/bases.hpp"
#include "mfam/gfpca.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mfam {

// Univariate scores of one latent process stacked by dimension. Rows are
// units (or curves), column block k holds the M^(k) scores of dimension k.
struct ScoreMatrix {
  std::string level;
  std::vector<CurveKey> keys;
  Eigen::MatrixXd xi;
  std::vector<int> block_sizes;

  int Mplus() const;
};

// Aligns the score rows of the per-dimension FPCAs of one level by key.
// Entities without data in a dimension get zero scores there.
ScoreMatrix stack_scores(const std::vector<const UnivariateFPCA*>& per_dim);

// w_k = 1 / sums[k]. Throws DegenerateError for a nonpositive sum.
Eigen::VectorXd eigenvalue_weights(const std::vector<double>& upsilon_sums);

struct MfpcaResult {
  EigenBasis basis;
  std::vector<CurveKey> keys;
  Eigen::MatrixXd scores;  // keys x M, multivariate scores of the centred rows
};

// Eigenanalysis of (n - 1)^-1 D Xi' Xi D on the column-centred scores.
// Components with eigenvalue <= 1e-10 times the largest are dropped. The
// eigenfunctions live on the grid of the first dimension and are
// orthonormal under the weighted scalar product.
MfpcaResult assemble_mfpca(const ScoreMatrix& scores, const std::vector<const UnivariateFPCA*>& uni,
                           const Eigen::VectorXd& weights);

// Smallest leading set whose eigenvalues explain at least `pve` of the
// total; at least one component is kept when the total is positive.
int truncation_order(const Eigen::VectorXd& nu, double pve);
EigenBasis truncate(const EigenBasis& basis, double pve);

enum class WeightScheme { Equal, InverseEigenvalueSum };

struct MfpcaConfig {
  WeightScheme weights = WeightScheme::Equal;
  double pve = 1.0;
};

MfpcaConfig mfpca_config_from_json(const nlohmann::json& j);

// One MFPCA per latent level. `per_dim[k]` holds the univariate FPCAs of
// dimension k; levels are matched by tag.
std::vector<MfpcaResult> run_mfpca(const std::vector<std::vector<UnivariateFPCA>>& per_dim, const MfpcaConfig& config);

// CSV `level,unit,group,m,score`.
void write_mfpca_scores(const std::vector<MfpcaResult>& results, const std::filesystem::path& path);

}  // namespace mfam
