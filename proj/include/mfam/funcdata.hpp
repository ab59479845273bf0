#pragma once

#include "mfam/families.hpp"
#include "mfam/grid.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

namespace mfam {

// One scalar measurement. `dim` is zero-based here; the CSV format is
// one-based. `group` is the optional nested level (e.g. a year within a
// site); a curve is identified by (unit, group).
struct Observation {
  int dim = 0;
  long unit = 0;
  std::optional<long> group;
  double t = 0.0;
  double y = 0.0;

  friend bool operator==(const Observation&, const Observation&) = default;
};

// Canonical ordering: dimension, unit, group, time, value.
bool canonical_less(const Observation& a, const Observation& b);

struct CurveKey {
  long unit = 0;
  std::optional<long> group;
  auto operator<=>(const CurveKey&) const = default;
};

// Scalar covariates keyed by unit (group empty) or by curve.
class CovariateTable {
 public:
  CovariateTable() = default;
  explicit CovariateTable(std::vector<std::string> names) : names_(std::move(names)) {}

  const std::vector<std::string>& names() const { return names_; }
  bool has(const std::string& name) const;
  int index(const std::string& name) const;

  void set(const CurveKey& key, std::vector<double> values);
  // Looks up (unit, group) first, then (unit, none). Throws SchemaError
  // when neither row exists.
  double value(const CurveKey& key, const std::string& name) const;
  double value(const CurveKey& key, int index) const;
  const std::map<CurveKey, std::vector<double>>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }

 private:
  std::vector<std::string> names_;
  std::map<CurveKey, std::vector<double>> rows_;
};

// Immutable long-format multivariate functional dataset.
class Dataset {
 public:
  Dataset() = default;
  // Validates every invariant and stores observations in canonical order.
  Dataset(std::vector<Family> families, Domain domain, std::vector<Observation> obs,
          CovariateTable covariates = {}, int layers = 0);

  int K() const { return static_cast<int>(families_.size()); }
  const std::vector<Family>& families() const { return families_; }
  const Domain& domain() const { return domain_; }
  const std::vector<Observation>& obs() const { return obs_; }
  const CovariateTable& covariates() const { return covariates_; }
  int layers() const { return layers_; }
  size_t size() const { return obs_.size(); }

  std::vector<long> units() const;
  std::vector<CurveKey> curves() const;
  // Observations of dimension k as a single-dimension dataset.
  Dataset dimension_view(int k) const;
  Dataset with_covariates(CovariateTable table) const;

 private:
  std::vector<Family> families_;
  Domain domain_;
  std::vector<Observation> obs_;
  CovariateTable covariates_;
  int layers_ = 0;
};

struct CsvSchema {
  std::string dim = "dim";
  std::string unit = "unit";
  std::string group = "group";
  std::string t = "t";
  std::string y = "y";
};

// Dimension (zero-based) -> value substituted for exact zeros before the
// support check, e.g. 0.5 for rounded mean speeds under a Gamma model.
using ZeroReplacement = std::map<int, double>;

Dataset load_long_csv(const std::filesystem::path& path, const CsvSchema& schema,
                      const std::vector<Family>& families, const Domain& domain,
                      const ZeroReplacement& zeros = {});
void write_long_csv(const Dataset& data, const std::filesystem::path& path);

CovariateTable load_covariates_csv(const std::filesystem::path& path);
void write_covariates_csv(const CovariateTable& table, const std::filesystem::path& path);

void replace_zeros(std::vector<Observation>& obs, const ZeroReplacement& zeros);

enum class RegimeKind { Sparse, Regular, Irregular };

struct SamplingRegime {
  RegimeKind kind = RegimeKind::Sparse;
  int min_count = 1;
  int max_count = 10;
  std::vector<double> regular_grid;

  static SamplingRegime sparse();
  static SamplingRegime regular();
  static SamplingRegime irregular();
  static SamplingRegime from_name(const std::string& name);
  std::string name() const;
};

// Subsamples a dense dataset observed on the 101-point grid of [0,1].
Dataset subsample_regime(const Dataset& dense, const SamplingRegime& regime,
                         std::mt19937_64& rng);

}  // namespace mfam
