#include "mfam/funcdata.hpp"

#include "mfam/csv.hpp"
#include "mfam/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace mfam {

bool canonical_less(const Observation& a, const Observation& b) {
  return std::tie(a.dim, a.unit, a.group, a.t, a.y) < std::tie(b.dim, b.unit, b.group, b.t, b.y);
}

bool CovariateTable::has(const std::string& name) const { return index(name) >= 0; }

int CovariateTable::index(const std::string& name) const {
  for (size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  return -1;
}

void CovariateTable::set(const CurveKey& key, std::vector<double> values) {
  if (values.size() != names_.size())
    throw ArgumentError("covariate row has " + std::to_string(values.size()) + " values, expected " +
                        std::to_string(names_.size()));
  rows_[key] = std::move(values);
}

double CovariateTable::value(const CurveKey& key, int index) const {
  if (index < 0 || index >= static_cast<int>(names_.size()))
    throw SchemaError("covariate index out of range");
  auto it = rows_.find(key);
  if (it == rows_.end() && key.group) it = rows_.find(CurveKey{key.unit, std::nullopt});
  if (it == rows_.end())
    throw SchemaError("no covariate row for unit " + std::to_string(key.unit));
  return it->second[static_cast<size_t>(index)];
}

double CovariateTable::value(const CurveKey& key, const std::string& name) const {
  const int i = index(name);
  if (i < 0) throw SchemaError("unknown covariate '" + name + "'");
  return value(key, i);
}

Dataset::Dataset(std::vector<Family> families, Domain domain, std::vector<Observation> obs,
                 CovariateTable covariates, int layers)
    : families_(std::move(families)),
      domain_(domain),
      obs_(std::move(obs)),
      covariates_(std::move(covariates)),
      layers_(layers) {
  if (families_.empty()) throw ArgumentError("dataset needs at least one dimension");
  if (!(domain_.hi > domain_.lo)) throw ArgumentError("empty domain interval");
  if (layers_ < 0 || layers_ > 1) throw ArgumentError("only one nested grouping layer is supported");

  std::vector<size_t> nonfinite, support, range, dims;
  for (size_t i = 0; i < obs_.size(); ++i) {
    const auto& o = obs_[i];
    if (o.dim < 0 || o.dim >= K()) {
      dims.push_back(i);
      continue;
    }
    if (!std::isfinite(o.y) || !std::isfinite(o.t)) nonfinite.push_back(i);
    else if (!families_[o.dim].in_support(o.y)) support.push_back(i);
    if (!domain_.contains(o.t)) range.push_back(i);
  }
  auto list = [](const std::vector<size_t>& rows) {
    std::ostringstream os;
    for (size_t j = 0; j < rows.size() && j < 20; ++j) os << (j ? ", " : "") << rows[j] + 1;
    if (rows.size() > 20) os << ", ...";
    return os.str();
  };
  if (!dims.empty()) throw ValidationError("dimension index out of range in rows " + list(dims));
  if (!nonfinite.empty()) throw ValidationError("non-finite values in rows " + list(nonfinite));
  if (!support.empty()) throw FamilySupportError("values outside family support in rows " + list(support));
  if (!range.empty()) throw ValidationError("times outside the domain in rows " + list(range));

  const bool any_group = std::any_of(obs_.begin(), obs_.end(), [](const auto& o) { return o.group.has_value(); });
  if (layers_ == 1) {
    if (std::any_of(obs_.begin(), obs_.end(), [](const auto& o) { return !o.group.has_value(); }))
      throw ValidationError("nested layer declared but some rows have no group");
  } else if (any_group) {
    layers_ = 1;
    if (std::any_of(obs_.begin(), obs_.end(), [](const auto& o) { return !o.group.has_value(); }))
      throw ValidationError("group column is only partially filled");
  }
  std::sort(obs_.begin(), obs_.end(), canonical_less);
}

std::vector<long> Dataset::units() const {
  std::set<long> s;
  for (const auto& o : obs_) s.insert(o.unit);
  return {s.begin(), s.end()};
}

std::vector<CurveKey> Dataset::curves() const {
  std::set<CurveKey> s;
  for (const auto& o : obs_) s.insert(CurveKey{o.unit, o.group});
  return {s.begin(), s.end()};
}

Dataset Dataset::dimension_view(int k) const {
  if (k < 0 || k >= K()) throw ArgumentError("dimension out of range");
  std::vector<Observation> sub;
  for (const auto& o : obs_)
    if (o.dim == k) {
      auto c = o;
      c.dim = 0;
      sub.push_back(c);
    }
  return Dataset({families_[k]}, domain_, std::move(sub), covariates_, layers_);
}

Dataset Dataset::with_covariates(CovariateTable table) const {
  Dataset d = *this;
  d.covariates_ = std::move(table);
  return d;
}

Dataset load_long_csv(const std::filesystem::path& path, const CsvSchema& schema,
                      const std::vector<Family>& families, const Domain& domain,
                      const ZeroReplacement& zeros) {
  const auto table = csv::read(path);
  const int cd = table.column(schema.dim), cu = table.column(schema.unit), ct = table.column(schema.t),
            cy = table.column(schema.y), cg = table.column(schema.group);
  for (auto [c, name] : {std::pair{cd, schema.dim}, {cu, schema.unit}, {ct, schema.t}, {cy, schema.y}})
    if (c < 0) throw SchemaError(path.string() + ": missing column '" + name + "'");

  std::vector<Observation> obs;
  obs.reserve(table.rows.size());
  std::vector<size_t> bad_rows;
  for (size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    Observation o;
    try {
      o.dim = static_cast<int>(csv::parse_long(row[cd])) - 1;
      o.unit = csv::parse_long(row[cu]);
      if (cg >= 0 && !row[cg].empty()) o.group = csv::parse_long(row[cg]);
      o.t = csv::parse_double(row[ct]);
      o.y = csv::parse_double(row[cy]);
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(table.line_numbers[r]) + ": " + e.what());
    }
    if (!std::isfinite(o.y) || !std::isfinite(o.t)) bad_rows.push_back(table.line_numbers[r]);
    obs.push_back(o);
  }
  if (!bad_rows.empty()) {
    std::ostringstream os;
    os << path.string() << ": non-finite values on line(s) ";
    for (size_t j = 0; j < bad_rows.size() && j < 20; ++j) os << (j ? ", " : "") << bad_rows[j];
    throw ValidationError(os.str());
  }
  replace_zeros(obs, zeros);
  return Dataset(families, domain, std::move(obs));
}

void write_long_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "dim,unit,group,t,y\n";
  for (const auto& o : data.obs()) {
    os << o.dim + 1 << ',' << o.unit << ',';
    if (o.group) os << *o.group;
    os << ',' << csv::format(o.t) << ',' << csv::format(o.y) << '\n';
  }
  csv::write_atomic(path, os.str());
}

CovariateTable load_covariates_csv(const std::filesystem::path& path) {
  const auto table = csv::read(path);
  const int cu = table.column("unit"), cg = table.column("group");
  if (cu < 0) throw SchemaError(path.string() + ": missing column 'unit'");
  std::vector<std::string> names;
  std::vector<int> cols;
  for (size_t c = 0; c < table.header.size(); ++c) {
    if (static_cast<int>(c) == cu || static_cast<int>(c) == cg) continue;
    names.push_back(table.header[c]);
    cols.push_back(static_cast<int>(c));
  }
  CovariateTable out(names);
  for (size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    CurveKey key{csv::parse_long(row[cu]), std::nullopt};
    if (cg >= 0 && !row[cg].empty()) key.group = csv::parse_long(row[cg]);
    std::vector<double> vals;
    for (int c : cols) {
      const double v = csv::parse_double(row[c]);
      if (!std::isfinite(v))
        throw ValidationError(path.string() + ":" + std::to_string(table.line_numbers[r]) +
                              ": non-finite covariate value");
      vals.push_back(v);
    }
    out.set(key, std::move(vals));
  }
  return out;
}

void write_covariates_csv(const CovariateTable& table, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "unit,group";
  for (const auto& n : table.names()) os << ',' << n;
  os << '\n';
  for (const auto& [key, vals] : table.rows()) {
    os << key.unit << ',';
    if (key.group) os << *key.group;
    for (double v : vals) os << ',' << csv::format(v);
    os << '\n';
  }
  csv::write_atomic(path, os.str());
}

void replace_zeros(std::vector<Observation>& obs, const ZeroReplacement& zeros) {
  if (zeros.empty()) return;
  for (auto& o : obs) {
    auto it = zeros.find(o.dim);
    if (it != zeros.end() && o.y == 0.0) o.y = it->second;
  }
}

SamplingRegime SamplingRegime::sparse() { return {RegimeKind::Sparse, 1, 10, {}}; }
SamplingRegime SamplingRegime::irregular() { return {RegimeKind::Irregular, 11, 20, {}}; }
SamplingRegime SamplingRegime::regular() {
  return {RegimeKind::Regular, 11, 11, equidistant_grid(0.0, 1.0, 11)};
}

SamplingRegime SamplingRegime::from_name(const std::string& name) {
  if (name == "sparse") return sparse();
  if (name == "regular") return regular();
  if (name == "irregular") return irregular();
  throw SchemaError("unknown sampling regime '" + name + "'");
}

std::string SamplingRegime::name() const {
  switch (kind) {
    case RegimeKind::Sparse: return "sparse";
    case RegimeKind::Regular: return "regular";
    case RegimeKind::Irregular: return "irregular";
  }
  return "?";
}

namespace {

constexpr int kDenseGrid = 101;

int grid_index(double t) {
  const double s = t * (kDenseGrid - 1);
  const double r = std::round(s);
  if (std::abs(s - r) > 1e-7 || r < 0 || r > kDenseGrid - 1) return -1;
  return static_cast<int>(r);
}

}  // namespace

Dataset subsample_regime(const Dataset& dense, const SamplingRegime& regime, std::mt19937_64& rng) {
  const auto& obs = dense.obs();
  std::vector<Observation> kept;
  size_t i = 0;
  while (i < obs.size()) {
    size_t j = i;
    while (j < obs.size() && obs[j].dim == obs[i].dim && obs[j].unit == obs[i].unit &&
           obs[j].group == obs[i].group)
      ++j;
    // obs[i, j) is one (dim, curve) block in time order.
    if (j - i != static_cast<size_t>(kDenseGrid))
      throw ArgumentError("subsample_regime: dense input must have 101 grid points per curve and dimension");
    for (size_t s = i; s < j; ++s)
      if (grid_index(obs[s].t) != static_cast<int>(s - i))
        throw ArgumentError("subsample_regime: dense input is not on the 101-point grid of [0,1]");

    if (regime.kind == RegimeKind::Regular) {
      for (size_t s = i; s < j; ++s)
        if ((s - i) % 10 == 0) kept.push_back(obs[s]);
    } else {
      std::uniform_int_distribution<int> count(regime.min_count, regime.max_count);
      const int n = count(rng);
      std::vector<int> idx(kDenseGrid);
      std::iota(idx.begin(), idx.end(), 0);
      // Partial Fisher-Yates: the first n entries are a uniform sample.
      for (int a = 0; a < n; ++a) {
        std::uniform_int_distribution<int> pick(a, kDenseGrid - 1);
        std::swap(idx[a], idx[pick(rng)]);
      }
      std::sort(idx.begin(), idx.begin() + n);
      for (int a = 0; a < n; ++a) kept.push_back(obs[i + idx[a]]);
    }
    i = j;
  }
  return Dataset(dense.families(), dense.domain(), std::move(kept), dense.covariates(), dense.layers());
}

}  // namespace mfam
