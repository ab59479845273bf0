#include "mfam/model.hpp"

#include "mfam/error.hpp"

#include <nlohmann/json.hpp>

#include <set>

namespace mfam {

using nlohmann::json;

std::string_view term_kind_name(TermKind kind) {
  switch (kind) {
    case TermKind::Constant: return "constant";
    case TermKind::FunctionalIntercept: return "functional-intercept";
    case TermKind::LinearFunctional: return "linear-functional";
    case TermKind::SmoothInteraction: return "smooth-interaction";
    case TermKind::MfpcRandom: return "mfpc-random";
  }
  return "?";
}

TermKind term_kind_from_name(std::string_view name) {
  for (auto k : {TermKind::Constant, TermKind::FunctionalIntercept, TermKind::LinearFunctional,
                 TermKind::SmoothInteraction, TermKind::MfpcRandom})
    if (term_kind_name(k) == name) return k;
  throw SchemaError("unknown term kind '" + std::string(name) + "'");
}

const PredictorSpec* ModelSpec::find(int dim, int param) const {
  for (const auto& p : predictors)
    if (p.dim == dim && p.param == param) return &p;
  return nullptr;
}

void ModelSpec::finalize() {
  if (families.empty()) throw SchemaError("model: no families given");
  std::set<std::pair<int, int>> seen;
  for (const auto& p : predictors) {
    if (p.dim < 0 || p.dim >= K()) throw SchemaError("model: predictor dimension out of range");
    if (p.param < 0 || p.param >= families[p.dim].n_params())
      throw SchemaError("model: parameter index out of range for dimension " + std::to_string(p.dim + 1));
    if (!seen.insert({p.dim, p.param}).second)
      throw SchemaError("model: duplicate predictor for dimension " + std::to_string(p.dim + 1));
    for (const auto& t : p.terms) {
      if (t.kind == TermKind::MfpcRandom) {
        if (p.param != 0)
          throw SchemaError("model: latent terms are only allowed in the first parameter's predictor");
        bool found = false;
        for (const auto& l : latent) found = found || l.name == t.latent;
        if (!found) throw SchemaError("model: unknown latent process '" + t.latent + "'");
      }
      if ((t.kind == TermKind::LinearFunctional || t.kind == TermKind::SmoothInteraction) && t.covariate.empty())
        throw SchemaError("model: term '" + std::string(term_kind_name(t.kind)) + "' needs a covariate");
      if (t.kind == TermKind::FunctionalIntercept || t.kind == TermKind::LinearFunctional ||
          t.kind == TermKind::SmoothInteraction) {
        if (t.degree_t < 1 || t.order_t < 1 || t.order_t >= t.n_basis_t)
          throw SchemaError("model: invalid time basis settings");
      }
      if (t.kind == TermKind::SmoothInteraction && (t.degree_x < 1 || t.order_x < 1 || t.order_x >= t.n_basis_x))
        throw SchemaError("model: invalid covariate basis settings");
    }
  }
  for (int k = 0; k < K(); ++k)
    for (int r = 0; r < families[k].n_params(); ++r)
      if (!find(k, r)) predictors.push_back({k, r, {TermSpec{}}});
  std::set<std::string> names;
  for (const auto& l : latent)
    if (!names.insert(l.name).second) throw SchemaError("model: duplicate latent name '" + l.name + "'");
  if (sampler.draws < 1 || sampler.thin < 1 || sampler.burnin < 0 || sampler.chains < 1)
    throw SchemaError("model: invalid sampler budget");
}

namespace {

template <class T>
void read_opt(const json& j, const char* key, T& out, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw SchemaError(path + "/" + key + ": wrong type");
  }
}

}  // namespace

SamplerConfig sampler_config_from_json(const json& c, SamplerConfig o) {
  if (!c.is_object()) throw SchemaError("/sampler: expected an object");
  read_opt(c, "burnin", o.burnin, "/sampler");
  read_opt(c, "draws", o.draws, "/sampler");
  read_opt(c, "thin", o.thin, "/sampler");
  read_opt(c, "chains", o.chains, "/sampler");
  read_opt(c, "seed", o.seed, "/sampler");
  read_opt(c, "threads", o.threads, "/sampler");
  read_opt(c, "slice_width", o.slice_width, "/sampler");
  read_opt(c, "slice_max_doublings", o.slice_max_doublings, "/sampler");
  read_opt(c, "ig_a", o.ig_a, "/sampler");
  read_opt(c, "ig_b", o.ig_b, "/sampler");
  read_opt(c, "vague_sd", o.vague_sd, "/sampler");
  read_opt(c, "store_scores", o.store_scores, "/sampler");
  return o;
}

BackfitConfig backfit_config_from_json(const json& c, BackfitConfig o) {
  if (!c.is_object()) throw SchemaError("/backfit: expected an object");
  read_opt(c, "max_cycles", o.max_cycles, "/backfit");
  read_opt(c, "tol", o.tol, "/backfit");
  read_opt(c, "grid_lo", o.grid_lo, "/backfit");
  read_opt(c, "grid_hi", o.grid_hi, "/backfit");
  read_opt(c, "grid_points", o.grid_points, "/backfit");
  read_opt(c, "max_halving", o.max_halving, "/backfit");
  read_opt(c, "divergence_tol", o.divergence_tol, "/backfit");
  return o;
}

json sampler_config_to_json(const SamplerConfig& o) {
  return {{"burnin", o.burnin},           {"draws", o.draws},
          {"thin", o.thin},               {"chains", o.chains},
          {"seed", o.seed},               {"threads", o.threads},
          {"slice_width", o.slice_width}, {"slice_max_doublings", o.slice_max_doublings},
          {"ig_a", o.ig_a},               {"ig_b", o.ig_b},
          {"vague_sd", o.vague_sd},       {"store_scores", o.store_scores}};
}

json backfit_config_to_json(const BackfitConfig& b) {
  return {{"max_cycles", b.max_cycles},   {"tol", b.tol},
          {"grid_lo", b.grid_lo},         {"grid_hi", b.grid_hi},
          {"grid_points", b.grid_points}, {"max_halving", b.max_halving},
          {"divergence_tol", b.divergence_tol}};
}

ModelSpec model_spec_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("model: expected an object");
  ModelSpec s;
  if (!j.contains("families") || !j["families"].is_array()) throw SchemaError("/families: required array");
  for (const auto& f : j["families"]) {
    if (!f.is_string()) throw SchemaError("/families: expected strings");
    s.families.push_back(Family::from_name(f.get<std::string>()));
  }
  if (j.contains("domain")) {
    const auto& d = j["domain"];
    read_opt(d, "lo", s.domain.lo, "/domain");
    read_opt(d, "hi", s.domain.hi, "/domain");
    read_opt(d, "cyclic", s.domain.cyclic, "/domain");
  }
  if (j.contains("predictors")) {
    int pi = 0;
    for (const auto& p : j["predictors"]) {
      const std::string path = "/predictors/" + std::to_string(pi++);
      PredictorSpec ps;
      int dim = 0, param = 1;
      read_opt(p, "dim", dim, path);
      read_opt(p, "param", param, path);
      ps.dim = dim - 1;
      ps.param = param - 1;
      if (!p.contains("terms") || !p["terms"].is_array()) throw SchemaError(path + "/terms: required array");
      int ti = 0;
      for (const auto& t : p["terms"]) {
        const std::string tp = path + "/terms/" + std::to_string(ti++);
        TermSpec ts;
        std::string kind;
        read_opt(t, "kind", kind, tp);
        if (kind.empty()) throw SchemaError(tp + "/kind: required");
        ts.kind = term_kind_from_name(kind);
        read_opt(t, "covariate", ts.covariate, tp);
        read_opt(t, "n_basis_t", ts.n_basis_t, tp);
        read_opt(t, "degree_t", ts.degree_t, tp);
        read_opt(t, "order_t", ts.order_t, tp);
        read_opt(t, "n_basis_x", ts.n_basis_x, tp);
        read_opt(t, "degree_x", ts.degree_x, tp);
        read_opt(t, "order_x", ts.order_x, tp);
        read_opt(t, "latent", ts.latent, tp);
        ps.terms.push_back(ts);
      }
      s.predictors.push_back(std::move(ps));
    }
  }
  if (j.contains("latent")) {
    int li = 0;
    for (const auto& l : j["latent"]) {
      const std::string path = "/latent/" + std::to_string(li++);
      LatentSpec ls;
      read_opt(l, "name", ls.name, path);
      std::string level = "unit";
      read_opt(l, "level", level, path);
      if (level == "unit") ls.level = LatentLevel::Unit;
      else if (level == "curve") ls.level = LatentLevel::Curve;
      else throw SchemaError(path + "/level: expected 'unit' or 'curve'");
      ls.basis = ls.name;
      read_opt(l, "basis", ls.basis, path);
      if (l.contains("n_components")) {
        int m = 0;
        read_opt(l, "n_components", m, path);
        ls.n_components = m;
      }
      s.latent.push_back(ls);
    }
  }
  if (j.contains("sampler")) s.sampler = sampler_config_from_json(j["sampler"], s.sampler);
  if (j.contains("backfit")) s.backfit = backfit_config_from_json(j["backfit"], s.backfit);
  s.finalize();
  return s;
}

json model_spec_to_json(const ModelSpec& s) {
  json j;
  j["families"] = json::array();
  for (const auto& f : s.families) j["families"].push_back(std::string(f.name()));
  j["domain"] = {{"lo", s.domain.lo}, {"hi", s.domain.hi}, {"cyclic", s.domain.cyclic}};
  j["predictors"] = json::array();
  for (const auto& p : s.predictors) {
    json pj = {{"dim", p.dim + 1}, {"param", p.param + 1}, {"terms", json::array()}};
    for (const auto& t : p.terms) {
      json tj = {{"kind", std::string(term_kind_name(t.kind))}};
      if (!t.covariate.empty()) tj["covariate"] = t.covariate;
      if (t.kind == TermKind::FunctionalIntercept || t.kind == TermKind::LinearFunctional ||
          t.kind == TermKind::SmoothInteraction) {
        tj["n_basis_t"] = t.n_basis_t;
        tj["degree_t"] = t.degree_t;
        tj["order_t"] = t.order_t;
      }
      if (t.kind == TermKind::SmoothInteraction) {
        tj["n_basis_x"] = t.n_basis_x;
        tj["degree_x"] = t.degree_x;
        tj["order_x"] = t.order_x;
      }
      if (t.kind == TermKind::MfpcRandom) tj["latent"] = t.latent;
      pj["terms"].push_back(tj);
    }
    j["predictors"].push_back(pj);
  }
  j["latent"] = json::array();
  for (const auto& l : s.latent) {
    json lj = {{"name", l.name}, {"level", l.level == LatentLevel::Unit ? "unit" : "curve"}, {"basis", l.basis}};
    if (l.n_components) lj["n_components"] = *l.n_components;
    j["latent"].push_back(lj);
  }
  j["sampler"] = sampler_config_to_json(s.sampler);
  j["backfit"] = backfit_config_to_json(s.backfit);
  return j;
}

}  // namespace mfam
