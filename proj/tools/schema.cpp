#include "schema.hpp"

#include "config_schema.inc"

#include <cmath>
#include <set>
#include <stdexcept>

namespace mfam::cli {

using nlohmann::json;

SchemaValidator::SchemaValidator(json schema) : root_(std::move(schema)) {}

std::vector<std::string> SchemaValidator::validate(const json& doc) const {
  std::vector<std::string> errors;
  check(root_, doc, "", errors);
  return errors;
}

const json& SchemaValidator::resolve(const json& schema) const {
  if (!schema.contains("$ref")) return schema;
  const auto ref = schema["$ref"].get<std::string>();
  if (ref.rfind("#/", 0) != 0) throw std::runtime_error("schema: only local references are supported: " + ref);
  return resolve(root_.at(json::json_pointer(ref.substr(1))));
}

namespace {

bool has_type(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
  if (type == "number") return v.is_number();
  if (type == "null") return v.is_null();
  return false;
}

std::string at(const std::string& path) { return path.empty() ? "/" : path; }

}  // namespace

void SchemaValidator::check(const json& schema_in, const json& v, const std::string& path,
                            std::vector<std::string>& errors) const {
  const json& s = resolve(schema_in);
  if (s.contains("type")) {
    const auto& t = s["type"];
    bool ok = false;
    if (t.is_string()) ok = has_type(v, t.get<std::string>());
    else
      for (const auto& x : t) ok = ok || has_type(v, x.get<std::string>());
    if (!ok) {
      errors.push_back(at(path) + ": expected " + (t.is_string() ? t.get<std::string>() : t.dump()));
      return;
    }
  }
  if (s.contains("enum")) {
    bool ok = false;
    for (const auto& e : s["enum"]) ok = ok || e == v;
    if (!ok) {
      errors.push_back(at(path) + ": " + v.dump() + " is not one of " + s["enum"].dump());
      return;
    }
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (s.contains("minimum") && x < s["minimum"].get<double>())
      errors.push_back(at(path) + ": must be >= " + s["minimum"].dump());
    if (s.contains("maximum") && x > s["maximum"].get<double>())
      errors.push_back(at(path) + ": must be <= " + s["maximum"].dump());
    if (s.contains("exclusiveMinimum") && x <= s["exclusiveMinimum"].get<double>())
      errors.push_back(at(path) + ": must be > " + s["exclusiveMinimum"].dump());
    if (s.contains("exclusiveMaximum") && x >= s["exclusiveMaximum"].get<double>())
      errors.push_back(at(path) + ": must be < " + s["exclusiveMaximum"].dump());
  }
  if (v.is_string() && s.contains("minLength") && v.get<std::string>().size() < s["minLength"].get<size_t>())
    errors.push_back(at(path) + ": string too short");
  if (v.is_array()) {
    if (s.contains("minItems") && v.size() < s["minItems"].get<size_t>())
      errors.push_back(at(path) + ": needs at least " + s["minItems"].dump() + " item(s)");
    if (s.value("uniqueItems", false)) {
      std::set<std::string> seen;
      for (const auto& x : v)
        if (!seen.insert(x.dump()).second) errors.push_back(at(path) + ": duplicate item " + x.dump());
    }
    if (s.contains("items"))
      for (size_t i = 0; i < v.size(); ++i) check(s["items"], v[i], path + "/" + std::to_string(i), errors);
  }
  if (v.is_object()) {
    if (s.contains("required"))
      for (const auto& r : s["required"])
        if (!v.contains(r.get<std::string>())) errors.push_back(at(path) + ": missing required key '" + r.get<std::string>() + "'");
    const json empty = json::object();
    const json& props = s.contains("properties") ? s["properties"] : empty;
    for (auto it = v.begin(); it != v.end(); ++it) {
      const std::string child = path + "/" + it.key();
      if (props.contains(it.key()))
        check(props[it.key()], it.value(), child, errors);
      else if (s.contains("additionalProperties") && !s["additionalProperties"].get<bool>())
        errors.push_back(child + ": unknown key");
    }
  }
}

const json& config_schema() {
  static const json schema = json::parse(kConfigSchema);
  return schema;
}

}  // namespace mfam::cli
