#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace mfam::cli {

// Validator for the JSON Schema subset used by the shipped config schema:
// type, enum, properties, required, additionalProperties (boolean), items,
// minItems, uniqueItems, minLength, minimum, maximum, exclusiveMinimum,
// exclusiveMaximum and local "$ref"s into "#/$defs".
class SchemaValidator {
 public:
  explicit SchemaValidator(nlohmann::json schema);

  // One message per violation, each prefixed with the JSON pointer of the
  // offending value.
  std::vector<std::string> validate(const nlohmann::json& doc) const;

 private:
  void check(const nlohmann::json& schema, const nlohmann::json& value, const std::string& path,
             std::vector<std::string>& errors) const;
  const nlohmann::json& resolve(const nlohmann::json& schema) const;

  nlohmann::json root_;
};

// The config schema compiled into the binary.
const nlohmann::json& config_schema();

}  // namespace mfam::cli
