#pragma once

// Minimal structural JSON-schema checker for tests: supports type,
// required, properties, items, and enum — the subset the shipped schemas
// use. Returns an empty string on success, a diagnostic path otherwise.

#include <json.hpp>

#include <string>

namespace schema_check {

using nlohmann::json;

inline bool type_matches(const std::string& type, const json& value) {
  if (type == "object") return value.is_object();
  if (type == "array") return value.is_array();
  if (type == "string") return value.is_string();
  if (type == "integer") return value.is_number_integer() || value.is_number_unsigned();
  if (type == "number") return value.is_number();
  if (type == "boolean") return value.is_boolean();
  if (type == "null") return value.is_null();
  return false;
}

inline std::string validate(const json& schema, const json& value, const std::string& path = "$") {
  if (schema.contains("enum")) {
    for (const json& allowed : schema["enum"]) {
      if (value == allowed) return "";
    }
    return path + ": value not in enum";
  }
  if (schema.contains("type")) {
    const json& type = schema["type"];
    bool ok = false;
    if (type.is_string()) {
      ok = type_matches(type.get<std::string>(), value);
    } else {
      for (const json& t : type) ok = ok || type_matches(t.get<std::string>(), value);
    }
    if (!ok) return path + ": type mismatch";
  }
  if (value.is_object()) {
    if (schema.contains("required")) {
      for (const json& key : schema["required"]) {
        if (!value.contains(key.get<std::string>())) {
          return path + ": missing required key '" + key.get<std::string>() + "'";
        }
      }
    }
    if (schema.contains("properties")) {
      for (const auto& [key, sub] : schema["properties"].items()) {
        if (!value.contains(key)) continue;
        const std::string err = validate(sub, value[key], path + "." + key);
        if (!err.empty()) return err;
      }
    }
  }
  if (value.is_array() && schema.contains("items")) {
    std::size_t index = 0;
    for (const json& element : value) {
      const std::string err =
          validate(schema["items"], element, path + "[" + std::to_string(index) + "]");
      if (!err.empty()) return err;
      ++index;
    }
  }
  return "";
}

}  // namespace schema_check
