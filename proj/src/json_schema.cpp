#include "tokenhier/json_schema.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>

#include "tokenhier/numkernel.hpp"

namespace tokenhier {

using nlohmann::json;

namespace {

bool has_type(const json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  if (t == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
  if (t == "number") return v.is_number();
  return false;
}

void check(const json& v, const json& s, const std::string& at, std::vector<std::string>& errors) {
  if (s.is_boolean()) {
    if (!s.get<bool>()) errors.push_back(at + ": not allowed");
    return;
  }
  if (s.contains("type")) {
    const json& t = s["type"];
    bool ok = false;
    if (t.is_string()) {
      ok = has_type(v, t.get<std::string>());
    } else {
      for (const auto& alt : t) ok = ok || has_type(v, alt.get<std::string>());
    }
    if (!ok) {
      errors.push_back(at + ": expected type " + t.dump() + ", got " + v.type_name());
      return;
    }
  }
  if (s.contains("const") && v != s["const"]) errors.push_back(at + ": expected " + s["const"].dump());
  if (s.contains("enum")) {
    bool found = false;
    for (const auto& e : s["enum"]) found = found || e == v;
    if (!found) errors.push_back(at + ": " + v.dump() + " not in " + s["enum"].dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (s.contains("minimum") && x < s["minimum"].get<double>()) errors.push_back(at + ": below minimum");
    if (s.contains("maximum") && x > s["maximum"].get<double>()) errors.push_back(at + ": above maximum");
  }
  if (v.is_string() && s.contains("minLength") && v.get<std::string>().size() < s["minLength"].get<std::size_t>()) {
    errors.push_back(at + ": shorter than minLength");
  }
  if (v.is_array()) {
    if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) errors.push_back(at + ": too few items");
    if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) errors.push_back(at + ": too many items");
    if (s.contains("items")) {
      for (std::size_t i = 0; i < v.size(); ++i) check(v[i], s["items"], at + "/" + std::to_string(i), errors);
    }
  }
  if (v.is_object()) {
    if (s.contains("required")) {
      for (const auto& key : s["required"]) {
        if (!v.contains(key.get<std::string>())) errors.push_back(at + ": missing '" + key.get<std::string>() + "'");
      }
    }
    const json props = s.value("properties", json::object());
    for (const auto& [key, value] : v.items()) {
      if (props.contains(key)) {
        check(value, props[key], at + "/" + key, errors);
      } else if (s.contains("additionalProperties")) {
        check(value, s["additionalProperties"], at + "/" + key, errors);
      }
    }
  }
}

}  // namespace

std::vector<std::string> validate_json(const json& doc, const json& schema) {
  std::vector<std::string> errors;
  check(doc, schema, "", errors);
  return errors;
}

std::filesystem::path schema_directory() {
  if (const char* env = std::getenv("TOKENHIER_SCHEMA_DIR")) return env;
  return TOKENHIER_SCHEMA_DIR;
}

json bench_report_schema() {
  const auto path = schema_directory() / "bench_report.schema.json";
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open schema " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("schema " + path.string() + ": " + e.what());
  }
}

}  // namespace tokenhier
