#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace tokenhier {

/// Validates `doc` against the subset of JSON Schema used by the shipped
/// schemas: type, properties, required, additionalProperties, items, enum,
/// const, minimum, maximum, minItems, maxItems, minLength. Returns one message
/// per violation, prefixed with the JSON pointer of the offending value.
std::vector<std::string> validate_json(const nlohmann::json& doc, const nlohmann::json& schema);

/// The BenchReport schema shipped with the sources.
nlohmann::json bench_report_schema();
std::filesystem::path schema_directory();

}  // namespace tokenhier
