#ifndef LEAKLAB_SCHEMA_HPP
#define LEAKLAB_SCHEMA_HPP

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "leaklab/errors.hpp"

namespace leaklab {

// Minimal JSON-schema checker covering the subset our report schemas use:
// type, properties, required, items, enum, minimum. Violations raise
// FormatError naming the offending location.
inline void validate_schema(const nlohmann::json& doc, const nlohmann::json& schema,
                            const std::string& where = "$") {
    using nlohmann::json;
    if (schema.contains("type")) {
        const std::string t = schema["type"].get<std::string>();
        bool ok = false;
        if (t == "object") ok = doc.is_object();
        else if (t == "array") ok = doc.is_array();
        else if (t == "string") ok = doc.is_string();
        else if (t == "number") ok = doc.is_number();
        else if (t == "integer") ok = doc.is_number_integer() || doc.is_number_unsigned();
        else if (t == "boolean") ok = doc.is_boolean();
        else if (t == "null") ok = doc.is_null();
        else throw FormatError("schema: unsupported type '" + t + "' at " + where);
        if (!ok) throw FormatError("schema violation at " + where + ": expected " + t);
    }
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& v : schema["enum"]) {
            if (v == doc) {
                found = true;
                break;
            }
        }
        if (!found) throw FormatError("schema violation at " + where + ": value not in enum");
    }
    if (schema.contains("minimum") && doc.is_number()) {
        if (doc.get<double>() < schema["minimum"].get<double>()) {
            throw FormatError("schema violation at " + where + ": below minimum");
        }
    }
    if (schema.contains("required")) {
        for (const auto& key : schema["required"]) {
            if (!doc.contains(key.get<std::string>())) {
                throw FormatError("schema violation at " + where + ": missing required key '" +
                                  key.get<std::string>() + "'");
            }
        }
    }
    if (schema.contains("properties") && doc.is_object()) {
        for (const auto& [key, sub] : schema["properties"].items()) {
            if (doc.contains(key)) validate_schema(doc.at(key), sub, where + "." + key);
        }
    }
    if (schema.contains("items") && doc.is_array()) {
        int i = 0;
        for (const auto& el : doc) {
            validate_schema(el, schema["items"], where + "[" + std::to_string(i++) + "]");
        }
    }
}

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

inline void validate_against_schema_file(const std::string& doc_path, const std::string& schema_path) {
    validate_schema(load_json_file(doc_path), load_json_file(schema_path), doc_path);
}

} // namespace leaklab

#endif
