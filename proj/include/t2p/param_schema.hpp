#pragma once

// Facial parameter space: schema description, validation, sampling,
// interpolation and the params JSON format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace t2p {

struct ControllerDef {
    std::string name;
    std::string group;
    std::string subgroup;
};

struct SlotDef {
    std::string name;
    std::string group;
    int cardinality = 2;  // value 0 means the element is absent
};

struct ParamSchema {
    std::string id;
    std::vector<ControllerDef> continuous;
    std::vector<SlotDef> discrete;

    std::size_t continuous_count() const { return continuous.size(); }
    std::size_t discrete_count() const { return discrete.size(); }

    std::optional<std::size_t> controller_index(std::string_view name) const {
        for (std::size_t i = 0; i < continuous.size(); ++i)
            if (continuous[i].name == name) return i;
        return std::nullopt;
    }
    std::optional<std::size_t> slot_index(std::string_view name) const {
        for (std::size_t i = 0; i < discrete.size(); ++i)
            if (discrete[i].name == name) return i;
        return std::nullopt;
    }
};

/// One character. Continuous values are normalized to [0, 1]; discrete values
/// are slot indices.
struct FacialParams {
    std::string schema_id;
    std::vector<double> continuous;
    std::vector<int> discrete;

    bool operator==(const FacialParams&) const = default;
};

/// Throws ValidationError naming the first offending entry.
inline void validate_schema(const ParamSchema& schema) {
    if (schema.id.empty()) throw ValidationError("schema: empty id");
    std::unordered_set<std::string> names;
    for (std::size_t i = 0; i < schema.continuous.size(); ++i) {
        const auto& c = schema.continuous[i];
        if (c.name.empty()) throw ValidationError("schema: continuous[" + std::to_string(i) + "] has empty name");
        if (!names.insert(c.name).second)
            throw ValidationError("schema: duplicate name '" + c.name + "' at continuous[" + std::to_string(i) + "]");
    }
    for (std::size_t i = 0; i < schema.discrete.size(); ++i) {
        const auto& s = schema.discrete[i];
        if (s.name.empty()) throw ValidationError("schema: discrete[" + std::to_string(i) + "] has empty name");
        if (!names.insert(s.name).second)
            throw ValidationError("schema: duplicate name '" + s.name + "' at discrete[" + std::to_string(i) + "]");
        if (s.cardinality < 2)
            throw ValidationError("schema: slot '" + s.name + "' has cardinality " + std::to_string(s.cardinality) +
                                  " (must be >= 2)");
    }
}

inline ParamSchema parse_schema(std::string_view text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("schema: ") + e.what());
    }
    ParamSchema schema;
    try {
        schema.id = doc.at("id").get<std::string>();
        const auto& cont = doc.at("continuous");
        for (std::size_t i = 0; i < cont.size(); ++i) {
            const auto& e = cont.at(i);
            schema.continuous.push_back({e.at("name").get<std::string>(), e.value("group", std::string{}),
                                         e.value("subgroup", std::string{})});
        }
        const auto& disc = doc.at("discrete");
        for (std::size_t i = 0; i < disc.size(); ++i) {
            const auto& e = disc.at(i);
            schema.discrete.push_back(
                {e.at("name").get<std::string>(), e.value("group", std::string{}), e.at("cardinality").get<int>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("schema: ") + e.what());
    }
    validate_schema(schema);
    return schema;
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline ParamSchema load_schema(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    try {
        return parse_schema(text);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

inline nlohmann::json schema_to_json(const ParamSchema& schema) {
    nlohmann::json doc;
    doc["id"] = schema.id;
    doc["continuous"] = nlohmann::json::array();
    for (const auto& c : schema.continuous)
        doc["continuous"].push_back({{"name", c.name}, {"group", c.group}, {"subgroup", c.subgroup}});
    doc["discrete"] = nlohmann::json::array();
    for (const auto& s : schema.discrete)
        doc["discrete"].push_back({{"name", s.name}, {"group", s.group}, {"cardinality", s.cardinality}});
    return doc;
}

inline void validate_params(const ParamSchema& schema, const FacialParams& p) {
    if (p.schema_id != schema.id)
        throw ValidationError("params: schema_id '" + p.schema_id + "' does not match schema '" + schema.id + "'");
    if (p.continuous.size() != schema.continuous.size())
        throw ValidationError("params: expected " + std::to_string(schema.continuous.size()) +
                              " continuous values, got " + std::to_string(p.continuous.size()));
    if (p.discrete.size() != schema.discrete.size())
        throw ValidationError("params: expected " + std::to_string(schema.discrete.size()) +
                              " discrete values, got " + std::to_string(p.discrete.size()));
    for (std::size_t i = 0; i < p.continuous.size(); ++i) {
        const double v = p.continuous[i];
        if (!(v >= 0.0 && v <= 1.0)) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", v);
            throw ValidationError("params: continuous[" + std::to_string(i) + "] ('" + schema.continuous[i].name +
                                  "') = " + buf + " outside [0,1]");
        }
    }
    for (std::size_t i = 0; i < p.discrete.size(); ++i) {
        const int v = p.discrete[i];
        if (v < 0 || v >= schema.discrete[i].cardinality)
            throw ValidationError("params: discrete[" + std::to_string(i) + "] ('" + schema.discrete[i].name +
                                  "') = " + std::to_string(v) + " outside [0," +
                                  std::to_string(schema.discrete[i].cardinality) + ")");
    }
}

inline bool is_valid(const ParamSchema& schema, const FacialParams& p) {
    try {
        validate_params(schema, p);
        return true;
    } catch (const ValidationError&) {
        return false;
    }
}

/// All continuous at 0.5 (mid-range), all slots absent.
inline FacialParams neutral_params(const ParamSchema& schema) {
    return {schema.id, std::vector<double>(schema.continuous.size(), 0.5), std::vector<int>(schema.discrete.size(), 0)};
}

/// Continuous i.i.d. U[0,1], then discrete i.i.d. uniform over each slot, in
/// that draw order.
inline FacialParams sample_uniform(const ParamSchema& schema, Rng& rng) {
    FacialParams p{schema.id, {}, {}};
    p.continuous.resize(schema.continuous.size());
    for (auto& v : p.continuous) v = rng.uniform();
    p.discrete.resize(schema.discrete.size());
    for (std::size_t i = 0; i < schema.discrete.size(); ++i)
        p.discrete[i] = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(schema.discrete[i].cardinality)));
    return p;
}

/// beta * a + (1 - beta) * b on continuous coordinates; discrete slots come
/// from the nearer endpoint (a when beta >= 0.5).
inline FacialParams interpolate(const FacialParams& a, const FacialParams& b, double beta) {
    if (a.schema_id != b.schema_id)
        throw ValidationError("interpolate: schema mismatch ('" + a.schema_id + "' vs '" + b.schema_id + "')");
    if (a.continuous.size() != b.continuous.size() || a.discrete.size() != b.discrete.size())
        throw ValidationError("interpolate: length mismatch");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ValidationError("interpolate: beta outside [0,1]");
    if (beta == 1.0) return a;
    if (beta == 0.0) return b;
    FacialParams out{a.schema_id, std::vector<double>(a.continuous.size()), beta >= 0.5 ? a.discrete : b.discrete};
    for (std::size_t i = 0; i < a.continuous.size(); ++i) {
        const double v = beta * a.continuous[i] + (1.0 - beta) * b.continuous[i];
        // Rounding can step one ulp past the endpoints.
        const double lo = std::min(a.continuous[i], b.continuous[i]);
        const double hi = std::max(a.continuous[i], b.continuous[i]);
        out.continuous[i] = std::clamp(v, lo, hi);
    }
    return out;
}

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string serialize_params(const FacialParams& p) {
    std::string out = "{\"schema_id\": ";
    out += nlohmann::json(p.schema_id).dump();
    out += ", \"continuous\": [";
    for (std::size_t i = 0; i < p.continuous.size(); ++i) {
        if (i) out += ", ";
        out += format_real(p.continuous[i]);
    }
    out += "], \"discrete\": [";
    for (std::size_t i = 0; i < p.discrete.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(p.discrete[i]);
    }
    out += "]}";
    return out;
}

inline FacialParams params_from_json(const nlohmann::json& doc) {
    FacialParams p;
    try {
        p.schema_id = doc.at("schema_id").get<std::string>();
        for (const auto& v : doc.at("continuous")) {
            if (!v.is_number()) throw ParseError("params: non-numeric continuous value");
            p.continuous.push_back(v.get<double>());
        }
        for (const auto& v : doc.at("discrete")) {
            if (!v.is_number_integer()) throw ParseError("params: non-integer discrete value");
            p.discrete.push_back(v.get<int>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("params: ") + e.what());
    }
    return p;
}

/// Parses a params document. When `schema` is given the result is also
/// validated against it.
inline FacialParams deserialize_params(std::string_view bytes, const ParamSchema* schema = nullptr) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(bytes);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("params: ") + e.what());
    }
    FacialParams p = params_from_json(doc);
    if (schema) validate_params(*schema, p);
    return p;
}

inline FacialParams load_params(const std::filesystem::path& path, const ParamSchema* schema = nullptr) {
    return deserialize_params(read_text_file(path), schema);
}

inline void save_params(const std::filesystem::path& path, const FacialParams& p) {
    write_text_file(path, serialize_params(p) + "\n");
}

/// Clamp continuous to [0,1] and discrete into range; used on model outputs.
inline FacialParams clamped(const ParamSchema& schema, FacialParams p) {
    for (auto& v : p.continuous) v = std::isnan(v) ? 0.5 : std::clamp(v, 0.0, 1.0);
    for (std::size_t i = 0; i < p.discrete.size() && i < schema.discrete.size(); ++i)
        p.discrete[i] = std::clamp(p.discrete[i], 0, schema.discrete[i].cardinality - 1);
    return p;
}

}  // namespace t2p
