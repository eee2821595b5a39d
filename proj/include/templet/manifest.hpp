// manifest.hpp - the declarative package manifest
//
// Grammar: one `key = value` pair per line; strings double-quoted with \" and
// \\ escapes; integers and floats bare; `#` starts a comment; UTF-8 with LF
// line endings. Nested maps use dotted keys (input_schema.*,
// hyperparameters.*). Serialization is canonical: fixed field order, sorted
// map keys, so equal manifests produce equal bytes.
#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <variant>

#include "templet/errors.hpp"

namespace templet {

using ManifestValue = std::variant<int64_t, double, std::string>;

struct Manifest {
    std::string name;
    std::string version = "1";
    std::string cache_type;     // kv | lora | pipeline_args
    std::string template_kind;  // registry key selecting the implementation
    std::map<std::string, std::string> input_schema;
    std::map<std::string, ManifestValue> hyperparameters;
    std::string weights_file = "weights.tmpl";
    std::string weights_sha256;

    int64_t hyper_int(const std::string& key, int64_t fallback) const {
        auto it = hyperparameters.find(key);
        if (it == hyperparameters.end()) return fallback;
        if (const int64_t* v = std::get_if<int64_t>(&it->second)) return *v;
        throw ParseError("manifest: hyperparameter " + key + " is not an integer");
    }

    double hyper_float(const std::string& key, double fallback) const {
        auto it = hyperparameters.find(key);
        if (it == hyperparameters.end()) return fallback;
        if (const double* v = std::get_if<double>(&it->second)) return *v;
        if (const int64_t* v = std::get_if<int64_t>(&it->second))
            return static_cast<double>(*v);
        throw ParseError("manifest: hyperparameter " + key + " is not a number");
    }

    std::string hyper_string(const std::string& key, const std::string& fallback) const {
        auto it = hyperparameters.find(key);
        if (it == hyperparameters.end()) return fallback;
        if (const std::string* v = std::get_if<std::string>(&it->second)) return *v;
        throw ParseError("manifest: hyperparameter " + key + " is not a string");
    }

    bool operator==(const Manifest& o) const {
        return name == o.name && version == o.version && cache_type == o.cache_type &&
               template_kind == o.template_kind && input_schema == o.input_schema &&
               hyperparameters == o.hyperparameters && weights_file == o.weights_file &&
               weights_sha256 == o.weights_sha256;
    }
};

namespace detail {

inline std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

inline std::string value_str(const ManifestValue& v) {
    if (const int64_t* i = std::get_if<int64_t>(&v)) return std::to_string(*i);
    if (const double* d = std::get_if<double>(&v)) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", *d);
        std::string s(buf);
        // keep floats distinguishable from integers on re-parse
        if (s.find_first_of(".eEnif") == std::string::npos) s += ".0";
        return s;
    }
    return quote(std::get<std::string>(v));
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline ManifestValue parse_value(const std::string& raw, int line_no) {
    std::string v = trim(raw);
    if (v.empty()) throw ParseError("manifest line " + std::to_string(line_no) + ": empty value");
    if (v.front() == '"') {
        std::string out;
        bool closed = false;
        for (size_t i = 1; i < v.size(); ++i) {
            if (v[i] == '\\' && i + 1 < v.size()) {
                out.push_back(v[++i]);
            } else if (v[i] == '"') {
                closed = (trim(v.substr(i + 1)).empty());
                break;
            } else {
                out.push_back(v[i]);
            }
        }
        if (!closed)
            throw ParseError("manifest line " + std::to_string(line_no) +
                             ": unterminated string");
        return out;
    }
    bool is_int = true;
    for (size_t i = 0; i < v.size(); ++i) {
        char c = v[i];
        if (i == 0 && (c == '-' || c == '+')) continue;
        if (!std::isdigit(static_cast<unsigned char>(c))) {
            is_int = false;
            break;
        }
    }
    try {
        if (is_int) return static_cast<int64_t>(std::stoll(v));
        size_t used = 0;
        double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ParseError("manifest line " + std::to_string(line_no) + ": bad value '" + v + "'");
    }
}

}  // namespace detail

inline std::string manifest_serialize(const Manifest& m) {
    std::ostringstream os;
    os << "name = " << detail::quote(m.name) << "\n";
    os << "version = " << detail::quote(m.version) << "\n";
    os << "cache_type = " << detail::quote(m.cache_type) << "\n";
    os << "template_kind = " << detail::quote(m.template_kind) << "\n";
    os << "weights_file = " << detail::quote(m.weights_file) << "\n";
    os << "weights_sha256 = " << detail::quote(m.weights_sha256) << "\n";
    for (const auto& [k, v] : m.input_schema)
        os << "input_schema." << k << " = " << detail::quote(v) << "\n";
    for (const auto& [k, v] : m.hyperparameters)
        os << "hyperparameters." << k << " = " << detail::value_str(v) << "\n";
    return os.str();
}

inline Manifest manifest_parse(const std::string& text) {
    Manifest m;
    m.version.clear();
    m.weights_file.clear();
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        // strip comments outside quoted strings
        bool in_str = false;
        for (size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '\\' && in_str) {
                ++i;
            } else if (line[i] == '"') {
                in_str = !in_str;
            } else if (line[i] == '#' && !in_str) {
                line = line.substr(0, i);
                break;
            }
        }
        std::string stripped = detail::trim(line);
        if (stripped.empty()) continue;
        size_t eq = std::string::npos;
        in_str = false;
        for (size_t i = 0; i < stripped.size(); ++i) {
            if (stripped[i] == '"') in_str = !in_str;
            if (stripped[i] == '=' && !in_str) {
                eq = i;
                break;
            }
        }
        if (eq == std::string::npos)
            throw ParseError("manifest line " + std::to_string(line_no) + ": missing '='");
        std::string key = detail::trim(stripped.substr(0, eq));
        if (key.empty())
            throw ParseError("manifest line " + std::to_string(line_no) + ": empty key");
        ManifestValue value = detail::parse_value(stripped.substr(eq + 1), line_no);

        auto as_string = [&](const char* what) -> std::string {
            if (const std::string* s = std::get_if<std::string>(&value)) return *s;
            throw ParseError("manifest line " + std::to_string(line_no) + ": " + what +
                             " must be a quoted string");
        };
        if (key == "name") {
            m.name = as_string("name");
        } else if (key == "version") {
            m.version = as_string("version");
        } else if (key == "cache_type") {
            m.cache_type = as_string("cache_type");
        } else if (key == "template_kind") {
            m.template_kind = as_string("template_kind");
        } else if (key == "weights_file") {
            m.weights_file = as_string("weights_file");
        } else if (key == "weights_sha256") {
            m.weights_sha256 = as_string("weights_sha256");
        } else if (key.rfind("input_schema.", 0) == 0) {
            m.input_schema[key.substr(13)] = as_string("input_schema entries");
        } else if (key.rfind("hyperparameters.", 0) == 0) {
            m.hyperparameters[key.substr(16)] = value;
        } else {
            throw ParseError("manifest line " + std::to_string(line_no) + ": unknown key '" +
                             key + "'");
        }
    }
    if (m.name.empty()) throw ParseError("manifest: missing name");
    if (m.cache_type != "kv" && m.cache_type != "lora" && m.cache_type != "pipeline_args")
        throw ParseError("manifest: bad cache_type '" + m.cache_type + "'");
    if (m.template_kind.empty()) throw ParseError("manifest: missing template_kind");
    if (m.weights_file.empty()) m.weights_file = "weights.tmpl";
    if (m.version.empty()) m.version = "1";
    return m;
}

}  // namespace templet
