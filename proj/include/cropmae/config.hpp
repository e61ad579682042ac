#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "cropmae/error.hpp"

namespace cropmae {

/// Flat `key = value` configuration. Lines starting with '#' are comments.
class ConfigMap {
public:
    static ConfigMap parse(std::string_view text, const std::string& origin = "<config>") {
        ConfigMap cfg;
        std::istringstream in{std::string(text)};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto body = trim(line);
            if (body.empty() || body.front() == '#') continue;
            const auto eq = body.find('=');
            if (eq == std::string_view::npos) {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            }
            const auto key = trim(body.substr(0, eq));
            if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            cfg.set(std::string(key), std::string(trim(body.substr(eq + 1))));
        }
        return cfg;
    }

    static ConfigMap load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path.string());
    }

    void set(std::string key, std::string value) { values_[std::move(key)] = std::move(value); }

    // Later layers win.
    void merge(const ConfigMap& other) {
        for (const auto& [k, v] : other.values_) values_[k] = v;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::map<std::string, std::string>& entries() const { return values_; }

    void require_known(const std::set<std::string>& known) const {
        for (const auto& [k, v] : values_) {
            if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
        }
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': expected a number, got '" + it->second + "'");
        }
    }

    std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::uint64_t v = 0;
        const auto& s = it->second;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || ptr != s.data() + s.size()) {
            throw ConfigError("key '" + key + "': expected a nonnegative integer, got '" + s + "'");
        }
        return v;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const auto& s = it->second;
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw ConfigError("key '" + key + "': expected a boolean, got '" + s + "'");
    }

    std::string to_text() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

private:
    static std::string_view trim(std::string_view s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string_view::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace cropmae
