#pragma once

// Plain-text experiment configuration:
//
//   # comment
//   seed = 7
//   [problem]
//   kind = quadratic
//   [problem.extra]        nested sections are dotted
//   key = value
//
// Every key must be consumed by some consumer; leftovers are reported as
// unknown keys with their file and line.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gradflow/error.hpp"
#include "gradflow/io.hpp"

namespace gradflow {

class Config {
  public:
    struct Entry {
        std::string value;
        std::string source;
        int line = 0;
        bool used = false;
    };

    [[nodiscard]] static Config from_file(std::string const& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config '" + path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        return from_string(ss.str(), path);
    }

    [[nodiscard]] static Config from_string(std::string_view text, std::string const& source = "<config>") {
        Config c;
        c.source_ = source;
        std::string section;
        int lineno = 0;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            std::size_t const eol = std::min(text.find('\n', pos), text.size());
            std::string line(text.substr(pos, eol - pos));
            pos = eol + 1;
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            auto where = [&] { return source + ":" + std::to_string(lineno) + ": "; };
            if (line.front() == '[') {
                if (line.back() != ']') throw ConfigError(where() + "unterminated section header");
                section = trim(line.substr(1, line.size() - 2));
                if (section.empty() || !valid_name(section)) throw ConfigError(where() + "bad section name");
                continue;
            }
            auto const eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError(where() + "expected key = value");
            std::string const key = trim(line.substr(0, eq));
            std::string const value = trim(line.substr(eq + 1));
            if (key.empty() || !valid_name(key)) throw ConfigError(where() + "bad key '" + key + "'");
            std::string const full = section.empty() ? key : section + "." + key;
            if (c.entries_.count(full)) throw ConfigError(where() + "duplicate key '" + full + "'");
            c.entries_[full] = Entry{value, source, lineno, false};
        }
        return c;
    }

    /// Command-line style override; replaces any existing value.
    void set(std::string const& key, std::string value) {
        entries_[key] = Entry{std::move(value), "<override>", 0, false};
    }

    [[nodiscard]] bool has(std::string const& key) const { return entries_.count(key) != 0; }

    [[nodiscard]] bool has_section(std::string const& section) const {
        std::string const prefix = section + ".";
        auto it = entries_.lower_bound(prefix);
        return it != entries_.end() && it->first.compare(0, prefix.size(), prefix) == 0;
    }

    [[nodiscard]] std::optional<std::string> raw(std::string const& key) {
        auto it = entries_.find(key);
        if (it == entries_.end()) return std::nullopt;
        it->second.used = true;
        return it->second.value;
    }

    [[nodiscard]] std::string get_string(std::string const& key, std::string const& fallback) {
        return raw(key).value_or(fallback);
    }

    [[nodiscard]] std::string require_string(std::string const& key) {
        auto v = raw(key);
        if (!v) throw ConfigError(source_ + ": missing required key '" + key + "'");
        return *v;
    }

    [[nodiscard]] double get_double(std::string const& key, double fallback) {
        auto v = raw(key);
        return v ? to_double(key, *v) : fallback;
    }

    [[nodiscard]] std::optional<double> get_optional_double(std::string const& key) {
        auto v = raw(key);
        if (!v) return std::nullopt;
        return to_double(key, *v);
    }

    [[nodiscard]] long long get_int(std::string const& key, long long fallback) {
        auto v = raw(key);
        if (!v) return fallback;
        long long out = 0;
        auto const [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
        if (ec != std::errc{} || p != v->data() + v->size()) throw bad_value(key, "integer");
        return out;
    }

    [[nodiscard]] std::uint64_t get_u64(std::string const& key, std::uint64_t fallback) {
        auto v = raw(key);
        if (!v) return fallback;
        std::uint64_t out = 0;
        auto const [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
        if (ec != std::errc{} || p != v->data() + v->size()) throw bad_value(key, "unsigned 64-bit integer");
        return out;
    }

    [[nodiscard]] bool get_bool(std::string const& key, bool fallback) {
        auto v = raw(key);
        if (!v) return fallback;
        if (*v == "true" || *v == "yes" || *v == "1" || *v == "on") return true;
        if (*v == "false" || *v == "no" || *v == "0" || *v == "off") return false;
        throw bad_value(key, "boolean");
    }

    [[nodiscard]] std::vector<double> get_doubles(std::string const& key) {
        auto v = raw(key);
        std::vector<double> out;
        if (!v) return out;
        for (auto const& item : split(*v, ',')) out.push_back(to_double(key, item));
        return out;
    }

    /// Where a key was defined, for error messages.
    [[nodiscard]] std::string location(std::string const& key) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return source_;
        return it->second.source + ":" + std::to_string(it->second.line);
    }

    /// Throws on the first key nobody consumed.
    void require_all_used() const {
        for (auto const& [k, e] : entries_)
            if (!e.used) throw ConfigError(e.source + ":" + std::to_string(e.line) + ": unknown key '" + k + "'");
    }

    /// FNV-1a over the sorted key/value pairs: independent of file order.
    [[nodiscard]] std::string hash() const {
        std::string canon;
        for (auto const& [k, e] : entries_) canon += k + "=" + e.value + "\n";
        return hex64(fnv1a(canon));
    }

    [[nodiscard]] ordered_json to_json() const {
        ordered_json j = ordered_json::object();
        for (auto const& [k, e] : entries_) j[k] = e.value;
        return j;
    }

    [[nodiscard]] std::string const& source() const noexcept { return source_; }

    [[nodiscard]] static std::vector<std::string> split(std::string const& s, char sep) {
        std::vector<std::string> out;
        std::string cur;
        std::istringstream is(s);
        while (std::getline(is, cur, sep)) {
            cur = trim(cur);
            if (!cur.empty()) out.push_back(cur);
        }
        return out;
    }

    [[nodiscard]] static std::string trim(std::string const& s) {
        auto const b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        auto const e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    [[nodiscard]] double to_double(std::string const& key, std::string const& text) const {
        double out = 0.0;
        auto const [p, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
        if (ec != std::errc{} || p != text.data() + text.size()) throw bad_value(key, "number");
        return out;
    }

    [[nodiscard]] ConfigError bad_value(std::string const& key, char const* expected) const {
        auto it = entries_.find(key);
        std::string const v = it == entries_.end() ? "" : it->second.value;
        return ConfigError(location(key) + ": " + key + ": expected " + expected + ", got '" + v + "'");
    }

  private:
    static bool valid_name(std::string const& s) {
        for (char ch : s)
            if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '.' || ch == '-')) return false;
        return s.front() != '.' && s.back() != '.';
    }

    std::string source_;
    std::map<std::string, Entry> entries_;
};

} // namespace gradflow
