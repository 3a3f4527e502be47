#pragma once

// Flat key=value configuration files.
//
//   # comment
//   seed = 7
//   zetas = 0.9, 1.1
//   w = -1.25:1.25:0.05
//
// Keys are declared up front by the consumer; any key that was never declared is
// an error, as is a repeated key. Values are fetched with typed getters that fall
// back to a default when the key is absent.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "neon/core.hpp"

namespace neon {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': expected a finite number, got '" + v + "'");
  }
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

class Config {
 public:
  Config() = default;

  static Config parse(std::string_view text, const std::string& origin = "<string>") {
    Config c;
    std::size_t lineno = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
      ++lineno;
      const auto hash = raw.find('#');
      const std::string line = detail::trim(std::string_view(raw).substr(0, hash));
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = origin + ":" + std::to_string(lineno);
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      std::string key = detail::trim(std::string_view(line).substr(0, eq));
      std::string value = detail::trim(std::string_view(line).substr(eq + 1));
      if (key.empty()) throw ConfigError(where + ": empty key");
      if (c.values_.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
      c.values_[std::move(key)] = std::move(value);
    }
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path.string());
  }

  /// Later entries win. Used for command-line overrides on top of a file.
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  /// Throws if any key is not in `known`.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      if (!known.count(k)) {
        std::string list;
        for (const auto& n : known) list += (list.empty() ? "" : ", ") + n;
        throw ConfigError("unknown config key '" + k + "' (known: " + list + ")");
      }
    }
  }

  std::string get_string(const std::string& key, const std::string& def) const {
    auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }
  double get_double(const std::string& key, double def) const {
    auto it = values_.find(key);
    return it == values_.end() ? def : parse_double(key, it->second);
  }
  std::uint64_t get_uint(const std::string& key, std::uint64_t def) const {
    auto it = values_.find(key);
    return it == values_.end() ? def : parse_uint(key, it->second);
  }
  bool get_bool(const std::string& key, bool def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + it->second + "'");
  }

  /// Comma-separated list, or lo:hi:step for an inclusive arithmetic range.
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    std::vector<double> out;
    if (it->second.find(':') != std::string::npos) {
      const auto parts = detail::split(it->second, ':');
      if (parts.size() != 3) throw ConfigError("config key '" + key + "': range must be lo:hi:step");
      out = Range{parse_double(key, parts[0]), parse_double(key, parts[1]), parse_double(key, parts[2])}.values();
    } else {
      for (const auto& p : detail::split(it->second, ',')) out.push_back(parse_double(key, p));
    }
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
  }
  std::vector<std::uint64_t> get_uints(const std::string& key, const std::vector<std::uint64_t>& def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    std::vector<std::uint64_t> out;
    for (const auto& p : detail::split(it->second, ',')) out.push_back(parse_uint(key, p));
    return out;
  }
  Range get_range(const std::string& key, const Range& def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    const auto parts = detail::split(it->second, ':');
    if (parts.size() != 3) throw ConfigError("config key '" + key + "': range must be lo:hi:step");
    Range r{parse_double(key, parts[0]), parse_double(key, parts[1]), parse_double(key, parts[2])};
    (void)r.count();
    return r;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace neon
