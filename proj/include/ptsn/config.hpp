#pragma once

#include <charconv>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "ptsn/errors.hpp"

namespace ptsn::config {

/// Ordered `key = value` pairs. Text form: one pair per line, '#' starts a
/// comment, blank lines are ignored, duplicate keys are rejected.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& source = "config") {
    KeyValues kv;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      const std::string where = source + ":" + std::to_string(lineno);
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": empty key");
      if (!kv.values_.emplace(key, trim(t.substr(eq + 1))).second)
        throw ConfigError(where + ": duplicate key '" + key + "'");
    }
    return kv;
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Rejects any key outside `known`, naming the first offender.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

  std::string str(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  template <class I>
  I integer(const std::string& key, I fallback) const {
    return has(key) ? parse_int<I>(key, str(key)) : fallback;
  }

  double real(const std::string& key, double fallback) const {
    return has(key) ? parse_real(key, str(key)) : fallback;
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
  }

  template <class I>
  static I parse_int(const std::string& key, const std::string& v) {
    I out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
      throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
    return out;
  }

  static double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
      throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    return out;
  }

  /// Shortest decimal text that parses back to exactly `v`.
  static std::string format_real(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace ptsn::config
