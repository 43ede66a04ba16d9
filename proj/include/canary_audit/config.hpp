#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "canary_audit/errors.hpp"

namespace canary_audit {

/// Flat `section.key = value` settings. Lines starting with '#' are comments.
class FlatConfig {
 public:
  static FlatConfig parse(std::string_view text, const std::string& origin = "<config>") {
    FlatConfig cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string body = trim(strip_comment(line));
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) {
        throw InvalidArgument(origin + ":" + std::to_string(lineno) + ": expected 'section.key = value'");
      }
      const std::string key = trim(body.substr(0, eq));
      const std::string value = trim(body.substr(eq + 1));
      if (key.find('.') == std::string::npos || key.front() == '.' || key.back() == '.') {
        throw InvalidArgument(origin + ":" + std::to_string(lineno) + ": key '" + key + "' is not section.key");
      }
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static FlatConfig load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Consumes a key (missing keys keep the caller's default).
  bool take(const std::string& key, std::string& out) {
    auto it = values_.find(key);
    if (it == values_.end()) return false;
    out = it->second;
    used_.insert(key);
    return true;
  }

  template <typename T>
  void take_number(const std::string& key, T& out) {
    std::string raw;
    if (!take(key, raw)) return;
    out = parse_number<T>(key, raw);
  }

  template <typename T>
  void take_list(const std::string& key, std::vector<T>& out) {
    std::string raw;
    if (!take(key, raw)) return;
    out.clear();
    for (const auto& item : split_list(raw)) out.push_back(parse_number<T>(key, item));
  }

  void take_string_list(const std::string& key, std::vector<std::string>& out) {
    std::string raw;
    if (!take(key, raw)) return;
    out = split_list(raw);
  }

  /// Rejects keys outside the known sections or never consumed.
  void check_all_used(const std::set<std::string>& sections) const {
    for (const auto& [key, value] : values_) {
      const std::string section = key.substr(0, key.find('.'));
      if (!sections.count(section)) throw InvalidArgument("unknown config section in key: " + key);
      if (!used_.count(key)) throw InvalidArgument("unknown config key: " + key);
    }
  }

  template <typename T>
  static T parse_number(const std::string& key, const std::string& raw) {
    std::istringstream in(raw);
    T value{};
    in >> value;
    if (in.fail() || !(in >> std::ws).eof()) {
      throw InvalidArgument("config key " + key + ": cannot parse '" + raw + "'");
    }
    return value;
  }

  static std::vector<std::string> split_list(const std::string& raw) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(raw);
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

 private:
  static std::string strip_comment(const std::string& line) {
    const auto hash = line.find('#');
    return hash == std::string::npos ? line : line.substr(0, hash);
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

}  // namespace canary_audit
