// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "occfit/common.hpp"

namespace occfit {

// Flat `key = value` text with dotted keys and '#' comments. Every key has a
// documented default at its point of use; keys nobody reads are errors, which
// catches misspelled options.
class Config {
 public:
  static Config from_string(const std::string& text,
                            const std::string& origin = "<string>") {
    Config cfg;
    cfg.origin_ = origin;
    size_t line_start = 0, line_no = 0;
    while (line_start <= text.size()) {
      size_t eol = text.find('\n', line_start);
      if (eol == std::string::npos) eol = text.size();
      std::string line = text.substr(line_start, eol - line_start);
      ++line_no;
      size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      std::string trimmed = trim(line);
      if (!trimmed.empty()) {
        size_t eq = line.find('=');
        if (eq == std::string::npos)
          throw ParseError(origin + ": line " + std::to_string(line_no) +
                               " has no '='",
                           line_start);
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
          throw ParseError(origin + ": empty key on line " +
                               std::to_string(line_no),
                           line_start);
        if (!cfg.kv_.emplace(key, value).second)
          throw ConfigError(origin + ": duplicate key '" + key + "'");
      }
      line_start = eol + 1;
    }
    return cfg;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config: " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return from_string(buf.str(), path.string());
  }

  bool has(const std::string& key) const {
    used_.insert(key);
    return kv_.count(key) != 0;
  }

  std::string get_string(const std::string& key, const std::string& def) const {
    used_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second;
  }

  double get_double(const std::string& key, double def) const {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    return parse_double(key, it->second);
  }

  long get_int(const std::string& key, long def) const {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    const std::string& v = it->second;
    long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ConfigError(origin_ + ": key '" + key + "' expects an integer, got '" +
                        v + "'");
    return out;
  }

  bool get_bool(const std::string& key, bool def) const {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    const std::string& v = it->second;
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(origin_ + ": key '" + key + "' expects true/false, got '" +
                      v + "'");
  }

  // Colon- or whitespace-separated number list, e.g. "1:0:0".
  std::vector<double> get_list(const std::string& key,
                               std::vector<double> def) const {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    std::string v = it->second;
    for (char& c : v)
      if (c == ':' || c == ',') c = ' ';
    std::istringstream ss(v);
    std::vector<double> out;
    std::string tok;
    while (ss >> tok) out.push_back(parse_double(key, tok));
    if (out.empty())
      throw ConfigError(origin_ + ": key '" + key + "' expects numbers");
    return out;
  }

  // Every key must have been read by now; unread keys are unknown options.
  void finish() const {
    for (const auto& [key, value] : kv_) {
      if (!used_.count(key))
        throw ConfigError(origin_ + ": unknown config key '" + key + "'");
    }
  }

  const std::string& origin() const { return origin_; }

 private:
  static std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }

  double parse_double(const std::string& key, const std::string& v) const {
    try {
      size_t pos = 0;
      double out = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "' expects a number, got '" +
                        v + "'");
    }
  }

  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> used_;
  std::string origin_;
};

}  // namespace occfit
