#pragma once

// INI configuration access with typed getters. Every value read (including
// defaults) is echoed into `resolved()` so the manifest lists all parameters;
// errors are collected so `validate` can report them all at once.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wgflow/random.hpp"

namespace wgflow::cli {

using json = nlohmann::json;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

/// Locale-independent strict number parsing.
inline std::optional<double> parse_double(const std::string& s) {
  std::istringstream in(trim(s));
  in.imbue(std::locale::classic());
  double v;
  if (!(in >> v)) return std::nullopt;
  char rest;
  if (in >> rest) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(const std::string& s) {
  const std::string t = trim(s);
  if (t.empty()) return std::nullopt;
  std::size_t pos = 0;
  try {
    const long long v = std::stoll(t, &pos);
    if (pos != t.size()) return std::nullopt;
    return v;
  } catch (...) {
    return std::nullopt;
  }
}

class Config {
 public:
  Config() = default;
  explicit Config(boost::property_tree::ptree tree) : tree_(std::move(tree)) {}

  static Config load(const std::string& path) {
    boost::property_tree::ptree t;
    boost::property_tree::ini_parser::read_ini(path, t);
    return Config(std::move(t));
  }
  static Config parse(const std::string& text) {
    boost::property_tree::ptree t;
    std::istringstream in(text);
    boost::property_tree::ini_parser::read_ini(in, t);
    return Config(std::move(t));
  }

  bool has(const std::string& path) const { return tree_.get_optional<std::string>(path).has_value(); }
  bool has_section(const std::string& name) const { return tree_.get_child_optional(name).has_value(); }

  void error(const std::string& path, const std::string& message) { errors_.push_back(path + ": " + message); }
  const std::vector<std::string>& errors() const { return errors_; }

  /// Raw string; records the value (or default) into the resolved view.
  std::optional<std::string> raw(const std::string& path) const {
    auto v = tree_.get_optional<std::string>(path);
    if (!v) return std::nullopt;
    return trim(*v);
  }

  std::string str(const std::string& path, const std::string& def) {
    const std::string v = raw(path).value_or(def);
    record(path, v);
    return v;
  }
  std::optional<std::string> required_str(const std::string& path) {
    auto v = raw(path);
    if (!v) {
      error(path, "missing required field");
      return std::nullopt;
    }
    record(path, *v);
    return v;
  }

  double real(const std::string& path, double def) {
    auto v = raw(path);
    if (!v) {
      record(path, def);
      return def;
    }
    auto d = parse_double(*v);
    if (!d || !std::isfinite(*d)) {
      error(path, "expected a finite number, got '" + *v + "'");
      return def;
    }
    record(path, *d);
    return *d;
  }
  std::optional<double> required_real(const std::string& path) {
    if (!raw(path)) {
      error(path, "missing required field");
      return std::nullopt;
    }
    return real(path, 0.0);
  }

  long long integer(const std::string& path, long long def) {
    auto v = raw(path);
    if (!v) {
      record(path, def);
      return def;
    }
    auto d = parse_int(*v);
    if (!d) {
      error(path, "expected an integer, got '" + *v + "'");
      return def;
    }
    record(path, *d);
    return *d;
  }
  std::optional<long long> required_integer(const std::string& path) {
    if (!raw(path)) {
      error(path, "missing required field");
      return std::nullopt;
    }
    return integer(path, 0);
  }

  bool boolean(const std::string& path, bool def) {
    auto v = raw(path);
    if (!v) {
      record(path, def);
      return def;
    }
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") {
      record(path, true);
      return true;
    }
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") {
      record(path, false);
      return false;
    }
    error(path, "expected a boolean, got '" + *v + "'");
    return def;
  }

  /// Comma-separated numbers.
  std::vector<double> reals(const std::string& path, std::vector<double> def) {
    auto v = raw(path);
    if (!v) {
      record(path, def);
      return def;
    }
    std::vector<double> out;
    if (!trim(*v).empty()) {
      for (const auto& item : split(*v, ',')) {
        auto d = parse_double(item);
        if (!d || !std::isfinite(*d)) {
          error(path, "expected a comma-separated list of numbers, got '" + *v + "'");
          return def;
        }
        out.push_back(*d);
      }
    }
    record(path, out);
    return out;
  }

  std::vector<long long> integers(const std::string& path, std::vector<long long> def) {
    auto v = raw(path);
    if (!v) {
      record(path, def);
      return def;
    }
    std::vector<long long> out;
    if (!trim(*v).empty()) {
      for (const auto& item : split(*v, ',')) {
        auto d = parse_int(item);
        if (!d) {
          error(path, "expected a comma-separated list of integers, got '" + *v + "'");
          return def;
        }
        out.push_back(*d);
      }
    }
    record(path, out);
    return out;
  }

  std::vector<std::string> strings(const std::string& path, std::vector<std::string> def) {
    auto v = raw(path);
    if (!v) {
      record(path, def);
      return def;
    }
    std::vector<std::string> out;
    if (!trim(*v).empty())
      for (const auto& item : split(*v, ',')) out.push_back(item);
    record(path, out);
    return out;
  }

  /// Matrix written as rows separated by ';' and entries by ','.
  std::optional<Matrix> matrix(const std::string& path) {
    auto v = raw(path);
    if (!v) return std::nullopt;
    std::vector<std::vector<double>> rows;
    for (const auto& r : split(*v, ';')) {
      std::vector<double> row;
      for (const auto& item : split(r, ',')) {
        auto d = parse_double(item);
        if (!d || !std::isfinite(*d)) {
          error(path, "expected rows of numbers separated by ';', got '" + *v + "'");
          return std::nullopt;
        }
        row.push_back(*d);
      }
      if (!rows.empty() && row.size() != rows.front().size()) {
        error(path, "rows have different lengths");
        return std::nullopt;
      }
      rows.push_back(std::move(row));
    }
    if (rows.empty() || rows.front().empty()) {
      error(path, "empty matrix");
      return std::nullopt;
    }
    Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    record(path, *v);
    return m;
  }

  /// Keys present in the file that no getter consumed.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [section, child] : tree_) {
      if (child.empty()) {
        if (!resolved_.contains(section)) out.push_back(section);
        continue;
      }
      for (const auto& kv : child) {
        const bool seen = resolved_.contains(section) && resolved_[section].contains(kv.first);
        if (!seen) out.push_back(section + "." + kv.first);
      }
    }
    return out;
  }

  const json& resolved() const { return resolved_; }
  /// Records a default that was not read through a getter (e.g. a whole default section).
  void record_default(const std::string& section, const json& value) { resolved_[section] = value; }

 private:
  template <class T>
  void record(const std::string& path, const T& v) {
    const auto dot = path.find('.');
    if (dot == std::string::npos) resolved_[path] = v;
    else resolved_[path.substr(0, dot)][path.substr(dot + 1)] = v;
  }

  boost::property_tree::ptree tree_;
  std::vector<std::string> errors_;
  json resolved_ = json::object();
};

}  // namespace wgflow::cli
