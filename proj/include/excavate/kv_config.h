#pragma once

// Plain-text key/value configuration files.
//
//   # comment
//   dt = 0.1              # seconds
//   limit.boom = -0.4 1.1 # radians
//
// Keys are case-sensitive; values are whitespace-separated tokens. Trailing
// `#` comments are stripped.

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace excavate {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig Parse(const std::string& text);
  static KeyValueConfig Load(const std::filesystem::path& path);

  bool Has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& GetString(const std::string& key) const;
  std::string GetString(const std::string& key, const std::string& fallback) const;
  double GetDouble(const std::string& key) const;
  double GetDouble(const std::string& key, double fallback) const;
  long GetInt(const std::string& key) const;
  long GetInt(const std::string& key, long fallback) const;
  std::vector<double> GetDoubles(const std::string& key) const;
  std::vector<long> GetInts(const std::string& key) const;

  void Set(const std::string& key, const std::string& value) { values_[key] = value; }
  void Set(const std::string& key, double value);
  void Set(const std::string& key, const std::vector<double>& values);

  const std::map<std::string, std::string>& entries() const { return values_; }

  // Serializes entries in key order. Doubles are written with round-trip
  // precision.
  std::string ToString() const;
  void Save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
};

// Formats a double so that parsing it back yields the same bits.
std::string FormatDouble(double value);

}  // namespace excavate
