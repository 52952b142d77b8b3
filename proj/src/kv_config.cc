#include "excavate/kv_config.h"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace excavate {
namespace {

std::string Trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

double ParseDouble(const std::string& key, const std::string& token) {
  // strtod rather than stod: subnormals set ERANGE but parse exactly.
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (token.empty() || end != token.c_str() + token.size() || (errno == ERANGE && std::isinf(v))) {
    throw ConfigError("config key '" + key + "': not a number: '" + token + "'");
  }
  return v;
}

long ParseInt(const std::string& key, const std::string& token) {
  long v = 0;
  const auto* first = token.data();
  const auto* last = token.data() + token.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw ConfigError("config key '" + key + "': not an integer: '" + token + "'");
  }
  return v;
}

std::vector<std::string> Tokens(const std::string& value) {
  std::istringstream in(value);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace

std::string FormatDouble(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

KeyValueConfig KeyValueConfig::Parse(const std::string& text) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = Trim(line.substr(0, eq));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    }
    cfg.values_[key] = Trim(line.substr(eq + 1));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::Load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return Parse(ss.str());
}

const std::string& KeyValueConfig::GetString(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key: " + key);
  return it->second;
}

std::string KeyValueConfig::GetString(const std::string& key,
                                      const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::GetDouble(const std::string& key) const {
  return ParseDouble(key, GetString(key));
}

double KeyValueConfig::GetDouble(const std::string& key, double fallback) const {
  return Has(key) ? GetDouble(key) : fallback;
}

long KeyValueConfig::GetInt(const std::string& key) const {
  return ParseInt(key, GetString(key));
}

long KeyValueConfig::GetInt(const std::string& key, long fallback) const {
  return Has(key) ? GetInt(key) : fallback;
}

std::vector<double> KeyValueConfig::GetDoubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& tok : Tokens(GetString(key))) out.push_back(ParseDouble(key, tok));
  return out;
}

std::vector<long> KeyValueConfig::GetInts(const std::string& key) const {
  std::vector<long> out;
  for (const auto& tok : Tokens(GetString(key))) out.push_back(ParseInt(key, tok));
  return out;
}

void KeyValueConfig::Set(const std::string& key, double value) {
  values_[key] = FormatDouble(value);
}

void KeyValueConfig::Set(const std::string& key, const std::vector<double>& values) {
  std::string joined;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) joined += ' ';
    joined += FormatDouble(values[i]);
  }
  values_[key] = joined;
}

std::string KeyValueConfig::ToString() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void KeyValueConfig::Save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file: " + path.string());
  out << ToString();
  if (!out) throw ConfigError("failed writing config file: " + path.string());
}

}  // namespace excavate
