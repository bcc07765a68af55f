#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace meg {

// Flat key=value configuration. Blank lines and lines starting with '#' are
// ignored. Typed getters raise ConfigError on malformed values; allow()
// raises on any key outside the given schema.
class Config {
 public:
  Config() = default;
  static Config parse(const std::string& text);
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  void allow(const std::set<std::string>& keys) const;

  std::string str(const std::string& key, const std::string& fallback) const;
  double real(const std::string& key, double fallback) const;
  long long integer(const std::string& key, long long fallback) const;
  bool flag(const std::string& key, bool fallback) const;
  std::vector<double> reals(const std::string& key, std::vector<double> fallback) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace meg
