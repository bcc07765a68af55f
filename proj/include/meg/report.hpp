#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace meg {

// Structured results written as text: one "[section]" header per block,
// followed by "key = value" lines in insertion order.
class EvalReport {
 public:
  void put(const std::string& section, const std::string& key, const std::string& value);
  void put(const std::string& section, const std::string& key, double value);
  void put(const std::string& section, const std::string& key, const std::vector<double>& values);

  // Value of a key, or empty when absent.
  std::string get(const std::string& section, const std::string& key) const;

  std::string text() const;
  void write(const std::filesystem::path& path) const;

 private:
  struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;
  };
  std::vector<Section> sections_;
};

std::string format_real(double v);

}  // namespace meg
