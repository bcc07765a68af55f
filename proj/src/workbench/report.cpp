#include "meg/report.hpp"

#include <cstdio>
#include <fstream>

#include "meg/errors.hpp"

namespace meg {

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void EvalReport::put(const std::string& section, const std::string& key, const std::string& value) {
  for (auto& s : sections_) {
    if (s.name != section) continue;
    for (auto& [k, v] : s.entries)
      if (k == key) {
        v = value;
        return;
      }
    s.entries.emplace_back(key, value);
    return;
  }
  sections_.push_back({section, {{key, value}}});
}

void EvalReport::put(const std::string& section, const std::string& key, double value) {
  put(section, key, format_real(value));
}

void EvalReport::put(const std::string& section, const std::string& key, const std::vector<double>& values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) s += (i ? "," : "") + format_real(values[i]);
  put(section, key, s);
}

std::string EvalReport::get(const std::string& section, const std::string& key) const {
  for (const auto& s : sections_)
    if (s.name == section)
      for (const auto& [k, v] : s.entries)
        if (k == key) return v;
  return {};
}

std::string EvalReport::text() const {
  std::string out;
  for (const auto& s : sections_) {
    if (!out.empty()) out += "\n";
    out += "[" + s.name + "]\n";
    for (const auto& [k, v] : s.entries) out += k + " = " + v + "\n";
  }
  return out;
}

void EvalReport::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out << text();
}

}  // namespace meg
