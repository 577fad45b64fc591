#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "milbench/error.hpp"

namespace milbench {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw ValidationError("write failed for '" + path.string() + "'");
}

/// Shortest round-tripping decimal form of a double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

template <typename T>
T parse_number(std::string_view text, std::string_view what) {
  T value{};
  const auto t = trim(text);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), value);
  if (res.ec != std::errc{} || res.ptr != t.data() + t.size())
    throw ValidationError(std::string(what) + ": cannot parse '" + std::string(t) + "' as a number");
  return value;
}

/// `key = value` configuration with `#` comments. Keys are unique.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::string_view text, std::string origin = "<config>") {
    KeyValueConfig cfg;
    cfg.origin_ = std::move(origin);
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      ++line_no;
      auto line = text.substr(start, end - start);
      if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (!line.empty()) {
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
          throw ValidationError(cfg.origin_ + ":" + std::to_string(line_no) + ": expected 'key = value'");
        std::string key(trim(line.substr(0, eq)));
        if (key.empty())
          throw ValidationError(cfg.origin_ + ":" + std::to_string(line_no) + ": empty key");
        if (cfg.values_.count(key))
          throw ValidationError(cfg.origin_ + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
        cfg.values_.emplace(std::move(key), std::string(trim(line.substr(eq + 1))));
      }
      start = end + 1;
    }
    return cfg;
  }

  static KeyValueConfig load(const std::filesystem::path& path) {
    return parse(read_text_file(path), path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ValidationError(origin_ + ": missing required key '" + key + "'");
    return it->second;
  }

  std::string get_or(const std::string& key, std::string fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  template <typename T>
  T number(const std::string& key) const {
    return parse_number<T>(get(key), origin_ + ": key '" + key + "'");
  }

  template <typename T>
  T number_or(const std::string& key, T fallback) const {
    return has(key) ? number<T>(key) : fallback;
  }

  template <typename T>
  std::vector<T> number_list(const std::string& key) const {
    std::vector<T> out;
    for (const auto& item : split(get(key), ','))
      out.push_back(parse_number<T>(item, origin_ + ": key '" + key + "'"));
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  const std::string& origin() const { return origin_; }

 private:
  std::string origin_ = "<config>";
  std::map<std::string, std::string> values_;
};

/// Minimal comma-separated table: no quoting, first line is the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row
  std::string origin;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ValidationError(origin + ": missing column '" + std::string(name) + "'");
  }

  static CsvTable parse(std::string_view text, std::string origin) {
    CsvTable t;
    t.origin = std::move(origin);
    std::size_t line_no = 0;
    std::size_t start = 0;
    bool have_header = false;
    while (start < text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      ++line_no;
      const auto line = trim(text.substr(start, end - start));
      start = end + 1;
      if (line.empty()) continue;
      auto fields = split(line, ',');
      if (!have_header) {
        t.header = std::move(fields);
        have_header = true;
        continue;
      }
      if (fields.size() != t.header.size())
        throw ValidationError(t.origin + ":" + std::to_string(line_no) + ": expected " +
                              std::to_string(t.header.size()) + " fields, got " +
                              std::to_string(fields.size()));
      t.rows.push_back(std::move(fields));
      t.line_numbers.push_back(line_no);
    }
    if (!have_header) throw ValidationError(t.origin + ": empty CSV file");
    return t;
  }

  static CsvTable load(const std::filesystem::path& path) {
    return parse(read_text_file(path), path.string());
  }
};

}  // namespace milbench
