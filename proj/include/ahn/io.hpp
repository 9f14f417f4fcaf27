#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ahn/common.hpp"

namespace ahn {

// Flat key=value configuration. '#' starts a comment, blank lines are
// ignored, later keys override earlier ones.
class KvConfig {
 public:
  static KvConfig parse(const std::string& text);
  static KvConfig parse_file(const std::filesystem::path& path);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;  // ConfigError if absent
  std::string get_or(const std::string& key, const std::string& fallback) const;
  long get_long(const std::string& key) const;
  long get_long_or(const std::string& key, long fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  void set(const std::string& key, const std::string& value);

  // keys in sorted order
  std::vector<std::pair<std::string, std::string>> items() const;
  std::string serialize() const;

 private:
  std::map<std::string, std::string> values_;
};

// write via a sibling temp file and rename, so readers never see partial data
void atomic_write_file(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

// comma-delimited, LF line endings, header first
std::string csv_format(const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows);

std::string format_double(double v);

}  // namespace ahn
