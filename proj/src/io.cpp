#include "ahn/io.hpp"

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ahn {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                        line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    cfg.values_[key] = value;
  }
  return cfg;
}

KvConfig KvConfig::parse_file(const std::filesystem::path& path) {
  return parse(read_file(path));
}

bool KvConfig::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string& KvConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: missing key '" + key + "'");
  return it->second;
}

std::string KvConfig::get_or(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

long KvConfig::get_long(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    long out = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not an integer: '" + v + "'");
  }
}

long KvConfig::get_long_or(const std::string& key, long fallback) const {
  return has(key) ? get_long(key) : fallback;
}

double KvConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not a number: '" + v + "'");
  }
}

double KvConfig::get_double_or(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

void KvConfig::set(const std::string& key, const std::string& value) {
  if (key.empty()) throw ConfigError("config: empty key");
  values_[key] = value;
}

std::vector<std::pair<std::string, std::string>> KvConfig::items() const {
  return {values_.begin(), values_.end()};
}

std::string KvConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    out += k;
    out += "=";
    out += v;
    out += "\n";
  }
  return out;
}

void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw FormatError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw FormatError("rename '" + tmp.string() + "' -> '" + path.string() +
                      "' failed: " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string csv_format(const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  auto emit = [&out](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  emit(header);
  for (const auto& row : rows) {
    if (row.size() != header.size())
      throw FormatError("csv row has " + std::to_string(row.size()) + " cells, header has " +
                        std::to_string(header.size()));
    emit(row);
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace ahn
