#include "stae/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

#include "stae/error.hpp"
#include "stae/io.hpp"

namespace stae {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

bool valid_key(const std::string& key) {
  return !key.empty() && std::all_of(key.begin(), key.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '_' || c == '.' || c == '-';
  });
}

// Drops a trailing `# comment` that is not inside quotes.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

template <class T>
bool parse_number(const std::string& text, T& out) {
  const char* begin = text.data();
  const char* end = begin + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

ConfigMap ConfigMap::parse(std::string_view text, const std::string& source) {
  ConfigMap map;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string body = trim(strip_comment(line));
    if (body.empty()) continue;
    if (body.front() == '[' && body.back() == ']') {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": sections are not supported, keys are flat");
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    std::string value = trim(std::string_view(body).substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(source + ":" + std::to_string(lineno) + ": invalid key '" + key + "'");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (!map.values_.emplace(key, value).second) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  return map;
}

ConfigMap ConfigMap::load(const std::filesystem::path& path) {
  return parse(read_file(path), path.string());
}

void ConfigMap::merge(const ConfigMap& overrides) {
  for (const auto& [k, v] : overrides.values_) values_[k] = v;
}

const std::string& ConfigMap::raw(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: missing key '" + key + "'");
  return it->second;
}

std::string ConfigMap::get_string(const std::string& key, const std::string& fallback) const {
  return contains(key) ? raw(key) : fallback;
}

std::int64_t ConfigMap::get_int(const std::string& key, std::int64_t fallback) const {
  if (!contains(key)) return fallback;
  std::int64_t v = 0;
  if (!parse_number(raw(key), v)) throw ConfigError("config: key '" + key + "' expects an integer, got '" + raw(key) + "'");
  return v;
}

std::size_t ConfigMap::get_size(const std::string& key, std::size_t fallback) const {
  const std::int64_t v = get_int(key, static_cast<std::int64_t>(fallback));
  if (v < 0) throw ConfigError("config: key '" + key + "' must be nonnegative, got " + std::to_string(v));
  return static_cast<std::size_t>(v);
}

std::uint64_t ConfigMap::get_u64(const std::string& key, std::uint64_t fallback) const {
  if (!contains(key)) return fallback;
  std::uint64_t v = 0;
  if (!parse_number(raw(key), v)) {
    throw ConfigError("config: key '" + key + "' expects a nonnegative integer, got '" + raw(key) + "'");
  }
  return v;
}

double ConfigMap::get_double(const std::string& key, double fallback) const {
  if (!contains(key)) return fallback;
  double v = 0.0;
  if (!parse_number(raw(key), v)) throw ConfigError("config: key '" + key + "' expects a number, got '" + raw(key) + "'");
  return v;
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
  if (!contains(key)) return fallback;
  const std::string& v = raw(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<double> ConfigMap::get_list(const std::string& key, const std::vector<double>& fallback) const {
  if (!contains(key)) return fallback;
  std::string v = raw(key);
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']') throw ConfigError("config: key '" + key + "' has an unterminated list");
    v = v.substr(1, v.size() - 2);
  }
  std::vector<double> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    double d = 0.0;
    if (!parse_number(item, d)) throw ConfigError("config: key '" + key + "' has non-numeric list item '" + item + "'");
    out.push_back(d);
  }
  return out;
}

std::string ConfigMap::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace stae
