#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace stae {

// Flat `key = value` text with typed scalars:
//
//   # comment
//   d_f = 24            integer
//   dropout = 0.1       float
//   shuffle = true      bool
//   variant = "full"    string (quotes optional when no spaces matter)
//   decay_milestones = [20, 30]
//
// Values are kept as text and checked when read through a typed getter.
class ConfigMap {
 public:
  static ConfigMap parse(std::string_view text, const std::string& source = "<config>");
  static ConfigMap load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& raw) { values_[key] = raw; }
  void erase(const std::string& key) { values_.erase(key); }
  // Entries in `overrides` replace ours.
  void merge(const ConfigMap& overrides);

  const std::string& raw(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_list(const std::string& key, const std::vector<double>& fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace stae
