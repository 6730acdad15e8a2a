#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace wcnn {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` settings with '#' comments and dotted namespaces
/// (model.levels, train.lr). Keys are kept sorted so the canonical text,
/// and therefore the hash, does not depend on input order.
class Config {
 public:
  static Config parse(std::string_view text);
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  /// "key=value"
  void apply_override(std::string_view assignment);
  void merge(const Config& other);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::size_t> get_size_list(const std::string& key, const std::vector<std::size_t>& fallback) const;

  /// Keys starting with `prefix` ("model." etc.).
  Config subset(std::string_view prefix) const;
  std::string canonical() const;
  /// 16 hex digits of FNV-1a over canonical().
  std::string hash() const;
  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

std::string join_sizes(const std::vector<std::size_t>& values);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace wcnn
