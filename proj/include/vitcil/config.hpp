#pragma once

#include <map>
#include <string>
#include <vector>

#include "vitcil/errors.hpp"

namespace vitcil {

// Flat-namespaced `key = value` text config with dotted keys. Unknown keys are
// rejected against a registry so typos fail loudly.
class Config {
 public:
  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  void apply_override(const std::string& key_equals_value);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long get_int(const std::string& key, long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Throws ConfigError naming the first key not present in `known`.
  void validate_keys(const std::vector<std::string>& known) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

  // FNV-1a over the sorted canonical "key=value" lines.
  std::string hash() const;

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace vitcil
