#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace vallex {

/// Flat key=value store. Lines starting with '#' are comments; keys use dotted
/// section prefixes such as "mar.layers". Later assignments win.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string to_string() const;

  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  void set(const std::string& key, int value);
  void set(const std::string& key, long value);
  void set(const std::string& key, uint64_t value);
  void set(const std::string& key, double value);
  void set(const std::string& key, bool value);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  long get_long(const std::string& key, long fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Entries under "prefix." with the prefix stripped.
  KeyValues section(const std::string& prefix) const;
  /// Copies every entry of `other` into this store, prefixed by "prefix." when
  /// the prefix is nonempty.
  void merge(const KeyValues& other, const std::string& prefix = "");
  /// Applies overrides from environment variables named
  /// `<env_prefix><SECTION>__<KEY>` (e.g. VALLEX_MAR__LAYERS -> mar.layers).
  void apply_environment(const std::string& env_prefix, char** environ_list);
  /// Throws InvalidArgument naming the first key not in `known`.
  void require_known(const std::set<std::string>& known) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace vallex
