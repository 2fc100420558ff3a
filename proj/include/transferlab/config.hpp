#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace tlab {

/// Flat `key = value` configuration. Blank lines and lines starting with '#' are ignored;
/// keys carry dotted section prefixes such as `attack.kappa`.
class Config {
 public:
  Config() = default;

  static Config parse(std::string_view text, std::string_view source = "<config>");
  static Config load(const std::filesystem::path& path);

  bool has(std::string_view key) const;
  void set(std::string key, std::string value);

  std::string get_string(std::string_view key, std::string_view fallback) const;
  double get_double(std::string_view key, double fallback) const;
  std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;
  std::vector<std::size_t> get_size_list(std::string_view key, const std::vector<std::size_t>& fallback) const;
  std::optional<double> get_optional_double(std::string_view key) const;

  /// Throws ConfigError naming the first key not in `known`.
  void reject_unknown(const std::set<std::string, std::less<>>& known) const;

  /// Sorted `key = value` lines; two configs with equal canonical text are equivalent.
  std::string canonical() const;

  /// 64-bit FNV-1a of canonical(), as 16 hex digits.
  std::string hash() const;

  const std::map<std::string, std::string, std::less<>>& entries() const { return entries_; }

 private:
  const std::string* find(std::string_view key) const;

  std::map<std::string, std::string, std::less<>> entries_;
  std::string source_ = "<config>";
};

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

}  // namespace tlab
