// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace clseg {

/// Flat `key = value` text used for configs, manifests and stage records.
/// Keys are [a-z0-9_.]+; `#` starts a comment; entry order is preserved.
class KeyValueText {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }

  bool contains(const std::string& key) const;
  std::optional<std::string> get(const std::string& key) const;
  /// Throws ConfigError naming the key (and source line, when parsed) if absent.
  const std::string& at(const std::string& key) const;
  double number(const std::string& key) const;
  long long integer(const std::string& key) const;
  /// 1-based line a key came from, 0 if it was set programmatically.
  int line_of(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string to_text() const;
  /// `source` is used in error messages (a file name).
  static KeyValueText parse(const std::string& text, const std::string& source = "<text>");
  static KeyValueText read_file(const std::string& path);

  /// Shortest round-trippable decimal representation of a double.
  static std::string format_number(double v);

  bool operator==(const KeyValueText& other) const { return entries_ == other.entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, int> lines_;
  std::string source_;
};

}  // namespace clseg
