// SPDX-License-Identifier: Apache-2.0
#include "clseg/kv_text.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "clseg/errors.hpp"

namespace clseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& key) {
  if (key.empty()) return false;
  for (char c : key) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '.';
    if (!ok) return false;
  }
  return true;
}

}  // namespace

void KeyValueText::set(const std::string& key, const std::string& value) {
  if (!valid_key(key)) throw ConfigError("malformed key '" + key + "'");
  if (value.find('\n') != std::string::npos || value.find('#') != std::string::npos) {
    throw ConfigError("value for '" + key + "' may not contain newlines or '#'");
  }
  if (auto it = index_.find(key); it != index_.end()) {
    entries_[it->second].second = value;
    return;
  }
  index_[key] = entries_.size();
  entries_.emplace_back(key, value);
}

void KeyValueText::set(const std::string& key, double value) { set(key, format_number(value)); }

void KeyValueText::set(const std::string& key, long long value) { set(key, std::to_string(value)); }

bool KeyValueText::contains(const std::string& key) const { return index_.count(key) != 0; }

std::optional<std::string> KeyValueText::get(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return entries_[it->second].second;
}

const std::string& KeyValueText::at(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) {
    throw ConfigError((source_.empty() ? std::string() : source_ + ": ") + "missing key '" + key + "'");
  }
  return entries_[it->second].second;
}

int KeyValueText::line_of(const std::string& key) const {
  auto it = lines_.find(key);
  return it == lines_.end() ? 0 : it->second;
}

double KeyValueText::number(const std::string& key) const {
  const std::string& v = at(key);
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError((source_.empty() ? std::string() : source_ + ":" + std::to_string(line_of(key)) + ": ") +
                      "key '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

long long KeyValueText::integer(const std::string& key) const {
  const std::string& v = at(key);
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError((source_.empty() ? std::string() : source_ + ":" + std::to_string(line_of(key)) + ": ") +
                      "key '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

std::string KeyValueText::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

KeyValueText KeyValueText::parse(const std::string& text, const std::string& source) {
  KeyValueText kv;
  kv.source_ = source;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(where + "malformed key '" + key + "'");
    if (kv.contains(key)) throw ConfigError(where + "duplicate key '" + key + "'");
    kv.set(key, value);
    kv.lines_[key] = lineno;
  }
  return kv;
}

KeyValueText KeyValueText::read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

std::string KeyValueText::format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace clseg
