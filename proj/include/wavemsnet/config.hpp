#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "wavemsnet/error.hpp"

namespace wavemsnet {

/// Ordered `key = value` pairs. Order is preserved so that a parsed block
/// re-serializes to the same bytes.
class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::string_view text) {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw Error(ErrorCode::config, "line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                                           std::string(line) + "'");
      }
      const auto key = trim(line.substr(0, eq));
      if (key.empty()) throw Error(ErrorCode::config, "line " + std::to_string(line_no) + ": empty key");
      kv.set(std::string(key), std::string(trim(line.substr(eq + 1))));
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io, "cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      return parse(ss.str());
    } catch (const Error& e) {
      throw Error(ErrorCode::config, path.string() + ": " + e.what());
    }
  }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : items_) out += k + " = " + v + "\n";
    return out;
  }

  void set(const std::string& key, std::string value) {
    for (auto& item : items_) {
      if (item.first == key) {
        item.second = std::move(value);
        return;
      }
    }
    items_.emplace_back(key, std::move(value));
  }

  template <typename V>
  void set_number(const std::string& key, V value) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), value);
    set(key, std::string(buf, res.ptr));
  }

  bool contains(std::string_view key) const { return find(key) != nullptr; }

  std::optional<std::string> get(std::string_view key) const {
    const auto* v = find(key);
    return v ? std::optional<std::string>(*v) : std::nullopt;
  }

  std::string require(std::string_view key) const {
    const auto* v = find(key);
    if (!v) throw Error(ErrorCode::config, "missing key '" + std::string(key) + "'");
    return *v;
  }

  template <typename V>
  V number(std::string_view key, V fallback) const {
    const auto* v = find(key);
    return v ? parse_number<V>(key, *v) : fallback;
  }

  template <typename V>
  V require_number(std::string_view key) const {
    return parse_number<V>(key, require(key));
  }

  const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

  /// Pairs whose key starts with `prefix`.
  KeyValues with_prefix(std::string_view prefix) const {
    KeyValues out;
    for (const auto& [k, v] : items_) {
      if (k.starts_with(prefix)) out.set(k, v);
    }
    return out;
  }

  void merge(const KeyValues& other) {
    for (const auto& [k, v] : other.items_) set(k, v);
  }

  bool operator==(const KeyValues&) const = default;

  template <typename V>
  static V parse_number(std::string_view key, const std::string& text) {
    V value{};
    const char* first = text.data();
    const char* last = text.data() + text.size();
    const auto res = std::from_chars(first, last, value);
    if (res.ec != std::errc() || res.ptr != last) {
      throw Error(ErrorCode::config, "key '" + std::string(key) + "': '" + text + "' is not a valid number");
    }
    return value;
  }

  static std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

 private:
  const std::string* find(std::string_view key) const {
    for (const auto& item : items_) {
      if (item.first == key) return &item.second;
    }
    return nullptr;
  }

  std::vector<std::pair<std::string, std::string>> items_;
};

inline std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    const auto next = text.find(sep, pos);
    parts.emplace_back(KeyValues::trim(text.substr(pos, next == std::string_view::npos ? next : next - pos)));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return parts;
}

}  // namespace wavemsnet
