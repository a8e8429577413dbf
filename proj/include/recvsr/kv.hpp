#pragma once

// Plain-text key/value files ("key = value" per line, '#' comments) used for
// configs and manifests, plus write-then-rename file output.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "recvsr/tensor.hpp"

namespace recvsr {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Shortest decimal text that round-trips the double exactly.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class KeyValues {
 public:
  static KeyValues parse(std::string_view text, std::string_view origin = "<text>") {
    KeyValues kv;
    std::size_t line_no = 0;
    while (!text.empty()) {
      const auto nl = text.find('\n');
      std::string_view line = text.substr(0, nl);
      text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw Error(std::string(origin) + ":" + std::to_string(line_no) + ": expected key = value");
      }
      kv.set(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
  }

  void set(std::string key, std::string value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    entries_.emplace_back(std::move(key), std::move(value));
  }
  void set(std::string key, double value) { set(std::move(key), format_double(value)); }
  void set(std::string key, std::size_t value) { set(std::move(key), std::to_string(value)); }
  void set(std::string key, bool value) { set(std::move(key), std::string(value ? "true" : "false")); }
  void set(std::string key, const char* value) { set(std::move(key), std::string(value)); }

  std::optional<std::string> get(std::string_view key) const {
    for (const auto& [k, v] : entries_) {
      if (k == key) return v;
    }
    return std::nullopt;
  }

  bool contains(std::string_view key) const { return get(key).has_value(); }

  std::string require(std::string_view key) const {
    auto v = get(key);
    if (!v) throw Error("missing key '" + std::string(key) + "'");
    return *v;
  }

  template <class T>
  T get_as(std::string_view key, T fallback) const {
    auto v = get(key);
    return v ? convert<T>(key, *v) : fallback;
  }

  template <class T>
  T require_as(std::string_view key) const {
    return convert<T>(key, require(key));
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const noexcept { return entries_; }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  template <class T>
  static T convert(std::string_view key, const std::string& text) {
    if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1" || text == "on") return true;
      if (text == "false" || text == "0" || text == "off") return false;
      throw Error("key '" + std::string(key) + "': expected a boolean, got '" + text + "'");
    } else {
      T value{};
      auto res = std::from_chars(text.data(), text.data() + text.size(), value);
      if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        throw Error("key '" + std::string(key) + "': cannot parse '" + text + "'");
      }
      return value;
    }
  }

  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Writes to a sibling temporary and renames it over the target, so readers
/// never observe a partially written file.
inline void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace recvsr
