#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace recvsr {

// 64-bit FNV-1a; used for model identity and bank fingerprints.
class Fnv1a {
 public:
  void update(std::span<const unsigned char> bytes) {
    for (unsigned char b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) {
    update(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
  }
  template <class T>
  void update_pod(const T& v) {
    update(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(&v), sizeof(T)));
  }
  std::uint64_t digest() const noexcept { return state_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace recvsr
