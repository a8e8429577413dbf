#pragma once

// "HST1" binary tensor records:
//   4 bytes   magic "HST1"
//   1 byte    rank
//   rank x 4  little-endian u32 dims
//   payload   little-endian IEEE-754 float32 values, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "recvsr/tensor.hpp"

namespace recvsr {

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw Error(std::string("truncated ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline void write_hst(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw Error("HST1: rank too large");
  os.write("HST1", 4);
  os.put(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (float v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw Error("HST1: write failed");
}

inline Tensor read_hst(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "HST1", 4) != 0) {
    throw Error("HST1: bad magic");
  }
  const int rank = is.get();
  if (rank == std::char_traits<char>::eof()) throw Error("HST1: truncated header");
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) d = detail::get_u32(is, "HST1 header");
  const std::size_t n = element_count(shape);
  std::vector<float> data(n);
  for (auto& v : data) v = std::bit_cast<float>(detail::get_u32(is, "HST1 payload"));
  return Tensor(std::move(shape), std::move(data));
}

inline std::string encode_hst(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_hst(os, t);
  return os.str();
}

inline void save_hst(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_hst(os, t);
}

inline Tensor load_hst(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  try {
    return read_hst(is);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace recvsr
