#pragma once

// Binary 8-bit netpbm frames: P6 (RGB) and P5 (grayscale), maxval 255.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>

#include "recvsr/kv.hpp"
#include "recvsr/tensor.hpp"

namespace recvsr {

namespace detail {
inline void skip_pnm_space(std::istream& is) {
  for (;;) {
    const int c = is.peek();
    if (c == '#') {
      std::string ignored;
      std::getline(is, ignored);
    } else if (c != std::char_traits<char>::eof() && std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

inline std::size_t read_pnm_number(std::istream& is, const char* field) {
  skip_pnm_space(is);
  std::size_t v = 0;
  bool any = false;
  while (std::isdigit(is.peek())) {
    v = v * 10 + static_cast<std::size_t>(is.get() - '0');
    any = true;
    if (v > (1u << 24)) throw Error(std::string("netpbm: ") + field + " too large");
  }
  if (!any) throw Error(std::string("netpbm: malformed header, expected ") + field);
  return v;
}

inline unsigned char quantize_u8(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<unsigned char>(std::round(c * 255.0f));
}
}  // namespace detail

/// Decodes a P5 or P6 stream into a 1xHxW or 3xHxW tensor with values v/255.
inline Tensor read_image(std::istream& is) {
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw Error("netpbm: unsupported or missing magic (expected P5 or P6)");
  }
  const std::size_t channels = magic[1] == '6' ? 3 : 1;
  const std::size_t w = detail::read_pnm_number(is, "width");
  const std::size_t h = detail::read_pnm_number(is, "height");
  const std::size_t maxval = detail::read_pnm_number(is, "maxval");
  if (w == 0 || h == 0) throw Error("netpbm: zero image dimension");
  if (maxval != 255) throw Error("netpbm: maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (!std::isspace(is.get())) throw Error("netpbm: malformed header, missing separator");

  std::string bytes(w * h * channels, '\0');
  if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw Error("netpbm: truncated payload (" + std::to_string(is.gcount()) + " of " +
                std::to_string(bytes.size()) + " bytes)");
  }
  Tensor t({channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        t.at(c, y, x) = static_cast<unsigned char>(bytes[(y * w + x) * channels + c]) / 255.0f;
  return t;
}

/// Encodes a 1- or 3-channel tensor, clamping to [0,1] and rounding v*255
/// half away from zero.
inline std::string encode_image(const Tensor& t) {
  require_rank(t.shape(), 3, "encode_image");
  const std::size_t channels = t.channels(), h = t.height(), w = t.width();
  if (channels != 1 && channels != 3) throw Error("encode_image: need 1 or 3 channels, got " + to_string(t.shape()));
  std::string out = (channels == 3 ? "P6\n" : "P5\n") + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + w * h * channels);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        out[header + (y * w + x) * channels + c] = static_cast<char>(detail::quantize_u8(t.at(c, y, x)));
  return out;
}

inline Tensor load_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  try {
    return read_image(is);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

inline void save_image(const std::filesystem::path& path, const Tensor& t) { atomic_write(path, encode_image(t)); }

/// Frames are always RGB.
inline Tensor read_frame(const std::filesystem::path& path) {
  Tensor t = load_image(path);
  if (t.channels() != 3) throw Error(path.string() + ": expected an RGB (P6) frame");
  return t;
}

inline void write_frame(const std::filesystem::path& path, const Tensor& t) {
  if (t.rank() != 3 || t.channels() != 3) throw Error("write_frame: expected 3xHxW, got " + to_string(t.shape()));
  save_image(path, t);
}

}  // namespace recvsr
