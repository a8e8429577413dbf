#pragma once

// Synthetic low-quality frames: blur -> additive noise -> area downsample ->
// block-transform compression, with one parameter set per clip.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "recvsr/image_io.hpp"
#include "recvsr/kv.hpp"
#include "recvsr/ops.hpp"
#include "recvsr/parallel.hpp"
#include "recvsr/rng.hpp"
#include "recvsr/tensor.hpp"

namespace recvsr {

inline constexpr int kCrfMin = 18;
inline constexpr int kCrfMax = 35;

struct DegradationParams {
  double sigma = 0.0;  // blur std-dev, pixels
  double delta = 0.0;  // noise std-dev on the [0,255] scale
  std::size_t r = 1;   // downsampling factor
  int crf = kCrfMin;
  bool compress = false;
  std::uint64_t seed = 0;

  friend bool operator==(const DegradationParams&, const DegradationParams&) = default;
};

struct SampleRanges {
  double sigma_lo = 0.2, sigma_hi = 3.0;
  double delta_lo = 1.0, delta_hi = 5.0;
  int crf_lo = kCrfMin, crf_hi = kCrfMax;
};

/// Draws sigma and delta uniformly from their ranges and crf uniformly over
/// the integers; the caller picks r and the per-clip noise seed.
inline DegradationParams sample_params(Rng& rng, std::size_t r = 4, const SampleRanges& ranges = {}) {
  DegradationParams p;
  p.sigma = uniform(rng, ranges.sigma_lo, ranges.sigma_hi);
  p.delta = uniform(rng, ranges.delta_lo, ranges.delta_hi);
  p.crf = static_cast<int>(uniform_int(rng, ranges.crf_lo, ranges.crf_hi));
  p.r = r;
  p.compress = true;
  p.seed = rng();
  return p;
}

inline std::size_t default_gaussian_size(double sigma) {
  return 2 * static_cast<std::size_t>(std::ceil(2.0 * sigma)) + 1;
}

/// Isotropic discrete Gaussian, normalised to unit sum in double precision.
/// size 0 selects 2*ceil(2*sigma)+1; sigma 0 gives the delta kernel.
inline Tensor gaussian_kernel(double sigma, std::size_t size = 0) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw Error("gaussian_kernel: sigma must be >= 0");
  if (size == 0) size = default_gaussian_size(sigma);
  if (size % 2 == 0) throw Error("gaussian_kernel: size must be odd, got " + std::to_string(size));
  Tensor k({size, size});
  const auto half = static_cast<std::ptrdiff_t>(size / 2);
  if (sigma == 0.0) {
    k[(size / 2) * size + size / 2] = 1.0f;
    return k;
  }
  std::vector<double> g(size * size);
  double total = 0.0;
  for (std::ptrdiff_t y = -half; y <= half; ++y) {
    for (std::ptrdiff_t x = -half; x <= half; ++x) {
      const double v = std::exp(-static_cast<double>(x * x + y * y) / (2.0 * sigma * sigma));
      g[static_cast<std::size_t>((y + half) * static_cast<std::ptrdiff_t>(size) + x + half)] = v;
      total += v;
    }
  }
  for (std::size_t i = 0; i < g.size(); ++i) k[i] = static_cast<float>(g[i] / total);
  return k;
}

/// Mean over non-overlapping r x r blocks.
inline Tensor area_downsample(const Tensor& x, std::size_t r) {
  require_rank(x.shape(), 3, "area_downsample");
  if (r == 0) throw Error("area_downsample: factor must be positive");
  if (x.height() % r != 0 || x.width() % r != 0) {
    throw Error("area_downsample: " + to_string(x.shape()) + " not divisible by " + std::to_string(r));
  }
  if (r == 1) return x;
  const std::size_t h = x.height() / r, w = x.width() / r;
  Tensor out = Tensor::chw(x.channels(), h, w);
  const double inv = 1.0 / static_cast<double>(r * r);
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < r; ++dy)
          for (std::size_t dx = 0; dx < r; ++dx) s += x.at(c, y * r + dy, xx * r + dx);
        out.at(c, y, xx) = static_cast<float>(s * inv);
      }
  return out;
}

// ---------------------------------------------------------------------------
// 8x8 block DCT compression stand-in

using Block8 = std::array<double, 64>;

namespace detail {
inline const Block8& dct_basis() {
  static const Block8 basis = [] {
    Block8 b{};
    for (std::size_t u = 0; u < 8; ++u) {
      const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (std::size_t x = 0; x < 8; ++x) {
        b[u * 8 + x] = a * std::cos((2.0 * static_cast<double>(x) + 1.0) * static_cast<double>(u) *
                                    std::numbers::pi / 16.0);
      }
    }
    return b;
  }();
  return basis;
}

// Luminance table of baseline JPEG, on the 0..255 scale.
inline constexpr std::array<int, 64> kBaseQuant = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
}  // namespace detail

/// Orthonormal 2-D DCT-II of an 8x8 block (row-major).
inline Block8 dct8x8(const Block8& in) {
  const auto& b = detail::dct_basis();
  Block8 tmp{}, out{};
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t u = 0; u < 8; ++u) {
      double s = 0.0;
      for (std::size_t x = 0; x < 8; ++x) s += b[u * 8 + x] * in[y * 8 + x];
      tmp[y * 8 + u] = s;
    }
  for (std::size_t v = 0; v < 8; ++v)
    for (std::size_t u = 0; u < 8; ++u) {
      double s = 0.0;
      for (std::size_t y = 0; y < 8; ++y) s += b[v * 8 + y] * tmp[y * 8 + u];
      out[v * 8 + u] = s;
    }
  return out;
}

inline Block8 idct8x8(const Block8& in) {
  const auto& b = detail::dct_basis();
  Block8 tmp{}, out{};
  for (std::size_t v = 0; v < 8; ++v)
    for (std::size_t x = 0; x < 8; ++x) {
      double s = 0.0;
      for (std::size_t u = 0; u < 8; ++u) s += b[u * 8 + x] * in[v * 8 + u];
      tmp[v * 8 + x] = s;
    }
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      double s = 0.0;
      for (std::size_t v = 0; v < 8; ++v) s += b[v * 8 + y] * tmp[v * 8 + x];
      out[y * 8 + x] = s;
    }
  return out;
}

/// Quantiser step multiplier: doubles every 6 crf units from 1 at crf 18.
inline double crf_step(int crf) { return std::exp2(static_cast<double>(crf - kCrfMin) / 6.0); }

struct CompressOptions {
  bool quantize = true;
};

/// Per-channel 8x8 block DCT with crf-scaled quantisation of the AC
/// coefficients. The DC coefficient is kept, so constant blocks pass through.
/// Frames are padded by edge replication to multiples of 8 and cropped back.
inline Tensor compress_standin(const Tensor& frame, int crf, CompressOptions opt = {}) {
  require_rank(frame.shape(), 3, "compress_standin");
  if (crf < kCrfMin || crf > kCrfMax) {
    throw Error("compress_standin: crf " + std::to_string(crf) + " outside [18, 35]");
  }
  const double step = crf_step(crf) / 255.0;
  const std::size_t h = frame.height(), w = frame.width();
  const std::size_t bh = (h + 7) / 8, bw = (w + 7) / 8;
  Tensor out(frame.shape());
  parallel_for(frame.channels(), [&](std::size_t c) {
    for (std::size_t by = 0; by < bh; ++by) {
      for (std::size_t bx = 0; bx < bw; ++bx) {
        Block8 blk{};
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x)
            blk[y * 8 + x] = frame.at(c, std::min(by * 8 + y, h - 1), std::min(bx * 8 + x, w - 1));
        Block8 coef = dct8x8(blk);
        if (opt.quantize) {
          for (std::size_t i = 1; i < 64; ++i) {
            const double q = step * detail::kBaseQuant[i];
            coef[i] = std::round(coef[i] / q) * q;
          }
        }
        const Block8 rec = idct8x8(coef);
        for (std::size_t y = 0; y < 8 && by * 8 + y < h; ++y)
          for (std::size_t x = 0; x < 8 && bx * 8 + x < w; ++x) {
            const double v = rec[y * 8 + x];
            out.at(c, by * 8 + y, bx * 8 + x) =
                static_cast<float>(opt.quantize ? std::min(1.0, std::max(0.0, v)) : v);
          }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Full pipeline

inline Tensor degrade_frame(const Tensor& y, const DegradationParams& p, std::size_t frame_index = 0) {
  require_rank(y.shape(), 3, "degrade_frame");
  if (p.r == 0) throw Error("degrade_frame: r must be >= 1");
  if (y.height() % p.r != 0 || y.width() % p.r != 0) {
    throw Error("degrade_frame: frame " + to_string(y.shape()) + " not divisible by r=" + std::to_string(p.r));
  }
  Tensor x = p.sigma > 0.0 ? depthwise_filter(y, gaussian_kernel(p.sigma), Padding::kReplicate) : y;
  if (p.delta > 0.0) {
    Rng rng = substream(p.seed, "degrade/noise", frame_index);
    const double s = p.delta / 255.0;
    for (auto& v : x.data()) v = static_cast<float>(v + s * normal(rng));
  }
  x = area_downsample(x, p.r);
  if (p.compress) x = compress_standin(x, p.crf);
  return clamp(x, 0.0f, 1.0f);
}

struct ClipManifest {
  std::string clip_id;
  DegradationParams params;
  std::vector<std::string> files;

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("clip", clip_id);
    kv.set("sigma", params.sigma);
    kv.set("delta", params.delta);
    kv.set("r", params.r);
    kv.set("crf", static_cast<std::size_t>(params.crf));
    kv.set("compress", params.compress);
    kv.set("seed", std::to_string(params.seed));
    kv.set("frames", files.size());
    for (std::size_t i = 0; i < files.size(); ++i) kv.set("file." + std::to_string(i), files[i]);
    return kv;
  }

  static ClipManifest from_kv(const KeyValues& kv) {
    ClipManifest m;
    m.clip_id = kv.get_as<std::string>("clip", "");
    m.params.sigma = kv.require_as<double>("sigma");
    m.params.delta = kv.require_as<double>("delta");
    m.params.r = kv.require_as<std::size_t>("r");
    m.params.crf = kv.require_as<int>("crf");
    m.params.compress = kv.require_as<bool>("compress");
    m.params.seed = kv.require_as<std::uint64_t>("seed");
    const auto n = kv.get_as<std::size_t>("frames", 0);
    for (std::size_t i = 0; i < n; ++i) m.files.push_back(kv.require("file." + std::to_string(i)));
    return m;
  }
};

/// Shared parameters for the clip; frame i draws its noise from stream i.
inline std::vector<Tensor> degrade_sequence(const std::vector<Tensor>& frames, const DegradationParams& p) {
  if (frames.empty()) throw Error("degrade_sequence: empty clip");
  for (const auto& f : frames) require_same_shape(f.shape(), frames.front().shape(), "degrade_sequence frames");
  std::vector<Tensor> out(frames.size());
  parallel_for(frames.size(), [&](std::size_t i) { out[i] = degrade_frame(frames[i], p, i); });
  return out;
}

/// Degrades every frame listed in the manifest (paths relative to in_dir)
/// and writes same-named outputs plus manifest.txt into out_dir.
inline void degrade_directory(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir,
                              const ClipManifest& m) {
  std::vector<Tensor> frames;
  for (const auto& f : m.files) frames.push_back(read_frame(in_dir / f));
  const auto out = degrade_sequence(frames, m.params);
  std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < out.size(); ++i) write_frame(out_dir / m.files[i], out[i]);
  atomic_write(out_dir / "manifest.txt", m.to_kv().to_string());
}

}  // namespace recvsr
