#pragma once

// Moving-shapes corpus: coloured discs and boxes drifting over a panning
// sinusoidal texture, rendered at high resolution and degraded per clip.
//
// Layout:  <root>/train/clip_000/{hr,lr}/frame_000.ppm, lr/manifest.txt
//          <root>/val/clip_000/...

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "recvsr/degradation.hpp"
#include "recvsr/image_io.hpp"
#include "recvsr/kv.hpp"
#include "recvsr/rng.hpp"

namespace recvsr {

struct ToyDataConfig {
  std::size_t train_clips = 8;
  std::size_t val_clips = 1;
  std::size_t frames = 5;
  std::size_t lr_size = 16;
  std::size_t scale = 4;
  std::uint64_t seed = 0;
  // Narrower than the full sampling ranges.
  SampleRanges ranges{0.2, 1.5, 1.0, 3.0, kCrfMin, 22};
};

struct Clip {
  std::string id;
  std::vector<Tensor> lr;
  std::vector<Tensor> hr;
};

inline std::string frame_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%03zu.ppm", i);
  return buf;
}

inline std::string clip_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%03zu", i);
  return buf;
}

namespace detail {
struct ToyShape {
  bool disc;
  double cx, cy, vx, vy, size;
  float rgb[3];
};

struct ToyTexture {
  double fx[2], fy[2], phase[2], amp[2];
  float base[3], tint[3];
  double pan_x, pan_y;
};
}  // namespace detail

/// Renders one high-resolution clip from the given stream.
inline std::vector<Tensor> render_toy_clip(Rng& rng, std::size_t frames, std::size_t size) {
  const double s = static_cast<double>(size);
  detail::ToyTexture tex{};
  for (int i = 0; i < 2; ++i) {
    tex.fx[i] = uniform(rng, 1.0, 6.0) * 2.0 * std::numbers::pi / s;
    tex.fy[i] = uniform(rng, 1.0, 6.0) * 2.0 * std::numbers::pi / s;
    tex.phase[i] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    tex.amp[i] = uniform(rng, 0.05, 0.2);
  }
  for (int c = 0; c < 3; ++c) {
    tex.base[c] = static_cast<float>(uniform(rng, 0.25, 0.6));
    tex.tint[c] = static_cast<float>(uniform(rng, 0.5, 1.0));
  }
  tex.pan_x = uniform(rng, -2.0, 2.0);
  tex.pan_y = uniform(rng, -2.0, 2.0);

  std::vector<detail::ToyShape> shapes(static_cast<std::size_t>(uniform_int(rng, 2, 4)));
  for (auto& sh : shapes) {
    sh.disc = uniform(rng, 0.0, 1.0) < 0.5;
    sh.cx = uniform(rng, 0.15 * s, 0.85 * s);
    sh.cy = uniform(rng, 0.15 * s, 0.85 * s);
    sh.vx = uniform(rng, -4.0, 4.0);
    sh.vy = uniform(rng, -4.0, 4.0);
    sh.size = uniform(rng, 0.08 * s, 0.2 * s);
    for (auto& v : sh.rgb) v = static_cast<float>(uniform(rng, 0.0, 1.0));
  }

  std::vector<Tensor> out;
  for (std::size_t t = 0; t < frames; ++t) {
    const double ft = static_cast<double>(t);
    Tensor f = Tensor::chw(3, size, size);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double px = static_cast<double>(x) + 0.5 + tex.pan_x * ft;
        const double py = static_cast<double>(y) + 0.5 + tex.pan_y * ft;
        double pattern = 0.0;
        for (int i = 0; i < 2; ++i) pattern += tex.amp[i] * std::sin(tex.fx[i] * px + tex.fy[i] * py + tex.phase[i]);
        for (std::size_t c = 0; c < 3; ++c) {
          f.at(c, y, x) = static_cast<float>(tex.base[c] + tex.tint[c] * pattern);
        }
        for (const auto& sh : shapes) {
          const double dx = static_cast<double>(x) + 0.5 - (sh.cx + sh.vx * ft);
          const double dy = static_cast<double>(y) + 0.5 - (sh.cy + sh.vy * ft);
          const bool inside = sh.disc ? dx * dx + dy * dy <= sh.size * sh.size
                                      : std::abs(dx) <= sh.size && std::abs(dy) <= 0.6 * sh.size;
          if (inside) {
            for (std::size_t c = 0; c < 3; ++c) f.at(c, y, x) = sh.rgb[c];
          }
        }
      }
    }
    out.push_back(clamp(f, 0.0f, 1.0f));
  }
  return out;
}

namespace detail {
inline Clip make_toy_clip(const ToyDataConfig& cfg, std::string_view split, std::size_t index,
                          DegradationParams& params) {
  Rng content = substream(cfg.seed, std::string("toy/") + std::string(split) + "/content", index);
  Rng degr = substream(cfg.seed, std::string("toy/") + std::string(split) + "/degrade", index);
  Clip clip;
  clip.id = clip_dir_name(index);
  clip.hr = render_toy_clip(content, cfg.frames, cfg.lr_size * cfg.scale);
  params = sample_params(degr, cfg.scale, cfg.ranges);
  clip.lr = degrade_sequence(clip.hr, params);
  return clip;
}

inline void write_clip(const std::filesystem::path& dir, const Clip& clip, const DegradationParams& p) {
  std::filesystem::create_directories(dir / "hr");
  std::filesystem::create_directories(dir / "lr");
  ClipManifest m{clip.id, p, {}};
  for (std::size_t i = 0; i < clip.hr.size(); ++i) {
    m.files.push_back(frame_file_name(i));
    write_frame(dir / "hr" / frame_file_name(i), clip.hr[i]);
    write_frame(dir / "lr" / frame_file_name(i), clip.lr[i]);
  }
  atomic_write(dir / "lr" / "manifest.txt", m.to_kv().to_string());
}
}  // namespace detail

/// Writes the train and val splits plus dataset.txt under root.
inline void make_toy_data(const std::filesystem::path& root, const ToyDataConfig& cfg) {
  if (cfg.frames == 0 || cfg.lr_size == 0 || cfg.scale == 0) throw Error("make_toy_data: sizes must be positive");
  const auto& r = cfg.ranges;
  if (!(r.sigma_lo >= 0.0 && r.sigma_lo <= r.sigma_hi && r.delta_lo >= 0.0 && r.delta_lo <= r.delta_hi &&
        r.crf_lo >= kCrfMin && r.crf_lo <= r.crf_hi && r.crf_hi <= kCrfMax)) {
    throw Error("make_toy_data: invalid degradation ranges");
  }
  for (const std::string_view split : {std::string_view("train"), std::string_view("val")}) {
    const std::size_t n = split == "train" ? cfg.train_clips : cfg.val_clips;
    for (std::size_t i = 0; i < n; ++i) {
      DegradationParams p;
      const Clip clip = detail::make_toy_clip(cfg, split, i, p);
      detail::write_clip(root / split / clip_dir_name(i), clip, p);
    }
  }
  KeyValues kv;
  kv.set("train_clips", cfg.train_clips);
  kv.set("val_clips", cfg.val_clips);
  kv.set("frames", cfg.frames);
  kv.set("lr_size", cfg.lr_size);
  kv.set("scale", cfg.scale);
  kv.set("seed", std::to_string(cfg.seed));
  kv.set("sigma_range", format_double(cfg.ranges.sigma_lo) + " " + format_double(cfg.ranges.sigma_hi));
  kv.set("delta_range", format_double(cfg.ranges.delta_lo) + " " + format_double(cfg.ranges.delta_hi));
  kv.set("crf_range", std::to_string(cfg.ranges.crf_lo) + " " + std::to_string(cfg.ranges.crf_hi));
  atomic_write(root / "dataset.txt", kv.to_string());
}

/// Loads every clip directory below split_dir, sorted by name. Each clip
/// holds hr/ and lr/ frames with matching file names.
inline std::vector<Clip> load_clips(const std::filesystem::path& split_dir) {
  if (!std::filesystem::is_directory(split_dir)) throw Error("no clip directory at " + split_dir.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(split_dir)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<Clip> clips;
  for (const auto& d : dirs) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(d / "lr")) {
      if (e.path().extension() == ".ppm") files.push_back(e.path().filename());
    }
    std::sort(files.begin(), files.end());
    Clip c;
    c.id = d.filename().string();
    for (const auto& f : files) {
      c.lr.push_back(read_frame(d / "lr" / f));
      c.hr.push_back(read_frame(d / "hr" / f));
    }
    if (c.lr.empty()) throw Error("clip " + d.string() + " has no frames");
    clips.push_back(std::move(c));
  }
  if (clips.empty()) throw Error("no clips found in " + split_dir.string());
  return clips;
}

}  // namespace recvsr
