#pragma once

// Substitute motion providers: zero flow, or integer block matching that
// minimises the sum of absolute differences inside a search window.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>
#include <vector>

#include "recvsr/ops.hpp"
#include "recvsr/tensor.hpp"

namespace recvsr {

enum class FlowProvider { kZero, kBlock };

inline FlowProvider parse_flow_provider(std::string_view s) {
  if (s == "zero") return FlowProvider::kZero;
  if (s == "block") return FlowProvider::kBlock;
  throw Error("unknown flow provider '" + std::string(s) + "'");
}

struct FlowConfig {
  FlowProvider provider = FlowProvider::kBlock;
  std::size_t block = 4;
  std::size_t radius = 2;
};

/// Flow that aligns prev to cur: backward_warp(prev, flow) ~ cur, i.e.
/// cur(p) ~ prev(p + flow(p)). Constant within each block.
inline FlowField estimate_flow(const Tensor& prev, const Tensor& cur, const FlowConfig& cfg = {}) {
  require_rank(cur.shape(), 3, "estimate_flow");
  require_same_shape(prev.shape(), cur.shape(), "estimate_flow");
  const std::size_t h = cur.height(), w = cur.width();
  auto flow = FlowField::zeros(h, w);
  if (cfg.provider == FlowProvider::kZero) return flow;
  if (cfg.block == 0) throw Error("estimate_flow: block size must be positive");

  // Candidates ordered by L1 length so ties prefer the smallest motion.
  const auto r = static_cast<int>(cfg.radius);
  std::vector<std::pair<int, int>> candidates;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) candidates.emplace_back(dx, dy);
  std::stable_sort(candidates.begin(), candidates.end(), [](auto a, auto b) {
    return std::abs(a.first) + std::abs(a.second) < std::abs(b.first) + std::abs(b.second);
  });

  Tensor field = flow.tensor();
  for (std::size_t by = 0; by < h; by += cfg.block) {
    for (std::size_t bx = 0; bx < w; bx += cfg.block) {
      const std::size_t ey = std::min(h, by + cfg.block), ex = std::min(w, bx + cfg.block);
      double best = std::numeric_limits<double>::infinity();
      std::pair<int, int> best_d{0, 0};
      for (auto [dx, dy] : candidates) {
        double sad = 0.0;
        for (std::size_t c = 0; c < cur.channels(); ++c) {
          for (std::size_t y = by; y < ey; ++y) {
            const std::size_t sy = detail::clamp_index(static_cast<std::ptrdiff_t>(y) + dy, h);
            for (std::size_t x = bx; x < ex; ++x) {
              const std::size_t sx = detail::clamp_index(static_cast<std::ptrdiff_t>(x) + dx, w);
              sad += std::abs(static_cast<double>(cur.at(c, y, x)) - prev.at(c, sy, sx));
            }
          }
          if (sad >= best) break;
        }
        if (sad < best) {
          best = sad;
          best_d = {dx, dy};
        }
      }
      for (std::size_t y = by; y < ey; ++y) {
        for (std::size_t x = bx; x < ex; ++x) {
          field.at(0, y, x) = static_cast<float>(best_d.first);
          field.at(1, y, x) = static_cast<float>(best_d.second);
        }
      }
    }
  }
  return FlowField(std::move(field));
}

/// Resamples a flow field to (h, w), scaling displacements by the size ratio.
template <class T>
BasicFlowField<T> resize_flow(const BasicFlowField<T>& flow, std::size_t h, std::size_t w) {
  if (flow.height() == h && flow.width() == w) return flow;
  BasicTensor<T> t = bilinear_resize_to(flow.tensor(), h, w);
  const T sx = static_cast<T>(w) / static_cast<T>(flow.width());
  const T sy = static_cast<T>(h) / static_cast<T>(flow.height());
  for (auto& v : t.plane(0)) v *= sx;
  for (auto& v : t.plane(1)) v *= sy;
  return BasicFlowField<T>(std::move(t));
}

}  // namespace recvsr
