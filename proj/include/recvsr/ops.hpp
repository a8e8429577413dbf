#pragma once

// Numeric primitives of the pipeline together with their adjoints. Forward
// functions are pure; the *_backward functions return input gradients for a
// given upstream gradient and are what the tape in autodiff.hpp calls.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "recvsr/parallel.hpp"
#include "recvsr/tensor.hpp"

namespace recvsr {

enum class Padding { kZero, kReplicate };

struct ConvSpec {
  Padding padding = Padding::kZero;
  std::size_t stride = 1;
  /// Symmetric padding per side; negative means "same" (kernel_size / 2).
  int pad = -1;
};

/// Exact positive rational scale factor, e.g. {4, 1} or {1, 2}.
struct Ratio {
  std::int64_t num = 1;
  std::int64_t den = 1;
};

namespace detail {

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
  if (i < 0) return 0;
  if (i >= static_cast<std::ptrdiff_t>(n)) return n - 1;
  return static_cast<std::size_t>(i);
}

template <class T>
BasicTensor<T> pad_planes(const BasicTensor<T>& x, std::size_t py, std::size_t px,
                          Padding mode) {
  const std::size_t c = x.channels(), h = x.height(), w = x.width();
  if (py == 0 && px == 0) return x;
  BasicTensor<T> out = BasicTensor<T>::chw(c, h + 2 * py, w + 2 * px);
  const std::size_t ow = w + 2 * px;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h + 2 * py; ++y) {
      const auto sy = static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(py);
      const bool row_inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(h);
      if (mode == Padding::kZero && !row_inside) continue;
      const std::size_t src_y = clamp_index(sy, h);
      const T* src = &x.at(ch, src_y, 0);
      T* dst = &out.at(ch, y, 0);
      for (std::size_t i = 0; i < w; ++i) dst[px + i] = src[i];
      if (mode == Padding::kReplicate) {
        for (std::size_t i = 0; i < px; ++i) {
          dst[i] = src[0];
          dst[ow - 1 - i] = src[w - 1];
        }
      }
    }
  }
  return out;
}

// Adjoint of pad_planes: folds a gradient over the padded grid back onto the
// original grid.
template <class T>
BasicTensor<T> fold_planes(const BasicTensor<T>& g, std::size_t h, std::size_t w,
                           std::size_t py, std::size_t px, Padding mode) {
  const std::size_t c = g.channels();
  if (py == 0 && px == 0) return g;
  BasicTensor<T> out = BasicTensor<T>::chw(c, h, w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < g.height(); ++y) {
      const auto sy = static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(py);
      const bool row_inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(h);
      if (mode == Padding::kZero && !row_inside) continue;
      const std::size_t dy = clamp_index(sy, h);
      for (std::size_t x = 0; x < g.width(); ++x) {
        const auto sx = static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(px);
        const bool col_inside = sx >= 0 && sx < static_cast<std::ptrdiff_t>(w);
        if (mode == Padding::kZero && !col_inside) continue;
        out.at(ch, dy, clamp_index(sx, w)) += g.at(ch, y, x);
      }
    }
  }
  return out;
}

inline std::size_t conv_pad(int pad, std::size_t k) {
  return pad < 0 ? k / 2 : static_cast<std::size_t>(pad);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

inline std::size_t conv_output_size(std::size_t n, std::size_t k, std::size_t pad,
                                    std::size_t stride) {
  if (n + 2 * pad < k) throw Error("conv2d: kernel larger than padded input");
  return (n + 2 * pad - k) / stride + 1;
}

/// Cross-correlation of a (C, H, W) input with an (O, C, Kh, Kw) kernel and an
/// optional (O) bias.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& k,
                      const BasicTensor<T>* bias, const ConvSpec& spec = {}) {
  require_rank(x.shape(), 3, "conv2d input");
  require_rank(k.shape(), 4, "conv2d kernel");
  if (k.dim(1) != x.channels()) {
    throw Error("conv2d: kernel " + to_string(k.shape()) +
                " does not match input " + to_string(x.shape()));
  }
  if (spec.stride == 0) throw Error("conv2d: stride must be >= 1");
  const std::size_t outc = k.dim(0), inc = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != outc)) {
    throw Error("conv2d: bias " + to_string(bias->shape()) + " does not match kernel " +
                to_string(k.shape()));
  }
  const std::size_t py = detail::conv_pad(spec.pad, kh), px = detail::conv_pad(spec.pad, kw);
  const std::size_t s = spec.stride;
  const std::size_t oh = conv_output_size(x.height(), kh, py, s);
  const std::size_t ow = conv_output_size(x.width(), kw, px, s);
  const BasicTensor<T> xp = detail::pad_planes(x, py, px, spec.padding);
  const std::size_t pw = xp.width();

  BasicTensor<T> out = BasicTensor<T>::chw(outc, oh, ow);
  parallel_for(outc, [&](std::size_t o) {
    T* dst = &out.at(o, 0, 0);
    if (bias != nullptr) std::fill(dst, dst + oh * ow, (*bias)[o]);
    for (std::size_t c = 0; c < inc; ++c) {
      const T* src = &xp.at(c, 0, 0);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const T wv = k[((o * inc + c) * kh + ky) * kw + kx];
          for (std::size_t y = 0; y < oh; ++y) {
            const T* row = src + (y * s + ky) * pw + kx;
            T* drow = dst + y * ow;
            if (s == 1) {
              for (std::size_t xx = 0; xx < ow; ++xx) drow[xx] += wv * row[xx];
            } else {
              for (std::size_t xx = 0; xx < ow; ++xx) drow[xx] += wv * row[xx * s];
            }
          }
        }
      }
    }
  });
  return out;
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& k,
                      const ConvSpec& spec = {}) {
  return conv2d<T>(x, k, nullptr, spec);
}

template <class T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> kernel;
  BasicTensor<T> bias;
};

template <class T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& k,
                             const BasicTensor<T>& gout, const ConvSpec& spec = {}) {
  const std::size_t outc = k.dim(0), inc = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  const std::size_t py = detail::conv_pad(spec.pad, kh), px = detail::conv_pad(spec.pad, kw);
  const std::size_t s = spec.stride;
  const std::size_t oh = gout.height(), ow = gout.width();
  const BasicTensor<T> xp = detail::pad_planes(x, py, px, spec.padding);
  const std::size_t pw = xp.width();

  ConvGrads<T> g;
  BasicTensor<T> gxp(xp.shape());
  parallel_for(inc, [&](std::size_t c) {
    T* dst = &gxp.at(c, 0, 0);
    for (std::size_t o = 0; o < outc; ++o) {
      const T* src = &gout.at(o, 0, 0);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const T wv = k[((o * inc + c) * kh + ky) * kw + kx];
          for (std::size_t y = 0; y < oh; ++y) {
            T* row = dst + (y * s + ky) * pw + kx;
            const T* grow = src + y * ow;
            if (s == 1) {
              for (std::size_t xx = 0; xx < ow; ++xx) row[xx] += wv * grow[xx];
            } else {
              for (std::size_t xx = 0; xx < ow; ++xx) row[xx * s] += wv * grow[xx];
            }
          }
        }
      }
    }
  });
  g.input = detail::fold_planes(gxp, x.height(), x.width(), py, px, spec.padding);

  g.kernel = BasicTensor<T>(k.shape());
  g.bias = BasicTensor<T>({outc});
  parallel_for(outc, [&](std::size_t o) {
    const T* src = &gout.at(o, 0, 0);
    T b{0};
    for (std::size_t i = 0; i < oh * ow; ++i) b += src[i];
    g.bias[o] = b;
    for (std::size_t c = 0; c < inc; ++c) {
      const T* in = &xp.at(c, 0, 0);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          T acc{0};
          for (std::size_t y = 0; y < oh; ++y) {
            const T* row = in + (y * s + ky) * pw + kx;
            const T* grow = src + y * ow;
            for (std::size_t xx = 0; xx < ow; ++xx) acc += grow[xx] * row[xx * s];
          }
          g.kernel[((o * inc + c) * kh + ky) * kw + kx] = acc;
        }
      }
    }
  });
  return g;
}

// ---------------------------------------------------------------------------
// Depthwise filtering with one fixed (Kh, Kw) kernel shared by all channels.

template <class T>
BasicTensor<T> depthwise_filter(const BasicTensor<T>& x, const BasicTensor<T>& kernel,
                                Padding padding = Padding::kReplicate) {
  require_rank(x.shape(), 3, "depthwise_filter input");
  require_rank(kernel.shape(), 2, "depthwise_filter kernel");
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (kh % 2 == 0 || kw % 2 == 0) throw Error("depthwise_filter: kernel dims must be odd");
  const std::size_t h = x.height(), w = x.width();
  const BasicTensor<T> xp = detail::pad_planes(x, kh / 2, kw / 2, padding);
  const std::size_t pw = xp.width();
  BasicTensor<T> out(x.shape());
  parallel_for(x.channels(), [&](std::size_t c) {
    const T* src = &xp.at(c, 0, 0);
    T* dst = &out.at(c, 0, 0);
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T wv = kernel[ky * kw + kx];
        for (std::size_t y = 0; y < h; ++y) {
          const T* row = src + (y + ky) * pw + kx;
          T* drow = dst + y * w;
          for (std::size_t xx = 0; xx < w; ++xx) drow[xx] += wv * row[xx];
        }
      }
    }
  });
  return out;
}

template <class T>
BasicTensor<T> depthwise_filter_backward(const BasicTensor<T>& kernel,
                                         const BasicTensor<T>& gout,
                                         Padding padding = Padding::kReplicate) {
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const std::size_t h = gout.height(), w = gout.width();
  BasicTensor<T> gp = BasicTensor<T>::chw(gout.channels(), h + kh - 1, w + kw - 1);
  const std::size_t pw = gp.width();
  parallel_for(gout.channels(), [&](std::size_t c) {
    T* dst = &gp.at(c, 0, 0);
    const T* src = &gout.at(c, 0, 0);
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T wv = kernel[ky * kw + kx];
        for (std::size_t y = 0; y < h; ++y) {
          T* row = dst + (y + ky) * pw + kx;
          const T* grow = src + y * w;
          for (std::size_t xx = 0; xx < w; ++xx) row[xx] += wv * grow[xx];
        }
      }
    }
  });
  return detail::fold_planes(gp, h, w, kh / 2, kw / 2, padding);
}

// ---------------------------------------------------------------------------
// softmax

namespace detail {
struct AxisLayout {
  std::size_t outer = 1, axis = 1, inner = 1;
};
inline AxisLayout axis_layout(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw Error("softmax: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  l.axis = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
  if (l.axis == 0) throw Error("softmax: empty axis");
  return l;
}
}  // namespace detail

template <class T>
BasicTensor<T> softmax_over_axis(const BasicTensor<T>& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  BasicTensor<T> out(x.shape());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.axis * l.inner + i;
      T mx = x[base];
      for (std::size_t a = 1; a < l.axis; ++a) mx = std::max(mx, x[base + a * l.inner]);
      T total{0};
      for (std::size_t a = 0; a < l.axis; ++a) {
        const T e = std::exp(x[base + a * l.inner] - mx);
        out[base + a * l.inner] = e;
        total += e;
      }
      const T inv = T{1} / total;
      for (std::size_t a = 0; a < l.axis; ++a) out[base + a * l.inner] *= inv;
    }
  }
  return out;
}

/// Gradient of softmax given its output y: gx = y * (gy - <y, gy>).
template <class T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& y, const BasicTensor<T>& gy,
                                std::size_t axis) {
  const auto l = detail::axis_layout(y.shape(), axis);
  BasicTensor<T> gx(y.shape());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.axis * l.inner + i;
      T dot{0};
      for (std::size_t a = 0; a < l.axis; ++a) {
        dot += y[base + a * l.inner] * gy[base + a * l.inner];
      }
      for (std::size_t a = 0; a < l.axis; ++a) {
        const std::size_t j = base + a * l.inner;
        gx[j] = y[j] * (gy[j] - dot);
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Bilinear resize, half-pixel centres (align_corners = false).

namespace detail {
template <class T>
struct LerpTable {
  std::vector<std::size_t> lo, hi;
  std::vector<T> frac;
};

template <class T>
LerpTable<T> lerp_table(std::size_t in, std::size_t out) {
  LerpTable<T> t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = static_cast<T>(src - static_cast<double>(lo));
    if (t.hi[i] == lo) t.frac[i] = T{0};
  }
  return t;
}
}  // namespace detail

inline std::size_t scaled_size(std::size_t n, Ratio r) {
  if (r.num <= 0 || r.den <= 0) throw Error("bilinear_resize: scale must be positive");
  const auto out = static_cast<std::size_t>(static_cast<std::int64_t>(n) * r.num / r.den);
  if (out == 0) throw Error("bilinear_resize: output dimension rounds to zero");
  return out;
}

template <class T>
BasicTensor<T> bilinear_resize_to(const BasicTensor<T>& x, std::size_t oh, std::size_t ow) {
  require_rank(x.shape(), 3, "bilinear_resize input");
  if (oh == 0 || ow == 0) throw Error("bilinear_resize: output dimension rounds to zero");
  const auto ty = detail::lerp_table<T>(x.height(), oh);
  const auto tx = detail::lerp_table<T>(x.width(), ow);
  BasicTensor<T> out = BasicTensor<T>::chw(x.channels(), oh, ow);
  for (std::size_t c = 0; c < x.channels(); ++c) {
    for (std::size_t y = 0; y < oh; ++y) {
      const T fy = ty.frac[y];
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const T fx = tx.frac[xx];
        const T a = x.at(c, ty.lo[y], tx.lo[xx]);
        const T b = x.at(c, ty.lo[y], tx.hi[xx]);
        const T d = x.at(c, ty.hi[y], tx.lo[xx]);
        const T e = x.at(c, ty.hi[y], tx.hi[xx]);
        const T top = a + fx * (b - a);
        const T bot = d + fx * (e - d);
        out.at(c, y, xx) = top + fy * (bot - top);
      }
    }
  }
  return out;
}

template <class T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& x, Ratio scale) {
  require_rank(x.shape(), 3, "bilinear_resize input");
  return bilinear_resize_to(x, scaled_size(x.height(), scale), scaled_size(x.width(), scale));
}

template <class T>
BasicTensor<T> bilinear_resize_backward(const Shape& in_shape, const BasicTensor<T>& gout) {
  const std::size_t oh = gout.height(), ow = gout.width();
  const auto ty = detail::lerp_table<T>(in_shape[1], oh);
  const auto tx = detail::lerp_table<T>(in_shape[2], ow);
  BasicTensor<T> g(in_shape);
  for (std::size_t c = 0; c < in_shape[0]; ++c) {
    for (std::size_t y = 0; y < oh; ++y) {
      const T fy = ty.frac[y];
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const T fx = tx.frac[xx];
        const T v = gout.at(c, y, xx);
        g.at(c, ty.lo[y], tx.lo[xx]) += (1 - fy) * (1 - fx) * v;
        g.at(c, ty.lo[y], tx.hi[xx]) += (1 - fy) * fx * v;
        g.at(c, ty.hi[y], tx.lo[xx]) += fy * (1 - fx) * v;
        g.at(c, ty.hi[y], tx.hi[xx]) += fy * fx * v;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Sub-pixel rearrangement. Channel c * r^2 + i * r + j lands at offset (i, j)
// of each r x r output cell.

template <class T>
BasicTensor<T> pixel_shuffle(const BasicTensor<T>& x, std::size_t r) {
  require_rank(x.shape(), 3, "pixel_shuffle input");
  if (r == 0 || x.channels() % (r * r) != 0) {
    throw Error("pixel_shuffle: channels " + std::to_string(x.channels()) +
                " not divisible by r^2 = " + std::to_string(r * r));
  }
  const std::size_t c = x.channels() / (r * r), h = x.height(), w = x.width();
  BasicTensor<T> out = BasicTensor<T>::chw(c, h * r, w * r);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx)
            out.at(ch, y * r + i, xx * r + j) = x.at(ch * r * r + i * r + j, y, xx);
  return out;
}

template <class T>
BasicTensor<T> pixel_unshuffle(const BasicTensor<T>& x, std::size_t r) {
  require_rank(x.shape(), 3, "pixel_unshuffle input");
  if (r == 0 || x.height() % r != 0 || x.width() % r != 0) {
    throw Error("pixel_unshuffle: spatial dims " + to_string(x.shape()) +
                " not divisible by " + std::to_string(r));
  }
  const std::size_t c = x.channels(), h = x.height() / r, w = x.width() / r;
  BasicTensor<T> out = BasicTensor<T>::chw(c * r * r, h, w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx)
            out.at(ch * r * r + i * r + j, y, xx) = x.at(ch, y * r + i, xx * r + j);
  return out;
}

// ---------------------------------------------------------------------------
// Backward warping: out(p) = bilinear sample of x at p + flow(p). Sample
// coordinates are clamped to the image, which replicates edge pixels.

template <class T>
class BasicFlowField {
 public:
  BasicFlowField() = default;
  explicit BasicFlowField(BasicTensor<T> field) : field_(std::move(field)) {
    require_rank(field_.shape(), 3, "flow field");
    if (field_.channels() != 2) {
      throw Error("flow field must have 2 channels, got " + to_string(field_.shape()));
    }
  }
  static BasicFlowField zeros(std::size_t h, std::size_t w) {
    return BasicFlowField(BasicTensor<T>::chw(2, h, w));
  }
  const BasicTensor<T>& tensor() const noexcept { return field_; }
  std::size_t height() const { return field_.height(); }
  std::size_t width() const { return field_.width(); }
  T dx(std::size_t y, std::size_t x) const { return field_.at(0, y, x); }
  T dy(std::size_t y, std::size_t x) const { return field_.at(1, y, x); }

  template <class U>
  BasicFlowField<U> cast() const {
    return BasicFlowField<U>(field_.template cast<U>());
  }

 private:
  BasicTensor<T> field_;
};

using FlowField = BasicFlowField<float>;

namespace detail {
template <class T>
struct Tap {
  std::size_t x0, x1, y0, y1;
  T fx, fy;
};

template <class T>
Tap<T> warp_tap(T sx, T sy, std::size_t h, std::size_t w) {
  sx = std::clamp(sx, T{0}, static_cast<T>(w - 1));
  sy = std::clamp(sy, T{0}, static_cast<T>(h - 1));
  Tap<T> t;
  t.x0 = static_cast<std::size_t>(std::floor(sx));
  t.y0 = static_cast<std::size_t>(std::floor(sy));
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.fx = sx - static_cast<T>(t.x0);
  t.fy = sy - static_cast<T>(t.y0);
  return t;
}
}  // namespace detail

template <class T>
BasicTensor<T> backward_warp(const BasicTensor<T>& x, const BasicFlowField<T>& flow) {
  require_rank(x.shape(), 3, "backward_warp input");
  const std::size_t h = x.height(), w = x.width();
  if (flow.height() != h || flow.width() != w) {
    throw Error("backward_warp: flow " + to_string(flow.tensor().shape()) +
                " does not match input " + to_string(x.shape()));
  }
  BasicTensor<T> out(x.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      const auto t = detail::warp_tap<T>(static_cast<T>(xx) + flow.dx(y, xx),
                                         static_cast<T>(y) + flow.dy(y, xx), h, w);
      for (std::size_t c = 0; c < x.channels(); ++c) {
        if (t.fx == T{0} && t.fy == T{0}) {
          out.at(c, y, xx) = x.at(c, t.y0, t.x0);
          continue;
        }
        const T top = (1 - t.fx) * x.at(c, t.y0, t.x0) + t.fx * x.at(c, t.y0, t.x1);
        const T bot = (1 - t.fx) * x.at(c, t.y1, t.x0) + t.fx * x.at(c, t.y1, t.x1);
        out.at(c, y, xx) = (1 - t.fy) * top + t.fy * bot;
      }
    }
  }
  return out;
}

/// Gradient of backward_warp with respect to its input; the flow is constant.
template <class T>
BasicTensor<T> backward_warp_backward(const BasicFlowField<T>& flow,
                                      const BasicTensor<T>& gout) {
  const std::size_t h = gout.height(), w = gout.width();
  BasicTensor<T> g(gout.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      const auto t = detail::warp_tap<T>(static_cast<T>(xx) + flow.dx(y, xx),
                                         static_cast<T>(y) + flow.dy(y, xx), h, w);
      for (std::size_t c = 0; c < gout.channels(); ++c) {
        const T v = gout.at(c, y, xx);
        g.at(c, t.y0, t.x0) += (1 - t.fy) * (1 - t.fx) * v;
        g.at(c, t.y0, t.x1) += (1 - t.fy) * t.fx * v;
        g.at(c, t.y1, t.x0) += t.fy * (1 - t.fx) * v;
        g.at(c, t.y1, t.x1) += t.fy * t.fx * v;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Channel concatenation and slicing.

template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a.shape(), 3, "concat_channels lhs");
  require_rank(b.shape(), 3, "concat_channels rhs");
  if (a.height() != b.height() || a.width() != b.width()) {
    throw Error("concat_channels: spatial mismatch " + to_string(a.shape()) + " vs " +
                to_string(b.shape()));
  }
  BasicTensor<T> out = BasicTensor<T>::chw(a.channels() + b.channels(), a.height(), a.width());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank(x.shape(), 3, "slice_channels input");
  if (begin + count > x.channels()) {
    throw Error("slice_channels: range [" + std::to_string(begin) + ", " +
                std::to_string(begin + count) + ") exceeds " + to_string(x.shape()));
  }
  BasicTensor<T> out = BasicTensor<T>::chw(count, x.height(), x.width());
  const auto first = x.data().begin() + static_cast<std::ptrdiff_t>(begin * x.plane_size());
  std::copy(first, first + static_cast<std::ptrdiff_t>(count * x.plane_size()), out.data().begin());
  return out;
}

/// Stacks equally shaped (H, W) planes or (1, H, W) tensors into (N, H, W).
template <class T>
BasicTensor<T> stack_planes(const std::vector<BasicTensor<T>>& planes) {
  if (planes.empty()) throw Error("stack_planes: empty input");
  const std::size_t plane = planes.front().size();
  const std::size_t h = planes.front().shape()[planes.front().rank() - 2];
  const std::size_t w = planes.front().shape().back();
  BasicTensor<T> out = BasicTensor<T>::chw(planes.size(), h, w);
  for (std::size_t i = 0; i < planes.size(); ++i) {
    if (planes[i].size() != plane) throw Error("stack_planes: size mismatch");
    std::copy(planes[i].data().begin(), planes[i].data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(i * plane));
  }
  return out;
}

}  // namespace recvsr
