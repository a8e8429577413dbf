#pragma once

// Finite-difference checks of every differentiable primitive on a few small
// random shapes, in double precision. Each case reduces the primitive's
// output to a scalar through a fixed random weighting, so every output
// coordinate contributes a distinct gradient.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "recvsr/autodiff.hpp"
#include "recvsr/hsa.hpp"
#include "recvsr/layers.hpp"
#include "recvsr/rng.hpp"

namespace recvsr {

struct GradCase {
  std::string primitive;
  std::string shape;
  ad::GradCheckReport report;
};

namespace detail {
using D = double;
using DTensor = BasicTensor<D>;
using DVar = ad::Var<D>;

inline DTensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  DTensor t(std::move(shape));
  for (auto& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

/// sum(w * y) for a fixed random w of y's shape.
inline DVar weighted_sum(ad::Tape<D>& tape, const DVar& y, std::uint64_t seed) {
  Rng rng = substream(seed, "gradcheck/weights");
  return ad::sum(ad::mul(y, tape.constant(random_tensor(rng, y.shape()))));
}

inline std::string shape_text(const Shape& s) { return to_string(s); }
}  // namespace detail

inline std::vector<GradCase> run_grad_suite(std::uint64_t seed = 0, double epsilon = 1e-6) {
  using namespace detail;
  std::vector<GradCase> out;
  Rng rng = substream(seed, "gradcheck/inputs");
  auto check = [&](std::string name, std::string shape, const ad::LeafList<D>& leaves, auto&& fn) {
    const std::uint64_t wseed = seed + out.size();
    auto report = ad::grad_check<D>(
        [&](ad::Tape<D>& tape, const std::vector<DVar>& v) { return weighted_sum(tape, fn(tape, v), wseed); },
        leaves, epsilon);
    out.push_back({std::move(name), std::move(shape), report});
  };

  const Shape conv_shapes[][2] = {{{1, 4, 4}, {1, 1, 3, 3}}, {{2, 5, 6}, {3, 2, 3, 3}}, {{3, 4, 5}, {2, 3, 1, 1}}};
  for (const auto& s : conv_shapes) {
    const std::size_t o = s[1][0];
    for (Padding pad : {Padding::kZero, Padding::kReplicate}) {
      check("conv2d", shape_text(s[0]) + " * " + shape_text(s[1]) + (pad == Padding::kZero ? " zero" : " replicate"),
            {{"x", random_tensor(rng, s[0])}, {"k", random_tensor(rng, s[1])}, {"b", random_tensor(rng, {o})}},
            [pad](ad::Tape<D>&, const std::vector<DVar>& v) {
              return ad::conv2d(v[0], v[1], v[2], ConvSpec{pad, 1, -1});
            });
    }
  }
  check("conv2d", "(2x7x7) * (2x2x3x3) stride 2",
        {{"x", random_tensor(rng, {2, 7, 7})}, {"k", random_tensor(rng, {2, 2, 3, 3})}},
        [](ad::Tape<D>&, const std::vector<DVar>& v) { return ad::conv2d(v[0], v[1], ConvSpec{Padding::kZero, 2, 1}); });

  const Shape softmax_shapes[] = {{5, 4, 4}, {3, 2, 6}, {2, 3, 3}};
  for (const auto& s : softmax_shapes) {
    for (std::size_t axis = 0; axis < 2; ++axis) {
      check("softmax", shape_text(s) + " axis " + std::to_string(axis), {{"x", random_tensor(rng, s, -3.0, 3.0)}},
            [axis](ad::Tape<D>&, const std::vector<DVar>& v) { return ad::softmax_over_axis(v[0], axis); });
    }
  }

  const std::pair<Shape, Ratio> resize_cases[] = {{{1, 3, 3}, {2, 1}}, {{2, 4, 5}, {3, 2}}, {{2, 6, 4}, {1, 2}}};
  for (const auto& [s, r] : resize_cases) {
    check("bilinear_resize", shape_text(s) + " x" + std::to_string(r.num) + "/" + std::to_string(r.den),
          {{"x", random_tensor(rng, s)}},
          [r](ad::Tape<D>&, const std::vector<DVar>& v) { return ad::bilinear_resize(v[0], r); });
  }

  const std::pair<Shape, std::size_t> shuffle_cases[] = {{{4, 2, 3}, 2}, {{8, 3, 3}, 2}, {{9, 2, 2}, 3}};
  for (const auto& [s, r] : shuffle_cases) {
    check("pixel_shuffle", shape_text(s) + " r" + std::to_string(r), {{"x", random_tensor(rng, s)}},
          [r](ad::Tape<D>&, const std::vector<DVar>& v) { return ad::pixel_shuffle(v[0], r); });
  }

  const Shape warp_shapes[] = {{2, 6, 6}, {1, 5, 7}, {3, 4, 4}};
  for (const auto& s : warp_shapes) {
    BasicFlowField<D> flow(random_tensor(rng, {2, s[1], s[2]}, -2.5, 2.5));
    check("backward_warp", shape_text(s), {{"x", random_tensor(rng, s)}},
          [flow](ad::Tape<D>&, const std::vector<DVar>& v) { return ad::backward_warp(v[0], flow); });
  }

  const std::size_t rb_channels[] = {1, 2, 3};
  for (std::size_t c : rb_channels) {
    const Shape s{c, 4, 5};
    check("residual_block", shape_text(s),
          {{"x", random_tensor(rng, s)},
           {"w1", random_tensor(rng, {c, c, 3, 3})},
           {"b1", random_tensor(rng, {c})},
           {"w2", random_tensor(rng, {c, c, 3, 3})},
           {"b2", random_tensor(rng, {c})}},
          [](ad::Tape<D>&, const std::vector<DVar>& v) {
            ResBlock<DVar> block{{v[1], v[2]}, {v[3], v[4]}};
            return residual_block(v[0], block, ConvSpec{Padding::kZero, 1, -1});
          });
  }

  const std::pair<Shape, std::size_t> sca_cases[] = {{{2, 3, 3}, 5}, {{4, 2, 3}, 3}, {{1, 4, 4}, 2}};
  for (const auto& [s, n] : sca_cases) {
    ad::LeafList<D> leaves{{"q", random_tensor(rng, s)}};
    for (std::size_t i = 0; i < n; ++i) leaves.push_back({"k" + std::to_string(i), random_tensor(rng, s)});
    for (std::size_t i = 0; i < n; ++i) leaves.push_back({"v" + std::to_string(i), random_tensor(rng, s)});
    check("sca_aggregate", shape_text(s) + " N=" + std::to_string(n), leaves,
          [n](ad::Tape<D>&, const std::vector<DVar>& v) {
            std::vector<DVar> keys(v.begin() + 1, v.begin() + 1 + static_cast<std::ptrdiff_t>(n));
            std::vector<DVar> values(v.begin() + 1 + static_cast<std::ptrdiff_t>(n), v.end());
            return ad::sca_aggregate(v[0], keys, values).out;
          });
  }

  const Shape l1_shapes[] = {{1, 4, 4}, {3, 2, 5}, {2, 3, 3}};
  for (const auto& s : l1_shapes) {
    ad::LeafList<D> leaves{{"pred", random_tensor(rng, s)}, {"gt", random_tensor(rng, s)}};
    const std::string name = "l1_loss";
    auto report = ad::grad_check<D>(
        [](ad::Tape<D>&, const std::vector<DVar>& v) { return ad::l1_loss(v[0], v[1]); }, leaves, epsilon);
    out.push_back({name, shape_text(s), report});
  }

  const Shape leaky_shapes[] = {{2, 3, 3}, {1, 5, 4}, {4, 2, 2}};
  for (const auto& s : leaky_shapes) {
    check("leaky_relu", shape_text(s), {{"x", random_tensor(rng, s)}},
          [](ad::Tape<D>&, const std::vector<DVar>& v) { return ad::leaky_relu(v[0], 0.1); });
  }

  const Shape depthwise_shapes[] ={{2, 5, 5}, {1, 4, 6}, {3, 3, 3}};
  for (const auto& s : depthwise_shapes) {
    const DTensor kernel = random_tensor(rng, {3, 3}, 0.0, 0.3);
    check("depthwise_filter", shape_text(s), {{"x", random_tensor(rng, s)}},
          [kernel](ad::Tape<D>&, const std::vector<DVar>& v) { return ad::depthwise_filter(v[0], kernel); });
  }
  return out;
}

}  // namespace recvsr
