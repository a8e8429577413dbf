// Randomised invariants across modules. Each property runs on many seeded
// instances so failures are reproducible from the printed trial number.

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "recvsr/degradation.hpp"
#include "recvsr/engine.hpp"
#include "recvsr/hst.hpp"
#include "recvsr/kv.hpp"

using namespace recvsr;

namespace {

constexpr int kTrials = 50;

std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor lincomb(float a, const Tensor& x, float b, const Tensor& y) { return add(scale(x, a), scale(y, b)); }

std::pair<float, float> range_of(const Tensor& t) {
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  return {*lo, *hi};
}

}  // namespace

TEST(ConvProperty, LinearInInputForBothPaddings) {
  std::mt19937_64 rng(100);
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t c = dim(rng, 1, 3), h = dim(rng, 3, 7), w = dim(rng, 3, 7), k = 2 * dim(rng, 0, 2) + 1;
    const Tensor x = oracle::random_tensor(rng, {c, h, w}), y = oracle::random_tensor(rng, {c, h, w});
    const Tensor kern = oracle::random_tensor(rng, {2, c, k, k});
    for (Padding pad : {Padding::kZero, Padding::kReplicate}) {
      const ConvSpec spec{pad, 1, -1};
      const Tensor lhs = conv2d(lincomb(0.7f, x, -1.3f, y), kern, spec);
      const Tensor rhs = lincomb(0.7f, conv2d(x, kern, spec), -1.3f, conv2d(y, kern, spec));
      EXPECT_LT(max_abs_diff(lhs, rhs), 1e-4) << "trial " << trial;
    }
  }
}

TEST(ConvProperty, CommutesWithTranslationAwayFromBorders) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < kTrials; ++trial) {
    const Tensor x = oracle::random_tensor(rng, {2, 10, 10});
    const Tensor kern = oracle::random_tensor(rng, {1, 2, 3, 3});
    Tensor shifted = Tensor::chw(2, 10, 10);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t y = 1; y < 10; ++y)
        for (std::size_t xx = 1; xx < 10; ++xx) shifted.at(c, y, xx) = x.at(c, y - 1, xx - 1);
    const Tensor a = conv2d(x, kern), b = conv2d(shifted, kern);
    for (std::size_t y = 2; y < 9; ++y)
      for (std::size_t xx = 2; xx < 9; ++xx) EXPECT_NEAR(b.at(0, y, xx), a.at(0, y - 1, xx - 1), 1e-5);
  }
}

TEST(SoftmaxProperty, ShiftInvariantNormalisedAndMonotone) {
  std::mt19937_64 rng(102);
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t n = dim(rng, 2, 6), h = dim(rng, 1, 4), w = dim(rng, 1, 4);
    const Tensor x = oracle::random_tensor(rng, {n, h, w}, -8.0, 8.0);
    const float shift = std::uniform_real_distribution<float>(-50.0f, 50.0f)(rng);
    const Tensor s = softmax_over_axis(x, 0);
    EXPECT_LT(max_abs_diff(s, softmax_over_axis(map(x, [&](float v) { return v + shift; }), 0)), 1e-6);
    for (std::size_t p = 0; p < h * w; ++p) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        total += s[i * h * w + p];
        for (std::size_t j = 0; j < n; ++j) {
          if (x[i * h * w + p] < x[j * h * w + p]) {
            EXPECT_LE(s[i * h * w + p], s[j * h * w + p]);
          }
        }
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(ResizeProperty, StaysWithinInputRangeAndIsLinear) {
  std::mt19937_64 rng(103);
  for (int trial = 0; trial < kTrials; ++trial) {
    const Tensor x = oracle::random_tensor(rng, {2, dim(rng, 1, 6), dim(rng, 1, 6)});
    const Tensor y = oracle::random_tensor(rng, x.shape());
    const std::size_t oh = dim(rng, 1, 20), ow = dim(rng, 1, 20);
    const Tensor r = bilinear_resize_to(x, oh, ow);
    const auto [lo, hi] = range_of(x);
    const auto [rlo, rhi] = range_of(r);
    EXPECT_GE(rlo, lo - 1e-6f);
    EXPECT_LE(rhi, hi + 1e-6f);
    EXPECT_LT(max_abs_diff(bilinear_resize_to(lincomb(2.0f, x, 0.5f, y), oh, ow),
                           lincomb(2.0f, r, 0.5f, bilinear_resize_to(y, oh, ow))),
              1e-5);
  }
}

TEST(ShuffleProperty, UnshuffleInvertsAndPreservesValues) {
  std::mt19937_64 rng(104);
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t r = dim(rng, 1, 4);
    const Tensor x = oracle::random_tensor(rng, {dim(rng, 1, 3) * r * r, dim(rng, 1, 5), dim(rng, 1, 5)});
    const Tensor y = pixel_shuffle(x, r);
    EXPECT_EQ(pixel_unshuffle(y, r), x);
    std::vector<float> a(x.data().begin(), x.data().end()), b(y.data().begin(), y.data().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
}

TEST(WarpProperty, ConvexCombinationOfInputAndIntegerShift) {
  std::mt19937_64 rng(105);
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t h = dim(rng, 3, 8), w = dim(rng, 3, 8);
    const Tensor x = oracle::random_tensor(rng, {2, h, w});
    const FlowField flow(oracle::random_tensor(rng, {2, h, w}, -3.0, 3.0));
    const Tensor y = backward_warp(x, flow);
    for (std::size_t c = 0; c < 2; ++c) {
      const auto plane = x.plane(c);
      const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
      for (std::size_t i = 0; i < h * w; ++i) {
        EXPECT_GE(y[c * h * w + i], *lo - 1e-6f);
        EXPECT_LE(y[c * h * w + i], *hi + 1e-6f);
      }
    }
    const int dx = static_cast<int>(dim(rng, 0, 2)) - 1, dy = static_cast<int>(dim(rng, 0, 2)) - 1;
    Tensor f = Tensor::chw(2, h, w);
    for (std::size_t i = 0; i < h * w; ++i) {
      f[i] = static_cast<float>(dx);
      f[h * w + i] = static_cast<float>(dy);
    }
    const Tensor s = backward_warp(x, FlowField(f));
    for (std::size_t yy = 1; yy + 1 < h; ++yy)
      for (std::size_t xx = 1; xx + 1 < w; ++xx) EXPECT_EQ(s.at(1, yy, xx), x.at(1, yy + dy, xx + dx));
  }
}

TEST(FilterProperty, BlurAndSharpAverageToTheInput) {
  std::mt19937_64 rng(106);
  const FilterBank bank = default_bank();
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor h = oracle::random_tensor(rng, {3, dim(rng, 4, 9), dim(rng, 4, 9)});
    for (FilterKernel k : bank.kernels()) {
      k.mode = FilterMode::kBlur;
      FilterKernel s = k;
      s.mode = FilterMode::kSharp;
      const Tensor avg = scale(add(blur_variant(h, k), sharp_variant(h, s)), 0.5f);
      EXPECT_LT(max_abs_diff(avg, h), 1e-5) << k.name;
      if (std::all_of(k.weights.data().begin(), k.weights.data().end(), [](float v) { return v >= 0.0f; })) {
        const auto [lo, hi] = range_of(h);
        const auto [blo, bhi] = range_of(blur_variant(h, k));
        EXPECT_GE(blo, lo - 1e-5f) << k.name;
        EXPECT_LE(bhi, hi + 1e-5f) << k.name;
      }
    }
  }
}

TEST(ScaProperty, PermutingEntriesPermutesMapsOnly) {
  std::mt19937_64 rng(107);
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t n = dim(rng, 2, 6);
    const Tensor q = oracle::random_tensor(rng, {3, 3, 3}, -2.0, 2.0);
    std::vector<Tensor> keys, values;
    for (std::size_t i = 0; i < n; ++i) {
      keys.push_back(oracle::random_tensor(rng, {3, 3, 3}, -2.0, 2.0));
      values.push_back(oracle::random_tensor(rng, {3, 3, 3}));
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Tensor> pk, pv;
    for (std::size_t i : perm) {
      pk.push_back(keys[i]);
      pv.push_back(values[i]);
    }
    const auto a = sca_aggregate(q, keys, values), b = sca_aggregate(q, pk, pv);
    EXPECT_LT(max_abs_diff(a.out, b.out), 1e-6);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < 9; ++p) EXPECT_NEAR(b.maps[i * 9 + p], a.maps[perm[i] * 9 + p], 1e-6);
  }
}

TEST(ScaProperty, OutputIsLinearInValues) {
  std::mt19937_64 rng(108);
  for (int trial = 0; trial < kTrials; ++trial) {
    const Tensor q = oracle::random_tensor(rng, {2, 4, 4});
    std::vector<Tensor> keys, v1, v2, mix;
    for (int i = 0; i < 4; ++i) {
      keys.push_back(oracle::random_tensor(rng, {2, 4, 4}));
      v1.push_back(oracle::random_tensor(rng, {2, 4, 4}));
      v2.push_back(oracle::random_tensor(rng, {2, 4, 4}));
      mix.push_back(lincomb(3.0f, v1.back(), -0.5f, v2.back()));
    }
    const Tensor lhs = sca_aggregate(q, keys, mix).out;
    const Tensor rhs = lincomb(3.0f, sca_aggregate(q, keys, v1).out, -0.5f, sca_aggregate(q, keys, v2).out);
    EXPECT_LT(max_abs_diff(lhs, rhs), 1e-5);
  }
}

TEST(DctProperty, OrthonormalPreservesEnergy) {
  std::mt19937_64 rng(109);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < kTrials; ++trial) {
    Block8 b{};
    for (auto& v : b) v = n(rng);
    const Block8 c = dct8x8(b);
    double eb = 0.0, ec = 0.0;
    for (std::size_t i = 0; i < 64; ++i) {
      eb += b[i] * b[i];
      ec += c[i] * c[i];
    }
    EXPECT_NEAR(eb, ec, 1e-10 * eb);
  }
}

TEST(DegradeProperty, ReplaysFromParametersAlone) {
  std::mt19937_64 rng(110);
  Rng draws = substream(110, "prop");
  for (int trial = 0; trial < 10; ++trial) {
    DegradationParams p = sample_params(draws, 2);
    p.seed = rng();
    const std::vector<Tensor> hr{oracle::random_tensor(rng, {3, 16, 16}, 0.0, 1.0),
                                 oracle::random_tensor(rng, {3, 16, 16}, 0.0, 1.0)};
    const auto a = degrade_sequence(hr, p);
    const auto b = degrade_sequence(hr, ClipManifest::from_kv(ClipManifest{"c", p, {}}.to_kv()).params);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(encode_hst(a[i]), encode_hst(b[i]));
  }
}

TEST(SerialisationProperty, HstAndKeyValuesRoundTripExactly) {
  std::mt19937_64 rng(111);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int trial = 0; trial < kTrials; ++trial) {
    Shape s;
    for (std::size_t r = dim(rng, 1, 4); r > 0; --r) s.push_back(dim(rng, 1, 4));
    const Tensor t = oracle::random_tensor(rng, s, -1e3, 1e3);
    std::istringstream is(encode_hst(t));
    EXPECT_EQ(read_hst(is), t);
    KeyValues kv;
    const double v = u(rng) * std::pow(10.0, static_cast<double>(dim(rng, 0, 20)) - 10.0);
    kv.set("v", v);
    EXPECT_EQ(KeyValues::parse(kv.to_string()).require_as<double>("v"), v);
  }
}

TEST(EngineProperty, OutputsAreCausal) {
  ModelConfig cfg;
  cfg.channels = 4;
  cfg.shallow_blocks = 1;
  cfg.deep_blocks = 1;
  ModelWeights m = init_model<float>(cfg, 112);
  std::mt19937_64 rng(112);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& [name, p] : m.params.flatten())
    for (auto& v : p->data()) v += static_cast<float>(n(rng));
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Tensor> frames;
    for (int i = 0; i < 4; ++i) frames.push_back(oracle::random_tensor(rng, {3, 6, 6}, 0.0, 1.0));
    const auto full = run_sequence(frames, m).outputs;
    frames[3] = oracle::random_tensor(rng, {3, 6, 6}, 0.0, 1.0);
    const auto changed = run_sequence(frames, m).outputs;
    for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(full[t], changed[t]);
    EXPECT_NE(full[3], changed[3]);
  }
}
