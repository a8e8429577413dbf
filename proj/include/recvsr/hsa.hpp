#pragma once

// Hidden State Attention.
//
// The incoming hidden state h is expanded into a pool of N filtered variants.
// A query is projected from the current frame's shallow features; keys and
// values are projected from every pool entry with one shared conv each. At
// every pixel p the N logits <Q(:,p), K_i(:,p)> / sqrt(C) are normalised with
// a softmax over the pool axis, and the new hidden state is the weighted sum
// of the values:
//
//   h_hat(:,p) = sum_i softmax_i(logits(p)) * V_i(:,p)
//
// Attention is strictly per-pixel; there is no spatial mixing beyond the
// 3x3 projections.

#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "recvsr/autodiff.hpp"
#include "recvsr/filter_bank.hpp"
#include "recvsr/layers.hpp"
#include "recvsr/ops.hpp"

namespace recvsr {

template <class V>
struct SCAWeights {
  ConvLayer<V> query;
  ConvLayer<V> key;
  ConvLayer<V> value;
};

/// Per-pixel pool weights, shape (N, H, W).
template <class T>
struct BasicAttentionMaps {
  BasicTensor<T> weights;
  std::vector<FilterMode> modes;

  std::size_t entries() const { return weights.channels(); }
};

using AttentionMaps = BasicAttentionMaps<float>;

template <class V>
V make_query(const V& fs, const SCAWeights<V>& w, const ConvSpec& spec = {}) {
  return apply_conv(w.query, fs, spec);
}

template <class V>
struct ProjectedPool {
  std::vector<V> keys;
  std::vector<V> values;
};

template <class V>
ProjectedPool<V> project_pool(const std::vector<V>& pool, const SCAWeights<V>& w,
                              const ConvSpec& spec = {}) {
  if (pool.empty()) throw Error("project_pool: empty pool");
  ProjectedPool<V> out;
  out.keys.reserve(pool.size());
  out.values.reserve(pool.size());
  for (const V& entry : pool) {
    out.keys.push_back(apply_conv(w.key, entry, spec));
    out.values.push_back(apply_conv(w.value, entry, spec));
  }
  return out;
}

template <class T>
struct ScaResult {
  BasicTensor<T> out;
  BasicTensor<T> maps;  // (N, H, W)
};

namespace detail {
template <class T>
void check_sca_shapes(const BasicTensor<T>& q, const std::vector<const BasicTensor<T>*>& keys,
                      const std::vector<const BasicTensor<T>*>& values) {
  require_rank(q.shape(), 3, "sca_aggregate query");
  if (keys.empty()) throw Error("sca_aggregate: empty pool");
  if (keys.size() != values.size()) {
    throw Error("sca_aggregate: " + std::to_string(keys.size()) + " keys but " +
                std::to_string(values.size()) + " values");
  }
  for (std::size_t i = 0; i < keys.size(); ++i) {
    require_same_shape(q.shape(), keys[i]->shape(), "sca_aggregate key");
    require_same_shape(q.shape(), values[i]->shape(), "sca_aggregate value");
  }
}

template <class T>
ScaResult<T> sca_forward(const BasicTensor<T>& q, const std::vector<const BasicTensor<T>*>& keys,
                         const std::vector<const BasicTensor<T>*>& values) {
  check_sca_shapes(q, keys, values);
  const std::size_t n = keys.size(), c = q.channels(), hw = q.plane_size();
  const T inv_sqrt_c = T{1} / std::sqrt(static_cast<T>(c));
  BasicTensor<T> logits = BasicTensor<T>::chw(n, q.height(), q.width());
  for (std::size_t i = 0; i < n; ++i) {
    T* l = &logits.at(i, 0, 0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* qs = &q.at(ch, 0, 0);
      const T* ks = &keys[i]->at(ch, 0, 0);
      for (std::size_t p = 0; p < hw; ++p) l[p] += qs[p] * ks[p];
    }
    for (std::size_t p = 0; p < hw; ++p) l[p] *= inv_sqrt_c;
  }
  ScaResult<T> r;
  r.maps = softmax_over_axis(logits, 0);
  r.out = BasicTensor<T>(q.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* wmap = &r.maps.at(i, 0, 0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* vs = &values[i]->at(ch, 0, 0);
      T* o = &r.out.at(ch, 0, 0);
      for (std::size_t p = 0; p < hw; ++p) o[p] += wmap[p] * vs[p];
    }
  }
  return r;
}

template <class T>
struct ScaGrads {
  BasicTensor<T> query;
  std::vector<BasicTensor<T>> keys;
  std::vector<BasicTensor<T>> values;
};

template <class T>
ScaGrads<T> sca_backward(const BasicTensor<T>& q, const std::vector<const BasicTensor<T>*>& keys,
                         const std::vector<const BasicTensor<T>*>& values,
                         const BasicTensor<T>& maps, const BasicTensor<T>& gout) {
  const std::size_t n = keys.size(), c = q.channels(), hw = q.plane_size();
  const T inv_sqrt_c = T{1} / std::sqrt(static_cast<T>(c));
  ScaGrads<T> g;
  // d loss / d weight_i(p) = <gout(:,p), V_i(:,p)>
  BasicTensor<T> gw(maps.shape());
  g.values.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    BasicTensor<T> gv(q.shape());
    const T* wmap = &maps.at(i, 0, 0);
    T* gws = &gw.at(i, 0, 0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* go = &gout.at(ch, 0, 0);
      const T* vs = &values[i]->at(ch, 0, 0);
      T* gvs = &gv.at(ch, 0, 0);
      for (std::size_t p = 0; p < hw; ++p) {
        gvs[p] = wmap[p] * go[p];
        gws[p] += go[p] * vs[p];
      }
    }
    g.values.push_back(std::move(gv));
  }
  BasicTensor<T> gl = softmax_backward(maps, gw, 0);
  g.query = BasicTensor<T>(q.shape());
  g.keys.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    BasicTensor<T> gk(q.shape());
    const T* gls = &gl.at(i, 0, 0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* qs = &q.at(ch, 0, 0);
      const T* ks = &keys[i]->at(ch, 0, 0);
      T* gqs = &g.query.at(ch, 0, 0);
      T* gks = &gk.at(ch, 0, 0);
      for (std::size_t p = 0; p < hw; ++p) {
        const T s = gls[p] * inv_sqrt_c;
        gqs[p] += s * ks[p];
        gks[p] = s * qs[p];
      }
    }
    g.keys.push_back(std::move(gk));
  }
  return g;
}

template <class T>
std::vector<const BasicTensor<T>*> pointers(const std::vector<BasicTensor<T>>& v) {
  std::vector<const BasicTensor<T>*> out;
  for (const auto& t : v) out.push_back(&t);
  return out;
}
}  // namespace detail

template <class T>
ScaResult<T> sca_aggregate(const BasicTensor<T>& q, const std::vector<BasicTensor<T>>& keys,
                           const std::vector<BasicTensor<T>>& values) {
  return detail::sca_forward(q, detail::pointers(keys), detail::pointers(values));
}

namespace ad {

template <class T>
struct VarScaResult {
  Var<T> out;
  BasicTensor<T> maps;
};

template <class T>
VarScaResult<T> sca_aggregate(const Var<T>& q, const std::vector<Var<T>>& keys,
                              const std::vector<Var<T>>& values) {
  Tape<T>* tape = q.tape();
  std::vector<std::size_t> parents{q.id()};
  std::vector<const BasicTensor<T>*> kp, vp;
  for (const auto& k : keys) {
    if (k.tape() != tape) throw Error("sca_aggregate: inputs belong to different tapes");
    parents.push_back(k.id());
    kp.push_back(&k.value());
  }
  for (const auto& v : values) {
    if (v.tape() != tape) throw Error("sca_aggregate: inputs belong to different tapes");
    parents.push_back(v.id());
    vp.push_back(&v.value());
  }
  auto fwd = recvsr::detail::sca_forward(q.value(), kp, vp);
  auto maps = std::make_shared<const BasicTensor<T>>(fwd.maps);
  const std::size_t n = keys.size();
  Var<T> out = tape->push(
      "sca_aggregate", parents, std::move(fwd.out),
      [parents, maps, n](Tape<T>& t, const BasicTensor<T>& g) {
        std::vector<const BasicTensor<T>*> ks, vs;
        for (std::size_t i = 0; i < n; ++i) {
          ks.push_back(&t.value(parents[1 + i]));
          vs.push_back(&t.value(parents[1 + n + i]));
        }
        auto grads = recvsr::detail::sca_backward(t.value(parents[0]), ks, vs, *maps, g);
        t.accumulate(parents[0], grads.query);
        for (std::size_t i = 0; i < n; ++i) {
          t.accumulate(parents[1 + i], grads.keys[i]);
          t.accumulate(parents[1 + n + i], grads.values[i]);
        }
      });
  return {out, *maps};
}

}  // namespace ad

/// Result of one HSA pass: the cleaned hidden state and the attention maps.
template <class V>
struct HsaOutput {
  V hidden;
  BasicAttentionMaps<typename V::value_type> maps;
};

template <class V>
HsaOutput<V> hsa_transform(const V& h, const V& fs, const FilterBank& bank, const SCAWeights<V>& w,
                           const ConvSpec& spec = {},
                           const std::optional<PoolOverride>& override_with = std::nullopt) {
  require_same_shape(value_of(h).shape(), value_of(fs).shape(), "hsa_transform");
  const auto pool = pool_entries(h, bank, override_with);
  const auto projected = project_pool(pool, w, spec);
  const V query = make_query(fs, w, spec);
  auto r = sca_aggregate(query, projected.keys, projected.values);
  return {r.out, {r.maps, bank.modes()}};
}

struct AttentionSummary {
  Tensor blurry_sum;  // (H, W)
  Tensor sharp_sum;   // (H, W)
  Tensor binary;      // (H, W), 1 where blurry_sum > sharp_sum
};

inline AttentionSummary summarize_attention(const AttentionMaps& maps, const FilterBank& bank) {
  const std::size_t n = maps.weights.channels();
  if (n != bank.size()) {
    throw Error("summarize_attention: " + std::to_string(n) + " maps but bank has " +
                std::to_string(bank.size()) + " kernels");
  }
  std::size_t blur = 0, sharp = 0;
  for (const auto& k : bank.kernels()) {
    blur += k.mode == FilterMode::kBlur;
    sharp += k.mode == FilterMode::kSharp;
  }
  if (blur == 0 || sharp == 0) {
    throw Error("summarize_attention: bank needs both blur and sharp kernels");
  }
  const std::size_t h = maps.weights.height(), w = maps.weights.width();
  AttentionSummary s{Tensor({h, w}), Tensor({h, w}), Tensor({h, w})};
  for (std::size_t i = 0; i < n; ++i) {
    const FilterMode mode = bank[i].mode;
    if (mode == FilterMode::kIdentity) continue;
    Tensor& target = mode == FilterMode::kBlur ? s.blurry_sum : s.sharp_sum;
    const auto plane = maps.weights.plane(i);
    for (std::size_t p = 0; p < h * w; ++p) target[p] += plane[p];
  }
  for (std::size_t p = 0; p < h * w; ++p) {
    s.binary[p] = s.blurry_sum[p] > s.sharp_sum[p] ? 1.0f : 0.0f;
  }
  return s;
}

}  // namespace recvsr
