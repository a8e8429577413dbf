#pragma once

// Learnable building blocks shared by the recurrent network and HSA. Every
// function here is generic over the value type V, which is either a
// BasicTensor (plain inference) or an ad::Var (recorded on a tape).

#include "recvsr/autodiff.hpp"
#include "recvsr/ops.hpp"
#include "recvsr/tensor.hpp"

namespace recvsr {

template <class V>
struct ConvLayer {
  V weight;  // (O, C, K, K)
  V bias;    // (O)
};

template <class V>
struct ResBlock {
  ConvLayer<V> conv1;
  ConvLayer<V> conv2;
};

// Uniform conv call for both value types.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& k,
                      const BasicTensor<T>& bias, const ConvSpec& spec) {
  return conv2d<T>(x, k, &bias, spec);
}

template <class V>
V apply_conv(const ConvLayer<V>& layer, const V& x, const ConvSpec& spec) {
  return conv2d(x, layer.weight, layer.bias, spec);
}

/// conv -> ReLU -> conv with an identity skip.
template <class V>
V residual_block(const V& x, const ResBlock<V>& block, const ConvSpec& spec) {
  return add(x, apply_conv(block.conv2, relu(apply_conv(block.conv1, x, spec)), spec));
}

// Helpers to treat tensors and tape variables alike.

template <class T>
const BasicTensor<T>& value_of(const BasicTensor<T>& t) {
  return t;
}
template <class T>
const BasicTensor<T>& value_of(const ad::Var<T>& v) {
  return v.value();
}

template <class T>
BasicTensor<T> constant_like(const BasicTensor<T>&, BasicTensor<T> value) {
  return value;
}
template <class T>
ad::Var<T> constant_like(const ad::Var<T>& like, BasicTensor<T> value) {
  return like.tape()->constant(std::move(value));
}

}  // namespace recvsr
