#pragma once

// Tape-based reverse-mode differentiation over the primitives in ops.hpp.
//
// A Tape owns every value computed during one forward pass. Each recorded
// node stores its value eagerly, the ids of its parents and a closure that
// pushes an upstream gradient to those parents. Parents always precede their
// children, so a single reverse sweep over the node list is a valid
// topological order.

#include <algorithm>
#include <deque>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "recvsr/ops.hpp"
#include "recvsr/tensor.hpp"

namespace recvsr::ad {

template <class T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <class T>
class Var {
 public:
  using value_type = T;

  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const BasicTensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
using GradientMap = std::map<std::string, BasicTensor<T>, std::less<>>;

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const BasicTensor<T>&)>;

  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    std::string op;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    std::string leaf_name;
    bool needs_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Named differentiable input; appears in the gradient map of backward().
  Var<T> leaf(std::string name, BasicTensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.op = "leaf";
    n.leaf_name = std::move(name);
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Input that never receives a gradient.
  Var<T> constant(BasicTensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.op = "constant";
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> push(std::string op, std::vector<std::size_t> parents, BasicTensor<T> value,
              BackwardFn backward) {
    check_finite(value, op);
    Node n;
    n.value = std::move(value);
    n.op = std::move(op);
    n.needs_grad = std::any_of(parents.begin(), parents.end(),
                               [this](std::size_t p) { return nodes_.at(p).needs_grad; });
    n.parents = std::move(parents);
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds g to the gradient slot of node id (no-op for constants).
  void accumulate(std::size_t id, const BasicTensor<T>& g) {
    Node& n = nodes_.at(id);
    if (!n.needs_grad) return;
    require_same_shape(n.value.shape(), g.shape(), "gradient accumulation");
    accumulate_into(n.grad, g);
  }

  /// Reverse sweep from a scalar loss. Unused leaves get zero gradients.
  GradientMap<T> backward(const Var<T>& loss) {
    if (loss.tape() != this) throw Error("backward: loss belongs to a different tape");
    const Node& root = nodes_.at(loss.id());
    if (root.value.size() != 1) {
      throw Error("backward: loss must be a scalar, got shape " + to_string(root.value.shape()));
    }
    for (auto& n : nodes_) n.grad = BasicTensor<T>();
    nodes_[loss.id()].grad = BasicTensor<T>(root.value.shape(), T{1});
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad);
    }
    GradientMap<T> out;
    for (const auto& n : nodes_) {
      if (n.op != "leaf") continue;
      out[n.leaf_name] = n.grad.empty() ? BasicTensor<T>(n.value.shape()) : n.grad;
    }
    return out;
  }

 private:
  std::deque<Node> nodes_;  // stable references across push_back
};

namespace detail {
template <class T>
Tape<T>* common_tape(std::initializer_list<const Var<T>*> vars) {
  Tape<T>* tape = nullptr;
  for (const Var<T>* v : vars) {
    if (!v->valid()) throw Error("autodiff: uninitialised variable");
    if (tape == nullptr) tape = v->tape();
    if (v->tape() != tape) throw Error("autodiff: inputs belong to different tapes");
  }
  return tape;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto* tape = detail::common_tape({&a, &b});
  const std::size_t ia = a.id(), ib = b.id();
  return tape->push("add", {ia, ib}, recvsr::add(a.value(), b.value()),
                    [ia, ib](Tape<T>& t, const BasicTensor<T>& g) {
                      t.accumulate(ia, g);
                      t.accumulate(ib, g);
                    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto* tape = detail::common_tape({&a, &b});
  const std::size_t ia = a.id(), ib = b.id();
  return tape->push("sub", {ia, ib}, recvsr::sub(a.value(), b.value()),
                    [ia, ib](Tape<T>& t, const BasicTensor<T>& g) {
                      t.accumulate(ia, g);
                      t.accumulate(ib, recvsr::scale(g, T{-1}));
                    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto* tape = detail::common_tape({&a, &b});
  const std::size_t ia = a.id(), ib = b.id();
  return tape->push("mul", {ia, ib}, recvsr::mul(a.value(), b.value()),
                    [ia, ib](Tape<T>& t, const BasicTensor<T>& g) {
                      if (t.needs_grad(ia)) t.accumulate(ia, recvsr::mul(g, t.value(ib)));
                      if (t.needs_grad(ib)) t.accumulate(ib, recvsr::mul(g, t.value(ia)));
                    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  auto* tape = detail::common_tape({&a});
  const std::size_t ia = a.id();
  return tape->push("scale", {ia}, recvsr::scale(a.value(), s),
                    [ia, s](Tape<T>& t, const BasicTensor<T>& g) {
                      t.accumulate(ia, recvsr::scale(g, s));
                    });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  auto* tape = detail::common_tape({&a});
  const std::size_t ia = a.id();
  return tape->push("relu", {ia}, recvsr::relu(a.value()),
                    [ia](Tape<T>& t, const BasicTensor<T>& g) {
                      const auto& x = t.value(ia);
                      BasicTensor<T> gx(g.shape());
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = x[i] > T{0} ? g[i] : T{0};
                      t.accumulate(ia, gx);
                    });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  auto* tape = detail::common_tape({&a});
  const std::size_t ia = a.id();
  return tape->push("leaky_relu", {ia}, recvsr::leaky_relu(a.value(), slope),
                    [ia, slope](Tape<T>& t, const BasicTensor<T>& g) {
                      const auto& x = t.value(ia);
                      BasicTensor<T> gx(g.shape());
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = x[i] > T{0} ? g[i] : slope * g[i];
                      t.accumulate(ia, gx);
                    });
}

/// Clamp with a pass-through gradient strictly inside (lo, hi).
template <class T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  auto* tape = detail::common_tape({&a});
  const std::size_t ia = a.id();
  return tape->push("clamp", {ia}, recvsr::clamp(a.value(), lo, hi),
                    [ia, lo, hi](Tape<T>& t, const BasicTensor<T>& g) {
                      const auto& x = t.value(ia);
                      BasicTensor<T> gx(g.shape());
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        gx[i] = (x[i] > lo && x[i] < hi) ? g[i] : T{0};
                      }
                      t.accumulate(ia, gx);
                    });
}

// ---------------------------------------------------------------------------
// Reductions and losses. Scalars are shape (1) tensors.

template <class T>
Var<T> sum(const Var<T>& a) {
  auto* tape = detail::common_tape({&a});
  const std::size_t ia = a.id();
  return tape->push("sum", {ia}, BasicTensor<T>({1}, recvsr::sum(a.value())),
                    [ia](Tape<T>& t, const BasicTensor<T>& g) {
                      t.accumulate(ia, BasicTensor<T>(t.value(ia).shape(), g[0]));
                    });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T{1} / n);
}

/// Mean absolute error. The subgradient at ties is zero.
template <class T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& gt) {
  auto* tape = detail::common_tape({&pred, &gt});
  require_same_shape(pred.shape(), gt.shape(), "l1_loss");
  const std::size_t ip = pred.id(), ig = gt.id();
  const auto& p = pred.value();
  const auto& q = gt.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(static_cast<double>(p[i]) - q[i]);
  const T n = static_cast<T>(p.size());
  return tape->push("l1_loss", {ip, ig}, BasicTensor<T>({1}, static_cast<T>(acc / static_cast<double>(p.size()))),
                    [ip, ig, n](Tape<T>& t, const BasicTensor<T>& g) {
                      const auto& p = t.value(ip);
                      const auto& q = t.value(ig);
                      BasicTensor<T> gp(p.shape());
                      for (std::size_t i = 0; i < p.size(); ++i) {
                        const T d = p[i] - q[i];
                        gp[i] = d > T{0} ? g[0] / n : (d < T{0} ? -g[0] / n : T{0});
                      }
                      if (t.needs_grad(ip)) t.accumulate(ip, gp);
                      if (t.needs_grad(ig)) t.accumulate(ig, recvsr::scale(gp, T{-1}));
                    });
}

// ---------------------------------------------------------------------------
// Structured primitives

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, const Var<T>& bias, const ConvSpec& spec = {}) {
  auto* tape = detail::common_tape({&x, &k, &bias});
  const std::size_t ix = x.id(), ik = k.id(), ib = bias.id();
  return tape->push("conv2d", {ix, ik, ib}, recvsr::conv2d(x.value(), k.value(), &bias.value(), spec),
                    [ix, ik, ib, spec](Tape<T>& t, const BasicTensor<T>& g) {
                      auto grads = conv2d_backward(t.value(ix), t.value(ik), g, spec);
                      t.accumulate(ix, grads.input);
                      t.accumulate(ik, grads.kernel);
                      t.accumulate(ib, grads.bias);
                    });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, const ConvSpec& spec = {}) {
  auto* tape = detail::common_tape({&x, &k});
  const std::size_t ix = x.id(), ik = k.id();
  return tape->push("conv2d", {ix, ik}, recvsr::conv2d(x.value(), k.value(), spec),
                    [ix, ik, spec](Tape<T>& t, const BasicTensor<T>& g) {
                      auto grads = conv2d_backward(t.value(ix), t.value(ik), g, spec);
                      t.accumulate(ix, grads.input);
                      t.accumulate(ik, grads.kernel);
                    });
}

/// Fixed-kernel depthwise filter; the kernel is a constant.
template <class T>
Var<T> depthwise_filter(const Var<T>& x, const BasicTensor<T>& kernel,
                        Padding padding = Padding::kReplicate) {
  auto* tape = detail::common_tape({&x});
  const std::size_t ix = x.id();
  return tape->push("depthwise_filter", {ix}, recvsr::depthwise_filter(x.value(), kernel, padding),
                    [ix, kernel, padding](Tape<T>& t, const BasicTensor<T>& g) {
                      t.accumulate(ix, depthwise_filter_backward(kernel, g, padding));
                    });
}

template <class T>
Var<T> softmax_over_axis(const Var<T>& x, std::size_t axis) {
  auto* tape = detail::common_tape({&x});
  const std::size_t ix = x.id();
  auto y = recvsr::softmax_over_axis(x.value(), axis);
  const std::size_t iy = tape->size();
  return tape->push("softmax", {ix}, std::move(y),
                    [ix, iy, axis](Tape<T>& t, const BasicTensor<T>& g) {
                      t.accumulate(ix, softmax_backward(t.value(iy), g, axis));
                    });
}

template <class T>
Var<T> bilinear_resize(const Var<T>& x, Ratio scale) {
  auto* tape = detail::common_tape({&x});
  const std::size_t ix = x.id();
  return tape->push("bilinear_resize", {ix}, recvsr::bilinear_resize(x.value(), scale),
                    [ix](Tape<T>& t, const BasicTensor<T>& g) {
                      t.accumulate(ix, bilinear_resize_backward(t.value(ix).shape(), g));
                    });
}

template <class T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t r) {
  auto* tape = detail::common_tape({&x});
  const std::size_t ix = x.id();
  return tape->push("pixel_shuffle", {ix}, recvsr::pixel_shuffle(x.value(), r),
                    [ix, r](Tape<T>& t, const BasicTensor<T>& g) {
                      t.accumulate(ix, pixel_unshuffle(g, r));
                    });
}

/// Warps x by a constant flow; differentiable with respect to x only.
template <class T>
Var<T> backward_warp(const Var<T>& x, const BasicFlowField<T>& flow) {
  auto* tape = detail::common_tape({&x});
  const std::size_t ix = x.id();
  return tape->push("backward_warp", {ix}, recvsr::backward_warp(x.value(), flow),
                    [ix, flow](Tape<T>& t, const BasicTensor<T>& g) {
                      t.accumulate(ix, backward_warp_backward(flow, g));
                    });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  auto* tape = detail::common_tape({&a, &b});
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t ca = a.value().channels(), cb = b.value().channels();
  return tape->push("concat_channels", {ia, ib}, recvsr::concat_channels(a.value(), b.value()),
                    [ia, ib, ca, cb](Tape<T>& t, const BasicTensor<T>& g) {
                      if (t.needs_grad(ia)) t.accumulate(ia, slice_channels(g, 0, ca));
                      if (t.needs_grad(ib)) t.accumulate(ib, slice_channels(g, ca, cb));
                    });
}

template <class T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  auto* tape = detail::common_tape({&x});
  const std::size_t ix = x.id();
  return tape->push("slice_channels", {ix}, recvsr::slice_channels(x.value(), begin, count),
                    [ix, begin, count](Tape<T>& t, const BasicTensor<T>& g) {
                      const auto& x = t.value(ix);
                      BasicTensor<T> gx(x.shape());
                      std::copy(g.data().begin(), g.data().end(),
                                gx.data().begin() + static_cast<std::ptrdiff_t>(begin * x.plane_size()));
                      t.accumulate(ix, gx);
                    });
}

// ---------------------------------------------------------------------------
// Name-based dispatch, for callers that describe graphs as data.

template <class T>
struct OpParams {
  ConvSpec conv{};
  std::size_t axis = 0;
  Ratio ratio{};
  std::size_t factor = 2;
  T scalar{1};
  T lo{0};
  T hi{1};
  Padding padding = Padding::kReplicate;
  std::size_t begin = 0;
  std::size_t count = 0;
  const BasicTensor<T>* kernel = nullptr;
  const BasicFlowField<T>* flow = nullptr;
};

template <class T>
Var<T> record(std::string_view op, std::span<const Var<T>> in, const OpParams<T>& p = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw Error("record: primitive '" + std::string(op) + "' expects " + std::to_string(n) +
                  " inputs, got " + std::to_string(in.size()));
    }
  };
  if (op == "add") { need(2); return add(in[0], in[1]); }
  if (op == "sub") { need(2); return sub(in[0], in[1]); }
  if (op == "mul") { need(2); return mul(in[0], in[1]); }
  if (op == "scale") { need(1); return scale(in[0], p.scalar); }
  if (op == "relu") { need(1); return relu(in[0]); }
  if (op == "leaky_relu") { need(1); return leaky_relu(in[0], p.scalar); }
  if (op == "clamp") { need(1); return clamp(in[0], p.lo, p.hi); }
  if (op == "sum") { need(1); return sum(in[0]); }
  if (op == "mean") { need(1); return mean(in[0]); }
  if (op == "l1_loss") { need(2); return l1_loss(in[0], in[1]); }
  if (op == "conv2d") {
    if (in.size() == 3) return conv2d(in[0], in[1], in[2], p.conv);
    need(2);
    return conv2d(in[0], in[1], p.conv);
  }
  if (op == "depthwise_filter") {
    need(1);
    if (p.kernel == nullptr) throw Error("record: depthwise_filter needs a kernel");
    return depthwise_filter(in[0], *p.kernel, p.padding);
  }
  if (op == "softmax") { need(1); return softmax_over_axis(in[0], p.axis); }
  if (op == "bilinear_resize") { need(1); return bilinear_resize(in[0], p.ratio); }
  if (op == "pixel_shuffle") { need(1); return pixel_shuffle(in[0], p.factor); }
  if (op == "backward_warp") {
    need(1);
    if (p.flow == nullptr) throw Error("record: backward_warp needs a flow field");
    return backward_warp(in[0], *p.flow);
  }
  if (op == "concat_channels") { need(2); return concat_channels(in[0], in[1]); }
  if (op == "slice_channels") { need(1); return slice_channels(in[0], p.begin, p.count); }
  throw Error("record: unknown primitive '" + std::string(op) + "'");
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_leaf;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

template <class T>
using LeafList = std::vector<std::pair<std::string, BasicTensor<T>>>;

/// Compares tape gradients with central differences of the same closure.
/// build(tape, leaves) must return a scalar loss Var.
template <class T, class Build>
GradCheckReport grad_check(Build&& build, const LeafList<T>& leaves, T epsilon) {
  auto evaluate = [&](const LeafList<T>& values) {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    vars.reserve(values.size());
    for (const auto& [name, v] : values) vars.push_back(tape.leaf(name, v));
    Var<T> loss = build(tape, vars);
    if (loss.value().size() != 1) throw Error("grad_check: closure must return a scalar");
    return static_cast<double>(loss.value()[0]);
  };

  GradientMap<T> analytic;
  {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    for (const auto& [name, v] : leaves) vars.push_back(tape.leaf(name, v));
    analytic = tape.backward(build(tape, vars));
  }

  GradCheckReport report;
  LeafList<T> probe = leaves;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    const auto& ga = analytic.at(leaves[l].first);
    for (std::size_t i = 0; i < leaves[l].second.size(); ++i) {
      const T orig = leaves[l].second[i];
      probe[l].second[i] = orig + epsilon;
      const double up = evaluate(probe);
      probe[l].second[i] = orig - epsilon;
      const double down = evaluate(probe);
      probe[l].second[i] = orig;
      const double numeric = (up - down) / (2.0 * static_cast<double>(epsilon));
      const double a = static_cast<double>(ga[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_leaf = leaves[l].first;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace recvsr::ad
