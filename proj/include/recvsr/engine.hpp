#pragma once

// Unidirectional recurrent super-resolution.
//
// For frame t with LR input X_t:
//   f_s   = RB1(conv_in(X_t))
//   h     = warp(f_d(t-1), flow(X_{t-1} -> X_t))      (zeros at t = 1)
//   h_hat = HSA(h, f_s)                                (optional)
//   f_d   = RB2(conv_fuse(concat(h_hat, f_s)))
//   Y_t   = clamp(UP(f_d) + bilinear_xr(X_t), 0, 1)
// and f_d becomes the hidden state propagated to t + 1. At t = 1 there is no
// propagated state, so the fusion input is zeros and HSA is not evaluated.
//
// The lab entry points (ablation, replay of stored states, injection, pool
// override) reuse the same step with per-step controls.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "recvsr/flow.hpp"
#include "recvsr/hsa.hpp"
#include "recvsr/hst.hpp"
#include "recvsr/kv.hpp"
#include "recvsr/layers.hpp"
#include "recvsr/model.hpp"

namespace recvsr {

// ---------------------------------------------------------------------------
// Network stages, generic over tensors and tape variables.

template <class V>
V extract_shallow(const V& frame, const NetParams<V>& p, const ModelConfig& cfg) {
  const auto& x = value_of(frame);
  if (x.rank() != 3 || x.channels() != 3) {
    throw Error("extract_shallow: expected a 3-channel frame, got " + to_string(x.shape()));
  }
  const ConvSpec spec = cfg.conv_spec();
  V f = apply_conv(p.feat_in, frame, spec);
  for (const auto& block : p.shallow) f = residual_block(f, block, spec);
  return f;
}

template <class V>
V deep_features(const V& fused_hidden, const V& fs, const NetParams<V>& p, const ModelConfig& cfg) {
  const ConvSpec spec = cfg.conv_spec();
  V f = apply_conv(p.fusion, concat_channels(fused_hidden, fs), spec);
  for (const auto& block : p.deep) f = residual_block(f, block, spec);
  return f;
}

inline constexpr double kUpsampleSlope = 0.1;

/// UP(f_d) without the bilinear base: (conv, pixel shuffle, leaky ReLU) per
/// stage, then a conv to 3 channels.
template <class V>
V upsample_features(const V& fd, const NetParams<V>& p, const ModelConfig& cfg) {
  const ConvSpec spec = cfg.conv_spec();
  const auto stages = cfg.upsample_stages();
  V x = fd;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    x = leaky_relu(pixel_shuffle(apply_conv(p.up[i], x, spec), stages[i]), static_cast<typename V::value_type>(kUpsampleSlope));
  }
  return apply_conv(p.out, x, spec);
}

template <class V>
V reconstruct(const V& fd, const V& frame, const NetParams<V>& p, const ModelConfig& cfg) {
  const Ratio r{static_cast<std::int64_t>(cfg.scale), 1};
  return add(upsample_features(fd, p, cfg), bilinear_resize(frame, r));
}

// ---------------------------------------------------------------------------
// One recurrent step

enum class TraceKind {
  kPostWarp,  // state entering HSA (after warping)
  kPostHsa,   // state entering fusion (after warping and HSA)
};

inline const char* to_string(TraceKind k) { return k == TraceKind::kPostWarp ? "post_warp" : "post_hsa"; }

inline TraceKind parse_trace_kind(std::string_view s) {
  if (s == "post_warp") return TraceKind::kPostWarp;
  if (s == "post_hsa") return TraceKind::kPostHsa;
  throw Error("unknown trace kind '" + std::string(s) + "'");
}

struct StepOptions {
  bool hsa = true;
  /// Apply HSA to the unwarped state and warp afterwards.
  bool hsa_before_warp = false;
  std::optional<PoolOverride> pool_override;
  bool clamp_output = true;
};

/// Per-step overrides used by the hidden-state experiments.
template <class V>
struct StepControl {
  bool zero_hidden = false;
  std::optional<V> replace_pre_hsa;
  std::optional<V> replace_fused;
};

template <class V>
struct StepParts {
  V output;
  V hidden;  // f_d, propagated to the next step
  V pre_hsa;
  V fused;
  std::optional<BasicAttentionMaps<typename V::value_type>> maps;
};

template <class V>
StepParts<V> step_forward(const NetParams<V>& p, const ModelConfig& cfg, const FilterBank& bank,
                          const V& frame, const V* incoming,
                          const BasicFlowField<typename V::value_type>& flow, const StepOptions& opt,
                          const StepControl<V>& ctl = {}) {
  using T = typename V::value_type;
  const V fs = extract_shallow(frame, p, cfg);
  const auto& fsv = value_of(fs);
  const V zeros = constant_like(fs, BasicTensor<T>(fsv.shape()));
  const ConvSpec spec = cfg.conv_spec();

  StepParts<V> parts;
  auto clean = [&](const V& h) {
    if (!opt.hsa) return h;
    auto r = hsa_transform(h, fs, bank, p.sca, spec, opt.pool_override);
    parts.maps = std::move(r.maps);
    return r.hidden;
  };
  auto warp = [&](const V& h) {
    const auto& hv = value_of(h);
    require_same_shape(hv.shape(), fsv.shape(), "recurrent hidden state");
    return backward_warp(h, resize_flow(flow, hv.height(), hv.width()));
  };

  if (incoming == nullptr) {
    parts.pre_hsa = zeros;
    parts.fused = zeros;
  } else if (!opt.hsa_before_warp) {
    parts.pre_hsa = ctl.replace_pre_hsa ? *ctl.replace_pre_hsa : warp(*incoming);
    parts.fused = clean(parts.pre_hsa);
  } else {
    require_same_shape(value_of(*incoming).shape(), fsv.shape(), "recurrent hidden state");
    parts.pre_hsa = ctl.replace_pre_hsa ? *ctl.replace_pre_hsa : *incoming;
    parts.fused = warp(clean(parts.pre_hsa));
  }
  if (ctl.zero_hidden) parts.fused = zeros;
  if (ctl.replace_fused) parts.fused = *ctl.replace_fused;
  require_same_shape(value_of(parts.fused).shape(), fsv.shape(), "fused hidden state");

  parts.hidden = deep_features(parts.fused, fs, p, cfg);
  V y = reconstruct(parts.hidden, frame, p, cfg);
  parts.output = opt.clamp_output ? clamp(y, T{0}, T{1}) : y;
  return parts;
}

// ---------------------------------------------------------------------------
// Tensor-level API

struct RecurrentState {
  std::optional<Tensor> prev_frame;
  Tensor hidden;
  std::size_t index = 0;  // frames processed so far
};

inline RecurrentState initial_state(const ModelWeights& w, std::size_t h, std::size_t width) {
  return {std::nullopt, Tensor::chw(w.config.channels, h, width), 0};
}

struct RunOptions {
  StepOptions step{};
  FlowConfig flow{};
  bool record_trace = false;
  TraceKind trace_kind = TraceKind::kPostHsa;
};

struct StepResult {
  Tensor output;
  RecurrentState state;
  std::optional<AttentionMaps> maps;
  Tensor pre_hsa;
  Tensor fused;
};

inline void check_frame(const Tensor& x) {
  if (x.rank() != 3 || x.channels() != 3) {
    throw Error("expected a 3xHxW frame, got " + to_string(x.shape()));
  }
  for (float v : x.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw Error("frame values must lie in [0, 1]");
  }
}

inline StepResult step(const RecurrentState& state, const Tensor& frame, const ModelWeights& w,
                       const RunOptions& opt = {}, const StepControl<Tensor>& ctl = {}) {
  check_frame(frame);
  const Tensor* incoming = nullptr;
  FlowField flow = FlowField::zeros(frame.height(), frame.width());
  if (state.index > 0) {
    if (!state.prev_frame) throw Error("step: state has no previous frame");
    require_same_shape(state.prev_frame->shape(), frame.shape(), "step: frame shape drift");
    const Shape expected{w.config.channels, frame.height(), frame.width()};
    require_same_shape(state.hidden.shape(), expected, "step: hidden state shape drift");
    flow = estimate_flow(*state.prev_frame, frame, opt.flow);
    incoming = &state.hidden;
  }
  auto parts = step_forward<Tensor>(w.params, w.config, w.bank, frame, incoming, flow, opt.step, ctl);
  check_finite(parts.output, "step output");
  return {std::move(parts.output), RecurrentState{frame, std::move(parts.hidden), state.index + 1},
          std::move(parts.maps), std::move(parts.pre_hsa), std::move(parts.fused)};
}

/// Stored per-step hidden states. Entry k (0-based) is the state consumed at
/// step k + 1; entry 0 is therefore the zero initial state.
struct HiddenTrace {
  std::vector<Tensor> states;
  TraceKind kind = TraceKind::kPostHsa;
  std::string model_hash;

  std::size_t size() const noexcept { return states.size(); }
};

struct RunResult {
  std::vector<Tensor> outputs;
  std::vector<std::optional<AttentionMaps>> maps;
  std::optional<HiddenTrace> trace;
};

using ControlFn = std::function<StepControl<Tensor>(std::size_t /*1-based step*/)>;

inline RunResult run_controlled(const std::vector<Tensor>& frames, const ModelWeights& w,
                                const RunOptions& opt, const ControlFn& control) {
  if (frames.empty()) throw Error("run_sequence: empty sequence");
  for (const auto& f : frames) require_same_shape(f.shape(), frames.front().shape(), "run_sequence frames");
  RunResult r;
  if (opt.record_trace) r.trace = HiddenTrace{{}, opt.trace_kind, model_hash(w)};
  RecurrentState state = initial_state(w, frames.front().height(), frames.front().width());
  for (std::size_t t = 1; t <= frames.size(); ++t) {
    auto s = step(state, frames[t - 1], w, opt, control ? control(t) : StepControl<Tensor>{});
    r.outputs.push_back(std::move(s.output));
    r.maps.push_back(std::move(s.maps));
    if (r.trace) r.trace->states.push_back(opt.trace_kind == TraceKind::kPostWarp ? s.pre_hsa : s.fused);
    state = std::move(s.state);
  }
  return r;
}

inline RunResult run_sequence(const std::vector<Tensor>& frames, const ModelWeights& w,
                              const RunOptions& opt = {}) {
  return run_controlled(frames, w, opt, nullptr);
}

/// Forces the fusion input to zeros at every step.
inline std::vector<Tensor> ablate_zero_hidden(const std::vector<Tensor>& frames, const ModelWeights& w,
                                              RunOptions opt = {}) {
  opt.record_trace = false;
  return run_controlled(frames, w, opt, [](std::size_t) {
           StepControl<Tensor> c;
           c.zero_hidden = true;
           return c;
         }).outputs;
}

namespace detail {
inline StepControl<Tensor> replace_with(const HiddenTrace& trace, std::size_t t) {
  StepControl<Tensor> c;
  if (trace.kind == TraceKind::kPostWarp) {
    c.replace_pre_hsa = trace.states[t - 1];
  } else {
    c.replace_fused = trace.states[t - 1];
  }
  return c;
}

inline void check_trace(const HiddenTrace& trace, const std::vector<Tensor>& frames, const ModelWeights& w) {
  if (trace.size() != frames.size()) {
    throw Error("trace has " + std::to_string(trace.size()) + " states but the sequence has " +
                std::to_string(frames.size()) + " frames");
  }
  if (frames.empty()) throw Error("empty sequence");
  const Shape expected{w.config.channels, frames.front().height(), frames.front().width()};
  for (const auto& s : trace.states) require_same_shape(s.shape(), expected, "trace state");
}
}  // namespace detail

/// Replays stored hidden states: from step 2 on, the model's own propagated
/// state is discarded and the trace entry for that step is used instead.
inline std::vector<Tensor> run_combine(const std::vector<Tensor>& frames, const ModelWeights& w,
                                       const HiddenTrace& trace, RunOptions opt = {}) {
  detail::check_trace(trace, frames, w);
  opt.record_trace = false;
  return run_controlled(frames, w, opt, [&trace](std::size_t t) {
           return t == 1 ? StepControl<Tensor>{} : detail::replace_with(trace, t);
         }).outputs;
}

/// Overwrites the incoming hidden state at a single step (2 <= t <= L).
inline std::vector<Tensor> inject_hidden(const std::vector<Tensor>& frames, const ModelWeights& w,
                                         const HiddenTrace& trace, std::size_t t_inject,
                                         RunOptions opt = {}) {
  detail::check_trace(trace, frames, w);
  if (t_inject < 2 || t_inject > frames.size()) {
    throw Error("inject_hidden: step " + std::to_string(t_inject) + " outside [2, " +
                std::to_string(frames.size()) + "]");
  }
  opt.record_trace = false;
  return run_controlled(frames, w, opt, [&trace, t_inject](std::size_t t) {
           return t == t_inject ? detail::replace_with(trace, t) : StepControl<Tensor>{};
         }).outputs;
}

/// Runs with every pool entry replaced by one chosen variant.
inline std::vector<Tensor> pool_override(const std::vector<Tensor>& frames, const ModelWeights& w,
                                         PoolOverride choice, RunOptions opt = {}) {
  w.bank.index_of(choice.mode, choice.kernel_index);
  opt.step.pool_override = choice;
  opt.record_trace = false;
  return run_sequence(frames, w, opt).outputs;
}

// ---------------------------------------------------------------------------
// Trace directories: h_000001.hst ... plus manifest.txt.

inline std::string trace_file_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "h_%06zu.hst", step);
  return buf;
}

inline void save_trace(const std::filesystem::path& dir, const HiddenTrace& trace) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < trace.size(); ++i) save_hst(dir / trace_file_name(i + 1), trace.states[i]);
  KeyValues m;
  m.set("model_hash", trace.model_hash);
  m.set("frames", trace.size());
  m.set("kind", to_string(trace.kind));
  if (!trace.states.empty()) {
    const auto& s = trace.states.front().shape();
    m.set("shape", std::to_string(s[0]) + " " + std::to_string(s[1]) + " " + std::to_string(s[2]));
  }
  atomic_write(dir / "manifest.txt", m.to_string());
}

inline HiddenTrace load_trace(const std::filesystem::path& dir) {
  const auto m = KeyValues::load(dir / "manifest.txt");
  HiddenTrace t;
  t.model_hash = m.get_as<std::string>("model_hash", "");
  t.kind = parse_trace_kind(m.require("kind"));
  const auto frames = m.require_as<std::size_t>("frames");
  for (std::size_t i = 1; i <= frames; ++i) t.states.push_back(load_hst(dir / trace_file_name(i)));
  return t;
}

}  // namespace recvsr
