#pragma once

// Wall-clock breakdown of one recurrent step: pool construction, selective
// cross attention, the deep residual stack and the upsampler, against the
// complete step (flow estimation included).

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <vector>

#include "recvsr/engine.hpp"
#include "recvsr/rng.hpp"

namespace recvsr {

struct BenchConfig {
  std::size_t channels = 16;
  std::size_t size = 64;  // hidden-state side (LR resolution)
  std::size_t repeats = 7;
  std::uint64_t seed = 0;
};

struct BenchReport {
  double pool_ms = 0.0;
  double sca_ms = 0.0;
  double rb2_ms = 0.0;
  double up_ms = 0.0;
  double step_ms = 0.0;

  double pool_fraction() const { return pool_ms / step_ms; }
};

namespace detail {
template <class F>
double median_ms(std::size_t repeats, F&& fn) {
  std::vector<double> times;
  for (std::size_t i = 0; i < std::max<std::size_t>(repeats, 1); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}
}  // namespace detail

inline BenchReport run_bench(const BenchConfig& cfg) {
  ModelConfig mc;
  mc.channels = cfg.channels;
  const ModelWeights w = init_model<float>(mc, cfg.seed);
  const ConvSpec spec = mc.conv_spec();
  Rng rng = substream(cfg.seed, "bench/frames");
  std::vector<Tensor> frames;
  for (int i = 0; i < 2; ++i) {
    Tensor f = Tensor::chw(3, cfg.size, cfg.size);
    for (auto& v : f.data()) v = static_cast<float>(uniform(rng, 0.0, 1.0));
    frames.push_back(std::move(f));
  }

  // Reference tensors from a real first step.
  const auto first = step(initial_state(w, cfg.size, cfg.size), frames[0], w);
  const Tensor fs = extract_shallow(frames[1], w.params, w.config);
  const Tensor& h = first.state.hidden;
  const auto pool = pool_entries(h, w.bank);
  const Tensor fused = hsa_transform(h, fs, w.bank, w.params.sca, spec).hidden;
  const Tensor fd = deep_features(fused, fs, w.params, w.config);

  BenchReport r;
  volatile float sink = 0.0f;
  r.pool_ms = detail::median_ms(cfg.repeats, [&] { sink = pool_entries(h, w.bank).back()[0]; });
  r.sca_ms = detail::median_ms(cfg.repeats, [&] {
    const auto p = project_pool(pool, w.params.sca, spec);
    const Tensor q = make_query(fs, w.params.sca, spec);
    sink = sca_aggregate(q, p.keys, p.values).out[0];
  });
  r.rb2_ms = detail::median_ms(cfg.repeats, [&] { sink = deep_features(fused, fs, w.params, w.config)[0]; });
  r.up_ms = detail::median_ms(cfg.repeats, [&] { sink = reconstruct(fd, frames[1], w.params, w.config)[0]; });
  r.step_ms = detail::median_ms(cfg.repeats, [&] { sink = step(first.state, frames[1], w).output[0]; });
  (void)sink;
  return r;
}

}  // namespace recvsr
