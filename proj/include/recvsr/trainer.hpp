#pragma once

// L1 training of the recurrent model on paired clips, with temporal flip
// augmentation, Adam and an EMA shadow of the weights.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "recvsr/autodiff.hpp"
#include "recvsr/engine.hpp"
#include "recvsr/kv.hpp"
#include "recvsr/model.hpp"
#include "recvsr/parallel.hpp"
#include "recvsr/rng.hpp"
#include "recvsr/toy_data.hpp"

namespace recvsr {

// ---------------------------------------------------------------------------
// Metrics

inline double l1_loss(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred.shape(), gt.shape(), "l1_loss");
  if (pred.empty()) throw Error("l1_loss: empty tensors");
  return mean_abs_diff(pred, gt);
}

/// 10 log10(1 / MSE); identical inputs give +infinity.
inline double psnr(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred.shape(), gt.shape(), "psnr");
  if (pred.empty()) throw Error("psnr: empty tensors");
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - gt[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(pred.size()) / se);
}

inline double mean_psnr(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt) {
  if (pred.size() != gt.size() || pred.empty()) throw Error("mean_psnr: sequence length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += psnr(pred[i], gt[i]);
  return s / static_cast<double>(pred.size());
}

/// Reference upsampler: bilinear x scale of every LR frame, clamped.
inline std::vector<Tensor> bilinear_baseline(const std::vector<Tensor>& lr, std::size_t scale) {
  std::vector<Tensor> out;
  for (const auto& f : lr) {
    out.push_back(clamp(bilinear_resize(f, Ratio{static_cast<std::int64_t>(scale), 1}), 0.0f, 1.0f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

template <class T>
std::vector<T> temporal_flip(std::vector<T> frames) {
  std::reverse(frames.begin(), frames.end());
  return frames;
}

inline bool draw_flip(Rng& rng) { return uniform(rng, 0.0, 1.0) < 0.5; }

/// One of the eight square symmetries: bit 0 mirrors columns, bit 1 mirrors
/// rows, bit 2 transposes (applied last).
inline Tensor dihedral(const Tensor& x, unsigned code) {
  require_rank(x.shape(), 3, "dihedral");
  const std::size_t c = x.channels(), h = x.height(), w = x.width();
  const bool tr = code & 4u;
  Tensor out = tr ? Tensor::chw(c, w, h) : Tensor::chw(c, h, w);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t sy = (code & 2u) ? h - 1 - y : y;
        const std::size_t sx = (code & 1u) ? w - 1 - xx : xx;
        const float v = x.at(k, sy, sx);
        if (tr) {
          out.at(k, xx, y) = v;
        } else {
          out.at(k, y, xx) = v;
        }
      }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainingConfig {
  std::size_t iterations = 500;
  std::size_t batch = 1;
  double lr = 1e-4;
  std::size_t clip_length = 5;
  std::size_t patch = 16;  // LR patch side
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool hsa = true;
  FlowConfig flow{};
  ModelConfig model{};
  std::string data_dir;
  std::string out_dir;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  bool spatial_augment = false;      // random flips and transposes of each sample

  void validate() const {
    if (iterations == 0 || batch == 0 || clip_length == 0 || patch == 0) {
      throw Error("training config: iterations, batch, clip_length and patch must be positive");
    }
    if (!(lr >= 0.0)) throw Error("training config: lr must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw Error("training config: ema_decay must lie in [0, 1]");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
      throw Error("training config: invalid Adam hyper-parameters");
    }
    if (patch % model.scale != 0) {
      throw Error("training config: patch " + std::to_string(patch) + " not divisible by scale " +
                  std::to_string(model.scale));
    }
    model.validate();
  }

  static TrainingConfig from_kv(const KeyValues& kv) {
    TrainingConfig c;
    c.iterations = kv.get_as("iterations", c.iterations);
    c.batch = kv.get_as("batch", c.batch);
    c.lr = kv.get_as("lr", c.lr);
    c.clip_length = kv.get_as("clip_length", c.clip_length);
    c.patch = kv.get_as("patch", c.patch);
    c.ema_decay = kv.get_as("ema_decay", c.ema_decay);
    c.seed = kv.get_as("seed", c.seed);
    c.beta1 = kv.get_as("beta1", c.beta1);
    c.beta2 = kv.get_as("beta2", c.beta2);
    c.eps = kv.get_as("eps", c.eps);
    c.hsa = kv.get_as("hsa", c.hsa);
    c.flow.provider = parse_flow_provider(kv.get_as<std::string>("flow", "block"));
    c.flow.block = kv.get_as("flow_block", c.flow.block);
    c.flow.radius = kv.get_as("flow_radius", c.flow.radius);
    c.model.channels = kv.get_as("channels", c.model.channels);
    c.model.shallow_blocks = kv.get_as("shallow_blocks", c.model.shallow_blocks);
    c.model.deep_blocks = kv.get_as("deep_blocks", c.model.deep_blocks);
    c.model.scale = kv.get_as("scale", c.model.scale);
    const auto pad = kv.get_as<std::string>("padding", "replicate");
    if (pad == "zero") {
      c.model.padding = Padding::kZero;
    } else if (pad == "replicate") {
      c.model.padding = Padding::kReplicate;
    } else {
      throw Error("training config: unknown padding '" + pad + "'");
    }
    c.data_dir = kv.get_as<std::string>("data", "");
    c.out_dir = kv.get_as<std::string>("out", "");
    c.checkpoint_every = kv.get_as("checkpoint_every", c.checkpoint_every);
    c.spatial_augment = kv.get_as("spatial_augment", c.spatial_augment);
    c.validate();
    return c;
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("iterations", iterations);
    kv.set("batch", batch);
    kv.set("lr", lr);
    kv.set("clip_length", clip_length);
    kv.set("patch", patch);
    kv.set("ema_decay", ema_decay);
    kv.set("seed", std::to_string(seed));
    kv.set("beta1", beta1);
    kv.set("beta2", beta2);
    kv.set("eps", eps);
    kv.set("hsa", hsa);
    kv.set("flow", flow.provider == FlowProvider::kZero ? "zero" : "block");
    kv.set("flow_block", flow.block);
    kv.set("flow_radius", flow.radius);
    kv.set("channels", model.channels);
    kv.set("shallow_blocks", model.shallow_blocks);
    kv.set("deep_blocks", model.deep_blocks);
    kv.set("scale", model.scale);
    kv.set("padding", model.padding == Padding::kZero ? "zero" : "replicate");
    if (!data_dir.empty()) kv.set("data", data_dir);
    if (!out_dir.empty()) kv.set("out", out_dir);
    kv.set("checkpoint_every", checkpoint_every);
    kv.set("spatial_augment", spatial_augment);
    return kv;
  }
};

// ---------------------------------------------------------------------------
// Optimiser and EMA

using ParamSet = NetParams<Tensor>;

namespace detail {
inline void require_same_structure(const ParamSet& a, const ParamSet& b, const char* what) {
  const auto fa = a.flatten();
  const auto fb = b.flatten();
  if (fa.size() != fb.size()) throw Error(std::string(what) + ": parameter sets differ in size");
  for (std::size_t i = 0; i < fa.size(); ++i) {
    if (fa[i].first != fb[i].first) {
      throw Error(std::string(what) + ": parameter '" + fa[i].first + "' vs '" + fb[i].first + "'");
    }
    require_same_shape(fa[i].second->shape(), fb[i].second->shape(), fa[i].first.c_str());
  }
}
}  // namespace detail

/// shadow <- decay * shadow + (1 - decay) * weights, per element in double.
inline void ema_update(const ParamSet& weights, ParamSet& shadow, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw Error("ema_update: decay must lie in [0, 1]");
  detail::require_same_structure(weights, shadow, "ema_update");
  const auto fw = weights.flatten();
  auto fs = shadow.flatten();
  for (std::size_t i = 0; i < fw.size(); ++i) {
    const auto w = fw[i].second->data();
    auto s = fs[i].second->data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      s[j] = static_cast<float>(decay * s[j] + (1.0 - decay) * w[j]);
    }
  }
}

struct AdamConfig {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void step(ParamSet& params, const ad::GradientMap<float>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params.flatten()) {
      const auto it = grads.find(name);
      if (it == grads.end()) throw Error("adam: no gradient for '" + name + "'");
      require_same_shape(it->second.shape(), p->shape(), name.c_str());
      auto& m = moments_[name];
      if (m.first.empty()) m = {std::vector<double>(p->size()), std::vector<double>(p->size())};
      const auto g = it->second.data();
      auto x = p->data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        m.first[i] = cfg_.beta1 * m.first[i] + (1.0 - cfg_.beta1) * g[i];
        m.second[i] = cfg_.beta2 * m.second[i] + (1.0 - cfg_.beta2) * static_cast<double>(g[i]) * g[i];
        const double upd = cfg_.lr * (m.first[i] / c1) / (std::sqrt(m.second[i] / c2) + cfg_.eps);
        x[i] = static_cast<float>(static_cast<double>(x[i]) - upd);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>, std::less<>> moments_;
};

// ---------------------------------------------------------------------------
// Differentiable clip loss

/// Mean over frames of the L1 loss between the (unclamped) predictions and
/// the targets, with gradients for every model parameter.
struct ClipGradient {
  double loss = 0.0;
  ad::GradientMap<float> grads;
};

inline ClipGradient clip_gradient(const ModelWeights& w, const std::vector<Tensor>& lr,
                                  const std::vector<Tensor>& hr, const StepOptions& step_opt,
                                  const FlowConfig& flow_cfg) {
  if (lr.empty() || lr.size() != hr.size()) throw Error("clip_gradient: frame count mismatch");
  ad::Tape<float> tape;
  const auto p = w.params.map([&tape](const std::string& name, const Tensor& t) { return tape.leaf(name, t); });
  StepOptions opt = step_opt;
  opt.clamp_output = false;
  std::optional<ad::Var<float>> hidden;
  std::optional<ad::Var<float>> total;
  for (std::size_t t = 0; t < lr.size(); ++t) {
    const auto frame = tape.constant(lr[t]);
    const FlowField flow =
        t == 0 ? FlowField::zeros(lr[t].height(), lr[t].width()) : estimate_flow(lr[t - 1], lr[t], flow_cfg);
    auto parts = step_forward<ad::Var<float>>(p, w.config, w.bank, frame, hidden ? &*hidden : nullptr, flow, opt);
    const auto l = ad::l1_loss(parts.output, tape.constant(hr[t]));
    total = total ? ad::add(*total, l) : l;
    hidden = parts.hidden;
  }
  const auto loss = ad::scale(*total, 1.0f / static_cast<float>(lr.size()));
  ClipGradient r;
  r.loss = loss.value()[0];
  r.grads = tape.backward(loss);
  return r;
}

// ---------------------------------------------------------------------------
// Training loop

struct LossRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  ModelWeights weights;
  ModelWeights ema;
  std::vector<LossRecord> losses;
};

/// One training sample: a window of frames, spatially cropped, maybe flipped.
struct Sample {
  std::vector<Tensor> lr, hr;
};

inline Tensor crop(const Tensor& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  require_rank(x.shape(), 3, "crop");
  if (y0 + h > x.height() || x0 + w > x.width()) throw Error("crop: window outside " + to_string(x.shape()));
  Tensor out = Tensor::chw(x.channels(), h, w);
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out.at(c, y, xx) = x.at(c, y0 + y, x0 + xx);
  return out;
}

struct SampleStreams {
  Rng clip, crop, flip, spatial;

  explicit SampleStreams(std::uint64_t seed)
      : clip(substream(seed, "train/clip")),
        crop(substream(seed, "train/crop")),
        flip(substream(seed, "train/flip")),
        spatial(substream(seed, "train/spatial")) {}
};

inline Sample draw_sample(const std::vector<Clip>& data, const TrainingConfig& cfg, SampleStreams& s) {
  const auto& clip = data[static_cast<std::size_t>(uniform_int(s.clip, 0, static_cast<std::int64_t>(data.size()) - 1))];
  const std::size_t len = std::min(cfg.clip_length, clip.lr.size());
  const auto start = static_cast<std::size_t>(uniform_int(s.clip, 0, static_cast<std::int64_t>(clip.lr.size() - len)));
  const std::size_t h = clip.lr.front().height(), w = clip.lr.front().width();
  const std::size_t ph = std::min(cfg.patch, h), pw = std::min(cfg.patch, w);
  const auto y0 = static_cast<std::size_t>(uniform_int(s.crop, 0, static_cast<std::int64_t>(h - ph)));
  const auto x0 = static_cast<std::size_t>(uniform_int(s.crop, 0, static_cast<std::int64_t>(w - pw)));
  const std::size_t r = cfg.model.scale;
  Sample out;
  for (std::size_t t = start; t < start + len; ++t) {
    out.lr.push_back(crop(clip.lr[t], y0, x0, ph, pw));
    out.hr.push_back(crop(clip.hr[t], y0 * r, x0 * r, ph * r, pw * r));
  }
  if (draw_flip(s.flip)) {
    out.lr = temporal_flip(std::move(out.lr));
    out.hr = temporal_flip(std::move(out.hr));
  }
  if (cfg.spatial_augment) {
    const auto code = static_cast<unsigned>(uniform_int(s.spatial, 0, 7));
    for (auto& f : out.lr) f = dihedral(f, code);
    for (auto& f : out.hr) f = dihedral(f, code);
  }
  return out;
}

inline void check_dataset(const std::vector<Clip>& data, const ModelConfig& cfg) {
  if (data.empty()) throw Error("train: empty dataset");
  for (const auto& c : data) {
    if (c.lr.size() != c.hr.size() || c.lr.empty()) throw Error("train: clip " + c.id + " has unpaired frames");
    for (std::size_t i = 0; i < c.lr.size(); ++i) {
      require_same_shape(c.lr[i].shape(), c.lr.front().shape(), "train: clip frame shapes");
      const Shape expected{3, c.lr[i].height() * cfg.scale, c.lr[i].width() * cfg.scale};
      require_same_shape(c.hr[i].shape(), expected, ("train: clip " + c.id + " target").c_str());
    }
  }
}

using IterationCallback = std::function<void(const LossRecord&, const TrainResult&)>;

inline TrainResult train_stage1(const std::vector<Clip>& data, const TrainingConfig& cfg, const ModelWeights& w0,
                                const IterationCallback& on_iteration = nullptr) {
  cfg.validate();
  if (!(w0.config == cfg.model)) throw Error("train: model configuration differs from the training config");
  check_dataset(data, cfg.model);

  TrainResult r{w0, w0, {}};
  Adam adam({cfg.lr, cfg.beta1, cfg.beta2, cfg.eps});
  SampleStreams streams(cfg.seed);
  StepOptions step_opt;
  step_opt.hsa = cfg.hsa;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    std::vector<Sample> batch;
    for (std::size_t b = 0; b < cfg.batch; ++b) batch.push_back(draw_sample(data, cfg, streams));
    std::vector<ClipGradient> parts(batch.size());
    try {
      parallel_for(batch.size(), [&](std::size_t b) {
        parts[b] = clip_gradient(r.weights, batch[b].lr, batch[b].hr, step_opt, cfg.flow);
      });
    } catch (const Error& e) {
      throw Error("train: iteration " + std::to_string(it) + ": " + e.what());
    }

    // Fixed-order reduction over the batch.
    ad::GradientMap<float> grads = std::move(parts[0].grads);
    double loss = parts[0].loss;
    for (std::size_t b = 1; b < parts.size(); ++b) {
      loss += parts[b].loss;
      for (auto& [name, g] : grads) axpy(1.0f, parts[b].grads.at(name), g);
    }
    if (parts.size() > 1) {
      const float inv = 1.0f / static_cast<float>(parts.size());
      for (auto& [name, g] : grads) g = scale(g, inv);
      loss /= static_cast<double>(parts.size());
    }
    if (!std::isfinite(loss)) throw Error("train: non-finite loss at iteration " + std::to_string(it));
    for (const auto& [name, g] : grads) {
      if (!all_finite(g)) throw Error("train: non-finite gradient for '" + name + "' at iteration " + std::to_string(it));
    }

    adam.step(r.weights.params, grads);
    ema_update(r.weights.params, r.ema.params, cfg.ema_decay);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.losses.push_back({it, loss, secs});
    if (on_iteration) on_iteration(r.losses.back(), r);
  }
  return r;
}

/// Mean of the first and last `window` losses.
inline std::pair<double, double> smoothed_loss_ends(const std::vector<LossRecord>& losses, std::size_t window) {
  if (losses.empty()) throw Error("smoothed_loss_ends: empty curve");
  window = std::min(window, losses.size());
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < window; ++i) {
    first += losses[i].loss;
    last += losses[losses.size() - window + i].loss;
  }
  return {first / static_cast<double>(window), last / static_cast<double>(window)};
}

// ---------------------------------------------------------------------------
// Checkpoints

inline std::string loss_csv(const std::vector<LossRecord>& losses) {
  std::string s = "iteration,loss\n";
  for (const auto& l : losses) s += std::to_string(l.iteration) + "," + format_double(l.loss) + "\n";
  return s;
}

/// model.hst, model_ema.hst, loss.csv and manifest.txt in dir.
inline void save_checkpoint(const std::filesystem::path& dir, const TrainResult& r, const TrainingConfig& cfg) {
  std::filesystem::create_directories(dir);
  save_model(dir / "model.hst", r.weights);
  save_model(dir / "model_ema.hst", r.ema);
  atomic_write(dir / "loss.csv", loss_csv(r.losses));
  KeyValues m = cfg.to_kv();
  m.set("iteration", r.losses.empty() ? std::size_t{0} : r.losses.back().iteration);
  m.set("model", "model.hst");
  m.set("model_ema", "model_ema.hst");
  m.set("ema", true);
  m.set("bank_hash", r.weights.bank.fingerprint());
  m.set("model_hash", model_hash(r.weights));
  m.set("model_ema_hash", model_hash(r.ema));
  atomic_write(dir / "manifest.txt", m.to_string());
}

}  // namespace recvsr
