// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
// Criteria 5-7 share the toy corpus and the model trained in criterion 5.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "recvsr/bench.hpp"
#include "recvsr/cli.hpp"
#include "recvsr/gradcheck_suite.hpp"

using namespace recvsr;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr double kTableTol = 1e-4;
constexpr double kUnitTol = 1e-6;
constexpr int kScaInputs = 1000;
constexpr int kOracleInstances = 100;
constexpr double kConvTol = 1e-5;
constexpr double kSoftmaxTol = 1e-6;
constexpr double kWarpTol = 1e-5;
constexpr double kDctTol = 1e-4;
constexpr double kScaPixelTol = 1e-5;
constexpr double kLossRatio = 0.5;
constexpr double kPsnrGainDb = 0.5;
constexpr double kTrainMinutes = 15.0;
constexpr std::size_t kSmoothWindow = 50;
constexpr double kPoolFraction = 0.25;
constexpr std::size_t kInjectStep = 3;
constexpr double kInjectNoise = 0.5;  // relative to the clean state's RMS

// Toy training run.
constexpr const char* kToyConfig =
    "iterations = 500\n"
    "channels = 16\n"
    "shallow_blocks = 2\n"
    "deep_blocks = 6\n"
    "hsa = true\n"
    "lr = 1e-3\n"
    "batch = 1\n"
    "patch = 16\n"
    "clip_length = 5\n"
    "ema_decay = 0.99\n"
    "spatial_augment = true\n"
    "seed = 0\n";

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

struct Context {
  fs::path work;
  std::vector<Tensor> val_lr;  // held-out clip after criterion 5
  std::optional<ModelWeights> trained;
};

int cli_run(std::vector<std::string> args) {
  args.insert(args.begin(), "recvsr");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) throw Error("recvsr " + args[1] + " failed: " + err.str());
  return code;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_grad_suite(0);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::map<std::string, std::size_t> shapes;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    ++shapes[c.primitive];
    if (c.report.max_rel_error >= worst) {
      worst = c.report.max_rel_error;
      worst_name = c.primitive + " " + c.shape;
    }
  }
  bool covered = true;
  for (const char* p : {"conv2d", "softmax", "bilinear_resize", "pixel_shuffle", "backward_warp", "residual_block",
                        "sca_aggregate", "l1_loss"}) {
    covered &= shapes[p] >= 3;
  }
  return {covered && worst < kGradTol && secs < kGradSeconds,
          std::to_string(cases.size()) + " cases, worst " + fmt("%.2e", worst) + " (" + worst_name + "), " +
              fmt("%.2f s", secs)};
}

Outcome filter_bank() {
  const FilterBank bank = default_bank();
  double table_err = 0.0;
  for (std::size_t i = 0; i < 9; ++i) {
    table_err = std::max(table_err, std::abs(bank[0].weights[i] - 1.0 / 9.0));
    table_err = std::max(table_err, std::abs(bank[2].weights[i] - PrintedKernels::gauss3_blur[i]));
    table_err = std::max(table_err, std::abs(bank[3].weights[i] - PrintedKernels::gauss3_sharp[i]));
  }
  const auto fixed = corrected_gauss5_sharp();
  for (std::size_t i = 0; i < 25; ++i) {
    table_err = std::max(table_err, std::abs(bank[1].weights[i] - 1.0 / 25.0));
    table_err = std::max(table_err, std::abs(bank[4].weights[i] - fixed[i]));
  }
  double printed_sum = 0.0;
  for (double v : PrintedKernels::gauss3_blur) printed_sum += v;
  double dc_err = 0.0;
  for (const auto& k : bank.kernels()) dc_err = std::max(dc_err, std::abs(k.dc_gain() - 1.0));

  const Tensor h = Tensor::chw(16, 9, 11, 0.37f);
  double fixed_err = 0.0;
  for (const auto& k : bank.kernels()) {
    const Tensor v = k.mode == FilterMode::kBlur ? blur_variant(h, k) : sharp_variant(h, k);
    fixed_err = std::max(fixed_err, max_abs_diff(v, h));
  }
  ModelConfig cfg;
  const auto model = init_model<float>(cfg, 1);
  std::mt19937_64 rng(2);
  const Tensor fs = oracle::random_tensor(rng, h.shape(), -2.0, 2.0);
  const auto hsa = hsa_transform(h, fs, bank, model.params.sca, ConvSpec{Padding::kReplicate, 1, -1});
  fixed_err = std::max(fixed_err, max_abs_diff(hsa.hidden, h));

  const bool pass = table_err <= kTableTol && std::abs(printed_sum - 1.0001) < 1e-12 && dc_err <= kUnitTol &&
                    fixed_err <= kUnitTol;
  return {pass, "table err " + fmt("%.1e", table_err) + ", printed 3x3 sum " + fmt("%.4f", printed_sum) +
                    ", DC err " + fmt("%.1e", dc_err) + ", fixed-point err " + fmt("%.1e", fixed_err)};
}

Outcome sca_properties() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  const FilterBank bank = default_bank();
  double sum_err = 0.0, mean_err = 0.0, sum_partition_err = 0.0;
  std::size_t convexity_violations = 0;
  for (int trial = 0; trial < kScaInputs; ++trial) {
    const std::size_t c = dim(rng), h = dim(rng), w = dim(rng), n = bank.size(), hw = h * w;
    const Tensor q = oracle::random_tensor(rng, {c, h, w}, -3.0, 3.0);
    std::vector<Tensor> keys, values;
    for (std::size_t i = 0; i < n; ++i) {
      keys.push_back(oracle::random_tensor(rng, {c, h, w}, -3.0, 3.0));
      values.push_back(oracle::random_tensor(rng, {c, h, w}));
    }
    const auto r = sca_aggregate(q, keys, values);
    for (std::size_t p = 0; p < hw; ++p) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += r.maps[i * hw + p];
      sum_err = std::max(sum_err, std::abs(s - 1.0));
      for (std::size_t ch = 0; ch < c; ++ch) {
        float lo = values[0][ch * hw + p], hi = lo;
        for (const auto& v : values) {
          lo = std::min(lo, v[ch * hw + p]);
          hi = std::max(hi, v[ch * hw + p]);
        }
        const float o = r.out[ch * hw + p];
        convexity_violations += o < lo - 1e-6f || o > hi + 1e-6f;
      }
    }
    const auto same = sca_aggregate(q, std::vector<Tensor>(n, keys[0]), values);
    for (std::size_t j = 0; j < same.out.size(); ++j) {
      double m = 0.0;
      for (const auto& v : values) m += v[j];
      mean_err = std::max(mean_err, std::abs(same.out[j] - m / static_cast<double>(n)));
    }
    const auto summary = summarize_attention(AttentionMaps{r.maps, bank.modes()}, bank);
    for (std::size_t p = 0; p < hw; ++p) {
      sum_partition_err = std::max(sum_partition_err, std::abs(summary.blurry_sum[p] + summary.sharp_sum[p] - 1.0));
    }
  }
  const bool pass = sum_err <= kUnitTol && mean_err <= kUnitTol && convexity_violations == 0 &&
                    sum_partition_err <= kUnitTol;
  return {pass, std::to_string(kScaInputs) + " inputs: weight-sum err " + fmt("%.1e", sum_err) + ", mean err " +
                    fmt("%.1e", mean_err) + ", convexity violations " + std::to_string(convexity_violations) +
                    ", blurry+sharp err " + fmt("%.1e", sum_partition_err)};
}

Outcome oracles() {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  double conv = 0.0, soft = 0.0, warp = 0.0, dct = 0.0, sca = 0.0;
  for (int i = 0; i < kOracleInstances; ++i) {
    const std::size_t c = dim(rng), o = dim(rng), k = 2 * (dim(rng) % 3) + 1;
    const std::size_t h = dim(rng) + k, w = dim(rng) + k, stride = 1 + (dim(rng) > 4);
    const bool replicate = dim(rng) > 3;
    const Tensor x = oracle::random_tensor(rng, {c, h, w});
    const Tensor kern = oracle::random_tensor(rng, {o, c, k, k});
    const Tensor bias = oracle::random_tensor(rng, {o});
    const std::vector<double> b(bias.data().begin(), bias.data().end());
    const ConvSpec spec{replicate ? Padding::kReplicate : Padding::kZero, stride, -1};
    conv = std::max(conv, oracle::max_abs_diff(oracle::conv2d(x, kern, b, stride, k / 2, replicate),
                                               conv2d(x, kern, &bias, spec)));

    const Tensor logits = oracle::random_tensor(rng, {dim(rng) + 1, dim(rng), dim(rng)}, -10.0, 10.0);
    soft = std::max(soft, oracle::max_abs_diff(oracle::softmax_axis0(logits), softmax_over_axis(logits, 0)));

    const Tensor img = oracle::random_tensor(rng, {dim(rng), h, w});
    const Tensor flow = oracle::random_tensor(rng, {2, h, w}, -3.0, 3.0);
    warp = std::max(warp, oracle::max_abs_diff(oracle::warp(img, flow), backward_warp(img, FlowField(flow))));

    Block8 block{};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : block) v = u(rng);
    const Block8 back = idct8x8(dct8x8(block));
    for (std::size_t j = 0; j < 64; ++j) dct = std::max(dct, std::abs(back[j] - block[j]));
    const Tensor frame = oracle::random_tensor(rng, {3, 8 * dim(rng), 8 * dim(rng)}, 0.0, 1.0);
    dct = std::max(dct, max_abs_diff(compress_standin(frame, 18 + static_cast<int>(dim(rng)), {false}), frame));

    const std::size_t sc = dim(rng), sn = dim(rng);
    const Tensor q = oracle::random_tensor(rng, {sc, 1, 1}, -2.0, 2.0);
    std::vector<Tensor> keys, values;
    std::vector<std::vector<double>> ks, vs;
    for (std::size_t j = 0; j < sn; ++j) {
      keys.push_back(oracle::random_tensor(rng, {sc, 1, 1}, -2.0, 2.0));
      values.push_back(oracle::random_tensor(rng, {sc, 1, 1}));
      ks.emplace_back(keys.back().data().begin(), keys.back().data().end());
      vs.emplace_back(values.back().data().begin(), values.back().data().end());
    }
    const auto ref = oracle::sca_pixel(std::vector<double>(q.data().begin(), q.data().end()), ks, vs);
    const auto got = sca_aggregate(q, keys, values);
    for (std::size_t j = 0; j < sn; ++j) sca = std::max(sca, std::abs(got.maps[j] - ref.weights[j]));
    for (std::size_t j = 0; j < sc; ++j) sca = std::max(sca, std::abs(got.out[j] - ref.out[j]));
  }
  const bool pass = conv <= kConvTol && soft <= kSoftmaxTol && warp <= kWarpTol && dct <= kDctTol && sca <= kScaPixelTol;
  return {pass, std::to_string(kOracleInstances) + " each: conv2d " + fmt("%.1e", conv) + ", softmax " +
                    fmt("%.1e", soft) + ", warp " + fmt("%.1e", warp) + ", dct " + fmt("%.1e", dct) + ", sca " +
                    fmt("%.1e", sca)};
}

Outcome toy_training(Context& ctx) {
  const fs::path toy = ctx.work / "toy", ckpt = ctx.work / "ckpt", cfg = ctx.work / "toy.cfg";
  const auto t0 = std::chrono::steady_clock::now();
  cli_run({"make-toy-data", "--out", toy.string(), "--train-clips", "8", "--val-clips", "1", "--frames", "5",
           "--lr-size", "16", "--scale", "4", "--force"});
  atomic_write(cfg, kToyConfig);
  cli_run({"train", "--config", cfg.string(), "--data", toy.string(), "--out", ckpt.string(), "--log-every", "0",
           "--force"});
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;

  std::vector<LossRecord> losses;
  {
    std::ifstream is(ckpt / "loss.csv");
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      const auto comma = line.find(',');
      losses.push_back({std::stoul(line.substr(0, comma)), std::stod(line.substr(comma + 1)), 0.0});
    }
  }
  const auto [first, last] = smoothed_loss_ends(losses, kSmoothWindow);
  const auto eval = KeyValues::load(ckpt / "eval.txt");
  const double base = eval.require_as<double>("clip_000.bilinear_psnr");
  const double ema = eval.require_as<double>("clip_000.ema_psnr");
  ctx.trained = load_model(ckpt / "model_ema.hst");
  ctx.val_lr = load_clips(toy / "val").front().lr;

  const bool pass = last <= kLossRatio * first && ema - base >= kPsnrGainDb && minutes <= kTrainMinutes;
  return {pass, "smoothed L1 " + fmt("%.4f", first) + " -> " + fmt("%.4f", last) + " (x" + fmt("%.2f", last / first) +
                    "), held-out PSNR " + fmt("%.2f", ema) + " dB vs bilinear " + fmt("%.2f", base) + " dB (" +
                    fmt("%+.2f", ema - base) + "), " + fmt("%.1f min", minutes)};
}

std::string bytes_of(const std::vector<Tensor>& frames) {
  std::string s;
  for (const auto& f : frames) s += encode_hst(f);
  return s;
}

Outcome lab_plumbing(const Context& ctx) {
  if (!ctx.trained) return {false, "no trained model (criterion 5 did not produce one)"};
  const ModelWeights& w = *ctx.trained;
  const auto& frames = ctx.val_lr;
  bool self_ok = true, zero_ok = true, first_ok = true;
  for (TraceKind kind : {TraceKind::kPostHsa, TraceKind::kPostWarp}) {
    RunOptions opt;
    opt.record_trace = true;
    opt.trace_kind = kind;
    const auto plain = run_sequence(frames, w, opt);
    const auto combined = run_combine(frames, w, *plain.trace);
    HiddenTrace zero = *plain.trace;
    for (auto& s : zero.states) s = Tensor(s.shape(), 0.0f);
    const auto zeroed = run_combine(frames, w, zero);
    const auto ablated = ablate_zero_hidden(frames, w);
    self_ok &= bytes_of(combined) == bytes_of(plain.outputs);
    if (kind == TraceKind::kPostHsa) zero_ok &= bytes_of(zeroed) == bytes_of(ablated);
    first_ok &= encode_hst(plain.outputs[0]) == encode_hst(combined[0]) &&
                encode_hst(plain.outputs[0]) == encode_hst(ablated[0]);
  }
  const auto plain = run_sequence(frames, w).outputs;
  const auto ablated = ablate_zero_hidden(frames, w);
  std::string gaps;
  bool diverges = true;
  for (std::size_t t = 1; t < frames.size(); ++t) {
    const double gap = mean_abs_diff(plain[t], ablated[t]);
    diverges &= gap > 0.0;
    gaps += (t > 1 ? ", " : "") + fmt("%.2e", gap);
  }
  return {self_ok && zero_ok && first_ok && diverges,
          std::string("self-trace identical ") + (self_ok ? "yes" : "no") + ", zero-trace == ablation " +
              (zero_ok ? "yes" : "no") + ", frame 1 identical " + (first_ok ? "yes" : "no") +
              ", ablation L1 gap frames 2.. [" + gaps + "]"};
}

/// Mean L1 deviation over frames kInjectStep..L after adding the same noise
/// pattern to the state that enters step kInjectStep.
double injection_deviation(const ModelWeights& w, const std::vector<Tensor>& frames, RunOptions opt) {
  opt.record_trace = true;
  opt.trace_kind = TraceKind::kPostWarp;
  const auto clean = run_sequence(frames, w, opt);
  HiddenTrace trace = *clean.trace;
  Tensor& state = trace.states[kInjectStep - 1];
  double ms = 0.0;
  for (float v : state.data()) ms += static_cast<double>(v) * v;
  const double sigma = kInjectNoise * std::sqrt(ms / static_cast<double>(state.size()));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : state.data()) v += static_cast<float>(sigma * n(rng));
  const auto hit = inject_hidden(frames, w, trace, kInjectStep, opt);
  double dev = 0.0;
  for (std::size_t t = kInjectStep - 1; t < frames.size(); ++t) dev += mean_abs_diff(hit[t], clean.outputs[t]);
  return dev / static_cast<double>(frames.size() - kInjectStep + 1);
}

Outcome mitigation(const Context& ctx) {
  if (!ctx.trained) return {false, "no trained model (criterion 5 did not produce one)"};
  const ModelWeights& w = *ctx.trained;
  RunOptions on, off, blur, sharp;
  off.step.hsa = false;
  blur.step.pool_override = PoolOverride{FilterMode::kBlur, 0};
  sharp.step.pool_override = PoolOverride{FilterMode::kSharp, 0};
  const double d_on = injection_deviation(w, ctx.val_lr, on);
  const double d_off = injection_deviation(w, ctx.val_lr, off);
  const double d_blur = injection_deviation(w, ctx.val_lr, blur);
  const double d_sharp = injection_deviation(w, ctx.val_lr, sharp);
  return {d_on < d_off && d_blur < d_sharp, "L1 deviation HSA on " + fmt("%.4e", d_on) + " vs off " +
                                                fmt("%.4e", d_off) + "; all-blur " + fmt("%.4e", d_blur) +
                                                " vs all-sharp " + fmt("%.4e", d_sharp)};
}

Outcome bench() {
  BenchConfig cfg;
  cfg.channels = 16;
  cfg.size = 64;
  const BenchReport r = run_bench(cfg);
  return {r.pool_fraction() < kPoolFraction, "pool " + fmt("%.3f ms", r.pool_ms) + ", step " +
                                                 fmt("%.3f ms", r.step_ms) + ", fraction " +
                                                 fmt("%.3f", r.pool_fraction())};
}

Outcome degradation(const Context& ctx) {
  const fs::path root = ctx.work / "degrade";
  fs::remove_all(root);
  fs::create_directories(root / "hr");
  Rng content = substream(9, "acceptance/degrade");
  const auto hr = render_toy_clip(content, 5, 64);
  ClipManifest m{"replay", {1.2, 3.0, 4, 30, true, 99}, {}};
  for (std::size_t i = 0; i < hr.size(); ++i) {
    m.files.push_back(frame_file_name(i));
    write_frame(root / "hr" / m.files.back(), hr[i]);
  }
  degrade_directory(root / "hr", root / "a", m);
  const auto replay = ClipManifest::from_kv(KeyValues::load(root / "a" / "manifest.txt"));
  degrade_directory(root / "hr", root / "b", replay);
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  bool identical = slurp(root / "a" / "manifest.txt") == slurp(root / "b" / "manifest.txt");
  for (const auto& f : m.files) identical &= slurp(root / "a" / f) == slurp(root / "b" / f);

  std::vector<Tensor> gt;
  for (const auto& f : hr) gt.push_back(area_downsample(f, 4));
  DegradationParams p = m.params;
  bool monotone = true;
  double prev = std::numeric_limits<double>::infinity();
  std::string psnrs;
  for (int crf : {18, 24, 30, 35}) {
    p.crf = crf;
    const double q = mean_psnr(degrade_sequence(hr, p), gt);
    monotone &= q <= prev;
    prev = q;
    psnrs += (crf > 18 ? ", " : "") + fmt("%.3f", q);
  }
  return {identical && monotone, std::string("replay identical ") + (identical ? "yes" : "no") +
                                     ", PSNR over crf 18/24/30/35 [" + psnrs + "] dB"};
}

}  // namespace

int main(int argc, char** argv) {
  Context ctx{fs::path("acceptance_work"), {}, std::nullopt};
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--work") ctx.work = argv[i + 1];
  }
  fs::create_directories(ctx.work);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, gradients},
      {2, filter_bank},
      {3, sca_properties},
      {4, oracles},
      {5, [&] { return toy_training(ctx); }},
      {6, [&] { return lab_plumbing(ctx); }},
      {7, [&] { return mitigation(ctx); }},
      {8, bench},
      {9, [&] { return degradation(ctx); }},
  };
  int failures = 0;
  for (const auto& [id, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
