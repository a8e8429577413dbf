#pragma once

// Command-line front end. dispatch() is callable in-process, which is how the
// acceptance suite drives the same code paths as the recvsr binary.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "recvsr/bench.hpp"
#include "recvsr/degradation.hpp"
#include "recvsr/engine.hpp"
#include "recvsr/gradcheck_suite.hpp"
#include "recvsr/image_io.hpp"
#include "recvsr/toy_data.hpp"
#include "recvsr/trainer.hpp"

namespace recvsr::cli {

namespace fs = std::filesystem;

/// Creates dir, refusing to reuse a non-empty one unless force is set.
inline void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw Error(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) {
      throw Error("refusing to overwrite non-empty " + dir.string() + " (pass --force)");
    }
  }
  fs::create_directories(dir);
}

inline std::vector<fs::path> list_frames(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("input directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("no .ppm frames in " + dir.string());
  return files;
}

inline std::vector<Tensor> read_frames(const std::vector<fs::path>& files) {
  std::vector<Tensor> frames;
  for (const auto& f : files) frames.push_back(read_frame(f));
  return frames;
}

inline void write_frames(const fs::path& dir, const std::vector<fs::path>& names, const std::vector<Tensor>& frames) {
  for (std::size_t i = 0; i < frames.size(); ++i) write_frame(dir / names[i].filename(), frames[i]);
}

/// Options shared by every command that runs the recurrent model.
struct ModelRunArgs {
  std::string model;
  std::string in;
  std::string out;
  bool no_hsa = false;
  bool hsa_before_warp = false;
  std::string flow = "block";
  bool force = false;

  void add_to(CLI::App& app) {
    app.add_option("--model", model, "model bundle (.hst)")->required();
    app.add_option("--in", in, "directory of input .ppm frames")->required();
    app.add_option("--out", out, "output directory")->required();
    app.add_flag("--no-hsa", no_hsa, "bypass hidden state attention");
    app.add_flag("--hsa-before-warp", hsa_before_warp, "apply attention before flow warping");
    app.add_option("--flow", flow, "flow provider: block or zero");
    app.add_flag("--force", force, "allow writing into a non-empty output directory");
  }

  RunOptions run_options() const {
    RunOptions o;
    o.step.hsa = !no_hsa;
    o.step.hsa_before_warp = hsa_before_warp;
    o.flow.provider = parse_flow_provider(flow);
    return o;
  }
};

inline void print_table_row(std::ostream& os, const std::string& a, const std::string& b, double v, bool ok) {
  os << std::left << std::setw(18) << a << std::setw(36) << b << std::scientific << std::setprecision(3) << v
     << (ok ? "  ok" : "  FAIL") << std::defaultfloat << "\n";
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Recurrent video super-resolution with hidden state attention"};
  app.require_subcommand(1);

  // make-toy-data
  ToyDataConfig toy;
  std::string toy_out;
  bool toy_force = false;
  auto* c_toy = app.add_subcommand("make-toy-data", "render the moving-shapes corpus");
  c_toy->add_option("--out", toy_out, "output root")->required();
  c_toy->add_option("--seed", toy.seed, "root seed");
  c_toy->add_option("--train-clips", toy.train_clips);
  c_toy->add_option("--val-clips", toy.val_clips);
  c_toy->add_option("--frames", toy.frames);
  c_toy->add_option("--lr-size", toy.lr_size);
  c_toy->add_option("--scale", toy.scale);
  c_toy->add_option("--max-sigma", toy.ranges.sigma_hi, "upper end of the blur range");
  c_toy->add_option("--max-delta", toy.ranges.delta_hi, "upper end of the noise range");
  c_toy->add_option("--max-crf", toy.ranges.crf_hi, "upper end of the compression range");
  c_toy->add_flag("--force", toy_force);

  // degrade
  std::string dg_in, dg_out, dg_manifest;
  std::uint64_t dg_seed = 0;
  std::optional<double> dg_sigma, dg_delta;
  std::optional<int> dg_crf;
  std::size_t dg_r = 4;
  bool dg_no_compress = false, dg_force = false;
  auto* c_deg = app.add_subcommand("degrade", "blur, noise, downsample and compress a clip");
  c_deg->add_option("--in", dg_in, "directory of high-resolution .ppm frames")->required();
  c_deg->add_option("--out", dg_out, "output directory")->required();
  c_deg->add_option("--seed", dg_seed, "seed for parameter sampling and noise");
  c_deg->add_option("--sigma", dg_sigma, "blur std-dev (pixels)");
  c_deg->add_option("--delta", dg_delta, "noise std-dev on the 0..255 scale");
  c_deg->add_option("--r", dg_r, "downsampling factor");
  c_deg->add_option("--crf", dg_crf, "compression level 18..35");
  c_deg->add_flag("--no-compress", dg_no_compress);
  c_deg->add_option("--manifest", dg_manifest, "replay an existing manifest");
  c_deg->add_flag("--force", dg_force);

  // train
  std::string tr_config, tr_data, tr_out, tr_init;
  std::optional<std::size_t> tr_iterations;
  std::optional<std::uint64_t> tr_seed;
  std::optional<double> tr_lr;
  std::size_t tr_log_every = 50;
  bool tr_force = false;
  auto* c_train = app.add_subcommand("train", "L1 training on paired clips");
  c_train->add_option("--config", tr_config, "key = value training config")->required();
  c_train->add_option("--data", tr_data, "dataset root (overrides config)");
  c_train->add_option("--out", tr_out, "checkpoint directory (overrides config)");
  c_train->add_option("--init", tr_init, "start from this model bundle");
  c_train->add_option("--iterations", tr_iterations);
  c_train->add_option("--seed", tr_seed);
  c_train->add_option("--lr", tr_lr);
  c_train->add_option("--log-every", tr_log_every);
  c_train->add_flag("--force", tr_force);

  // infer
  ModelRunArgs inf;
  std::string inf_trace_out, inf_trace_kind = "post_hsa";
  auto* c_inf = app.add_subcommand("infer", "super-resolve a directory of frames");
  inf.add_to(*c_inf);
  c_inf->add_option("--trace-out", inf_trace_out, "record hidden states into this directory");
  c_inf->add_option("--trace-kind", inf_trace_kind, "post_warp or post_hsa");

  // lab
  ModelRunArgs lab;
  bool lab_zero = false, lab_combine = false, lab_inject = false;
  std::string lab_trace, lab_pool;
  std::size_t lab_at = 0, lab_kernel = 0;
  auto* c_lab = app.add_subcommand("lab", "hidden-state experiments");
  lab.add_to(*c_lab);
  auto* o_zero = c_lab->add_flag("--zero-hidden", lab_zero, "force the hidden state to zero");
  auto* o_combine = c_lab->add_flag("--combine", lab_combine, "replay hidden states from --trace");
  auto* o_inject = c_lab->add_flag("--inject", lab_inject, "inject the --trace state at step --at");
  auto* o_pool = c_lab->add_option("--pool-override", lab_pool, "blur or sharp");
  c_lab->add_option("--trace", lab_trace, "trace directory");
  c_lab->add_option("--at", lab_at, "1-based injection step");
  c_lab->add_option("--kernel", lab_kernel, "kernel index within the override mode");
  o_zero->excludes(o_combine)->excludes(o_inject)->excludes(o_pool);
  o_combine->excludes(o_inject)->excludes(o_pool);
  o_inject->excludes(o_pool);

  // attention-dump
  ModelRunArgs ad_args;
  auto* c_att = app.add_subcommand("attention-dump", "write per-entry attention maps");
  ad_args.add_to(*c_att);

  // gradcheck
  std::uint64_t gc_seed = 0;
  double gc_eps = 1e-6, gc_tol = 1e-3;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference check of every primitive");
  c_gc->add_option("--seed", gc_seed);
  c_gc->add_option("--eps", gc_eps);
  c_gc->add_option("--tol", gc_tol);

  // bench
  BenchConfig bc;
  auto* c_bench = app.add_subcommand("bench", "per-stage timing of one recurrent step");
  c_bench->add_option("--channels", bc.channels);
  c_bench->add_option("--size", bc.size, "hidden-state side");
  c_bench->add_option("--repeats", bc.repeats);
  c_bench->add_option("--seed", bc.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 && e.get_exit_code() == 0 ? 0 : (code == 0 ? 2 : code);
  }

  try {
    if (*c_toy) {
      prepare_output_dir(toy_out, toy_force);
      make_toy_data(toy_out, toy);
      out << "wrote " << toy.train_clips << " train and " << toy.val_clips << " val clips to " << toy_out << "\n";
      return 0;
    }

    if (*c_deg) {
      ClipManifest m;
      if (!dg_manifest.empty()) {
        m = ClipManifest::from_kv(KeyValues::load(dg_manifest));
      } else {
        for (const auto& f : list_frames(dg_in)) m.files.push_back(f.filename().string());
        Rng rng = substream(dg_seed, "degrade/params");
        m.params = sample_params(rng, dg_r);
        if (dg_sigma) m.params.sigma = *dg_sigma;
        if (dg_delta) m.params.delta = *dg_delta;
        if (dg_crf) m.params.crf = *dg_crf;
        m.params.compress = !dg_no_compress;
        m.clip_id = fs::path(dg_in).filename().string();
      }
      if (m.params.compress && (m.params.crf < kCrfMin || m.params.crf > kCrfMax)) {
        throw Error("crf " + std::to_string(m.params.crf) + " outside [18, 35]");
      }
      prepare_output_dir(dg_out, dg_force);
      degrade_directory(dg_in, dg_out, m);
      out << "degraded " << m.files.size() << " frames (sigma " << m.params.sigma << ", delta " << m.params.delta
          << ", r " << m.params.r << ", crf " << m.params.crf << ")\n";
      return 0;
    }

    if (*c_train) {
      auto kv = KeyValues::load(tr_config);
      if (!tr_data.empty()) kv.set("data", tr_data);
      if (!tr_out.empty()) kv.set("out", tr_out);
      if (tr_iterations) kv.set("iterations", *tr_iterations);
      if (tr_seed) kv.set("seed", std::to_string(*tr_seed));
      if (tr_lr) kv.set("lr", *tr_lr);
      const TrainingConfig cfg = TrainingConfig::from_kv(kv);
      if (cfg.data_dir.empty() || cfg.out_dir.empty()) throw Error("train: data and out must be set");
      const fs::path root = cfg.data_dir;
      const auto data = load_clips(fs::is_directory(root / "train") ? root / "train" : root);
      prepare_output_dir(cfg.out_dir, tr_force);
      const ModelWeights w0 = tr_init.empty() ? init_model<float>(cfg.model, cfg.seed) : load_model(tr_init);
      auto result = train_stage1(data, cfg, w0, [&](const LossRecord& l, const TrainResult& r) {
        if (tr_log_every > 0 && (l.iteration % tr_log_every == 0 || l.iteration == 1)) {
          out << "iter " << l.iteration << "  loss " << l.loss << "  " << std::fixed << std::setprecision(1)
              << l.seconds << "s" << std::defaultfloat << std::endl;
        }
        if (cfg.checkpoint_every > 0 && l.iteration % cfg.checkpoint_every == 0) save_checkpoint(cfg.out_dir, r, cfg);
      });
      save_checkpoint(cfg.out_dir, result, cfg);
      if (fs::is_directory(root / "val")) {
        const auto val = load_clips(root / "val");
        KeyValues ev;
        for (const auto& clip : val) {
          const double base = mean_psnr(bilinear_baseline(clip.lr, cfg.model.scale), clip.hr);
          RunOptions ro;
          ro.step.hsa = cfg.hsa;
          ro.flow = cfg.flow;
          const double model = mean_psnr(run_sequence(clip.lr, result.weights, ro).outputs, clip.hr);
          const double ema = mean_psnr(run_sequence(clip.lr, result.ema, ro).outputs, clip.hr);
          ev.set(clip.id + ".bilinear_psnr", base);
          ev.set(clip.id + ".model_psnr", model);
          ev.set(clip.id + ".ema_psnr", ema);
          out << clip.id << ": bilinear " << base << " dB, model " << model << " dB, ema " << ema << " dB\n";
        }
        atomic_write(fs::path(cfg.out_dir) / "eval.txt", ev.to_string());
      }
      return 0;
    }

    if (*c_inf) {
      const auto files = list_frames(inf.in);
      const auto frames = read_frames(files);
      const ModelWeights w = load_model(inf.model);
      RunOptions opt = inf.run_options();
      opt.record_trace = !inf_trace_out.empty();
      opt.trace_kind = parse_trace_kind(inf_trace_kind);
      prepare_output_dir(inf.out, inf.force);
      if (opt.record_trace) prepare_output_dir(inf_trace_out, inf.force);
      const auto r = run_sequence(frames, w, opt);
      write_frames(inf.out, files, r.outputs);
      if (r.trace) save_trace(inf_trace_out, *r.trace);
      out << "wrote " << r.outputs.size() << " frames to " << inf.out << "\n";
      return 0;
    }

    if (*c_lab) {
      const int modes = lab_zero + lab_combine + lab_inject + !lab_pool.empty();
      if (modes != 1) throw Error("lab: choose exactly one of --zero-hidden, --combine, --inject, --pool-override");
      if ((lab_combine || lab_inject) && lab_trace.empty()) throw Error("lab: --trace is required");
      if (lab_inject && lab_at == 0) throw Error("lab: --inject needs --at");
      const auto files = list_frames(lab.in);
      const auto frames = read_frames(files);
      const ModelWeights w = load_model(lab.model);
      const RunOptions opt = lab.run_options();
      std::vector<Tensor> outputs;
      if (lab_zero) {
        outputs = ablate_zero_hidden(frames, w, opt);
      } else if (lab_combine) {
        outputs = run_combine(frames, w, load_trace(lab_trace), opt);
      } else if (lab_inject) {
        outputs = inject_hidden(frames, w, load_trace(lab_trace), lab_at, opt);
      } else {
        outputs = pool_override(frames, w, {parse_filter_mode(lab_pool), lab_kernel}, opt);
      }
      prepare_output_dir(lab.out, lab.force);
      write_frames(lab.out, files, outputs);
      out << "wrote " << outputs.size() << " frames to " << lab.out << "\n";
      return 0;
    }

    if (*c_att) {
      const auto files = list_frames(ad_args.in);
      const auto frames = read_frames(files);
      const ModelWeights w = load_model(ad_args.model);
      RunOptions opt = ad_args.run_options();
      if (!opt.step.hsa) throw Error("attention-dump: attention is disabled by --no-hsa");
      const auto r = run_sequence(frames, w, opt);
      prepare_output_dir(ad_args.out, ad_args.force);
      const fs::path dir = ad_args.out;
      std::size_t written = 0;
      for (std::size_t t = 0; t < frames.size(); ++t) {
        if (!r.maps[t]) continue;  // the first frame has no propagated state
        const auto& maps = *r.maps[t];
        const std::string stem = files[t].stem().string();
        const std::size_t h = maps.weights.height(), wd = maps.weights.width();
        for (std::size_t i = 0; i < maps.entries(); ++i) {
          Tensor plane({1, h, wd});
          std::copy(maps.weights.plane(i).begin(), maps.weights.plane(i).end(), plane.data().begin());
          char name[96];
          std::snprintf(name, sizeof name, "%s_map_%02zu_%s.pgm", stem.c_str(), i, to_string(w.bank[i].mode));
          save_image(dir / name, plane);
          ++written;
        }
        const auto s = summarize_attention(maps, w.bank);
        save_image(dir / (stem + "_blurry_sum.pgm"), s.blurry_sum.reshaped({1, h, wd}));
        save_image(dir / (stem + "_sharp_sum.pgm"), s.sharp_sum.reshaped({1, h, wd}));
        save_image(dir / (stem + "_binary.pgm"), s.binary.reshaped({1, h, wd}));
        save_hst(dir / (stem + "_maps.hst"), maps.weights);
        written += 3;
      }
      out << "wrote " << written << " attention images to " << ad_args.out << "\n";
      return 0;
    }

    if (*c_gc) {
      const auto cases = run_grad_suite(gc_seed, gc_eps);
      bool ok = true;
      for (const auto& c : cases) {
        const bool pass = c.report.max_rel_error < gc_tol;
        ok = ok && pass;
        print_table_row(out, c.primitive, c.shape, c.report.max_rel_error, pass);
      }
      out << (ok ? "all gradients within " : "gradient check FAILED, tolerance ") << gc_tol << "\n";
      return ok ? 0 : 1;
    }

    if (*c_bench) {
      const auto r = run_bench(bc);
      out << std::fixed << std::setprecision(3);
      out << "channels " << bc.channels << ", hidden " << bc.size << "x" << bc.size << ", threads "
          << thread_count() << "\n";
      out << "pool build    " << r.pool_ms << " ms\n";
      out << "sca           " << r.sca_ms << " ms\n";
      out << "rb2           " << r.rb2_ms << " ms\n";
      out << "up            " << r.up_ms << " ms\n";
      out << "full step     " << r.step_ms << " ms\n";
      out << "pool / step   " << 100.0 * r.pool_fraction() << " %\n" << std::defaultfloat;
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace recvsr::cli
