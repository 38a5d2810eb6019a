#pragma once

// End-to-end drivers: dataset generation, codec pre-training, model training
// with resumable checkpoints, deterministic sampling, and evaluation. The CLI
// subcommands are thin wrappers around these.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "skc/config.hpp"
#include "skc/dataset.hpp"
#include "skc/diffusion.hpp"
#include "skc/dit.hpp"
#include "skc/metrics.hpp"
#include "skc/optim.hpp"

namespace skc::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Tensor <-> image adapters
// ---------------------------------------------------------------------------

inline TensorF add_batch_axis(const TensorF& t) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  TensorF out = TensorF::zeros(s);
  out.data() = t.data();
  return out;
}

inline std::vector<Image> decoded_to_images(const TensorF& frames) {
  // frames [1,3,M,H,W], clipped to [0,1]
  int64_t M = frames.dim(2), H = frames.dim(3), W = frames.dim(4);
  std::vector<Image> out;
  for (int64_t f = 0; f < M; ++f) {
    Image img(static_cast<int>(H), static_cast<int>(W), 3);
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
          img.at(static_cast<int>(c), static_cast<int>(y), static_cast<int>(x)) =
              std::clamp(frames.data()[((c * M + f) * H + y) * W + x], 0.0f, 1.0f);
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data generation
// ---------------------------------------------------------------------------

// Writes n_clips clip directories plus an index. The last data.image_clips
// clips are single-frame (image colorization samples); the rest are video.
inline void generate_dataset(const RunConfig& cfg, const fs::path& out_dir,
                             int64_t n_clips) {
  if (n_clips < 1) throw PreconditionError("need at least one clip");
  fs::create_directories(out_dir);
  Vocabulary vocab = Vocabulary::builtin();
  int64_t image_clips = std::min<int64_t>(cfg.get_int("data.image_clips"), n_clips);
  std::vector<std::string> names;
  for (int64_t i = 0; i < n_clips; ++i) {
    ClipParams params = cfg.clip_params();
    if (i >= n_clips - image_clips) params.frames = 1;
    ClipSample clip = gen_clip(Rng(cfg.seed()).child({0xda7a5e7, static_cast<uint64_t>(i)}).state(),
                               params, vocab);
    std::string name = "clip_" + dataset_detail::zero_pad(i, 3);
    write_clip_dir(out_dir / name, clip, vocab);
    names.push_back(name);
  }
  write_index(out_dir, names);
  vocab.save(out_dir / "vocab.txt");
  cfg.write(out_dir / "config.txt");
}

// ---------------------------------------------------------------------------
// CSV logging
// ---------------------------------------------------------------------------

class TrainLog {
 public:
  explicit TrainLog(const fs::path& path) : file_(path) {
    if (!file_) throw IoError("cannot open log: " + path.string());
    file_ << "step,loss,wall_ms,grad_norm\n";
  }
  void row(int64_t step, double loss, double wall_ms, double grad_norm) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.3f,%.9g\n",
                  static_cast<long long>(step), loss, wall_ms, grad_norm);
    file_ << buf;
    file_.flush();
  }

 private:
  std::ofstream file_;
};

inline std::vector<double> read_loss_column(const fs::path& csv) {
  std::ifstream f(csv);
  if (!f) throw IoError("cannot open log: " + csv.string());
  std::vector<double> losses;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto c1 = line.find(',');
    auto c2 = line.find(',', c1 + 1);
    losses.push_back(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Codec pre-training
// ---------------------------------------------------------------------------

// Trains the convolutional codec on dataset frames to small reconstruction
// error, freezes it, and reports the held-out MSE (synthetic frames drawn
// from a disjoint seed stream).
inline double train_codec(const RunConfig& cfg, const fs::path& dataset_dir,
                          const fs::path& out_dir) {
  fs::create_directories(out_dir);
  CodecKind kind = cfg.codec_kind();
  auto codec = LatentCodec<float>::make(kind, Rng(cfg.seed()).child({0xc0dec}).state());
  if (kind == CodecKind::identity) {
    codec.save(out_dir);
    cfg.write(out_dir / "config.txt");
    return 0.0;
  }

  // training pool: dataset frames plus extra generated clips for coverage of
  // unseen shape/colour combinations
  std::vector<TensorF> frames;
  for (const auto& name : read_index(dataset_dir)) {
    LoadedClip clip = read_clip_dir(dataset_dir / name);
    for (const Image& img : clip.frames) {
      TensorF t = TensorF::zeros({1, 3, 1, img.h, img.w});
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.h; ++y)
          for (int x = 0; x < img.w; ++x)
            t.data()[(static_cast<size_t>(c) * img.h + y) * img.w + x] =
                img.at(c, y, x);
      frames.push_back(std::move(t));
    }
  }
  if (frames.empty()) throw ValidationError("dataset has no frames");
  {
    Vocabulary vocab = Vocabulary::builtin();
    ClipParams params = cfg.clip_params();
    params.frames = 2;
    params.shapes_min = 1;
    params.shapes_max = 4;
    int64_t extra = cfg.get_int("codec.extra_clips");
    for (int64_t i = 0; i < extra; ++i) {
      ClipSample clip = gen_clip(
          Rng(cfg.seed()).child({0xec57a, static_cast<uint64_t>(i)}).state(),
          params, vocab);
      for (int64_t f = 0; f < clip.clip_frames(); ++f) {
        TensorF t = TensorF::zeros({1, 3, 1, clip.height(), clip.width()});
        for (int64_t c = 0; c < 3; ++c)
          for (int64_t y = 0; y < clip.height(); ++y)
            for (int64_t x = 0; x < clip.width(); ++x)
              t.data()[(c * clip.height() + y) * clip.width() + x] =
                  clip.frames.data()[((c * clip.clip_frames() + f) * clip.height() + y) *
                                     clip.width() + x];
        frames.push_back(std::move(t));
      }
    }
  }

  AdamW<float> opt(codec.params(), cfg.get_double("codec.lr"), 0.0);
  TrainLog log(out_dir / "codec_log.csv");
  int64_t steps = cfg.get_int("codec.train_steps");
  int64_t batch = std::max<int64_t>(1, cfg.get_int("codec.batch"));
  double lr0 = cfg.get_double("codec.lr");
  Rng root(cfg.seed());
  for (int64_t k = 0; k < steps; ++k) {
    auto t0 = std::chrono::steady_clock::now();
    // cosine decay to a tenth of the initial rate
    double frac = static_cast<double>(k) / static_cast<double>(steps);
    opt.set_lr(lr0 * (0.1 + 0.45 * (1.0 + std::cos(3.14159265358979 * frac))));
    Rng pick = root.child({0xc0dec, static_cast<uint64_t>(k)});
    std::vector<TensorF> chosen;
    for (int64_t j = 0; j < batch; ++j)
      chosen.push_back(frames[pick.next_u64() % frames.size()]);
    auto x = concat(chosen, 0);
    opt.zero_grad();
    auto loss = mse(codec.decode(codec.encode(x)), x);
    loss.backward();
    double gn = opt.grad_norm();
    opt.step();
    auto t1 = std::chrono::steady_clock::now();
    log.row(k + 1, loss.item(),
            std::chrono::duration<double, std::milli>(t1 - t0).count(), gn);
  }
  codec.freeze();

  // held-out frames from a seed stream never used for the dataset
  double holdout_mse;
  {
    autograd::NoGradGuard ng;
    ClipParams params = cfg.clip_params();
    params.frames = 1;
    Vocabulary vocab = Vocabulary::builtin();
    int64_t n = cfg.get_int("codec.holdout_frames");
    double total = 0;
    for (int64_t i = 0; i < n; ++i) {
      ClipSample clip = gen_clip(Rng(cfg.seed()).child({0x401d, static_cast<uint64_t>(i)}).state(),
                                 params, vocab);
      auto x = add_batch_axis(clip.frames);
      total += mse(codec.decode(codec.encode(x)), x).item();
    }
    holdout_mse = total / static_cast<double>(n);
  }
  codec.save(out_dir);
  cfg.write(out_dir / "config.txt");
  std::ofstream(out_dir / "holdout_mse.txt") << holdout_mse << "\n";
  return holdout_mse;
}

// ---------------------------------------------------------------------------
// Model training
// ---------------------------------------------------------------------------

template <typename T>
struct PreparedClip {
  LatentGrid<T> z0;
  ModelInputs<T> inputs;
};

template <typename T>
PreparedClip<T> prepare_clip(const DiTModel<T>& model, const LoadedClip& clip,
                             const FlowParams& flow_params) {
  autograd::NoGradGuard ng;
  PreparedClip<T> out;
  TensorF frames = add_batch_axis(clip.frames_tensor());
  TensorF sketches = add_batch_axis(clip.sketches_tensor());
  TensorF refs = add_batch_axis(clip.refs_tensor());
  auto to_T = [](const TensorF& t) {
    std::vector<T> data(t.data().begin(), t.data().end());
    return Tensor<T>::from_data(t.shape(), std::move(data));
  };
  MotionStats stats = motion_stats_for_clip(clip.sketches, flow_params);
  auto caption_ids = model.vocab().tokenize(clip.caption);
  out.inputs = model.prepare(to_T(sketches), to_T(refs), {caption_ids}, stats);
  out.z0 = model.codec().encode(to_T(frames));
  out.z0.data = out.z0.data.detach();
  return out;
}

struct TrainResult {
  fs::path final_checkpoint;
  double initial_loss = 0;  // mean of the first 10 rows
  double final_loss = 0;    // mean of the last 50 rows
};

inline void save_checkpoint(const DiTModel<float>& model, const AdamW<float>& opt,
                            int64_t step, const fs::path& dir) {
  model.save(dir, {{"train.step", std::to_string(step)}});
  opt.save(dir / "opt");
}

// Training loop over a prepared dataset. Clip choice and noise draws depend
// only on (seed, step index, element index), so an interrupted run resumed
// from a checkpoint retraces the uninterrupted run exactly.
inline TrainResult train_model(const RunConfig& cfg, const fs::path& dataset_dir,
                               const fs::path& codec_dir, const fs::path& out_dir,
                               std::optional<fs::path> resume = {}) {
  fs::create_directories(out_dir);
  cfg.write(out_dir / "config.txt");

  int64_t start_step = 0;
  std::optional<DiTModel<float>> model;
  if (resume) {
    model.emplace(DiTModel<float>::load(*resume));
    auto manifest = read_manifest(*resume / "manifest.txt");
    start_step = std::stoll(manifest.at("train.step"));
  } else {
    model.emplace(cfg.dit_config(), LatentCodec<float>::load(codec_dir),
                  Vocabulary::builtin(), cfg.seed());
  }

  std::vector<PreparedClip<float>> clips;
  for (const auto& name : read_index(dataset_dir))
    clips.push_back(prepare_clip(*model, read_clip_dir(dataset_dir / name),
                                 cfg.flow_params()));
  if (clips.empty()) throw ValidationError("dataset is empty");

  NoiseSchedule sched = NoiseSchedule::cosine(cfg.get_int("schedule.t_train"));
  AdamW<float> opt(model->params(), cfg.get_double("train.lr"),
                   cfg.get_double("train.weight_decay"));
  if (resume) opt.load(*resume / "opt", start_step);

  int64_t steps = cfg.get_int("train.steps");
  int64_t batch = std::max<int64_t>(1, cfg.get_int("train.batch"));
  int64_t ckpt_every = cfg.get_int("train.checkpoint_every");
  int64_t warmup = cfg.get_int("train.warmup_steps");
  double lr0 = cfg.get_double("train.lr");
  double lr_min_frac = cfg.get_double("train.lr_min_frac");
  double grad_clip = cfg.get_double("train.grad_clip");
  // lr(k) is a pure function of the step index, so resumed runs retrace it
  auto lr_at = [&](int64_t k) {
    if (warmup > 0 && k < warmup)
      return lr0 * static_cast<double>(k + 1) / static_cast<double>(warmup);
    double span = static_cast<double>(std::max<int64_t>(1, steps - warmup));
    double frac = static_cast<double>(k - warmup) / span;
    return lr0 * (lr_min_frac +
                  (1.0 - lr_min_frac) * 0.5 * (1.0 + std::cos(3.14159265358979 * frac)));
  };
  TrainLog log(out_dir / "train_log.csv");
  Rng root(cfg.seed());

  TrainResult result;
  std::vector<double> losses;
  for (int64_t k = start_step; k < steps; ++k) {
    auto t0 = std::chrono::steady_clock::now();
    opt.set_lr(lr_at(k));
    Rng pick = root.child({0xba7c, static_cast<uint64_t>(k)});
    std::vector<int64_t> idx;
    std::vector<LatentGrid<float>> z0s;
    for (int64_t j = 0; j < batch; ++j) {
      idx.push_back(static_cast<int64_t>(pick.next_u64() % clips.size()));
      z0s.push_back(clips[static_cast<size_t>(idx.back())].z0);
    }
    opt.zero_grad();
    auto eps_model = [&](const LatentGrid<float>& z_t, int64_t t, int64_t j) {
      return model->forward(z_t, clips[static_cast<size_t>(idx[static_cast<size_t>(j)])].inputs, t);
    };
    auto loss = epsilon_training_loss(z0s, eps_model, sched, root, k);
    loss.backward();
    double gn = opt.grad_norm();
    if (grad_clip > 0 && gn > grad_clip) opt.scale_grads(grad_clip / gn);
    opt.step();
    auto t1 = std::chrono::steady_clock::now();
    double lv = loss.item();
    losses.push_back(lv);
    log.row(k + 1, lv, std::chrono::duration<double, std::milli>(t1 - t0).count(), gn);
    if (ckpt_every > 0 && (k + 1) % ckpt_every == 0 && k + 1 != steps)
      save_checkpoint(*model, opt, k + 1,
                      out_dir / ("ckpt_" + dataset_detail::zero_pad(k + 1, 6)));
  }
  result.final_checkpoint = out_dir / "final";
  save_checkpoint(*model, opt, steps, result.final_checkpoint);

  if (!losses.empty()) {
    size_t head = std::min<size_t>(10, losses.size());
    size_t tail = std::min<size_t>(50, losses.size());
    double a = 0, b = 0;
    for (size_t i = 0; i < head; ++i) a += losses[i];
    for (size_t i = losses.size() - tail; i < losses.size(); ++i) b += losses[i];
    result.initial_loss = a / static_cast<double>(head);
    result.final_loss = b / static_cast<double>(tail);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SampleOptions {
  int64_t steps = 50;
  uint64_t seed = 0;
  double x0_clip = 3.0;  // denoised-latent clamp during DDIM
  std::optional<bool> dynamic_rope;  // overrides the checkpoint's rope flag
};

// Colorizes a sketch sequence (M >= 1; the single-frame image case runs the
// identical path) and writes frame_%03d.ppm plus a manifest.
inline std::vector<Image> sample_clip(const DiTModel<float>& model,
                                      const std::vector<Image>& sketches,
                                      const std::vector<Image>& refs,
                                      const std::string& caption,
                                      const SampleOptions& opts,
                                      MotionStats* stats_out = nullptr) {
  if (sketches.empty()) throw ValidationError("no sketch frames given");
  if (refs.empty()) throw ValidationError("no reference images given");
  autograd::NoGradGuard ng;
  int64_t M = static_cast<int64_t>(sketches.size());
  int64_t H = sketches[0].h, W = sketches[0].w;
  int64_t s = model.codec().downsample();
  if (H % (s * model.config().patch) || W % (s * model.config().patch))
    throw ValidationError("sketch extents must be multiples of downsample*patch");

  TensorF sk = TensorF::zeros({1, 1, M, H, W});
  for (int64_t f = 0; f < M; ++f)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        sk.data()[(f * H + y) * W + x] =
            sketches[static_cast<size_t>(f)].at(0, static_cast<int>(y),
                                                static_cast<int>(x));
  int64_t N = static_cast<int64_t>(refs.size());
  TensorF rf = TensorF::zeros({1, 3, N, refs[0].h, refs[0].w});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < refs[0].h; ++y)
        for (int64_t x = 0; x < refs[0].w; ++x)
          rf.data()[((c * N + n) * refs[0].h + y) * refs[0].w + x] =
              refs[static_cast<size_t>(n)].at(static_cast<int>(c),
                                              static_cast<int>(y),
                                              static_cast<int>(x));

  MotionStats stats = model.sketch_motion_stats(sk);
  if (stats_out) *stats_out = stats;
  auto caption_ids = model.vocab().tokenize(caption);
  auto inputs = model.prepare(sk, rf, {caption_ids}, stats);

  NoiseSchedule sched = NoiseSchedule::cosine(model.config().t_train);
  auto z = gaussian_latent<float>(
      {1, model.codec().latent_channels(), M, H / s, W / s}, s,
      Rng(opts.seed).child({0x5a3e}));
  auto eps_fn = [&](const LatentGrid<float>& z_t, int64_t t) {
    return model.forward(z_t, inputs, t, opts.dynamic_rope);
  };
  auto z0 = ddim_sample_latent(eps_fn, sched, opts.steps, std::move(z), opts.x0_clip);
  return decoded_to_images(model.codec().decode(z0));
}

inline void write_sample_outputs(const fs::path& out_dir,
                                 const std::vector<Image>& frames,
                                 const std::map<std::string, std::string>& manifest) {
  fs::create_directories(out_dir);
  for (size_t f = 0; f < frames.size(); ++f)
    write_ppm(out_dir / ("frame_" + dataset_detail::zero_pad(static_cast<int64_t>(f), 3) +
                         ".ppm"),
              frames[f]);
  write_manifest(out_dir / "manifest.txt", manifest);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct ClipScore {
  std::string name;
  double ssim_v = 0;
  double psnr_v = 0;
  double t_consist = std::numeric_limits<double>::quiet_NaN();
};

struct EvalResult {
  std::vector<ClipScore> clips;
  double mean_ssim = 0;
  double mean_psnr = 0;
  double mean_t_consist = std::numeric_limits<double>::quiet_NaN();
};

// Scores generated clips against reference clips; temporal consistency warps
// with the reference dataset's analytic flows and is reported for clips with
// two or more frames.
inline EvalResult evaluate(const fs::path& generated_dir,
                           const fs::path& reference_dir) {
  auto gen_names = read_index(generated_dir);
  auto ref_names = read_index(reference_dir);
  if (gen_names != ref_names) {
    std::string msg = "clip lists differ;";
    for (const auto& n : gen_names)
      if (std::find(ref_names.begin(), ref_names.end(), n) == ref_names.end())
        msg += " only-generated:" + n;
    for (const auto& n : ref_names)
      if (std::find(gen_names.begin(), gen_names.end(), n) == gen_names.end())
        msg += " only-reference:" + n;
    throw ValidationError(msg);
  }
  EvalResult result;
  double sum_ssim = 0, sum_psnr = 0, sum_tc = 0;
  int64_t tc_count = 0;
  for (const auto& name : gen_names) {
    auto gen_frames = read_ppm_series(generated_dir / name, "frame_", 3);
    LoadedClip ref = read_clip_dir(reference_dir / name);
    if (gen_frames.size() != ref.frames.size())
      throw ValidationError("frame count differs for " + name);
    ClipScore score;
    score.name = name;
    double se = 0;
    int64_t count = 0;
    double ssim_sum = 0;
    for (size_t f = 0; f < gen_frames.size(); ++f) {
      ssim_sum += ssim(gen_frames[f], ref.frames[f]);
      for (size_t i = 0; i < gen_frames[f].data.size(); ++i) {
        double d = static_cast<double>(gen_frames[f].data[i]) - ref.frames[f].data[i];
        se += d * d;
      }
      count += static_cast<int64_t>(gen_frames[f].data.size());
    }
    score.ssim_v = ssim_sum / static_cast<double>(gen_frames.size());
    double mse_v = se / static_cast<double>(count);
    score.psnr_v = mse_v == 0 ? std::numeric_limits<double>::infinity()
                              : 10.0 * std::log10(1.0 / mse_v);
    if (gen_frames.size() >= 2) {
      if (ref.flows.size() != gen_frames.size() - 1)
        throw ValidationError("reference flow count mismatch for " + name);
      score.t_consist = temporal_consistency(gen_frames, ref.flows);
      sum_tc += score.t_consist;
      ++tc_count;
    }
    sum_ssim += score.ssim_v;
    sum_psnr += score.psnr_v;
    result.clips.push_back(score);
  }
  result.mean_ssim = sum_ssim / static_cast<double>(result.clips.size());
  result.mean_psnr = sum_psnr / static_cast<double>(result.clips.size());
  if (tc_count) result.mean_t_consist = sum_tc / static_cast<double>(tc_count);
  return result;
}

inline void write_eval_csv(const fs::path& path, const EvalResult& result) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write metrics: " + path.string());
  auto field = [](double v) {
    if (std::isnan(v)) return std::string("nan");
    if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  f << "clip,ssim,psnr,t_consist\n";
  for (const auto& c : result.clips)
    f << c.name << "," << field(c.ssim_v) << "," << field(c.psnr_v) << ","
      << field(c.t_consist) << "\n";
  f << "mean," << field(result.mean_ssim) << "," << field(result.mean_psnr) << ","
    << field(result.mean_t_consist) << "\n";
}

}  // namespace skc::pipeline
