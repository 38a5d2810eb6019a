// Command-line front end: data generation, codec pre-training, model
// training, sampling, evaluation, and inspection utilities.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "skc/pipeline.hpp"

namespace {

skc::RunConfig load_config(const std::string& path,
                           const std::vector<std::string>& sets) {
  skc::RunConfig cfg =
      path.empty() ? skc::RunConfig() : skc::RunConfig::from_file(path);
  for (const std::string& kv : sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw skc::ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void add_config_options(CLI::App* cmd, std::string* config_path,
                        std::vector<std::string>* sets) {
  cmd->add_option("--config", *config_path, "run configuration file (key=value)");
  cmd->add_option("--set", *sets, "override a configuration key, key=value");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sketchcolor: reference-guided sketch colorization for images "
               "and video with a motion-aware diffusion transformer"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic clip dataset");
  std::string gen_config, gen_out;
  std::vector<std::string> gen_sets;
  int64_t gen_clips = -1;
  add_config_options(gen, &gen_config, &gen_sets);
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--clips", gen_clips, "number of clips (default data.n_clips)");

  // ---- train-codec ----
  auto* tc = app.add_subcommand("train-codec", "pre-train the latent codec");
  std::string tc_config, tc_dataset, tc_out;
  std::vector<std::string> tc_sets;
  add_config_options(tc, &tc_config, &tc_sets);
  tc->add_option("--dataset", tc_dataset, "dataset directory")->required();
  tc->add_option("--out", tc_out, "output codec directory")->required();

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train the colorization model");
  std::string tr_config, tr_dataset, tr_codec, tr_out, tr_resume;
  std::vector<std::string> tr_sets;
  int64_t tr_steps = -1;
  add_config_options(tr, &tr_config, &tr_sets);
  tr->add_option("--dataset", tr_dataset, "dataset directory")->required();
  tr->add_option("--codec", tr_codec, "pre-trained codec directory");
  tr->add_option("--out", tr_out, "output run directory")->required();
  tr->add_option("--resume", tr_resume, "checkpoint directory to resume from");
  tr->add_option("--steps", tr_steps, "override train.steps");

  // ---- sample ----
  auto* sa = app.add_subcommand("sample", "colorize sketches from a checkpoint");
  std::string sa_ckpt, sa_sketches, sa_refs, sa_caption, sa_out;
  std::string sa_rope = "auto";
  int64_t sa_steps = -1;
  uint64_t sa_seed = 0;
  sa->add_option("--checkpoint", sa_ckpt, "model checkpoint directory")->required();
  sa->add_option("--sketches", sa_sketches, "directory with sketch_%03d.ppm")
      ->required();
  sa->add_option("--refs", sa_refs, "directory with ref_%02d.ppm")->required();
  sa->add_option("--caption", sa_caption, "caption tokens, space separated");
  sa->add_option("--out", sa_out, "output directory")->required();
  sa->add_option("--steps", sa_steps, "denoising steps (default sample.steps)");
  sa->add_option("--seed", sa_seed, "sampling seed");
  sa->add_option("--dynamic-rope", sa_rope,
                 "on|off|auto: override motion-adaptive position encoding")
      ->check(CLI::IsMember({"on", "off", "auto"}));

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "score generated clips against references");
  std::string ev_gen, ev_ref, ev_out;
  ev->add_option("--generated", ev_gen, "directory of generated clips")->required();
  ev->add_option("--reference", ev_ref, "reference dataset directory")->required();
  ev->add_option("--out", ev_out, "output metrics CSV")->required();

  // ---- rope-inspect ----
  auto* ri = app.add_subcommand("rope-inspect",
                                "dump rotary tables as CSV for plotting");
  std::string ri_config, ri_sketches, ri_out;
  std::vector<std::string> ri_sets;
  double ri_mg = -1, ri_mv = -1, ri_mu = -1;
  int64_t ri_positions = 32;
  add_config_options(ri, &ri_config, &ri_sets);
  ri->add_option("--m-global", ri_mg, "global motion intensity in [0,1]");
  ri->add_option("--m-v", ri_mv, "vertical motion intensity in [0,1]");
  ri->add_option("--m-u", ri_mu, "horizontal motion intensity in [0,1]");
  ri->add_option("--sketches", ri_sketches,
                 "sketch directory to estimate motion from");
  ri->add_option("--positions", ri_positions, "positions per axis in the dump");
  ri->add_option("--out", ri_out, "output CSV")->required();

  // ---- flow-viz ----
  auto* fv = app.add_subcommand("flow-viz", "estimate flow between two frames");
  std::string fv_a, fv_b, fv_csv, fv_ppm, fv_config;
  std::vector<std::string> fv_sets;
  add_config_options(fv, &fv_config, &fv_sets);
  fv->add_option("--a", fv_a, "first frame (PPM)")->required();
  fv->add_option("--b", fv_b, "second frame (PPM)")->required();
  fv->add_option("--csv", fv_csv, "output CSV (x,y,u,v)");
  fv->add_option("--ppm", fv_ppm, "output HSV-coded PPM");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto cfg = load_config(gen_config, gen_sets);
      int64_t n = gen_clips > 0 ? gen_clips : cfg.get_int("data.n_clips");
      skc::pipeline::generate_dataset(cfg, gen_out, n);
      std::printf("wrote %lld clips to %s\n", static_cast<long long>(n),
                  gen_out.c_str());
    } else if (*tc) {
      auto cfg = load_config(tc_config, tc_sets);
      double mse = skc::pipeline::train_codec(cfg, tc_dataset, tc_out);
      std::printf("codec saved to %s (holdout mse %.6g)\n", tc_out.c_str(), mse);
    } else if (*tr) {
      auto cfg = load_config(tr_config, tr_sets);
      if (tr_steps > 0) cfg.set("train.steps", std::to_string(tr_steps));
      std::optional<std::filesystem::path> resume;
      if (!tr_resume.empty()) resume = tr_resume;
      if (!resume && tr_codec.empty())
        throw skc::ConfigError("train needs --codec (or --resume)");
      auto result =
          skc::pipeline::train_model(cfg, tr_dataset, tr_codec, tr_out, resume);
      std::printf("checkpoint %s: loss %.4g -> %.4g\n",
                  result.final_checkpoint.string().c_str(), result.initial_loss,
                  result.final_loss);
    } else if (*sa) {
      auto model = skc::DiTModel<float>::load(sa_ckpt);
      auto sketches = skc::read_ppm_series(sa_sketches, "sketch_", 3);
      for (auto& s : sketches) s = skc::luminance(s);
      auto refs = skc::read_ppm_series(sa_refs, "ref_", 2);
      skc::pipeline::SampleOptions opts;
      opts.steps = sa_steps > 0 ? sa_steps
                                : skc::RunConfig().get_int("sample.steps");
      opts.seed = sa_seed;
      if (sa_rope == "on") opts.dynamic_rope = true;
      if (sa_rope == "off") opts.dynamic_rope = false;
      skc::MotionStats stats;
      auto frames =
          skc::pipeline::sample_clip(model, sketches, refs, sa_caption, opts, &stats);
      std::map<std::string, std::string> manifest{
          {"checkpoint", sa_ckpt},
          {"sketches", sa_sketches},
          {"refs", sa_refs},
          {"caption", sa_caption},
          {"steps", std::to_string(opts.steps)},
          {"seed", std::to_string(opts.seed)},
          {"dynamic_rope", sa_rope},
          {"motion.m_global", std::to_string(stats.m_global)},
          {"motion.m_v", std::to_string(stats.m_v)},
          {"motion.m_u", std::to_string(stats.m_u)},
      };
      skc::pipeline::write_sample_outputs(sa_out, frames, manifest);
      std::printf("wrote %zu frames to %s\n", frames.size(), sa_out.c_str());
    } else if (*ev) {
      auto result = skc::pipeline::evaluate(ev_gen, ev_ref);
      skc::pipeline::write_eval_csv(ev_out, result);
      std::printf("mean ssim %.4f psnr %.4g t_consist %.4f over %zu clips\n",
                  result.mean_ssim, result.mean_psnr, result.mean_t_consist,
                  result.clips.size());
    } else if (*ri) {
      auto cfg = load_config(ri_config, ri_sets);
      skc::MotionStats stats;
      if (!ri_sketches.empty()) {
        auto sketches = skc::read_ppm_series(ri_sketches, "sketch_", 3);
        std::vector<skc::Image> gray;
        for (auto& s : sketches) gray.push_back(skc::luminance(s));
        stats = skc::motion_stats_for_clip(gray, cfg.flow_params());
      } else if (ri_mg >= 0 && ri_mv >= 0 && ri_mu >= 0) {
        stats = skc::MotionStats{ri_mg, ri_mv, ri_mu};
      } else {
        throw skc::ValidationError(
            "rope-inspect needs --sketches or all of --m-global/--m-v/--m-u");
      }
      auto dit = cfg.dit_config();
      auto table = skc::build_rope(stats, ri_positions, ri_positions,
                                   ri_positions, dit.rope);
      std::ofstream out(ri_out);
      if (!out) throw skc::IoError("cannot write " + ri_out);
      skc::write_rope_csv(out, table);
      std::printf("wrote rope tables for m=(%.3g, %.3g, %.3g) to %s\n",
                  stats.m_global, stats.m_v, stats.m_u, ri_out.c_str());
    } else if (*fv) {
      auto cfg = load_config(fv_config, fv_sets);
      auto a = skc::luminance(skc::read_ppm(fv_a));
      auto b = skc::luminance(skc::read_ppm(fv_b));
      auto flow = skc::estimate_flow(a, b, cfg.flow_params());
      if (!fv_csv.empty()) skc::write_flow_csv(fv_csv, flow);
      if (!fv_ppm.empty()) skc::write_ppm(fv_ppm, skc::flow_to_hsv_image(flow));
      double peak = 0;
      for (size_t i = 0; i < flow.size(); ++i)
        peak = std::max(peak, static_cast<double>(std::hypot(flow.u[i], flow.v[i])));
      std::printf("flow %dx%d, peak magnitude %.3f px\n", flow.w, flow.h, peak);
    }
  } catch (const skc::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 0;
}
