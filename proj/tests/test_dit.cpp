#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "skc/dit.hpp"

using namespace skc;

namespace {

// Micro-configuration used throughout: identity codec, 16x16 frames.
template <typename T>
DiTModel<T> micro_model(int64_t depth = 1, uint64_t seed = 11,
                        bool instance = true, bool phys = true) {
  DiTConfig cfg;
  cfg.depth = depth;
  cfg.heads = 2;
  cfg.d = 24;  // head_dim 12 -> axis split (4,4,4)
  cfg.patch = 2;
  cfg.ffn_mult = 2;
  cfg.phys_patch = 8;
  cfg.phys_hidden = 16;
  cfg.use_instance_embed = instance;
  cfg.use_phys_tokens = phys;
  cfg.t_train = 100;
  return DiTModel<T>(cfg, LatentCodec<T>::make(CodecKind::identity),
                     Vocabulary::builtin(), seed);
}

template <typename T>
struct MicroClip {
  LatentGrid<T> z_t;
  Tensor<T> sketches, refs;
  std::vector<std::vector<int32_t>> captions;
  MotionStats stats;
};

template <typename T>
MicroClip<T> micro_clip(int64_t frames, int64_t n_refs, uint64_t seed,
                        MotionStats stats = {}) {
  Rng rng(seed);
  MicroClip<T> c;
  c.z_t.data = Tensor<T>::randn({1, 3, frames, 16, 16}, rng);
  c.z_t.downsample = 1;
  c.sketches = Tensor<T>::randn({1, 1, frames, 16, 16}, rng, T(0.1));
  c.refs = Tensor<T>::randn({1, 3, n_refs, 16, 16}, rng, T(0.2));
  c.captions = {{0, 8}};
  c.stats = stats;
  return c;
}

}  // namespace

TEST_CASE("timestep embedding is deterministic and injective") {
  auto model = micro_model<float>();
  auto a = model.timestep_embed(17);
  auto b = model.timestep_embed(17);
  REQUIRE(a.data() == b.data());

  auto c = model.timestep_embed(18);
  double diff = 0;
  for (size_t i = 0; i < a.data().size(); ++i)
    diff += std::abs(static_cast<double>(a.data()[i]) - c.data()[i]);
  REQUIRE(diff > 0);

  REQUIRE_THROWS_AS(model.timestep_embed(-1), PreconditionError);
  REQUIRE_THROWS_AS(model.timestep_embed(101), PreconditionError);
}

TEST_CASE("timestep embedding gradients") {
  auto model = micro_model<double>();
  auto* w = model.params().find("t_embed.fc1.weight");
  REQUIRE(w != nullptr);
  double err = gradient_check<double>(
      [&] {
        auto e = model.timestep_embed(33);
        return sum_all(mul(e, e));
      },
      *w, 1e-5);
  REQUIRE(err < 1e-4);
}

TEST_CASE("fresh dit block is the identity (zero-initialized projections)") {
  ParamStore<float> store;
  Rng rng(21);
  DiTConfig cfg;
  cfg.heads = 2;
  cfg.d = 24;
  cfg.validate();
  auto block = DiTBlock<float>::create(store, "b", cfg, rng);
  auto x = TensorF::randn({1, 6, 24}, rng);
  std::vector<TokenCoord> coords(6, TokenCoord::at(0, 0, 0));
  RopeTable rope = build_rope(MotionStats{}, 2, 2, 2, cfg.rope);
  ConditionBundle<float> cond;
  cond.c_text = TensorF::randn({1, 2, 24}, rng);
  cond.c_vis = TensorF::zeros({1, 0, 24});
  auto t_emb = TensorF::randn({1, 24}, rng);
  auto y = block.forward(x, cond, t_emb, rope, coords);
  REQUIRE(y.shape() == x.shape());
  REQUIRE(y.data() == x.data());
}

TEST_CASE("identity-masked self-attention reproduces per-token behaviour") {
  ParamStore<float> store;
  Rng rng(22);
  DiTConfig cfg;
  cfg.heads = 2;
  cfg.d = 24;
  cfg.validate();
  auto block = DiTBlock<float>::create(store, "b", cfg, rng);
  // give the output projections real weights so the block does work
  for (const char* name : {"b.attn.wo.weight", "b.ffn.fc2.weight", "b.mod.weight"})
    for (auto& v : store.find(name)->data()) v = static_cast<float>(rng.normal() * 0.05);

  const int64_t S = 5;
  auto x = TensorF::randn({1, S, 24}, rng);
  std::vector<TokenCoord> coords;
  for (int32_t s = 0; s < S; ++s) coords.push_back(TokenCoord::at(0, s % 2, s % 3));
  RopeTable rope = build_rope(MotionStats{0.5, 0.5, 0.5}, 2, 3, 3, cfg.rope);
  ConditionBundle<float> cond;
  cond.c_text = TensorF::randn({1, 2, 24}, rng);
  cond.c_vis = TensorF::zeros({1, 0, 24});
  auto t_emb = TensorF::randn({1, 24}, rng);

  auto mask = TensorF::filled({S, S}, -1e9f);
  for (int64_t s = 0; s < S; ++s) mask.data()[s * S + s] = 0.0f;
  auto masked = block.forward(x, cond, t_emb, rope, coords, &mask);

  for (int64_t s = 0; s < S; ++s) {
    auto xs = slice(x, 1, s, 1);
    auto ys = block.forward(xs, cond, t_emb, rope, {coords[s]});
    for (int64_t i = 0; i < 24; ++i)
      REQUIRE(masked.data()[s * 24 + i] ==
              Catch::Approx(ys.data()[i]).margin(1e-6));
  }
}

TEST_CASE("predict_epsilon keeps the latent shape contract") {
  auto model = micro_model<float>(2);
  auto clip = micro_clip<float>(2, 2, 31);
  auto out = model.predict_epsilon(clip.z_t, clip.sketches, clip.refs,
                                   clip.captions, 7, clip.stats);
  REQUIRE(out.data.shape() == clip.z_t.data.shape());

  // reference and physical token count does not affect output extents
  auto clip3 = micro_clip<float>(2, 3, 31);
  auto out3 = model.predict_epsilon(clip.z_t, clip.sketches, clip3.refs,
                                    clip.captions, 7, clip.stats);
  REQUIRE(out3.data.shape() == clip.z_t.data.shape());
}

TEST_CASE("forward is bitwise deterministic and flow-independent below threshold") {
  auto model = micro_model<float>(2);
  auto clip = micro_clip<float>(2, 1, 32);
  auto a = model.predict_epsilon(clip.z_t, clip.sketches, clip.refs,
                                 clip.captions, 9, MotionStats{});
  auto b = model.predict_epsilon(clip.z_t, clip.sketches, clip.refs,
                                 clip.captions, 9, MotionStats{});
  REQUIRE(a.data.data() == b.data.data());

  // sub-threshold motion statistics fall back to the static tables bitwise
  auto c = model.predict_epsilon(clip.z_t, clip.sketches, clip.refs,
                                 clip.captions, 9, MotionStats{0.05, 0.02, 0.09});
  REQUIRE(c.data.data() == a.data.data());

  // disabled rope ignores even saturated motion
  DiTConfig cfg2;
  cfg2.depth = 2;
  cfg2.heads = 2;
  cfg2.d = 24;
  cfg2.patch = 2;
  cfg2.ffn_mult = 2;
  cfg2.phys_patch = 8;
  cfg2.phys_hidden = 16;
  cfg2.t_train = 100;
  cfg2.rope.enabled = false;
  DiTModel<float> off(cfg2, LatentCodec<float>::make(CodecKind::identity),
                      Vocabulary::builtin(), 11);
  auto d = off.predict_epsilon(clip.z_t, clip.sketches, clip.refs, clip.captions,
                               9, MotionStats{1, 1, 1});
  auto e = off.predict_epsilon(clip.z_t, clip.sketches, clip.refs, clip.captions,
                               9, MotionStats{});
  REQUIRE(d.data.data() == e.data.data());
}

TEST_CASE("unpatchify shape contract and linearity probe") {
  ParamStore<float> store;
  Rng rng(41);
  auto proj = Linear<float>::create(store, "up", 10, 12, rng);
  auto tokens_a = TensorF::randn({1, 8, 10}, rng);
  auto tokens_b = TensorF::randn({1, 8, 10}, rng);
  auto ga = unpatchify(tokens_a, proj, 3, 2, 4, 4, 2, 1);
  REQUIRE(ga.data.shape() == Shape{1, 3, 2, 4, 4});

  // superposition up to the shared bias: F(a+b) + F(0) == F(a) + F(b)
  auto gb = unpatchify(tokens_b, proj, 3, 2, 4, 4, 2, 1);
  auto gsum = unpatchify(add(tokens_a, tokens_b), proj, 3, 2, 4, 4, 2, 1);
  auto g0 = unpatchify(TensorF::zeros({1, 8, 10}), proj, 3, 2, 4, 4, 2, 1);
  for (size_t i = 0; i < gsum.data.data().size(); ++i)
    REQUIRE(gsum.data.data()[i] + g0.data.data()[i] ==
            Catch::Approx(ga.data.data()[i] + gb.data.data()[i]).margin(1e-5));

  REQUIRE_THROWS_AS(unpatchify(tokens_a, proj, 3, 2, 8, 8, 2, 1), DimensionError);
}

TEST_CASE("full micro-model loss passes the central-difference check") {
  auto model = micro_model<double>(1, 51);
  auto clip = micro_clip<double>(2, 1, 52, MotionStats{0.4, 0.3, 0.2});
  auto inputs = model.prepare(clip.sketches, clip.refs, clip.captions, clip.stats);
  Rng rng(53);
  LatentGrid<double> eps;
  eps.data = TensorD::randn(clip.z_t.data.shape(), rng);
  eps.downsample = 1;
  const int64_t t = 37;

  auto loss = [&] {
    auto pred = model.forward(clip.z_t, inputs, t);
    return mse(pred.data, eps.data);
  };

  double worst = 0;
  std::string worst_name;
  for (auto& [name, param] : model.params().entries()) {
    std::vector<int64_t> coords;
    int64_t n = param.numel();
    int64_t k = std::min<int64_t>(n, 6);
    for (int64_t i = 0; i < k; ++i) coords.push_back(i * n / k);
    double err = gradient_check<double>(loss, param, 1e-4, coords);
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  }
  INFO("worst parameter: " << worst_name);
  REQUIRE(worst < 1e-4);
}

TEST_CASE("checkpoints round-trip the model bitwise") {
  auto model = micro_model<float>(2, 61);
  auto dir = std::filesystem::temp_directory_path() / "skc_model_ckpt";
  std::filesystem::remove_all(dir);
  model.save(dir, {{"note", "test"}});
  auto loaded = DiTModel<float>::load(dir);
  REQUIRE(loaded.config().depth == 2);
  REQUIRE(loaded.params().numel() == model.params().numel());

  auto clip = micro_clip<float>(2, 1, 62);
  auto a = model.predict_epsilon(clip.z_t, clip.sketches, clip.refs,
                                 clip.captions, 3, clip.stats);
  auto b = loaded.predict_epsilon(clip.z_t, clip.sketches, clip.refs,
                                  clip.captions, 3, clip.stats);
  REQUIRE(a.data.data() == b.data.data());

  // corrupting a tensor is an integrity error naming it
  {
    std::ofstream f(dir / "model" / "blocks.0.attn.wq.weight.uats",
                    std::ios::binary | std::ios::trunc);
    f << "garbage";
  }
  try {
    auto broken = DiTModel<float>::load(dir);
    FAIL("expected an integrity error");
  } catch (const IoError& e) {
    REQUIRE(std::string(e.what()).find("blocks.0.attn.wq.weight") !=
            std::string::npos);
  }
}
