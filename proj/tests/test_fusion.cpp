#include <catch2/catch_amalgamated.hpp>

#include "skc/dit.hpp"
#include "skc/fusion.hpp"

using namespace skc;

namespace {

template <typename T>
LatentGrid<T> grid_from(Tensor<T> t, int64_t s = 1) {
  LatentGrid<T> g;
  g.data = std::move(t);
  g.downsample = s;
  return g;
}

}  // namespace

TEST_CASE("identity codec is a pass-through") {
  auto codec = LatentCodec<float>::make(CodecKind::identity);
  Rng rng(1);
  auto frames = TensorF::randn({1, 3, 2, 8, 8}, rng);
  auto z = codec.encode(frames);
  REQUIRE(z.data.data() == frames.data());
  REQUIRE(z.downsample == 1);
  REQUIRE(codec.decode(z).data() == frames.data());
}

TEST_CASE("conv codec has the s=4, c=4 shape contract") {
  auto codec = LatentCodec<float>::make(CodecKind::conv);
  Rng rng(2);
  auto frames = TensorF::randn({2, 3, 3, 16, 24}, rng);
  auto z = codec.encode(frames);
  REQUIRE(z.data.shape() == Shape{2, 4, 3, 4, 6});
  REQUIRE(z.downsample == 4);
  auto recon = codec.decode(z);
  REQUIRE(recon.shape() == frames.shape());

  auto bad = TensorF::zeros({1, 3, 1, 10, 16});
  REQUIRE_THROWS_AS(codec.encode(bad), DimensionError);
}

TEST_CASE("codec checkpoints round-trip through the snapshot directory") {
  auto codec = LatentCodec<float>::make(CodecKind::conv, 77);
  auto dir = std::filesystem::temp_directory_path() / "skc_codec_ckpt";
  std::filesystem::remove_all(dir);
  codec.save(dir);
  auto loaded = LatentCodec<float>::load(dir);
  Rng rng(3);
  auto frames = TensorF::randn({1, 3, 2, 8, 8}, rng);
  REQUIRE(loaded.encode(frames).data.data() == codec.encode(frames).data.data());
  auto manifest = read_manifest(dir / "manifest.txt");
  REQUIRE(manifest.at("codec.kind") == "conv");
  REQUIRE(manifest.at("codec.downsample") == "4");
  REQUIRE(manifest.at("codec.latent_channels") == "4");
}

TEST_CASE("tile_references repeat, identity, truncate") {
  Rng rng(4);
  auto ref1 = grid_from(TensorF::randn({1, 3, 1, 4, 4}, rng));
  auto tiled = tile_references(ref1, 4);
  REQUIRE(tiled.data.shape() == Shape{1, 3, 4, 4, 4});
  for (int64_t t = 1; t < 4; ++t)
    REQUIRE(slice(tiled.data, 2, t, 1).data() == ref1.data.data());

  auto ref4 = grid_from(TensorF::randn({1, 3, 4, 4, 4}, rng));
  REQUIRE(tile_references(ref4, 4).data.data() == ref4.data.data());

  auto ref5 = grid_from(TensorF::randn({1, 3, 5, 4, 4}, rng));
  auto cut = tile_references(ref5, 3);
  REQUIRE(cut.data.shape() == Shape{1, 3, 3, 4, 4});
  REQUIRE(cut.data.data() == slice(ref5.data, 2, 0, 3).data());

  auto empty = grid_from(TensorF::zeros({1, 3, 0, 4, 4}));
  REQUIRE_THROWS_AS(tile_references(empty, 3), PreconditionError);
}

TEST_CASE("coarse_fuse concatenates channels in fixed order") {
  Rng rng(5);
  auto z_t = grid_from(TensorF::randn({1, 3, 2, 4, 4}, rng));
  auto ref = grid_from(TensorF::randn({1, 3, 2, 4, 4}, rng));
  auto sketch = grid_from(TensorF::randn({1, 3, 2, 4, 4}, rng));
  auto fused = coarse_fuse(z_t, ref, sketch);
  REQUIRE(fused.data.shape() == Shape{1, 9, 2, 4, 4});
  REQUIRE(slice(fused.data, 1, 0, 3).data() == z_t.data.data());
  REQUIRE(slice(fused.data, 1, 3, 3).data() == ref.data.data());
  REQUIRE(slice(fused.data, 1, 6, 3).data() == sketch.data.data());

  auto zero_ref = grid_from(TensorF::zeros({1, 3, 2, 4, 4}));
  auto fused0 = coarse_fuse(z_t, zero_ref, sketch);
  auto middle = slice(fused0.data, 1, 3, 3);
  for (float v : middle.data()) REQUIRE(v == 0.0f);

  auto mismatched = grid_from(TensorF::zeros({1, 3, 3, 4, 4}));
  REQUIRE_THROWS_AS(coarse_fuse(z_t, mismatched, sketch), DimensionError);
}

TEST_CASE("patch_embed token grid and coords") {
  ParamStore<float> store;
  Rng rng(6);
  SECTION("p=1, T=2, 4x4 gives 32 tokens enumerating the grid") {
    auto pe = PatchEmbed<float>::create(store, "pe", 3, 1, 8, rng);
    auto z = grid_from(TensorF::randn({1, 3, 2, 4, 4}, rng));
    auto seq = pe.forward(z);
    REQUIRE(seq.data.shape() == Shape{1, 32, 8});
    REQUIRE(seq.tags.size() == 32);
    for (auto tag : seq.tags) REQUIRE(tag == TokenTag::noise);
    int64_t s = 0;
    for (int32_t t = 0; t < 2; ++t)
      for (int32_t y = 0; y < 4; ++y)
        for (int32_t x = 0; x < 4; ++x, ++s) {
          REQUIRE(seq.coords[s].t == t);
          REQUIRE(seq.coords[s].y == y);
          REQUIRE(seq.coords[s].x == x);
        }
  }
  SECTION("T=1, 8x8, p=2 gives 16 tokens") {
    auto pe = PatchEmbed<float>::create(store, "pe2", 3, 2, 8, rng);
    auto z = grid_from(TensorF::randn({1, 3, 1, 8, 8}, rng));
    REQUIRE(pe.forward(z).data.shape() == Shape{1, 16, 8});
  }
  SECTION("identity projection reproduces latent values") {
    auto pe = PatchEmbed<float>::create(store, "pe3", 3, 1, 3, rng);
    // overwrite the projection with the identity
    std::fill(pe.proj.weight.data().begin(), pe.proj.weight.data().end(), 0.0f);
    for (int i = 0; i < 3; ++i) pe.proj.weight.data()[i * 3 + i] = 1.0f;
    std::fill(pe.proj.bias.data().begin(), pe.proj.bias.data().end(), 0.0f);
    auto z = grid_from(TensorF::randn({1, 3, 2, 4, 4}, rng));
    auto seq = pe.forward(z);
    for (int64_t s = 0; s < 32; ++s) {
      auto c = seq.coords[s];
      for (int64_t ch = 0; ch < 3; ++ch)
        REQUIRE(seq.data.data()[s * 3 + ch] ==
                z.data.data()[((ch * 2 + c.t) * 4 + c.y) * 4 + c.x]);
    }
  }
  SECTION("non-multiple extents raise") {
    auto pe = PatchEmbed<float>::create(store, "pe4", 3, 2, 8, rng);
    auto z = grid_from(TensorF::randn({1, 3, 1, 6, 9}, rng));
    REQUIRE_THROWS_AS(pe.forward(z), DimensionError);
  }
}

TEST_CASE("patch_embed then unpatchify with identity projections is the identity") {
  ParamStore<float> store;
  Rng rng(7);
  // C*p*p = 12 with C=3, p=2: token width 12 makes both projections square
  auto pe = PatchEmbed<float>::create(store, "pe", 3, 2, 12, rng);
  auto up = Linear<float>::create(store, "up", 12, 12, rng);
  for (auto* lin : {&pe.proj, &up}) {
    std::fill(lin->weight.data().begin(), lin->weight.data().end(), 0.0f);
    for (int i = 0; i < 12; ++i) lin->weight.data()[i * 12 + i] = 1.0f;
    std::fill(lin->bias.data().begin(), lin->bias.data().end(), 0.0f);
  }
  auto z = grid_from(TensorF::randn({2, 3, 2, 8, 8}, rng));
  auto seq = pe.forward(z);
  auto back = unpatchify(seq.data, up, 3, 2, 8, 8, 2, 1);
  REQUIRE(back.data.data() == z.data.data());
}

TEST_CASE("instance embedding") {
  ParamStore<float> store;
  Rng rng(8);
  auto ie = InstanceEmbed<float>::create(store, "ie", 16, rng);

  SECTION("shape contract") {
    auto refs = TensorF::randn({2, 3, 3, 16, 16}, rng);
    REQUIRE(ie.forward(refs).shape() == Shape{2, 3, 16});
  }
  SECTION("identical references give identical tokens") {
    auto one = TensorF::randn({1, 3, 1, 16, 16}, rng);
    auto two = concat<float>({reshape(one, {1, 3, 1, 16, 16}),
                              reshape(one, {1, 3, 1, 16, 16})}, 2);
    auto tok = ie.forward(two);
    for (int64_t i = 0; i < 16; ++i)
      REQUIRE(std::abs(tok.data()[i] - tok.data()[16 + i]) < 1e-6f);
  }
  SECTION("permuting references permutes tokens") {
    auto a = TensorF::randn({1, 3, 1, 16, 16}, rng);
    auto b = TensorF::randn({1, 3, 1, 16, 16}, rng);
    auto c = TensorF::randn({1, 3, 1, 16, 16}, rng);
    auto abc = concat<float>({a, b, c}, 2);
    auto cab = concat<float>({c, a, b}, 2);
    auto t_abc = ie.forward(abc);
    auto t_cab = ie.forward(cab);
    for (int64_t i = 0; i < 16; ++i) {
      REQUIRE(t_abc.data()[0 * 16 + i] == t_cab.data()[1 * 16 + i]);
      REQUIRE(t_abc.data()[1 * 16 + i] == t_cab.data()[2 * 16 + i]);
      REQUIRE(t_abc.data()[2 * 16 + i] == t_cab.data()[0 * 16 + i]);
    }
  }
  SECTION("too-small references raise") {
    auto refs = TensorF::zeros({1, 3, 1, 4, 4});
    REQUIRE_THROWS_AS(ie.forward(refs), DimensionError);
  }
}

TEST_CASE("sequence_fuse ordering and inverses") {
  ParamStore<float> store;
  Rng rng(9);
  auto pe = PatchEmbed<float>::create(store, "pe", 3, 1, 8, rng);
  auto z = grid_from(TensorF::randn({1, 3, 2, 4, 4}, rng));
  auto noise = pe.forward(z);

  SECTION("fusing zero reference tokens is the identity") {
    auto fused = sequence_fuse(noise, TensorF::zeros({1, 0, 8}));
    REQUIRE(fused.data.data() == noise.data.data());
    REQUIRE(fused.tags == noise.tags);
  }
  SECTION("32 noise + 2 reference tokens") {
    auto refs = TensorF::randn({1, 2, 8}, rng);
    auto fused = sequence_fuse(noise, refs);
    REQUIRE(fused.data.shape() == Shape{1, 34, 8});
    REQUIRE(fused.count(TokenTag::noise) == 32);
    REQUIRE(fused.count(TokenTag::reference) == 2);
    REQUIRE(fused.tags[32] == TokenTag::reference);
    REQUIRE_FALSE(fused.coords[32].has());
    REQUIRE(slice(fused.data, 1, 0, 32).data() == noise.data.data());
    REQUIRE(slice(fused.data, 1, 32, 2).data() == refs.data());
  }
  SECTION("width mismatch raises") {
    REQUIRE_THROWS_AS(sequence_fuse(noise, TensorF::zeros({1, 2, 9})),
                      DimensionError);
  }
}

TEST_CASE("reference count changes token count but not noise-token values") {
  ParamStore<float> store;
  Rng rng(10);
  auto pe = PatchEmbed<float>::create(store, "pe", 9, 2, 16, rng);
  auto codec = LatentCodec<float>::make(CodecKind::identity);
  auto z_t = grid_from(TensorF::randn({1, 3, 2, 8, 8}, rng));
  auto sketch = grid_from(TensorF::randn({1, 3, 2, 8, 8}, rng));
  auto ref_frame = TensorF::randn({1, 3, 1, 8, 8}, rng);

  auto run = [&](int64_t copies) {
    std::vector<TensorF> parts(static_cast<size_t>(copies), ref_frame);
    auto refs = copies == 1 ? ref_frame : concat<float>(parts, 2);
    auto ref_lat = tile_references(codec.encode(refs), 2);
    auto fused = coarse_fuse(z_t, ref_lat, sketch);
    return pe.forward(fused);
  };
  auto one = run(1);
  auto three = run(3);
  REQUIRE(one.data.data() == three.data.data());
}

TEST_CASE("fusion chain is differentiable end-to-end") {
  ParamStore<double> store;
  Rng rng(11);
  auto pe = PatchEmbed<double>::create(store, "pe", 9, 2, 6, rng);
  auto ie = InstanceEmbed<double>::create(store, "ie", 6, rng);
  auto z_t = TensorD::randn({1, 3, 1, 8, 8}, rng);
  z_t.set_requires_grad(true);
  auto sketch = grid_from(TensorD::randn({1, 3, 1, 8, 8}, rng));
  auto refs = TensorD::randn({1, 3, 1, 8, 8}, rng);

  auto loss = [&] {
    LatentGrid<double> zg;
    zg.data = z_t;
    zg.downsample = 1;
    auto ref_lat = grid_from(add_scalar(refs, 0.0));
    auto fused = coarse_fuse(zg, tile_references(ref_lat, 1), sketch);
    auto seq = pe.forward(fused);
    auto full = sequence_fuse(seq, ie.forward(refs));
    return mean_all(mul(full.data, full.data));
  };
  REQUIRE(gradient_check<double>(loss, z_t, 1e-5) < 1e-4);
  REQUIRE(gradient_check<double>(loss, pe.proj.weight, 1e-5) < 1e-4);
  REQUIRE(gradient_check<double>(loss, ie.c1.weight, 1e-5) < 1e-4);
}
