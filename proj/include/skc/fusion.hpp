#pragma once

// Two-stage visual reference fusion: channel-wise coarse fusion of noise,
// reference and sketch latents, then sequence-wise fine fusion of patch
// tokens with per-reference instance embeddings.

#include <string>
#include <vector>

#include "skc/codec.hpp"
#include "skc/nn.hpp"
#include "skc/rope.hpp"
#include "skc/tensor.hpp"

namespace skc {

enum class TokenTag : uint8_t { noise, reference, physical };

template <typename T>
struct TokenSequence {
  Tensor<T> data;                  // [b, S, d]
  std::vector<TokenTag> tags;      // per token
  std::vector<TokenCoord> coords;  // per token; has() only for noise tokens

  int64_t tokens() const { return data.dim(1); }
  int64_t count(TokenTag tag) const {
    int64_t n = 0;
    for (TokenTag t : tags) n += (t == tag);
    return n;
  }
};

// Aligns N reference frames to T target frames: repeat the last reference
// when short, truncate when long.
template <typename T>
LatentGrid<T> tile_references(const LatentGrid<T>& ref, int64_t frames) {
  int64_t n = ref.frames();
  if (n < 1) throw PreconditionError("tile_references needs at least one frame");
  LatentGrid<T> out;
  out.downsample = ref.downsample;
  if (n == frames) {
    out.data = ref.data;
  } else if (n > frames) {
    out.data = slice(ref.data, 2, 0, frames);
  } else {
    std::vector<Tensor<T>> parts{ref.data};
    auto last = slice(ref.data, 2, n - 1, 1);
    for (int64_t i = n; i < frames; ++i) parts.push_back(last);
    out.data = concat(parts, 2);
  }
  return out;
}

// Channel-axis concatenation in fixed order (noise, reference, sketch); all
// three must share the (T, h, w) geometry.
template <typename T>
LatentGrid<T> coarse_fuse(const LatentGrid<T>& z_t, const LatentGrid<T>& ref,
                          const LatentGrid<T>& sketch) {
  for (const LatentGrid<T>* g : {&ref, &sketch}) {
    if (g->batch() != z_t.batch() || g->frames() != z_t.frames() ||
        g->height() != z_t.height() || g->width() != z_t.width())
      throw DimensionError("coarse_fuse latents disagree: " +
                           shape_str(z_t.data.shape()) + " vs " +
                           shape_str(g->data.shape()));
  }
  LatentGrid<T> out;
  out.downsample = z_t.downsample;
  out.data = concat<T>({z_t.data, ref.data, sketch.data}, 1);
  return out;
}

// Non-overlapping p x p patches of every latent frame projected to width d.
// Tokens are tagged "noise" and carry (t, row, col) grid coordinates.
template <typename T>
struct PatchEmbed {
  Linear<T> proj;
  int64_t patch = 0, channels = 0;

  static PatchEmbed create(ParamStore<T>& store, const std::string& name,
                           int64_t channels, int64_t patch, int64_t d, Rng& rng) {
    PatchEmbed pe;
    pe.patch = patch;
    pe.channels = channels;
    pe.proj = Linear<T>::create(store, name, channels * patch * patch, d, rng);
    return pe;
  }

  TokenSequence<T> forward(const LatentGrid<T>& z) const {
    if (z.channels() != channels)
      throw DimensionError("patch_embed channel count " +
                           std::to_string(z.channels()) + ", expected " +
                           std::to_string(channels));
    TokenSequence<T> seq;
    seq.data = proj.forward(extract_patches(z.data, patch));
    int64_t frames = z.frames();
    int64_t gh = z.height() / patch, gw = z.width() / patch;
    seq.tags.assign(static_cast<size_t>(frames * gh * gw), TokenTag::noise);
    seq.coords.reserve(seq.tags.size());
    for (int64_t t = 0; t < frames; ++t)
      for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx)
          seq.coords.push_back(TokenCoord::at(static_cast<int32_t>(t),
                                              static_cast<int32_t>(gy),
                                              static_cast<int32_t>(gx)));
    return seq;
  }
};

// Stacked 3D convolutions over the reference axis (temporal kernel 1, three
// spatial stride-2 stages), pooled and projected to one token per reference.
template <typename T>
struct InstanceEmbed {
  Conv3dLayer<T> c1, c2, c3;
  Linear<T> proj;

  static InstanceEmbed create(ParamStore<T>& store, const std::string& name,
                              int64_t d, Rng& rng) {
    InstanceEmbed ie;
    Conv3dSpec down{{1, 2, 2}, {0, 1, 1}};
    ie.c1 = Conv3dLayer<T>::create(store, name + ".c1", 3, 16, {1, 3, 3}, down, rng);
    ie.c2 = Conv3dLayer<T>::create(store, name + ".c2", 16, 32, {1, 3, 3}, down, rng);
    ie.c3 = Conv3dLayer<T>::create(store, name + ".c3", 32, 64, {1, 3, 3}, down, rng);
    ie.proj = Linear<T>::create(store, name + ".proj", 64, d, rng);
    return ie;
  }

  // refs [b,3,N,H,W] -> [b,N,d]
  Tensor<T> forward(const Tensor<T>& refs) const {
    if (refs.rank() != 5 || refs.dim(1) != 3)
      throw DimensionError("instance_embed expects refs [b,3,N,H,W]");
    if (refs.dim(2) < 1)
      throw PreconditionError("instance_embed needs at least one reference");
    if (refs.dim(3) < 8 || refs.dim(4) < 8)
      throw DimensionError("reference extents " + shape_str(refs.shape()) +
                           " too small for three stride-2 stages");
    auto h = gelu(c1.forward(refs));
    h = gelu(c2.forward(h));
    h = gelu(c3.forward(h));
    auto pooled = mean_spatial(h);            // [b, 64, N]
    auto tokens = permute(pooled, {0, 2, 1}); // [b, N, 64]
    return proj.forward(tokens);
  }
};

// Token-axis concatenation, noise tokens first; reference tokens carry no
// grid coordinates.
template <typename T>
TokenSequence<T> sequence_fuse(const TokenSequence<T>& z_noise,
                               const Tensor<T>& z_ref) {
  if (z_ref.rank() != 3 || z_ref.dim(2) != z_noise.data.dim(2))
    throw DimensionError("sequence_fuse width mismatch: " +
                         shape_str(z_noise.data.shape()) + " vs " +
                         shape_str(z_ref.shape()));
  TokenSequence<T> out;
  if (z_ref.dim(1) == 0) {
    out = z_noise;
    return out;
  }
  out.data = concat<T>({z_noise.data, z_ref}, 1);
  out.tags = z_noise.tags;
  out.coords = z_noise.coords;
  out.tags.insert(out.tags.end(), static_cast<size_t>(z_ref.dim(1)),
                  TokenTag::reference);
  out.coords.insert(out.coords.end(), static_cast<size_t>(z_ref.dim(1)),
                    TokenCoord::none());
  return out;
}

}  // namespace skc
