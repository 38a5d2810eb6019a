#pragma once

// Latent codecs mapping pixel frames [b,3,T,H,W] to the grid the diffusion
// operates in. Two interchangeable implementations share one contract:
//
//   identity — passes pixels through (s=1, c=3), for fast tests;
//   conv     — a small convolutional autoencoder (s=4, c=4), pre-trained on
//              synthetic frames and then frozen.
//
// Neither compresses time: every convolution has temporal kernel 1.

#include <filesystem>
#include <string>

#include "skc/nn.hpp"
#include "skc/tensor.hpp"

namespace skc {

// The b x c x T x h x w latent representation plus its geometry.
template <typename T>
struct LatentGrid {
  Tensor<T> data;          // [b, c, T, h, w]
  int64_t downsample = 1;  // s: h = H/s, w = W/s

  int64_t batch() const { return data.dim(0); }
  int64_t channels() const { return data.dim(1); }
  int64_t frames() const { return data.dim(2); }
  int64_t height() const { return data.dim(3); }
  int64_t width() const { return data.dim(4); }
};

enum class CodecKind { identity, conv };

inline const char* codec_kind_name(CodecKind k) {
  return k == CodecKind::identity ? "identity" : "conv";
}

inline CodecKind codec_kind_from_name(const std::string& s) {
  if (s == "identity") return CodecKind::identity;
  if (s == "conv") return CodecKind::conv;
  throw ConfigError("unknown codec kind '" + s + "'");
}

template <typename T>
class LatentCodec {
 public:
  static LatentCodec make(CodecKind kind, uint64_t seed = 0x51c0dec) {
    LatentCodec codec;
    codec.kind_ = kind;
    if (kind == CodecKind::identity) {
      codec.s_ = 1;
      codec.c_ = 3;
      return codec;
    }
    codec.s_ = 4;
    codec.c_ = 4;
    Rng rng(seed);
    auto& st = codec.params_;
    Conv3dSpec down{{1, 2, 2}, {0, 1, 1}};
    Conv3dSpec same{{1, 1, 1}, {0, 1, 1}};
    Conv3dSpec point{{1, 1, 1}, {0, 0, 0}};
    codec.e1_ = Conv3dLayer<T>::create(st, "enc.c1", 3, 48, {1, 3, 3}, down, rng);
    codec.e2_ = Conv3dLayer<T>::create(st, "enc.c2", 48, 96, {1, 3, 3}, down, rng);
    codec.e3_ = Conv3dLayer<T>::create(st, "enc.c3", 96, 96, {1, 3, 3}, same, rng);
    codec.e4_ = Conv3dLayer<T>::create(st, "enc.c4", 96, 4, {1, 1, 1}, point, rng);
    codec.d1_ = Conv3dLayer<T>::create(st, "dec.c1", 4, 96, {1, 1, 1}, point, rng);
    codec.d2_ = Conv3dLayer<T>::create(st, "dec.c2", 96, 96, {1, 3, 3}, same, rng);
    codec.d3_ = Conv3dLayer<T>::create(st, "dec.c3", 96, 48, {1, 3, 3}, same, rng);
    codec.d4_ = Conv3dLayer<T>::create(st, "dec.c4", 48, 48, {1, 3, 3}, same, rng);
    codec.d5_ = Conv3dLayer<T>::create(st, "dec.c5", 48, 3, {1, 1, 1}, point, rng);
    return codec;
  }

  LatentGrid<T> encode(const Tensor<T>& frames) const {
    if (frames.rank() != 5 || frames.dim(1) != 3)
      throw DimensionError("codec expects frames [b,3,T,H,W], got " +
                           shape_str(frames.shape()));
    if (frames.dim(3) % s_ || frames.dim(4) % s_)
      throw DimensionError("frame extents " + shape_str(frames.shape()) +
                           " are not multiples of the downsample factor " +
                           std::to_string(s_));
    if (kind_ == CodecKind::identity) {
      LatentGrid<T> z;
      z.data = add_scalar(frames, T(0));  // pass-through node
      z.downsample = 1;
      return z;
    }
    auto h = gelu(e1_.forward(frames));
    h = gelu(e2_.forward(h));
    h = gelu(e3_.forward(h));
    LatentGrid<T> z;
    z.data = e4_.forward(h);
    z.downsample = s_;
    return z;
  }

  Tensor<T> decode(const LatentGrid<T>& z) const {
    if (kind_ == CodecKind::identity) return add_scalar(z.data, T(0));
    auto h = gelu(d1_.forward(z.data));
    h = gelu(d2_.forward(h));
    h = upsample2x_hw(h);
    h = gelu(d3_.forward(h));
    h = upsample2x_hw(h);
    h = gelu(d4_.forward(h));
    return d5_.forward(h);
  }

  CodecKind kind() const { return kind_; }
  int64_t downsample() const { return s_; }
  int64_t latent_channels() const { return c_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  void freeze() { params_.freeze(); }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    params_.save(dir);
    write_manifest(dir / "manifest.txt", manifest_entries());
  }

  static LatentCodec load(const std::filesystem::path& dir) {
    auto manifest = read_manifest(dir / "manifest.txt");
    auto it = manifest.find("codec.kind");
    if (it == manifest.end())
      throw IoError("codec manifest missing codec.kind in " + dir.string());
    LatentCodec codec = make(codec_kind_from_name(it->second));
    if (codec.kind_ == CodecKind::conv) codec.params_.load(dir);
    return codec;
  }

  std::map<std::string, std::string> manifest_entries() const {
    std::map<std::string, std::string> m;
    m["codec.kind"] = codec_kind_name(kind_);
    m["codec.downsample"] = std::to_string(s_);
    m["codec.latent_channels"] = std::to_string(c_);
    std::string names;
    for (const auto& [name, t] : params_.entries()) {
      if (!names.empty()) names += ",";
      names += name;
    }
    m["codec.tensors"] = names;
    return m;
  }

 private:
  CodecKind kind_ = CodecKind::identity;
  int64_t s_ = 1, c_ = 3;
  ParamStore<T> params_;
  Conv3dLayer<T> e1_, e2_, e3_, e4_;
  Conv3dLayer<T> d1_, d2_, d3_, d4_, d5_;
};

}  // namespace skc
