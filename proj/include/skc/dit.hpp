#pragma once

// The denoising transformer: timestep embedding, stacked blocks (rotary
// self-attention, cross-attention conditioning, feed-forward, timestep
// modulation) and the projection back to the latent grid.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "skc/codec.hpp"
#include "skc/flow.hpp"
#include "skc/fusion.hpp"
#include "skc/image.hpp"
#include "skc/nn.hpp"
#include "skc/physical.hpp"
#include "skc/rope.hpp"
#include "skc/serialize.hpp"
#include "skc/vocab.hpp"

namespace skc {

struct DiTConfig {
  int64_t depth = 6;
  int64_t heads = 4;
  int64_t d = 144;
  int64_t patch = 2;
  int64_t ffn_mult = 4;
  int64_t d_cond = 0;  // 0 means "same as d"
  int64_t phys_patch = 16;
  int64_t phys_hidden = 64;
  bool use_instance_embed = true;
  bool use_phys_tokens = true;
  int64_t t_train = 1000;
  RopeConfig rope;

  void validate() {
    if (depth < 1) throw ConfigError("model depth must be >= 1");
    if (heads < 1 || d % heads)
      throw ConfigError("model width " + std::to_string(d) +
                        " must be a positive multiple of heads " +
                        std::to_string(heads));
    rope.head_dim = d / heads;
    split_dimensions(rope.head_dim);  // throws when the head_dim cannot split
    rope.validate();
    if (patch < 1) throw ConfigError("patch size must be >= 1");
    if (d_cond == 0) d_cond = d;
    if (t_train < 2) throw ConfigError("t_train must be >= 2");
    if (phys_patch < 1) throw ConfigError("phys_patch must be >= 1");
  }

  std::map<std::string, std::string> to_entries() const {
    std::map<std::string, std::string> m;
    m["model.depth"] = std::to_string(depth);
    m["model.heads"] = std::to_string(heads);
    m["model.d"] = std::to_string(d);
    m["model.patch"] = std::to_string(patch);
    m["model.ffn_mult"] = std::to_string(ffn_mult);
    m["model.d_cond"] = std::to_string(d_cond);
    m["model.phys_patch"] = std::to_string(phys_patch);
    m["model.phys_hidden"] = std::to_string(phys_hidden);
    m["model.use_instance_embed"] = use_instance_embed ? "1" : "0";
    m["model.use_phys_tokens"] = use_phys_tokens ? "1" : "0";
    m["model.t_train"] = std::to_string(t_train);
    m["rope.theta"] = std::to_string(rope.theta);
    m["rope.alpha_t"] = std::to_string(rope.alpha_t);
    m["rope.alpha_h"] = std::to_string(rope.alpha_h);
    m["rope.alpha_w"] = std::to_string(rope.alpha_w);
    m["rope.fallback_threshold"] = std::to_string(rope.fallback_threshold);
    m["rope.enabled"] = rope.enabled ? "1" : "0";
    return m;
  }

  static DiTConfig from_entries(const std::map<std::string, std::string>& m) {
    DiTConfig c;
    auto get = [&](const std::string& k) -> const std::string& {
      auto it = m.find(k);
      if (it == m.end()) throw IoError("checkpoint manifest missing key " + k);
      return it->second;
    };
    c.depth = std::stoll(get("model.depth"));
    c.heads = std::stoll(get("model.heads"));
    c.d = std::stoll(get("model.d"));
    c.patch = std::stoll(get("model.patch"));
    c.ffn_mult = std::stoll(get("model.ffn_mult"));
    c.d_cond = std::stoll(get("model.d_cond"));
    c.phys_patch = std::stoll(get("model.phys_patch"));
    c.phys_hidden = std::stoll(get("model.phys_hidden"));
    c.use_instance_embed = get("model.use_instance_embed") == "1";
    c.use_phys_tokens = get("model.use_phys_tokens") == "1";
    c.t_train = std::stoll(get("model.t_train"));
    c.rope.theta = std::stod(get("rope.theta"));
    c.rope.alpha_t = std::stod(get("rope.alpha_t"));
    c.rope.alpha_h = std::stod(get("rope.alpha_h"));
    c.rope.alpha_w = std::stod(get("rope.alpha_w"));
    c.rope.fallback_threshold = std::stod(get("rope.fallback_threshold"));
    c.rope.enabled = get("rope.enabled") == "1";
    c.validate();
    return c;
  }
};

// Sinusoidal position features of a scalar step.
template <typename T>
std::vector<T> sinusoidal_features(int64_t t, int64_t dim) {
  std::vector<T> f(static_cast<size_t>(dim));
  int64_t half = dim / 2;
  for (int64_t i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                           static_cast<double>(half));
    f[i] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
    f[half + i] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
  }
  if (dim % 2) f[dim - 1] = T(0);
  return f;
}

template <typename T>
struct DiTBlock {
  LayerNorm<T> ln1, ln2, ln3;
  Linear<T> wq, wk, wv, wo;
  CrossAttention<T> cross;
  Mlp<T> ffn;
  Linear<T> modulation;  // t_emb -> 6 scale/shift vectors, zero-init
  int64_t heads = 1, d = 0;

  static DiTBlock create(ParamStore<T>& store, const std::string& name,
                         const DiTConfig& cfg, Rng& rng) {
    DiTBlock b;
    b.heads = cfg.heads;
    b.d = cfg.d;
    b.ln1 = LayerNorm<T>::create(store, name + ".ln1", cfg.d);
    b.ln2 = LayerNorm<T>::create(store, name + ".ln2", cfg.d);
    b.ln3 = LayerNorm<T>::create(store, name + ".ln3", cfg.d);
    b.wq = Linear<T>::create(store, name + ".attn.wq", cfg.d, cfg.d, rng);
    b.wk = Linear<T>::create(store, name + ".attn.wk", cfg.d, cfg.d, rng);
    b.wv = Linear<T>::create(store, name + ".attn.wv", cfg.d, cfg.d, rng);
    b.wo = Linear<T>::create(store, name + ".attn.wo", cfg.d, cfg.d, rng, 0.0);
    b.cross = CrossAttention<T>::create(store, name + ".cross", cfg.d, cfg.d_cond,
                                        cfg.heads, rng);
    b.ffn = Mlp<T>::create(store, name + ".ffn", cfg.d, cfg.d * cfg.ffn_mult,
                           cfg.d, rng, 0.0);
    b.modulation = Linear<T>::create(store, name + ".mod", cfg.d, 6 * cfg.d, rng, 0.0);
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x_in, const ConditionBundle<T>& cond,
                    const Tensor<T>& t_emb, const RopeTable& rope,
                    const std::vector<TokenCoord>& coords,
                    const Tensor<T>* self_mask = nullptr) const {
    auto mods = modulation.forward(t_emb);  // [b, 6d]
    auto m = [&](int64_t i) { return slice(mods, 1, i * d, d); };
    Tensor<T> x = x_in;
    {
      auto h = scale_shift(ln1.forward(x), m(0), m(1));
      auto q = wq.forward(h);
      auto k = wk.forward(h);
      auto v = wv.forward(h);
      auto attn = multihead_attention(q, k, v, heads, &rope, &coords, self_mask);
      x = add(x, wo.forward(attn));
    }
    if (cond.total() > 0) {
      auto h = scale_shift(ln2.forward(x), m(2), m(3));
      x = add(x, cross.attend(h, cond.merged()));
    }
    {
      auto h = scale_shift(ln3.forward(x), m(4), m(5));
      x = add(x, ffn.forward(h));
    }
    return x;
  }
};

// Linear projection of noise tokens back onto the latent grid.
template <typename T>
LatentGrid<T> unpatchify(const Tensor<T>& noise_tokens, const Linear<T>& proj,
                         int64_t c, int64_t frames, int64_t h, int64_t w,
                         int64_t p, int64_t downsample) {
  int64_t expected = frames * (h / p) * (w / p);
  if (noise_tokens.dim(1) != expected)
    throw DimensionError("unpatchify token count " +
                         std::to_string(noise_tokens.dim(1)) + ", expected " +
                         std::to_string(expected));
  LatentGrid<T> g;
  g.data = scatter_patches(proj.forward(noise_tokens), c, frames, h, w, p);
  g.downsample = downsample;
  return g;
}

// Inputs prepared once per clip: frozen-codec latents and fixed descriptors
// are cached across training steps and sampler iterations.
template <typename T>
struct ModelInputs {
  LatentGrid<T> sketch_lat;  // [b,c,M,h,w]
  LatentGrid<T> ref_lat;     // [b,c,N,h,w] (not yet tiled)
  Tensor<T> refs;            // [b,3,N,H,W]
  Tensor<T> phys_desc;       // [b,P,13]
  std::vector<std::vector<int32_t>> captions;
  MotionStats stats;
};

template <typename T>
class DiTModel {
 public:
  DiTModel(DiTConfig cfg, LatentCodec<T> codec, Vocabulary vocab, uint64_t seed)
      : cfg_(std::move(cfg)), codec_(std::move(codec)), vocab_(std::move(vocab)),
        seed_(seed) {
    cfg_.validate();
    codec_.freeze();
    Rng rng(Rng(seed).child({0xd17}).state());
    int64_t coarse_channels = 3 * codec_.latent_channels();
    patch_embed_ = PatchEmbed<T>::create(params_, "patch_embed", coarse_channels,
                                         cfg_.patch, cfg_.d, rng);
    instance_embed_ = InstanceEmbed<T>::create(params_, "instance_embed", cfg_.d, rng);
    phys_head_ = PhysHead<T>::create(params_, "phys_head", cfg_.phys_hidden,
                                     cfg_.d, rng);
    cond_encoder_ = ConditionEncoder<T>::create(
        params_, "conditions", static_cast<int64_t>(vocab_.size()), cfg_.d_cond,
        cfg_.phys_patch, rng);
    t_mlp_ = Mlp<T>::create(params_, "t_embed", cfg_.d, cfg_.d, cfg_.d, rng);
    blocks_.reserve(static_cast<size_t>(cfg_.depth));
    for (int64_t i = 0; i < cfg_.depth; ++i)
      blocks_.push_back(DiTBlock<T>::create(params_, "blocks." + std::to_string(i),
                                            cfg_, rng));
    ln_final_ = LayerNorm<T>::create(params_, "final.ln", cfg_.d);
    mod_final_ = Linear<T>::create(params_, "final.mod", cfg_.d, 2 * cfg_.d, rng, 0.0);
    int64_t out_width = codec_.latent_channels() * cfg_.patch * cfg_.patch;
    proj_final_ = Linear<T>::create(params_, "final.proj", cfg_.d, out_width, rng, 0.0);
  }

  const DiTConfig& config() const { return cfg_; }
  const LatentCodec<T>& codec() const { return codec_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  uint64_t seed() const { return seed_; }

  // Deterministic function of the step index and the embedding parameters.
  Tensor<T> timestep_embed(int64_t t, int64_t batch = 1) const {
    if (t < 0 || t > cfg_.t_train)
      throw PreconditionError("timestep " + std::to_string(t) +
                              " outside [0, " + std::to_string(cfg_.t_train) + "]");
    auto feat = sinusoidal_features<T>(t, cfg_.d);
    std::vector<T> rows;
    rows.reserve(static_cast<size_t>(batch) * feat.size());
    for (int64_t b = 0; b < batch; ++b)
      rows.insert(rows.end(), feat.begin(), feat.end());
    auto f = Tensor<T>::from_data({batch, cfg_.d}, std::move(rows));
    return t_mlp_.forward(f);
  }

  // Encodes conditioning once; latents and descriptors are reused across
  // steps because the codec is frozen and the descriptor is fixed.
  ModelInputs<T> prepare(const Tensor<T>& sketches, const Tensor<T>& refs,
                         const std::vector<std::vector<int32_t>>& captions,
                         const MotionStats& stats) const {
    if (sketches.rank() != 5 || sketches.dim(1) != 1)
      throw DimensionError("sketches must be [b,1,M,H,W], got " +
                           shape_str(sketches.shape()));
    if (refs.rank() != 5 || refs.dim(1) != 3)
      throw DimensionError("refs must be [b,3,N,H,W], got " +
                           shape_str(refs.shape()));
    autograd::NoGradGuard ng;
    ModelInputs<T> in;
    in.sketch_lat = codec_.encode(concat<T>({sketches, sketches, sketches}, 1));
    in.ref_lat = codec_.encode(refs);
    in.refs = refs.detach();
    in.phys_desc = refs.dim(2) > 0
                       ? phys_encode(refs, cfg_.phys_patch)
                       : Tensor<T>::zeros({refs.dim(0), 0, kPhysDescriptorWidth});
    in.captions = captions;
    in.stats = stats;
    return in;
  }

  // The full pipeline from the noisy latent to the epsilon prediction.
  LatentGrid<T> forward(const LatentGrid<T>& z_t, const ModelInputs<T>& in,
                        int64_t t,
                        std::optional<bool> rope_enabled_override = {}) const {
    int64_t frames = z_t.frames(), h = z_t.height(), w = z_t.width();
    if (h % cfg_.patch || w % cfg_.patch)
      throw DimensionError("latent extents are not multiples of the patch size");
    if (in.sketch_lat.frames() != frames)
      throw DimensionError("sketch latent frames " +
                           std::to_string(in.sketch_lat.frames()) +
                           " do not match noisy latent frames " +
                           std::to_string(frames));

    auto ref_tiled = tile_references(in.ref_lat, frames);
    auto z_coarse = coarse_fuse(z_t, ref_tiled, in.sketch_lat);
    TokenSequence<T> tokens = patch_embed_.forward(z_coarse);
    int64_t seq = tokens.tokens();

    int64_t n_refs = in.refs.dim(2);
    if (cfg_.use_instance_embed && n_refs > 0)
      tokens = sequence_fuse(tokens, instance_embed_.forward(in.refs));
    if (cfg_.use_phys_tokens && n_refs > 0)
      tokens = phys_fuse(tokens, phys_head_.forward(in.phys_desc));

    auto cond = cond_encoder_.forward(in.captions, in.refs);
    auto t_emb = timestep_embed(t, z_t.batch());

    RopeConfig rope_cfg = cfg_.rope;
    if (rope_enabled_override) rope_cfg.enabled = *rope_enabled_override;
    RopeTable rope = build_rope(in.stats, frames, h / cfg_.patch, w / cfg_.patch,
                                rope_cfg);

    Tensor<T> x = tokens.data;
    for (const auto& block : blocks_)
      x = block.forward(x, cond, t_emb, rope, tokens.coords);

    // only noise-tagged tokens reach the output grid
    for (int64_t s = 0; s < seq; ++s)
      if (tokens.tags[static_cast<size_t>(s)] != TokenTag::noise)
        throw PreconditionError("token segment order violated");
    auto noise_tokens = slice(x, 1, 0, seq);
    auto mods = mod_final_.forward(t_emb);
    auto scale = slice(mods, 1, 0, cfg_.d);
    auto shift = slice(mods, 1, cfg_.d, cfg_.d);
    auto out_tokens = scale_shift(ln_final_.forward(noise_tokens), scale, shift);
    return unpatchify(out_tokens, proj_final_, z_t.channels(), frames, h, w,
                      cfg_.patch, z_t.downsample);
  }

  // Motion statistics from the sketch tensor via optical flow; a single frame
  // reports zero motion (there are no consecutive pairs).
  MotionStats sketch_motion_stats(const Tensor<T>& sketches) const {
    if (sketches.rank() != 5 || sketches.dim(1) != 1)
      throw DimensionError("sketches must be [b,1,M,H,W]");
    int64_t m = sketches.dim(2), h = sketches.dim(3), w = sketches.dim(4);
    std::vector<Image> frames;
    frames.reserve(static_cast<size_t>(m));
    for (int64_t f = 0; f < m; ++f) {
      Image img(static_cast<int>(h), static_cast<int>(w), 1);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          img.at(0, static_cast<int>(y), static_cast<int>(x)) = static_cast<float>(
              sketches.data()[(f * h + y) * w + x]);
      frames.push_back(std::move(img));
    }
    return motion_stats_for_clip(frames);
  }

  // Spec-facing entry point: encodes conditioning and runs the pipeline.
  LatentGrid<T> predict_epsilon(const LatentGrid<T>& z_t, const Tensor<T>& sketches,
                                const Tensor<T>& refs,
                                const std::vector<std::vector<int32_t>>& captions,
                                int64_t t, const MotionStats& stats) const {
    auto in = prepare(sketches, refs, captions, stats);
    return forward(z_t, in, t);
  }

  void save(const std::filesystem::path& dir,
            std::map<std::string, std::string> extra = {}) const {
    std::filesystem::create_directories(dir);
    params_.save(dir / "model");
    codec_.save(dir / "codec");
    vocab_.save(dir / "vocab.txt");
    auto entries = cfg_.to_entries();
    entries["codec.kind"] = codec_kind_name(codec_.kind());
    entries["vocab.hash"] = std::to_string(vocab_.hash());
    entries["seed"] = std::to_string(seed_);
    for (auto& [k, v] : extra) entries[k] = v;
    write_manifest(dir / "manifest.txt", entries);
  }

  static DiTModel load(const std::filesystem::path& dir) {
    auto manifest = read_manifest(dir / "manifest.txt");
    DiTConfig cfg = DiTConfig::from_entries(manifest);
    auto codec = LatentCodec<T>::load(dir / "codec");
    auto vocab = Vocabulary::load(dir / "vocab.txt");
    auto it = manifest.find("vocab.hash");
    if (it != manifest.end() && std::stoull(it->second) != vocab.hash())
      throw IoError("vocabulary hash mismatch in checkpoint " + dir.string());
    uint64_t seed = 0;
    if (auto s = manifest.find("seed"); s != manifest.end())
      seed = std::stoull(s->second);
    DiTModel model(cfg, std::move(codec), std::move(vocab), seed);
    model.params_.load(dir / "model");
    return model;
  }

  // Exposed for the block-level tests.
  const DiTBlock<T>& block(int64_t i) const { return blocks_[static_cast<size_t>(i)]; }
  const PatchEmbed<T>& patch_embed() const { return patch_embed_; }
  const InstanceEmbed<T>& instance_embed() const { return instance_embed_; }
  const PhysHead<T>& phys_head() const { return phys_head_; }
  const ConditionEncoder<T>& condition_encoder() const { return cond_encoder_; }

 private:
  DiTConfig cfg_;
  LatentCodec<T> codec_;
  Vocabulary vocab_;
  uint64_t seed_ = 0;
  ParamStore<T> params_;
  PatchEmbed<T> patch_embed_;
  InstanceEmbed<T> instance_embed_;
  PhysHead<T> phys_head_;
  ConditionEncoder<T> cond_encoder_;
  Mlp<T> t_mlp_;
  std::vector<DiTBlock<T>> blocks_;
  LayerNorm<T> ln_final_;
  Linear<T> mod_final_, proj_final_;
};

}  // namespace skc
