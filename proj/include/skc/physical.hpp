#pragma once

// Physical detail reinforcement: a deterministic high-frequency patch
// descriptor over the references, projected by a small head and concatenated
// along the token axis, plus the cross-modal (text, visual) condition used by
// cross-attention.
//
// The descriptor packs, per q x q patch: an 8-bin gradient-orientation
// histogram weighted by gradient magnitude, mean and std of luminance, and
// mean RGB — 13 values. It is a fixed feature extractor; gradients flow only
// through the learned projections.

#include <cmath>
#include <string>
#include <vector>

#include "skc/fusion.hpp"
#include "skc/nn.hpp"
#include "skc/tensor.hpp"
#include "skc/vocab.hpp"

namespace skc {

inline constexpr int64_t kPhysDescriptorWidth = 13;

// refs [b,3,N,H,W], patch q -> descriptors [b, N*(H/q)*(W/q), 13].
template <typename T>
Tensor<T> phys_encode(const Tensor<T>& refs, int64_t q) {
  if (refs.rank() != 5 || refs.dim(1) != 3)
    throw DimensionError("phys_encode expects refs [b,3,N,H,W]");
  int64_t B = refs.dim(0), N = refs.dim(2), H = refs.dim(3), W = refs.dim(4);
  if (q < 1 || H % q || W % q)
    throw DimensionError("reference extents " + std::to_string(H) + "x" +
                         std::to_string(W) + " are not multiples of patch " +
                         std::to_string(q));
  int64_t gh = H / q, gw = W / q;
  int64_t P = N * gh * gw;
  std::vector<T> out(static_cast<size_t>(B * P * kPhysDescriptorWidth), T(0));
  const T* src = refs.data().data();
  auto px = [&](int64_t b, int64_t c, int64_t n, int64_t y, int64_t x) {
    return static_cast<double>(
        src[((((b * 3) + c) * N + n) * H + y) * W + x]);
  };
  for (int64_t b = 0; b < B; ++b)
    for (int64_t n = 0; n < N; ++n) {
      // luminance plane with clamped-edge central differences
      std::vector<double> lum(static_cast<size_t>(H * W));
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
          lum[y * W + x] = 0.299 * px(b, 0, n, y, x) + 0.587 * px(b, 1, n, y, x) +
                           0.114 * px(b, 2, n, y, x);
      auto lum_at = [&](int64_t y, int64_t x) {
        return lum[std::clamp<int64_t>(y, 0, H - 1) * W +
                   std::clamp<int64_t>(x, 0, W - 1)];
      };
      for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx) {
          double hist[8] = {};
          double sum_y = 0, sum_y2 = 0, sum_rgb[3] = {};
          for (int64_t dy = 0; dy < q; ++dy)
            for (int64_t dx = 0; dx < q; ++dx) {
              int64_t y = gy * q + dy, x = gx * q + dx;
              double grad_x = 0.5 * (lum_at(y, x + 1) - lum_at(y, x - 1));
              double grad_y = 0.5 * (lum_at(y + 1, x) - lum_at(y - 1, x));
              double mag = std::hypot(grad_x, grad_y);
              if (mag > 0) {
                double angle = std::atan2(grad_y, grad_x);  // (-pi, pi]
                int bin = static_cast<int>((angle + 3.14159265358979323846) /
                                           (3.14159265358979323846 / 4.0));
                hist[bin & 7] += mag;
              }
              double yv = lum[y * W + x];
              sum_y += yv;
              sum_y2 += yv * yv;
              for (int c = 0; c < 3; ++c) sum_rgb[c] += px(b, c, n, y, x);
            }
          double area = static_cast<double>(q * q);
          double mean_y = sum_y / area;
          double var_y = std::max(0.0, sum_y2 / area - mean_y * mean_y);
          int64_t token = (n * gh + gy) * gw + gx;
          T* d = out.data() + (b * P + token) * kPhysDescriptorWidth;
          for (int i = 0; i < 8; ++i) d[i] = static_cast<T>(hist[i] / area);
          d[8] = static_cast<T>(mean_y);
          d[9] = static_cast<T>(std::sqrt(var_y));
          for (int c = 0; c < 3; ++c)
            d[10 + c] = static_cast<T>(sum_rgb[c] / area);
        }
    }
  return Tensor<T>::from_data({B, P, kPhysDescriptorWidth}, std::move(out));
}

// Stacked MLP projecting descriptors into the token embedding space.
template <typename T>
struct PhysHead {
  Mlp<T> mlp;

  static PhysHead create(ParamStore<T>& store, const std::string& name,
                         int64_t hidden, int64_t d, Rng& rng) {
    PhysHead h;
    h.mlp = Mlp<T>::create(store, name, kPhysDescriptorWidth, hidden, d, rng);
    return h;
  }

  Tensor<T> forward(const Tensor<T>& features) const {
    if (features.dim(features.rank() - 1) != kPhysDescriptorWidth)
      throw DimensionError("phys_head input width " +
                           std::to_string(features.dim(features.rank() - 1)) +
                           ", expected " + std::to_string(kPhysDescriptorWidth));
    return mlp.forward(features);
  }
};

// Token-axis concat of physical tokens, tagged and coordinate-free.
template <typename T>
TokenSequence<T> phys_fuse(const TokenSequence<T>& z_fused,
                           const Tensor<T>& z_phys) {
  if (z_phys.rank() != 3 || z_phys.dim(2) != z_fused.data.dim(2))
    throw DimensionError("phys_fuse width mismatch: " +
                         shape_str(z_fused.data.shape()) + " vs " +
                         shape_str(z_phys.shape()));
  TokenSequence<T> out;
  if (z_phys.dim(1) == 0) {
    out = z_fused;
    return out;
  }
  out.data = concat<T>({z_fused.data, z_phys}, 1);
  out.tags = z_fused.tags;
  out.coords = z_fused.coords;
  out.tags.insert(out.tags.end(), static_cast<size_t>(z_phys.dim(1)),
                  TokenTag::physical);
  out.coords.insert(out.coords.end(), static_cast<size_t>(z_phys.dim(1)),
                    TokenCoord::none());
  return out;
}

// The cross-modal condition: text comes from a learned embedding table, the
// visual side is the per-reference mean descriptor linearly projected.
// Concatenation order is fixed (text first, visual second).
template <typename T>
struct ConditionBundle {
  Tensor<T> c_text;  // [b, L, d_cond]
  Tensor<T> c_vis;   // [b, N, d_cond]

  int64_t total() const { return c_text.dim(1) + c_vis.dim(1); }
  Tensor<T> merged() const {
    if (c_text.dim(1) == 0) return c_vis;
    if (c_vis.dim(1) == 0) return c_text;
    return concat<T>({c_text, c_vis}, 1);
  }
};

template <typename T>
struct ConditionEncoder {
  Tensor<T> text_table;  // [V, d_cond]
  Linear<T> vis_proj;    // 13 -> d_cond
  int64_t d_cond = 0;
  int64_t phys_patch = 16;

  static ConditionEncoder create(ParamStore<T>& store, const std::string& name,
                                 int64_t vocab_size, int64_t d_cond,
                                 int64_t phys_patch, Rng& rng) {
    ConditionEncoder e;
    e.d_cond = d_cond;
    e.phys_patch = phys_patch;
    e.text_table =
        store.add(name + ".text_table",
                  init::normal<T>({vocab_size, d_cond}, rng, 0.02));
    e.vis_proj = Linear<T>::create(store, name + ".vis_proj",
                                   kPhysDescriptorWidth, d_cond, rng);
    return e;
  }

  ConditionBundle<T> forward(const std::vector<std::vector<int32_t>>& captions,
                             const Tensor<T>& refs) const {
    ConditionBundle<T> bundle;
    int64_t b = refs.dim(0);
    if (static_cast<int64_t>(captions.size()) != b)
      throw DimensionError("caption batch does not match reference batch");
    bundle.c_text = embedding(text_table, captions);
    int64_t n = refs.dim(2);
    if (n > 0) {
      auto desc = phys_encode(refs, phys_patch);  // [b, N*Pr, 13]
      int64_t per_ref = desc.dim(1) / n;
      // fixed descriptor, so the per-reference mean is plain data
      std::vector<T> mean(static_cast<size_t>(b * n * kPhysDescriptorWidth), T(0));
      const T* src = desc.data().data();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ni = 0; ni < n; ++ni) {
          T* dst = mean.data() + (bi * n + ni) * kPhysDescriptorWidth;
          for (int64_t p = 0; p < per_ref; ++p) {
            const T* row =
                src + ((bi * n + ni) * per_ref + p) * kPhysDescriptorWidth;
            for (int64_t i = 0; i < kPhysDescriptorWidth; ++i) dst[i] += row[i];
          }
          for (int64_t i = 0; i < kPhysDescriptorWidth; ++i)
            dst[i] /= static_cast<T>(per_ref);
        }
      bundle.c_vis = vis_proj.forward(
          Tensor<T>::from_data({b, n, kPhysDescriptorWidth}, std::move(mean)));
    } else {
      bundle.c_vis = Tensor<T>::zeros({b, 0, d_cond});
    }
    return bundle;
  }
};

// Multi-head attention core shared by self- and cross-attention. q [b,S,d],
// k/v [b,L,d]; optional rotary tables (rotating q and k with `coords`) and an
// optional additive mask over the [S,L] logits.
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k,
                              const Tensor<T>& v, int64_t heads,
                              const RopeTable* rope = nullptr,
                              const std::vector<TokenCoord>* coords = nullptr,
                              const Tensor<T>* mask = nullptr) {
  int64_t b = q.dim(0), S = q.dim(1), d = q.dim(2), L = k.dim(1);
  if (d % heads)
    throw DimensionError("model width not divisible by head count");
  int64_t hd = d / heads;
  auto split = [&](const Tensor<T>& x, int64_t len) {
    return permute(reshape(x, {b, len, heads, hd}), {0, 2, 1, 3});
  };
  auto qh = split(q, S), kh = split(k, L), vh = split(v, L);
  if (rope) {
    qh = apply_rope(qh, *coords, *rope);
    kh = apply_rope(kh, *coords, *rope);
  }
  auto logits = mul_scalar(bmm(qh, permute(kh, {0, 1, 3, 2})),
                           static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  if (mask) logits = add_mask_last2(logits, *mask);
  auto attn = softmax_lastdim(logits);
  auto out = bmm(attn, vh);  // [b, heads, S, hd]
  return reshape(permute(out, {0, 2, 1, 3}), {b, S, d});
}

// Cross-attention with queries from z and keys/values from the condition
// bundle, followed by a residual connection. An empty condition returns z
// unchanged.
template <typename T>
struct CrossAttention {
  Linear<T> wq, wk, wv, wo;
  int64_t heads = 1;

  static CrossAttention create(ParamStore<T>& store, const std::string& name,
                               int64_t d, int64_t d_cond, int64_t heads,
                               Rng& rng) {
    CrossAttention c;
    c.heads = heads;
    c.wq = Linear<T>::create(store, name + ".wq", d, d, rng);
    c.wk = Linear<T>::create(store, name + ".wk", d_cond, d, rng);
    c.wv = Linear<T>::create(store, name + ".wv", d_cond, d, rng);
    c.wo = Linear<T>::create(store, name + ".wo", d, d, rng, 0.0);
    return c;
  }

  // The attention delta for queries q_in against the merged condition.
  Tensor<T> attend(const Tensor<T>& q_in, const Tensor<T>& cond) const {
    auto q = wq.forward(q_in);
    auto k = wk.forward(cond);
    auto v = wv.forward(cond);
    return wo.forward(multihead_attention(q, k, v, heads));
  }
};

template <typename T>
TokenSequence<T> cross_attend(const TokenSequence<T>& z,
                              const ConditionBundle<T>& cond,
                              const CrossAttention<T>& layer) {
  if (cond.total() == 0) return z;
  TokenSequence<T> out = z;
  out.data = add(z.data, layer.attend(z.data, cond.merged()));
  return out;
}

}  // namespace skc
