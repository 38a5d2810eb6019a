#pragma once

// Dense optical flow between consecutive sketch frames and its reduction to
// per-clip motion statistics.
//
// The estimator is a classical pyramidal Horn-Schunck solver. Sketches are
// sparse line drawings, so both frames are Gaussian-blurred before the solve
// to widen the basin of attraction. Everything here is deterministic.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "skc/error.hpp"
#include "skc/image.hpp"
#include "skc/parallel.hpp"

namespace skc {

// Dense per-pixel motion in px/frame. u is horizontal (rightward positive),
// v is vertical (downward positive).
struct FlowField {
  int h = 0, w = 0;
  std::vector<float> u, v;

  FlowField() = default;
  FlowField(int h_, int w_)
      : h(h_), w(w_),
        u(static_cast<size_t>(h_) * w_, 0.0f),
        v(static_cast<size_t>(h_) * w_, 0.0f) {}
  size_t size() const { return u.size(); }
};

// Normalized per-clip motion intensities, each clamped to [0,1].
struct MotionStats {
  double m_global = 0.0;
  double m_v = 0.0;
  double m_u = 0.0;

  double max() const { return std::max(m_global, std::max(m_v, m_u)); }
};

struct FlowParams {
  int levels = 3;
  int iterations = 100;       // per pyramid level
  double smooth_weight = 0.1; // weight of the smoothness term
  double blur_sigma = 1.5;    // pre-blur applied to both inputs
};

namespace flow_detail {

// Horn-Schunck neighbourhood average with the standard 1/12, 1/6 stencil.
inline void hs_average(const std::vector<float>& f, std::vector<float>& out,
                       int h, int w) {
  auto at = [&](int y, int x) {
    return f[static_cast<size_t>(std::clamp(y, 0, h - 1)) * w +
             std::clamp(x, 0, w - 1)];
  };
  parallel_for(h, [&](int64_t y0, int64_t y1) {
    for (int y = static_cast<int>(y0); y < y1; ++y)
      for (int x = 0; x < w; ++x)
        out[static_cast<size_t>(y) * w + x] =
            (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1)) / 6.0f +
            (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) +
             at(y + 1, x + 1)) / 12.0f;
  }, 8);
}

// One pyramid level. `flow` enters as the upsampled coarse estimate and is
// refined in place. I2 is warped by the incoming flow once per warp pass.
inline void hs_level(const Image& i1, const Image& i2, FlowField& flow,
                     const FlowParams& params) {
  int h = i1.h, w = i1.w;
  size_t n = static_cast<size_t>(h) * w;
  const int warps = 4;
  int iters_per_warp = std::max(1, params.iterations / warps);
  std::vector<float> ix(n), iy(n), it(n);
  std::vector<float> du(n), dv(n), dua(n), dva(n), tmp(n);
  for (int warp_pass = 0; warp_pass < warps; ++warp_pass) {
    // backward-warp I2 by the current flow and linearize around it
    Image i2w(h, w, 1);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        size_t i = static_cast<size_t>(y) * w + x;
        i2w.at(0, y, x) = bilinear(i2, 0, y + flow.v[i], x + flow.u[i]);
      }
    auto grad_at = [&](const Image& img, int y, int x, float& gx, float& gy) {
      int xm = std::max(x - 1, 0), xp = std::min(x + 1, w - 1);
      int ym = std::max(y - 1, 0), yp = std::min(y + 1, h - 1);
      gx = 0.5f * (img.at(0, y, xp) - img.at(0, y, xm));
      gy = 0.5f * (img.at(0, yp, x) - img.at(0, ym, x));
    };
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        size_t i = static_cast<size_t>(y) * w + x;
        float g1x, g1y, g2x, g2y;
        grad_at(i1, y, x, g1x, g1y);
        grad_at(i2w, y, x, g2x, g2y);
        ix[i] = 0.5f * (g1x + g2x);
        iy[i] = 0.5f * (g1y + g2y);
        it[i] = i2w.at(0, y, x) - i1.at(0, y, x);
      }
    std::fill(du.begin(), du.end(), 0.0f);
    std::fill(dv.begin(), dv.end(), 0.0f);
    float a2 = static_cast<float>(params.smooth_weight);
    for (int iter = 0; iter < iters_per_warp; ++iter) {
      hs_average(du, dua, h, w);
      hs_average(dv, dva, h, w);
      parallel_for(h, [&](int64_t y0, int64_t y1) {
        for (int y = static_cast<int>(y0); y < y1; ++y)
          for (int x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y) * w + x;
            float t = (ix[i] * dua[i] + iy[i] * dva[i] + it[i]) /
                      (a2 + ix[i] * ix[i] + iy[i] * iy[i]);
            tmp[i] = dua[i] - ix[i] * t;
            dv[i] = dva[i] - iy[i] * t;
          }
      }, 8);
      std::swap(du, tmp);
    }
    for (size_t i = 0; i < n; ++i) {
      flow.u[i] += du[i];
      flow.v[i] += dv[i];
    }
  }
}

inline FlowField upsample_flow(const FlowField& coarse, int h, int w) {
  FlowField fine(h, w);
  float sy = static_cast<float>(coarse.h) / h;
  float sx = static_cast<float>(coarse.w) / w;
  Image cu(coarse.h, coarse.w, 1), cv(coarse.h, coarse.w, 1);
  cu.data = coarse.u;
  cv.data = coarse.v;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float yc = (y + 0.5f) * sy - 0.5f;
      float xc = (x + 0.5f) * sx - 0.5f;
      size_t i = static_cast<size_t>(y) * w + x;
      fine.u[i] = bilinear(cu, 0, yc, xc) / sx;
      fine.v[i] = bilinear(cv, 0, yc, xc) / sy;
    }
  return fine;
}

}  // namespace flow_detail

// Dense flow from frame_a to frame_b; inputs grayscale in [0,1].
inline FlowField estimate_flow(const Image& frame_a, const Image& frame_b,
                               const FlowParams& params = {}) {
  if (frame_a.c != 1 || frame_b.c != 1)
    throw DimensionError("estimate_flow expects single-channel frames");
  if (frame_a.h != frame_b.h || frame_a.w != frame_b.w)
    throw DimensionError("estimate_flow frame extents differ");
  if (frame_a.h < 8 || frame_a.w < 8)
    throw PreconditionError("estimate_flow frames smaller than 8x8");
  for (float v : frame_a.data)
    if (v < -1e-5f || v > 1.0f + 1e-5f)
      throw PreconditionError("estimate_flow input values outside [0,1]");
  for (float v : frame_b.data)
    if (v < -1e-5f || v > 1.0f + 1e-5f)
      throw PreconditionError("estimate_flow input values outside [0,1]");

  Image a = gaussian_blur(frame_a, params.blur_sigma);
  Image b = gaussian_blur(frame_b, params.blur_sigma);
  std::vector<Image> pyr_a{a}, pyr_b{b};
  for (int l = 1; l < params.levels; ++l) {
    if (pyr_a.back().h < 16 || pyr_a.back().w < 16) break;
    pyr_a.push_back(downsample2x(pyr_a.back()));
    pyr_b.push_back(downsample2x(pyr_b.back()));
  }
  FlowField flow(pyr_a.back().h, pyr_a.back().w);
  for (int l = static_cast<int>(pyr_a.size()) - 1; l >= 0; --l) {
    if (l != static_cast<int>(pyr_a.size()) - 1)
      flow = flow_detail::upsample_flow(flow, pyr_a[l].h, pyr_a[l].w);
    flow_detail::hs_level(pyr_a[l], pyr_b[l], flow, params);
  }
  return flow;
}

// Pointwise sqrt(u^2 + v^2).
inline std::vector<float> motion_magnitude(const FlowField& flow) {
  std::vector<float> m(flow.size());
  for (size_t i = 0; i < m.size(); ++i)
    m[i] = std::sqrt(flow.u[i] * flow.u[i] + flow.v[i] * flow.v[i]);
  return m;
}

// Per-clip statistics: means of magnitude, |v| and |u| over every pixel of
// every flow pair, divided by norm_ref and clamped to [0,1]. Absolute
// components are used so oscillatory motion does not cancel to zero.
inline MotionStats clip_motion_stats(const std::vector<FlowField>& flows,
                                     double norm_ref) {
  if (flows.empty())
    throw PreconditionError("clip_motion_stats needs at least one flow field");
  if (!(norm_ref > 0)) throw PreconditionError("norm_ref must be positive");
  double sum_mag = 0, sum_av = 0, sum_au = 0;
  int64_t count = 0;
  for (const FlowField& f : flows) {
    for (size_t i = 0; i < f.size(); ++i) {
      double u = f.u[i], v = f.v[i];
      sum_mag += std::sqrt(u * u + v * v);
      sum_av += std::abs(v);
      sum_au += std::abs(u);
    }
    count += static_cast<int64_t>(f.size());
  }
  auto norm = [&](double s) {
    return std::clamp(s / count / norm_ref, 0.0, 1.0);
  };
  return MotionStats{norm(sum_mag), norm(sum_av), norm(sum_au)};
}

// Default normalization reference: one tenth of the frame diagonal, so a
// motion of that size saturates the statistics at any resolution.
inline double default_norm_ref(int h, int w) {
  return 0.1 * std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w);
}

// Flow pairs over a sketch sequence reduced to one MotionStats. A single
// frame has no pairs and reports zero motion.
inline MotionStats motion_stats_for_clip(const std::vector<Image>& gray_frames,
                                         const FlowParams& params = {},
                                         double norm_ref = 0.0) {
  if (gray_frames.empty())
    throw PreconditionError("motion_stats_for_clip: empty clip");
  if (gray_frames.size() < 2) return MotionStats{};
  if (norm_ref <= 0)
    norm_ref = default_norm_ref(gray_frames[0].h, gray_frames[0].w);
  std::vector<FlowField> flows;
  flows.reserve(gray_frames.size() - 1);
  for (size_t i = 0; i + 1 < gray_frames.size(); ++i)
    flows.push_back(estimate_flow(gray_frames[i], gray_frames[i + 1], params));
  return clip_motion_stats(flows, norm_ref);
}

// ---------------------------------------------------------------------------
// Export helpers for the flow-viz CLI
// ---------------------------------------------------------------------------

inline void write_flow_csv(const std::filesystem::path& path,
                           const FlowField& flow) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << "x,y,u,v\n";
  char buf[128];
  for (int y = 0; y < flow.h; ++y)
    for (int x = 0; x < flow.w; ++x) {
      size_t i = static_cast<size_t>(y) * flow.w + x;
      std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g\n", x, y,
                    static_cast<double>(flow.u[i]), static_cast<double>(flow.v[i]));
      f << buf;
    }
  if (!f) throw IoError("short write: " + path.string());
}

// Direction -> hue, magnitude -> saturation (white = static).
inline Image flow_to_hsv_image(const FlowField& flow) {
  float max_mag = 1e-6f;
  for (size_t i = 0; i < flow.size(); ++i)
    max_mag = std::max(max_mag, std::hypot(flow.u[i], flow.v[i]));
  Image img(flow.h, flow.w, 3);
  for (int y = 0; y < flow.h; ++y)
    for (int x = 0; x < flow.w; ++x) {
      size_t i = static_cast<size_t>(y) * flow.w + x;
      float mag = std::hypot(flow.u[i], flow.v[i]) / max_mag;
      float ang = std::atan2(flow.v[i], flow.u[i]);  // [-pi, pi]
      float hue = (ang + 3.14159265f) / (2.0f * 3.14159265f) * 6.0f;
      int sector = std::min(5, static_cast<int>(hue));
      float frac = hue - sector;
      float p = 1.0f - mag;
      float q = 1.0f - mag * frac;
      float t = 1.0f - mag * (1.0f - frac);
      float r, g, b;
      switch (sector) {
        case 0: r = 1; g = t; b = p; break;
        case 1: r = q; g = 1; b = p; break;
        case 2: r = p; g = 1; b = t; break;
        case 3: r = p; g = q; b = 1; break;
        case 4: r = t; g = p; b = 1; break;
        default: r = 1; g = p; b = q; break;
      }
      img.at(0, y, x) = r;
      img.at(1, y, x) = g;
      img.at(2, y, x) = b;
    }
  return img;
}

}  // namespace skc
