#pragma once

// SSIM, PSNR and the warped-SSIM temporal-consistency score.

#include <cmath>
#include <limits>
#include <vector>

#include "skc/error.hpp"
#include "skc/flow.hpp"
#include "skc/image.hpp"

namespace skc {

// Standard SSIM with an 8x8 uniform window at stride 4, k1=0.01, k2=0.03,
// dynamic range 1. Multi-channel images average the per-channel scores.
inline double ssim(const Image& a, const Image& b) {
  if (a.h != b.h || a.w != b.w || a.c != b.c)
    throw DimensionError("ssim extents differ");
  if (a.h < 8 || a.w < 8)
    throw DimensionError("ssim needs at least one 8x8 window");
  constexpr int win = 8, stride = 4;
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  int64_t windows = 0;
  for (int ch = 0; ch < a.c; ++ch)
    for (int y = 0; y + win <= a.h; y += stride)
      for (int x = 0; x + win <= a.w; x += stride) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = 0; dy < win; ++dy)
          for (int dx = 0; dx < win; ++dx) {
            double va = a.at(ch, y + dy, x + dx);
            double vb = b.at(ch, y + dy, x + dx);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        constexpr double n = win * win;
        double mu_a = sa / n, mu_b = sb / n;
        double var_a = saa / n - mu_a * mu_a;
        double var_b = sbb / n - mu_b * mu_b;
        double cov = sab / n - mu_a * mu_b;
        total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        ++windows;
      }
  return total / static_cast<double>(windows);
}

// 10*log10(1/MSE) with peak 1; identical inputs give the +inf sentinel.
inline double psnr(const Image& a, const Image& b) {
  if (a.h != b.h || a.w != b.w || a.c != b.c)
    throw DimensionError("psnr extents differ");
  double se = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double d = static_cast<double>(a.data[i]) - b.data[i];
    se += d * d;
  }
  double mse = se / static_cast<double>(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

// Backward warp with bilinear sampling and edge clamping:
// out(p) = img(p - flow(p)), aligning frame i with frame i+1 when `flow`
// maps content of frame i forward.
inline Image warp_backward(const Image& img, const FlowField& flow) {
  if (img.h != flow.h || img.w != flow.w)
    throw DimensionError("warp extents differ");
  Image out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      size_t i = static_cast<size_t>(y) * img.w + x;
      float sy = static_cast<float>(y) - flow.v[i];
      float sx = static_cast<float>(x) - flow.u[i];
      for (int c = 0; c < img.c; ++c) out.at(c, y, x) = bilinear(img, c, sy, sx);
    }
  return out;
}

// Mean over consecutive pairs of ssim(warp(v_i by flow_i), v_{i+1}).
inline double temporal_consistency(const std::vector<Image>& video,
                                   const std::vector<FlowField>& flows) {
  if (video.size() < 2)
    throw PreconditionError("temporal consistency needs at least two frames");
  if (flows.size() != video.size() - 1)
    throw PreconditionError("temporal consistency needs M-1 flow fields, got " +
                            std::to_string(flows.size()));
  double total = 0;
  for (size_t i = 0; i + 1 < video.size(); ++i)
    total += ssim(warp_backward(video[i], flows[i]), video[i + 1]);
  return total / static_cast<double>(video.size() - 1);
}

}  // namespace skc
