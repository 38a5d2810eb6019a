#pragma once

// Shared fixtures for tests: analytically-defined textured discs whose
// translated copies are exact, for checking flow estimates against a known
// shift.

#include <cmath>
#include <cstdint>
#include <vector>

#include "skc/image.hpp"
#include "skc/rng.hpp"

namespace skc::testing {

struct DiscPattern {
  float cx, cy, r;
  float ground = 0.9f;
  float base = 0.35f;
  struct Wave {
    float kx, ky, phase, amp;
  };
  std::vector<Wave> waves;

  static DiscPattern make(int h, int w, uint64_t seed) {
    Rng rng(seed);
    DiscPattern p{};
    p.cx = static_cast<float>(w) * (0.35f + 0.3f * static_cast<float>(rng.uniform()));
    p.cy = static_cast<float>(h) * (0.35f + 0.3f * static_cast<float>(rng.uniform()));
    p.r = 10.0f + 6.0f * static_cast<float>(rng.uniform());
    for (int k = 0; k < 4; ++k) {
      float wavelength = 6.0f + 10.0f * static_cast<float>(rng.uniform());
      float angle = static_cast<float>(rng.uniform()) * 6.2831853f;
      p.waves.push_back({std::cos(angle) * 6.2831853f / wavelength,
                         std::sin(angle) * 6.2831853f / wavelength,
                         static_cast<float>(rng.uniform()) * 6.2831853f, 0.07f});
    }
    return p;
  }

  float eval(float x, float y) const {
    float dx = x - cx, dy = y - cy;
    if (dx * dx + dy * dy >= r * r) return ground;
    float v = base;
    for (const auto& wv : waves)
      v += wv.amp * std::sin(wv.kx * x + wv.ky * y + wv.phase);
    return v;
  }

  // Renders the pattern translated by (shift_x, shift_y).
  Image render(int h, int w, float shift_x = 0, float shift_y = 0) const {
    Image img(h, w, 1);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at(0, y, x) = eval(static_cast<float>(x) - shift_x,
                               static_cast<float>(y) - shift_y);
    return img;
  }

  // Mask of the (untranslated) disc support, eroded by `margin` px.
  std::vector<uint8_t> support(int h, int w, float margin = 2.0f) const {
    std::vector<uint8_t> m(static_cast<size_t>(h) * w, 0);
    float rr = (r - margin) * (r - margin);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float dx = static_cast<float>(x) - cx, dy = static_cast<float>(y) - cy;
        if (dx * dx + dy * dy < rr) m[static_cast<size_t>(y) * w + x] = 1;
      }
    return m;
  }
};

inline double masked_mean(const std::vector<float>& field,
                          const std::vector<uint8_t>& mask) {
  double s = 0;
  int64_t n = 0;
  for (size_t i = 0; i < field.size(); ++i)
    if (mask[i]) {
      s += field[i];
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

inline double masked_mean_abs(const std::vector<float>& field,
                              const std::vector<uint8_t>& mask) {
  double s = 0;
  int64_t n = 0;
  for (size_t i = 0; i < field.size(); ++i)
    if (mask[i]) {
      s += std::abs(field[i]);
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace skc::testing
