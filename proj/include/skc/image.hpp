#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "skc/error.hpp"

namespace skc {

// Planar float image, values nominally in [0,1], layout [c][y][x].
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h_, int w_, int c_, float fill = 0.0f)
      : h(h_), w(w_), c(c_),
        data(static_cast<size_t>(h_) * w_ * c_, fill) {}

  float& at(int ch, int y, int x) {
    return data[(static_cast<size_t>(ch) * h + y) * w + x];
  }
  float at(int ch, int y, int x) const {
    return data[(static_cast<size_t>(ch) * h + y) * w + x];
  }
  bool empty() const { return data.empty(); }
};

inline Image luminance(const Image& img) {
  if (img.c == 1) return img;
  if (img.c != 3) throw DimensionError("luminance expects 1 or 3 channels");
  Image g(img.h, img.w, 1);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      g.at(0, y, x) = 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) +
                      0.114f * img.at(2, y, x);
  return g;
}

// Bilinear sample with edge clamping; (y, x) in pixel coordinates.
inline float bilinear(const Image& img, int ch, float y, float x) {
  float yc = std::clamp(y, 0.0f, static_cast<float>(img.h - 1));
  float xc = std::clamp(x, 0.0f, static_cast<float>(img.w - 1));
  int y0 = static_cast<int>(std::floor(yc));
  int x0 = static_cast<int>(std::floor(xc));
  int y1 = std::min(y0 + 1, img.h - 1);
  int x1 = std::min(x0 + 1, img.w - 1);
  float fy = yc - static_cast<float>(y0);
  float fx = xc - static_cast<float>(x0);
  float a = img.at(ch, y0, x0) * (1 - fx) + img.at(ch, y0, x1) * fx;
  float b = img.at(ch, y1, x0) * (1 - fx) + img.at(ch, y1, x1) * fx;
  return a * (1 - fy) + b * fy;
}

inline Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0) return img;
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(static_cast<size_t>(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[i + radius] = static_cast<float>(v);
    sum += v;
  }
  for (auto& v : k) v = static_cast<float>(v / sum);
  Image tmp(img.h, img.w, img.c);
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * img.at(ch, y, std::clamp(x + i, 0, img.w - 1));
        tmp.at(ch, y, x) = acc;
      }
  Image out(img.h, img.w, img.c);
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * tmp.at(ch, std::clamp(y + i, 0, img.h - 1), x);
        out.at(ch, y, x) = acc;
      }
  return out;
}

inline Image downsample2x(const Image& img) {
  Image blurred = gaussian_blur(img, 1.0);
  Image out((img.h + 1) / 2, (img.w + 1) / 2, img.c);
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) out.at(ch, y, x) = blurred.at(ch, 2 * y, 2 * x);
  return out;
}

inline uint8_t to_byte(float v) {
  float scaled = std::clamp(v, 0.0f, 1.0f) * 255.0f;
  return static_cast<uint8_t>(std::lround(scaled));
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  if (img.c != 1 && img.c != 3)
    throw DimensionError("write_ppm expects 1 or 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        row[x * 3 + ch] = to_byte(img.at(img.c == 1 ? 0 : ch, y, x));
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw IoError("short write: " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  auto next_token = [&]() -> std::string {
    std::string tok;
    while (f) {
      int ch = f.get();
      if (ch == '#') {
        while (f && f.get() != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) break;
        continue;
      }
      if (ch == EOF) break;
      tok.push_back(static_cast<char>(ch));
    }
    return tok;
  };
  if (next_token() != "P6") throw IoError("not a P6 PPM: " + path.string());
  int w = std::stoi(next_token());
  int h = std::stoi(next_token());
  int maxval = std::stoi(next_token());
  if (maxval != 255) throw IoError("unsupported PPM maxval in " + path.string());
  if (w <= 0 || h <= 0) throw IoError("bad PPM extents in " + path.string());
  std::vector<uint8_t> bytes(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(bytes.data()),
         static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw IoError("truncated PPM payload in " + path.string());
  Image img(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        img.at(ch, y, x) =
            static_cast<float>(bytes[(static_cast<size_t>(y) * w + x) * 3 + ch]) /
            255.0f;
  return img;
}

}  // namespace skc
