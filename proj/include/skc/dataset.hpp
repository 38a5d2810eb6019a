#pragma once

// Procedural moving-shape clips with sketches, per-shape references, captions
// and analytically known flow, plus the on-disk dataset layout:
//
//   <clip>/frame_%03d.ppm, sketch_%03d.ppm, ref_%02d.ppm, caption.txt,
//   flows.csv, and an index.txt listing clip directories.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "skc/error.hpp"
#include "skc/flow.hpp"
#include "skc/image.hpp"
#include "skc/rng.hpp"
#include "skc/tensor.hpp"
#include "skc/vocab.hpp"

namespace skc {

enum class ShapeKind : uint8_t { disc = 0, rectangle = 1, triangle = 2 };

inline const char* shape_kind_token(ShapeKind k) {
  switch (k) {
    case ShapeKind::disc: return "disc";
    case ShapeKind::rectangle: return "rectangle";
    default: return "triangle";
  }
}

struct ShapeSpec {
  ShapeKind kind = ShapeKind::disc;
  int color_index = 0;       // into kShapeColors
  float size = 10.0f;        // radius-like extent in px
  float cx = 0, cy = 0;      // centre at t = 0
  float vx = 0, vy = 0;      // px/frame
  float tex_kx = 0, tex_ky = 0, tex_phase = 0;  // smooth interior texture
};

inline constexpr int kShapeColorCount = 8;
inline constexpr const char* kShapeColorNames[kShapeColorCount] = {
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "teal"};
inline constexpr float kShapeColors[kShapeColorCount][3] = {
    {0.80f, 0.10f, 0.10f}, {0.10f, 0.60f, 0.15f}, {0.15f, 0.25f, 0.80f},
    {0.80f, 0.65f, 0.05f}, {0.75f, 0.15f, 0.70f}, {0.10f, 0.65f, 0.70f},
    {0.85f, 0.45f, 0.10f}, {0.05f, 0.45f, 0.45f}};

struct ClipParams {
  int shapes_min = 1;
  int shapes_max = 4;
  int frames = 8;  // M
  int height = 64;
  int width = 64;
  double velocity_max = 3.0;  // per-component, px/frame
  bool bounce = true;
};

struct ClipSample {
  TensorF frames;               // [3, M, H, W] in [0,1]
  TensorF sketches;             // [1, M, H, W], values exactly 0 or 1
  std::vector<TensorF> refs;    // N x [3, H, W], one shape on white ground
  std::vector<int32_t> caption_tokens;
  std::vector<FlowField> gt_flows;  // M-1 analytic fields
  std::vector<ShapeSpec> shapes;    // generator metadata
  std::vector<std::array<float, 2>> centers_per_frame;  // frames x shapes flattened

  int64_t clip_frames() const { return frames.dim(1); }
  int height() const { return static_cast<int>(frames.dim(2)); }
  int width() const { return static_cast<int>(frames.dim(3)); }
};

namespace dataset_detail {

inline bool inside_shape(const ShapeSpec& s, float cx, float cy, float x, float y) {
  float dx = x - cx, dy = y - cy;
  switch (s.kind) {
    case ShapeKind::disc:
      return dx * dx + dy * dy < s.size * s.size;
    case ShapeKind::rectangle:
      return std::abs(dx) < s.size && std::abs(dy) < 0.75f * s.size;
    case ShapeKind::triangle: {
      // upward triangle: vertices (0,-r), (-0.9r, 0.75r), (0.9r, 0.75r)
      float r = s.size;
      float ax = 0, ay = -r, bx = -0.9f * r, by = 0.75f * r, cx2 = 0.9f * r,
            cy2 = 0.75f * r;
      auto side = [&](float x1, float y1, float x2, float y2) {
        return (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1);
      };
      float s1 = side(ax, ay, bx, by);
      float s2 = side(bx, by, cx2, cy2);
      float s3 = side(cx2, cy2, ax, ay);
      return (s1 > 0 && s2 > 0 && s3 > 0) || (s1 < 0 && s2 < 0 && s3 < 0);
    }
  }
  return false;
}

// 4x4 supersampled coverage in [0,1].
inline float coverage(const ShapeSpec& s, float cx, float cy, int x, int y) {
  int hits = 0;
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx)
      if (inside_shape(s, cx, cy, x + (sx + 0.5f) / 4.0f, y + (sy + 0.5f) / 4.0f))
        ++hits;
  return static_cast<float>(hits) / 16.0f;
}

// Texture rides on object-local coordinates so it moves with the shape.
inline float texture(const ShapeSpec& s, float cx, float cy, float x, float y) {
  return 0.05f * std::sin(s.tex_kx * (x - cx) + s.tex_ky * (y - cy) + s.tex_phase);
}

// Paints one shape over an RGB image; `mask_out`, when given, records the
// shape id (z-order: later shapes overwrite).
inline void paint_shape(Image& img, const ShapeSpec& s, float cx, float cy,
                        std::vector<int>* mask_out, int shape_id) {
  int x0 = std::max(0, static_cast<int>(std::floor(cx - s.size - 2)));
  int x1 = std::min(img.w - 1, static_cast<int>(std::ceil(cx + s.size + 2)));
  int y0 = std::max(0, static_cast<int>(std::floor(cy - s.size - 2)));
  int y1 = std::min(img.h - 1, static_cast<int>(std::ceil(cy + s.size + 2)));
  const float* base = kShapeColors[s.color_index];
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      float cov = coverage(s, cx, cy, x, y);
      if (cov <= 0) continue;
      float tex = texture(s, cx, cy, static_cast<float>(x), static_cast<float>(y));
      for (int c = 0; c < 3; ++c) {
        float shade = std::clamp(base[c] + tex, 0.0f, 1.0f);
        img.at(c, y, x) = img.at(c, y, x) * (1.0f - cov) + shade * cov;
      }
      if (mask_out && cov > 0.5f)
        (*mask_out)[static_cast<size_t>(y) * img.w + x] = shape_id;
    }
}

}  // namespace dataset_detail

// Luminance -> Sobel magnitude (unit step ~ 1) -> threshold 0.25 -> inverted,
// so lines are exactly 0 and ground exactly 1.
inline Image extract_sketch(const Image& frame) {
  Image lum = luminance(frame);
  Image out(lum.h, lum.w, 1);
  auto at = [&](int y, int x) {
    return lum.at(0, std::clamp(y, 0, lum.h - 1), std::clamp(x, 0, lum.w - 1));
  };
  for (int y = 0; y < lum.h; ++y)
    for (int x = 0; x < lum.w; ++x) {
      float gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                 (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      float gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                 (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      float mag = std::hypot(gx, gy) / 4.0f;
      out.at(0, y, x) = mag > 0.25f ? 0.0f : 1.0f;
    }
  return out;
}

// Deterministic clip generation. Shapes overlapping beyond 50% at t=0 trigger
// regeneration, up to 20 attempts.
inline ClipSample gen_clip(uint64_t seed, const ClipParams& params,
                           const Vocabulary& vocab) {
  if (params.shapes_min < 1 || params.shapes_max < params.shapes_min ||
      params.frames < 1 || params.height < 16 || params.width < 16)
    throw PreconditionError("gen_clip parameters out of range");
  const int H = params.height, W = params.width, M = params.frames;

  std::vector<ShapeSpec> shapes;
  for (int attempt = 0;; ++attempt) {
    if (attempt >= 20)
      throw ValidationError("gen_clip could not place non-overlapping shapes");
    Rng rng = Rng(seed).child({0xc11b, static_cast<uint64_t>(attempt)});
    int n = params.shapes_min +
            static_cast<int>(rng.next_u64() %
                             static_cast<uint64_t>(params.shapes_max -
                                                   params.shapes_min + 1));
    shapes.clear();
    for (int i = 0; i < n; ++i) {
      ShapeSpec s;
      s.kind = static_cast<ShapeKind>(rng.next_u64() % 3);
      s.color_index = static_cast<int>(rng.next_u64() % kShapeColorCount);
      s.size = 7.0f + 5.0f * static_cast<float>(rng.uniform());
      s.cx = static_cast<float>(W) * (0.25f + 0.5f * static_cast<float>(rng.uniform()));
      s.cy = static_cast<float>(H) * (0.25f + 0.5f * static_cast<float>(rng.uniform()));
      // velocities on a half-pixel lattice
      auto vel = [&] {
        double v = (rng.uniform() * 2.0 - 1.0) * params.velocity_max;
        return static_cast<float>(std::round(v * 2.0) / 2.0);
      };
      s.vx = vel();
      s.vy = vel();
      float wavelength = 8.0f + 6.0f * static_cast<float>(rng.uniform());
      float angle = static_cast<float>(rng.uniform()) * 6.2831853f;
      s.tex_kx = std::cos(angle) * 6.2831853f / wavelength;
      s.tex_ky = std::sin(angle) * 6.2831853f / wavelength;
      s.tex_phase = static_cast<float>(rng.uniform()) * 6.2831853f;
      shapes.push_back(s);
    }
    // overlap check at t=0 on coarse masks
    bool ok = true;
    std::vector<std::vector<uint8_t>> masks(shapes.size());
    for (size_t i = 0; i < shapes.size(); ++i) {
      masks[i].assign(static_cast<size_t>(H) * W, 0);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          masks[i][static_cast<size_t>(y) * W + x] = dataset_detail::inside_shape(
              shapes[i], shapes[i].cx, shapes[i].cy, x + 0.5f, y + 0.5f);
    }
    for (size_t i = 0; i < shapes.size() && ok; ++i)
      for (size_t j = i + 1; j < shapes.size() && ok; ++j) {
        int64_t ai = 0, aj = 0, inter = 0;
        for (size_t p = 0; p < masks[i].size(); ++p) {
          ai += masks[i][p];
          aj += masks[j][p];
          inter += masks[i][p] & masks[j][p];
        }
        if (inter * 2 > std::min(ai, aj)) ok = false;
      }
    if (ok) break;
  }

  // trajectories with optional reflection at the borders
  const int n = static_cast<int>(shapes.size());
  std::vector<std::array<float, 2>> centers(static_cast<size_t>(M) * n);
  std::vector<std::array<float, 2>> vel(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    centers[i] = {shapes[i].cx, shapes[i].cy};
    vel[i] = {shapes[i].vx, shapes[i].vy};
  }
  for (int t = 1; t < M; ++t)
    for (int i = 0; i < n; ++i) {
      auto prev = centers[static_cast<size_t>(t - 1) * n + i];
      auto& v = vel[i];
      float margin = shapes[i].size;
      for (int axis = 0; axis < 2; ++axis) {
        float limit = axis == 0 ? static_cast<float>(W) : static_cast<float>(H);
        float next = prev[axis] + v[axis];
        if (params.bounce && (next < margin || next > limit - margin))
          v[axis] = -v[axis];
      }
      centers[static_cast<size_t>(t) * n + i] = {prev[0] + v[0], prev[1] + v[1]};
    }

  ClipSample clip;
  clip.shapes = shapes;
  clip.centers_per_frame = centers;
  clip.frames = TensorF::zeros({3, M, H, W});
  clip.sketches = TensorF::zeros({1, M, H, W});
  std::vector<int> mask(static_cast<size_t>(H) * W);
  std::vector<std::vector<int>> frame_masks;
  std::vector<std::array<float, 2>> frame_vel(static_cast<size_t>(M) * n);
  for (int t = 0; t < M; ++t) {
    Image img(H, W, 3, 1.0f);  // white ground
    std::fill(mask.begin(), mask.end(), -1);
    for (int i = 0; i < n; ++i) {
      auto c = centers[static_cast<size_t>(t) * n + i];
      dataset_detail::paint_shape(img, shapes[i], c[0], c[1], &mask, i);
      if (t + 1 < M) {
        auto cn = centers[static_cast<size_t>(t + 1) * n + i];
        frame_vel[static_cast<size_t>(t) * n + i] = {cn[0] - c[0], cn[1] - c[1]};
      }
    }
    frame_masks.push_back(mask);
    Image sketch = extract_sketch(img);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          clip.frames.data()[((c * M + t) * H + y) * W + x] = img.at(c, y, x);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        clip.sketches.data()[(static_cast<size_t>(t) * H + y) * W + x] =
            sketch.at(0, y, x);
  }

  // analytic flow: per pixel, the velocity of the topmost shape covering it
  for (int t = 0; t + 1 < M; ++t) {
    FlowField f(H, W);
    const auto& m = frame_masks[static_cast<size_t>(t)];
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int id = m[static_cast<size_t>(y) * W + x];
        if (id >= 0) {
          auto v = frame_vel[static_cast<size_t>(t) * n + id];
          f.u[static_cast<size_t>(y) * W + x] = v[0];
          f.v[static_cast<size_t>(y) * W + x] = v[1];
        }
      }
    clip.gt_flows.push_back(std::move(f));
  }

  // references: each shape alone, centred on white ground at frame size
  for (int i = 0; i < n; ++i) {
    Image img(H, W, 3, 1.0f);
    dataset_detail::paint_shape(img, shapes[i], W / 2.0f, H / 2.0f, nullptr, i);
    TensorF ref = TensorF::zeros({3, static_cast<int64_t>(H), static_cast<int64_t>(W)});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          ref.data()[(static_cast<size_t>(c) * H + y) * W + x] = img.at(c, y, x);
    clip.refs.push_back(std::move(ref));
    clip.caption_tokens.push_back(vocab.id(kShapeColorNames[shapes[i].color_index]));
    clip.caption_tokens.push_back(vocab.id(shape_kind_token(shapes[i].kind)));
  }
  return clip;
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------

namespace dataset_detail {

inline std::string zero_pad(int64_t v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

inline Image tensor_frame_to_image(const TensorF& t, int64_t frame, int64_t ch) {
  int64_t M = t.dim(1), H = t.dim(2), W = t.dim(3);
  (void)M;
  Image img(static_cast<int>(H), static_cast<int>(W), static_cast<int>(ch));
  for (int64_t c = 0; c < ch; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        img.at(static_cast<int>(c), static_cast<int>(y), static_cast<int>(x)) =
            t.data()[((c * t.dim(1) + frame) * H + y) * W + x];
  return img;
}

}  // namespace dataset_detail

inline void write_clip_dir(const std::filesystem::path& dir,
                           const ClipSample& clip, const Vocabulary& vocab) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  int64_t M = clip.clip_frames();
  for (int64_t t = 0; t < M; ++t) {
    write_ppm(dir / ("frame_" + dataset_detail::zero_pad(t, 3) + ".ppm"),
              dataset_detail::tensor_frame_to_image(clip.frames, t, 3));
    write_ppm(dir / ("sketch_" + dataset_detail::zero_pad(t, 3) + ".ppm"),
              dataset_detail::tensor_frame_to_image(clip.sketches, t, 1));
  }
  for (size_t r = 0; r < clip.refs.size(); ++r) {
    const TensorF& ref = clip.refs[r];
    Image img(static_cast<int>(ref.dim(1)), static_cast<int>(ref.dim(2)), 3);
    img.data.assign(ref.data().begin(), ref.data().end());
    write_ppm(dir / ("ref_" + dataset_detail::zero_pad(static_cast<int64_t>(r), 2) +
                     ".ppm"),
              img);
  }
  {
    std::ofstream f(dir / "caption.txt");
    if (!f) throw IoError("cannot write caption in " + dir.string());
    f << vocab.detokenize(clip.caption_tokens) << "\n";
  }
  {
    std::ofstream f(dir / "flows.csv");
    if (!f) throw IoError("cannot write flows in " + dir.string());
    f << "pair,x,y,u,v\n";
    char buf[128];
    for (size_t p = 0; p < clip.gt_flows.size(); ++p) {
      const FlowField& fl = clip.gt_flows[p];
      for (int y = 0; y < fl.h; ++y)
        for (int x = 0; x < fl.w; ++x) {
          size_t i = static_cast<size_t>(y) * fl.w + x;
          std::snprintf(buf, sizeof(buf), "%zu,%d,%d,%.9g,%.9g\n", p, x, y,
                        static_cast<double>(fl.u[i]), static_cast<double>(fl.v[i]));
          f << buf;
        }
    }
  }
}

struct LoadedClip {
  std::vector<Image> frames;    // M x [3,H,W]
  std::vector<Image> sketches;  // M x [1,H,W]
  std::vector<Image> refs;      // N x [3,H,W]
  std::string caption;
  std::vector<FlowField> flows;

  TensorF frames_tensor() const { return stack(frames, 3); }
  TensorF sketches_tensor() const { return stack(sketches, 1); }
  TensorF refs_tensor() const { return stack(refs, 3); }

 private:
  static TensorF stack(const std::vector<Image>& imgs, int64_t channels) {
    int64_t M = static_cast<int64_t>(imgs.size());
    int64_t H = M ? imgs[0].h : 0, W = M ? imgs[0].w : 0;
    TensorF t = TensorF::zeros({channels, M, H, W});
    for (int64_t f = 0; f < M; ++f)
      for (int64_t c = 0; c < channels; ++c)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x)
            t.data()[((c * M + f) * H + y) * W + x] =
                imgs[static_cast<size_t>(f)].at(
                    imgs[static_cast<size_t>(f)].c == 1 ? 0 : static_cast<int>(c),
                    static_cast<int>(y), static_cast<int>(x));
    return t;
  }
};

// Reads a numbered PPM series, validating contiguity and equal extents.
inline std::vector<Image> read_ppm_series(const std::filesystem::path& dir,
                                          const std::string& prefix, int pad) {
  namespace fs = std::filesystem;
  std::vector<Image> out;
  for (int64_t i = 0;; ++i) {
    fs::path p = dir / (prefix + dataset_detail::zero_pad(i, pad) + ".ppm");
    if (!fs::exists(p)) break;
    Image img = read_ppm(p);
    if (!out.empty() && (img.h != out[0].h || img.w != out[0].w))
      throw ValidationError("ragged frame extents at " + p.string());
    out.push_back(std::move(img));
  }
  // any matching file past the contiguous run means a gap in the numbering
  if (fs::exists(dir))
    for (const auto& entry : fs::directory_iterator(dir)) {
      std::string fn = entry.path().filename().string();
      if (fn.rfind(prefix, 0) == 0 && fn.size() > prefix.size() &&
          fn.find(".ppm") != std::string::npos &&
          fn > prefix + dataset_detail::zero_pad(static_cast<int64_t>(out.size()) - 1,
                                                 pad) + ".ppm")
        throw ValidationError(
            "missing file in series: " +
            (dir / (prefix + dataset_detail::zero_pad(static_cast<int64_t>(out.size()),
                                                      pad) + ".ppm")).string());
    }
  return out;
}

inline LoadedClip read_clip_dir(const std::filesystem::path& dir) {
  LoadedClip clip;
  clip.frames = read_ppm_series(dir, "frame_", 3);
  clip.sketches = read_ppm_series(dir, "sketch_", 3);
  for (auto& s : clip.sketches) s = luminance(s);
  clip.refs = read_ppm_series(dir, "ref_", 2);
  if (clip.frames.empty() && clip.sketches.empty())
    throw ValidationError("no frames or sketches in " + dir.string());
  if (!clip.frames.empty() && !clip.sketches.empty() &&
      clip.frames.size() != clip.sketches.size())
    throw ValidationError("frame/sketch count mismatch in " + dir.string());
  {
    std::ifstream f(dir / "caption.txt");
    if (f) std::getline(f, clip.caption);
  }
  std::filesystem::path flows = dir / "flows.csv";
  if (std::filesystem::exists(flows)) {
    std::ifstream f(flows);
    std::string line;
    std::getline(f, line);  // header
    int h = clip.frames.empty() ? clip.sketches[0].h : clip.frames[0].h;
    int w = clip.frames.empty() ? clip.sketches[0].w : clip.frames[0].w;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      size_t pos = 0;
      auto next_field = [&]() {
        size_t comma = line.find(',', pos);
        std::string v = line.substr(pos, comma - pos);
        pos = comma == std::string::npos ? line.size() : comma + 1;
        return v;
      };
      size_t pair = std::stoul(next_field());
      int x = std::stoi(next_field());
      int y = std::stoi(next_field());
      float u = std::stof(next_field());
      float v = std::stof(next_field());
      while (clip.flows.size() <= pair) clip.flows.emplace_back(h, w);
      clip.flows[pair].u[static_cast<size_t>(y) * w + x] = u;
      clip.flows[pair].v[static_cast<size_t>(y) * w + x] = v;
    }
  }
  return clip;
}

inline void write_index(const std::filesystem::path& dir,
                        const std::vector<std::string>& names) {
  std::ofstream f(dir / "index.txt");
  if (!f) throw IoError("cannot write index in " + dir.string());
  for (const auto& n : names) f << n << "\n";
}

inline std::vector<std::string> read_index(const std::filesystem::path& dir) {
  std::ifstream f(dir / "index.txt");
  if (!f) throw IoError("cannot open index in " + dir.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) names.push_back(line);
  return names;
}

}  // namespace skc
