#pragma once

// Motion-scaled rotary position tables over (time, height, width) token
// coordinates.
//
// Each axis gets an even share of the head dimension and its own frequency
// table f_i = theta^(-2i/d_axis), scaled by (1 + alpha * m) where m is the
// normalized motion intensity along that axis. Below the fallback threshold
// (or when disabled) the tables are bitwise identical to standard RoPE.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "skc/error.hpp"
#include "skc/flow.hpp"
#include "skc/tensor.hpp"

namespace skc {

struct RopeConfig {
  double theta = 10000.0;
  double alpha_t = 0.1;
  double alpha_h = 0.3;
  double alpha_w = 0.3;
  double fallback_threshold = 0.1;
  int64_t head_dim = 36;
  bool enabled = true;

  void validate() const {
    if (head_dim < 6 || head_dim % 2)
      throw ConfigError("rope head_dim must be even and >= 6, got " +
                        std::to_string(head_dim));
    if (alpha_t < 0 || alpha_h < 0 || alpha_w < 0)
      throw ConfigError("rope alphas must be non-negative");
    if (fallback_threshold < 0 || fallback_threshold >= 1)
      throw ConfigError("rope fallback_threshold must be in [0,1)");
    if (theta <= 0) throw ConfigError("rope theta must be positive");
  }
};

struct AxisDims {
  int64_t d_t, d_h, d_w;
};

// Even near-thirds with height == width; all parts even, summing to head_dim.
inline AxisDims split_dimensions(int64_t head_dim) {
  if (head_dim < 6 || head_dim % 2)
    throw ConfigError("split_dimensions needs an even head_dim >= 6, got " +
                      std::to_string(head_dim));
  int64_t spatial = 2 * (head_dim / 6);
  return AxisDims{head_dim - 2 * spatial, spatial, spatial};
}

inline double dynamic_frequency(double f_base, double m_hat, double alpha) {
  if (m_hat < 0 || m_hat > 1)
    throw PreconditionError("motion intensity " + std::to_string(m_hat) +
                            " outside [0,1]");
  if (alpha < 0) throw PreconditionError("alpha must be non-negative");
  return f_base * (1.0 + alpha * m_hat);
}

enum class RopeAxis : uint8_t { time = 0, height = 1, width = 2 };

inline const char* rope_axis_name(RopeAxis a) {
  switch (a) {
    case RopeAxis::time: return "time";
    case RopeAxis::height: return "height";
    default: return "width";
  }
}

struct AxisFreqTable {
  RopeAxis axis = RopeAxis::time;
  int64_t length = 0;    // positions along the axis
  int64_t half_dim = 0;  // frequency bands (pairs of values)
  std::vector<double> freqs;             // per band, motion-scaled
  std::vector<double> angles;            // [length x half_dim], p * f_i
  std::vector<double> cos_v, sin_v;      // same layout

  // Valid for signed positions; the stored grid covers p in [0, length).
  double angle_at(int64_t pos, int64_t band) const {
    return static_cast<double>(pos) * freqs[static_cast<size_t>(band)];
  }
};

inline AxisFreqTable build_axis_table(int64_t length, int64_t d_axis,
                                      double m_hat, double alpha, double theta,
                                      RopeAxis axis = RopeAxis::time) {
  if (d_axis < 2 || d_axis % 2)
    throw ConfigError("axis sub-dimension must be even and >= 2, got " +
                      std::to_string(d_axis));
  if (length < 1) throw PreconditionError("axis length must be >= 1");
  AxisFreqTable t;
  t.axis = axis;
  t.length = length;
  t.half_dim = d_axis / 2;
  t.freqs.resize(static_cast<size_t>(t.half_dim));
  for (int64_t i = 0; i < t.half_dim; ++i) {
    double f_base = std::pow(theta, -2.0 * static_cast<double>(i) /
                                        static_cast<double>(d_axis));
    t.freqs[static_cast<size_t>(i)] = dynamic_frequency(f_base, m_hat, alpha);
  }
  t.angles.resize(static_cast<size_t>(length * t.half_dim));
  t.cos_v.resize(t.angles.size());
  t.sin_v.resize(t.angles.size());
  for (int64_t p = 0; p < length; ++p)
    for (int64_t i = 0; i < t.half_dim; ++i) {
      double a = static_cast<double>(p) * t.freqs[static_cast<size_t>(i)];
      size_t idx = static_cast<size_t>(p * t.half_dim + i);
      t.angles[idx] = a;
      t.cos_v[idx] = std::cos(a);
      t.sin_v[idx] = std::sin(a);
    }
  return t;
}

struct RopeTable {
  AxisFreqTable time, height, width;
  RopeConfig config;
  MotionStats motion;

  int64_t head_dim() const { return 2 * (time.half_dim + height.half_dim + width.half_dim); }
};

// Token coordinate on the (t, y, x) latent grid; t < 0 marks tokens without a
// position (reference / physical tokens), which pass through RoPE unrotated.
struct TokenCoord {
  int32_t t = -1, y = -1, x = -1;
  bool has() const { return t >= 0; }
  static TokenCoord none() { return TokenCoord{}; }
  static TokenCoord at(int32_t t, int32_t y, int32_t x) { return {t, y, x}; }
};

// Tables for a (T', H', W') token grid. Below the fallback threshold (max of
// the three statistics) or when disabled, motion is treated as zero, which
// reproduces the static tables bitwise.
inline RopeTable build_rope(const MotionStats& stats, int64_t t_len,
                            int64_t h_len, int64_t w_len,
                            const RopeConfig& config) {
  config.validate();
  if (t_len < 1 || h_len < 1 || w_len < 1)
    throw PreconditionError("rope grid extents must be >= 1");
  AxisDims dims = split_dimensions(config.head_dim);
  MotionStats m = stats;
  if (!config.enabled || stats.max() < config.fallback_threshold)
    m = MotionStats{};
  RopeTable table;
  table.config = config;
  table.motion = m;
  table.time = build_axis_table(t_len, dims.d_t, m.m_global, config.alpha_t,
                                config.theta, RopeAxis::time);
  table.height = build_axis_table(h_len, dims.d_h, m.m_v, config.alpha_h,
                                  config.theta, RopeAxis::height);
  table.width = build_axis_table(w_len, dims.d_w, m.m_u, config.alpha_w,
                                 config.theta, RopeAxis::width);
  return table;
}

namespace rope_detail {

template <typename T>
void rotate_rows(const T* src, T* dst, int64_t head_dim,
                 const TokenCoord& coord, const RopeTable& table, bool invert) {
  if (!coord.has()) {
    std::copy(src, src + head_dim, dst);
    return;
  }
  const AxisFreqTable* axes[3] = {&table.time, &table.height, &table.width};
  const int64_t pos[3] = {coord.t, coord.y, coord.x};
  int64_t offset = 0;
  for (int a = 0; a < 3; ++a) {
    const AxisFreqTable& ax = *axes[a];
    if (pos[a] < 0 || pos[a] >= ax.length)
      throw DimensionError(std::string("token coordinate ") +
                           std::to_string(pos[a]) + " outside " +
                           rope_axis_name(ax.axis) + " table of length " +
                           std::to_string(ax.length));
    const double* cs = ax.cos_v.data() + pos[a] * ax.half_dim;
    const double* sn = ax.sin_v.data() + pos[a] * ax.half_dim;
    for (int64_t i = 0; i < ax.half_dim; ++i) {
      T c = static_cast<T>(cs[i]);
      T s = static_cast<T>(invert ? -sn[i] : sn[i]);
      T x0 = src[offset + 2 * i];
      T x1 = src[offset + 2 * i + 1];
      dst[offset + 2 * i] = x0 * c - x1 * s;
      dst[offset + 2 * i + 1] = x0 * s + x1 * c;
    }
    offset += 2 * ax.half_dim;
  }
}

}  // namespace rope_detail

// Rotates query/key vectors [b, heads, S, head_dim] by their token angles.
// The rotation is orthogonal, so the backward pass applies the inverse
// rotation to the gradient.
template <typename T>
Tensor<T> apply_rope(const Tensor<T>& qk, const std::vector<TokenCoord>& coords,
                     const RopeTable& table) {
  if (qk.rank() != 4)
    throw DimensionError("apply_rope expects [b, heads, S, head_dim]");
  int64_t b = qk.dim(0), heads = qk.dim(1), S = qk.dim(2), hd = qk.dim(3);
  if (hd != table.head_dim())
    throw DimensionError("head_dim " + std::to_string(hd) +
                         " does not match rope table head_dim " +
                         std::to_string(table.head_dim()));
  if (static_cast<int64_t>(coords.size()) != S)
    throw DimensionError("coords length " + std::to_string(coords.size()) +
                         " does not match token count " + std::to_string(S));
  // validate coordinates up front so worker threads never throw
  for (const TokenCoord& c : coords)
    if (c.has() && (c.t >= table.time.length || c.y < 0 ||
                    c.y >= table.height.length || c.x < 0 ||
                    c.x >= table.width.length))
      throw DimensionError("token coordinate (" + std::to_string(c.t) + "," +
                           std::to_string(c.y) + "," + std::to_string(c.x) +
                           ") outside rope table range");
  std::vector<T> out(qk.data().size());
  const T* src = qk.data().data();
  parallel_for(b * heads * S, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      int64_t s = r % S;
      rope_detail::rotate_rows(src + r * hd, out.data() + r * hd, hd, coords[s],
                               table, false);
    }
  }, 64);
  auto qn = qk.node();
  auto coords_copy = coords;
  return detail::make_op<T>(
      qk.shape(), std::move(out), "apply_rope", {qk},
      [qn, coords_copy, table, b, heads, S, hd](TensorNode<T>& o) {
        auto& g = qn->ensure_grad();
        std::vector<T> tmp(static_cast<size_t>(hd));
        for (int64_t r = 0; r < b * heads * S; ++r) {
          int64_t s = r % S;
          rope_detail::rotate_rows(o.grad.data() + r * hd, tmp.data(), hd,
                                   coords_copy[s], table, true);
          for (int64_t i = 0; i < hd; ++i) g[r * hd + i] += tmp[i];
        }
      });
}

// CSV dump for frequency-curve inspection: axis,band,position,angle,cos,sin.
inline void write_rope_csv(std::ostream& os, const RopeTable& table) {
  os << "axis,band,position,angle,cos,sin\n";
  char buf[160];
  for (const AxisFreqTable* ax : {&table.time, &table.height, &table.width})
    for (int64_t i = 0; i < ax->half_dim; ++i)
      for (int64_t p = 0; p < ax->length; ++p) {
        size_t idx = static_cast<size_t>(p * ax->half_dim + i);
        std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%.12g,%.12g,%.12g\n",
                      rope_axis_name(ax->axis), static_cast<long long>(i),
                      static_cast<long long>(p), ax->angles[idx], ax->cos_v[idx],
                      ax->sin_v[idx]);
        os << buf;
      }
}

}  // namespace skc
