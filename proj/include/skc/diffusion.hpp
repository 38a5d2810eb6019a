#pragma once

// Noise schedule, forward noising and the deterministic DDIM sampler.

#include <cmath>
#include <cstdint>
#include <vector>

#include "skc/codec.hpp"
#include "skc/error.hpp"
#include "skc/rng.hpp"
#include "skc/tensor.hpp"

namespace skc {

struct NoiseSchedule {
  int64_t t_train = 1000;
  std::vector<double> alpha_bar;  // indices 0..t_train, alpha_bar[0] == 1

  double ab(int64_t t) const {
    if (t < 0 || t > t_train)
      throw PreconditionError("schedule index " + std::to_string(t) +
                              " outside [0, " + std::to_string(t_train) + "]");
    return alpha_bar[static_cast<size_t>(t)];
  }

  // Cosine schedule normalized to alpha_bar[0] = 1, with the per-step ratio
  // clamped from below so alpha_bar never collapses to zero.
  static NoiseSchedule cosine(int64_t t_train) {
    if (t_train < 2) throw ConfigError("schedule needs t_train >= 2");
    NoiseSchedule s;
    s.t_train = t_train;
    s.alpha_bar.resize(static_cast<size_t>(t_train) + 1);
    auto f = [&](int64_t t) {
      double x = (static_cast<double>(t) / static_cast<double>(t_train) + 0.008) /
                 1.008 * 1.5707963267948966;
      double c = std::cos(x);
      return c * c;
    };
    double f0 = f(0);
    s.alpha_bar[0] = 1.0;
    for (int64_t t = 1; t <= t_train; ++t) {
      double raw = f(t) / f0;
      double floor = s.alpha_bar[static_cast<size_t>(t - 1)] * 0.001;
      s.alpha_bar[static_cast<size_t>(t)] = std::max(raw, floor);
    }
    return s;
  }
};

// z_t = sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps
template <typename T>
LatentGrid<T> q_sample(const LatentGrid<T>& z0, int64_t t,
                       const LatentGrid<T>& eps, const NoiseSchedule& sched) {
  if (z0.data.shape() != eps.data.shape())
    throw DimensionError("q_sample noise extents " + shape_str(eps.data.shape()) +
                         " do not match latent " + shape_str(z0.data.shape()));
  double ab = sched.ab(t);
  LatentGrid<T> out;
  out.downsample = z0.downsample;
  out.data = add(mul_scalar(z0.data, static_cast<T>(std::sqrt(ab))),
                 mul_scalar(eps.data, static_cast<T>(std::sqrt(1.0 - ab))));
  return out;
}

// Evenly strided DDIM times down to 0. Leading spacing: the walk starts one
// stride below t_train, where alpha-bar is still well-conditioned (the
// terminal values are vanishingly small and carry no usable signal).
inline std::vector<int64_t> ddim_times(const NoiseSchedule& sched, int64_t steps) {
  if (steps < 1) throw PreconditionError("ddim needs steps >= 1");
  if (steps > sched.t_train)
    throw PreconditionError("ddim steps " + std::to_string(steps) +
                            " exceed t_train " + std::to_string(sched.t_train));
  int64_t start = sched.t_train - sched.t_train / steps;
  std::vector<int64_t> times;
  times.reserve(static_cast<size_t>(steps) + 1);
  for (int64_t k = 0; k <= steps; ++k) {
    int64_t t = start * (steps - k) / steps;
    if (times.empty() || t < times.back()) times.push_back(t);
  }
  if (times.back() != 0) times.push_back(0);
  return times;
}

// Deterministic DDIM (eta = 0). `eps_fn(z_t, t)` predicts the noise; the
// caller owns conditioning and RNG for the initial latent. `x0_clip`, when
// positive, clamps the denoised estimate: near t_train the alpha-bar terminal
// values are tiny and the 1/sqrt(ab) projection would amplify prediction
// error without a bound on x0.
template <typename T, typename EpsFn>
LatentGrid<T> ddim_sample_latent(EpsFn&& eps_fn, const NoiseSchedule& sched,
                                 int64_t steps, LatentGrid<T> z,
                                 double x0_clip = 0.0) {
  autograd::NoGradGuard ng;
  auto times = ddim_times(sched, steps);
  for (size_t k = 0; k + 1 < times.size(); ++k) {
    int64_t t = times[k], t_next = times[k + 1];
    double ab = sched.ab(t), ab_next = sched.ab(t_next);
    LatentGrid<T> eps_hat = eps_fn(z, t);
    if (eps_hat.data.shape() != z.data.shape())
      throw DimensionError("epsilon prediction shape mismatch");
    // x0 = (z - sqrt(1-ab) eps) / sqrt(ab); z' = sqrt(ab') x0 + sqrt(1-ab') eps
    double inv_sqrt_ab = 1.0 / std::sqrt(ab);
    auto x0 = add(mul_scalar(z.data, static_cast<T>(inv_sqrt_ab)),
                  mul_scalar(eps_hat.data,
                             static_cast<T>(-std::sqrt(1.0 - ab) * inv_sqrt_ab)));
    if (x0_clip > 0) {
      T bound = static_cast<T>(x0_clip);
      for (T& v : x0.data()) v = std::clamp(v, -bound, bound);
    }
    z.data = add(mul_scalar(x0, static_cast<T>(std::sqrt(ab_next))),
                 mul_scalar(eps_hat.data, static_cast<T>(std::sqrt(1.0 - ab_next))));
  }
  return z;
}

// The epsilon-prediction objective: per element, draw t uniform in
// [1, t_train] and standard-normal noise from streams derived from
// (seed, step, element), noise the latent, and average the squared error of
// the model's noise prediction. Gradients flow through `eps_model`.
template <typename T, typename EpsFn>
Tensor<T> epsilon_training_loss(const std::vector<LatentGrid<T>>& z0s,
                                EpsFn&& eps_model, const NoiseSchedule& sched,
                                const Rng& rng_root, int64_t step) {
  if (z0s.empty())
    throw PreconditionError("training loss needs a nonempty batch");
  Tensor<T> total;
  for (size_t i = 0; i < z0s.size(); ++i) {
    Rng rng = rng_root.child({0x7e57, static_cast<uint64_t>(step), i});
    int64_t t = 1 + static_cast<int64_t>(rng.next_u64() %
                                         static_cast<uint64_t>(sched.t_train));
    LatentGrid<T> eps;
    eps.downsample = z0s[i].downsample;
    eps.data = Tensor<T>::randn(z0s[i].data.shape(), rng);
    LatentGrid<T> z_t = q_sample(z0s[i], t, eps, sched);
    auto loss_i = mse(eps_model(z_t, t, static_cast<int64_t>(i)).data, eps.data);
    total = (i == 0) ? loss_i : add(total, loss_i);
  }
  return mul_scalar(total, static_cast<T>(1.0 / static_cast<double>(z0s.size())));
}

// Seeded standard-normal latent of the given geometry.
template <typename T>
LatentGrid<T> gaussian_latent(Shape shape, int64_t downsample, Rng rng) {
  LatentGrid<T> z;
  z.data = Tensor<T>::randn(std::move(shape), rng);
  z.downsample = downsample;
  return z;
}

}  // namespace skc
