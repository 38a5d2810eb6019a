#pragma once

// Adaptive-moment descent with decoupled weight decay.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "skc/nn.hpp"
#include "skc/serialize.hpp"

namespace skc {

template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& params, double lr, double weight_decay,
        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(params), lr_(lr), wd_(weight_decay), beta1_(beta1),
        beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : params_.entries()) {
      m_.emplace_back(t.data().size(), T(0));
      v_.emplace_back(t.data().size(), T(0));
    }
  }

  void zero_grad() { params_.zero_grad(); }

  double grad_norm() const {
    double s = 0;
    for (const auto& [name, t] : params_.entries())
      for (T g : t.grad()) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }

  void step() {
    ++t_;
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T inv_bc1 = static_cast<T>(1.0 / (1.0 - std::pow(beta1_, static_cast<double>(t_))));
    const T inv_bc2 = static_cast<T>(1.0 / (1.0 - std::pow(beta2_, static_cast<double>(t_))));
    const T lr = static_cast<T>(lr_), wd = static_cast<T>(wd_), eps = static_cast<T>(eps_);
    auto& entries = params_.entries();
    for (size_t pi = 0; pi < entries.size(); ++pi) {
      auto& tensor = entries[pi].second;
      if (tensor.grad().size() != tensor.data().size()) continue;  // no grad seen
      T* data = tensor.data().data();
      const T* grad = tensor.grad().data();
      T* m = m_[pi].data();
      T* v = v_[pi].data();
      int64_t n = static_cast<int64_t>(tensor.data().size());
      parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
          T g = grad[i];
          m[i] = b1 * m[i] + (T(1) - b1) * g;
          v[i] = b2 * v[i] + (T(1) - b2) * g * g;
          T update = (m[i] * inv_bc1) / (std::sqrt(v[i] * inv_bc2) + eps) +
                     wd * data[i];
          data[i] -= lr * update;
        }
      }, 65536);
    }
  }

  int64_t step_count() const { return t_; }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  // global gradient rescale (norm clipping)
  void scale_grads(double factor) {
    T f = static_cast<T>(factor);
    for (auto& [name, t] : params_.entries())
      if (t.grad().size() == t.data().size())
        for (T& g : t.mutable_grad()) g *= f;
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    const auto& entries = params_.entries();
    for (size_t pi = 0; pi < entries.size(); ++pi) {
      Shape shape = entries[pi].second.shape();
      write_uats(dir / ("opt_m." + entries[pi].first + ".uats"),
                 Tensor<T>::from_data(shape, m_[pi]));
      write_uats(dir / ("opt_v." + entries[pi].first + ".uats"),
                 Tensor<T>::from_data(shape, v_[pi]));
    }
  }

  void load(const std::filesystem::path& dir, int64_t step_count) {
    const auto& entries = params_.entries();
    for (size_t pi = 0; pi < entries.size(); ++pi) {
      m_[pi] = read_uats<T>(dir / ("opt_m." + entries[pi].first + ".uats")).data();
      v_[pi] = read_uats<T>(dir / ("opt_v." + entries[pi].first + ".uats")).data();
      if (m_[pi].size() != entries[pi].second.data().size())
        throw IoError("optimizer state for '" + entries[pi].first +
                      "' does not match parameter extents");
    }
    t_ = step_count;
  }

 private:
  ParamStore<T>& params_;
  double lr_, wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace skc
