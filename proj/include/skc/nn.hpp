#pragma once

// Parameter registry and the small layer set the model is assembled from.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "skc/error.hpp"
#include "skc/rng.hpp"
#include "skc/serialize.hpp"
#include "skc/tensor.hpp"

namespace skc {

// Ordered name -> tensor registry. Iteration order is insertion order, which
// keeps optimizers and checkpoints deterministic.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.emplace_back(name, t);
    return t;
  }

  Tensor<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second].second;
  }

  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const {
    return params_;
  }
  size_t size() const { return params_.size(); }

  int64_t numel() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  void freeze() {
    for (auto& [name, t] : params_) t.set_requires_grad(false);
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& [name, t] : params_) write_uats(dir / (name + ".uats"), t);
  }

  // Loads every registered tensor from `dir`; missing or mismatched files are
  // integrity errors naming the tensor.
  void load(const std::filesystem::path& dir) {
    for (auto& [name, t] : params_) {
      auto path = dir / (name + ".uats");
      Tensor<T> loaded;
      try {
        loaded = read_uats<T>(path);
      } catch (const Error& e) {
        throw IoError("checkpoint tensor '" + name + "': " + e.what());
      }
      if (loaded.shape() != t.shape())
        throw IoError("checkpoint tensor '" + name + "' has shape " +
                      shape_str(loaded.shape()) + ", expected " +
                      shape_str(t.shape()));
      t.data() = loaded.data();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::map<std::string, size_t> index_;
};

namespace init {

template <typename T>
Tensor<T> normal(Shape shape, Rng& rng, double stddev) {
  return Tensor<T>::randn(std::move(shape), rng, static_cast<T>(stddev));
}

template <typename T>
Tensor<T> kaiming(Shape shape, Rng& rng, int64_t fan_in) {
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  return Tensor<T>::randn(std::move(shape), rng, static_cast<T>(stddev));
}

}  // namespace init

// y = x W + b with W [in, out].
template <typename T>
struct Linear {
  Tensor<T> weight, bias;
  int64_t in = 0, out = 0;

  static Linear create(ParamStore<T>& store, const std::string& name, int64_t in,
                       int64_t out, Rng& rng, double init_std = 0.02) {
    Linear l;
    l.in = in;
    l.out = out;
    Tensor<T> w = init_std == 0.0
                      ? Tensor<T>::zeros({in, out})
                      : init::normal<T>({in, out}, rng, init_std);
    l.weight = store.add(name + ".weight", w);
    l.bias = store.add(name + ".bias", Tensor<T>::zeros({out}));
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.dim(x.rank() - 1) != in)
      throw DimensionError("linear input width " + std::to_string(x.dim(x.rank() - 1)) +
                           " does not match " + std::to_string(in));
    Shape out_shape = x.shape();
    out_shape.back() = out;
    auto flat = reshape(x, {x.numel() / in, in});
    auto y = matmul(flat, weight);
    return add_bias_lastdim(reshape(y, std::move(out_shape)), bias);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain, bias;

  static LayerNorm create(ParamStore<T>& store, const std::string& name,
                          int64_t d) {
    LayerNorm n;
    n.gain = store.add(name + ".gain", Tensor<T>::filled({d}, T(1)));
    n.bias = store.add(name + ".bias", Tensor<T>::zeros({d}));
    return n;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return add_bias_lastdim(mul_vec_lastdim(layernorm_lastdim(x), gain), bias);
  }
};

// Two linear layers with a GELU between; the physical head and every
// feed-forward block share this shape.
template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  static Mlp create(ParamStore<T>& store, const std::string& name, int64_t in,
                    int64_t hidden, int64_t out, Rng& rng,
                    double out_init_std = 0.02) {
    Mlp m;
    m.fc1 = Linear<T>::create(store, name + ".fc1", in, hidden, rng);
    m.fc2 = Linear<T>::create(store, name + ".fc2", hidden, out, rng, out_init_std);
    return m;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return fc2.forward(gelu(fc1.forward(x)));
  }
};

template <typename T>
struct Conv3dLayer {
  Tensor<T> weight, bias;
  Conv3dSpec spec;

  static Conv3dLayer create(ParamStore<T>& store, const std::string& name,
                            int64_t ci, int64_t co,
                            std::array<int64_t, 3> kernel, Conv3dSpec spec,
                            Rng& rng) {
    Conv3dLayer c;
    int64_t fan_in = ci * kernel[0] * kernel[1] * kernel[2];
    c.weight = store.add(name + ".weight",
                         init::kaiming<T>({co, ci, kernel[0], kernel[1], kernel[2]},
                                          rng, fan_in));
    c.bias = store.add(name + ".bias", Tensor<T>::zeros({co}));
    c.spec = spec;
    return c;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv3d(x, weight, &bias, spec);
  }
};

}  // namespace skc
