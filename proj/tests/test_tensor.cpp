#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "skc/tensor.hpp"

using namespace skc;

namespace {

// Independent oracle: naive triple-loop product, f64 accumulation.
std::vector<double> naive_matmul(const std::vector<float>& a,
                                 const std::vector<float>& b, int m, int k, int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int kk = 0; kk < k; ++kk)
        c[i * n + j] += static_cast<double>(a[i * k + kk]) * b[kk * n + j];
  return c;
}

// Independent oracle: direct 7-loop valid-region convolution.
std::vector<double> naive_conv3d(const std::vector<float>& x, int b, int ci,
                                 int it, int ih, int iw,
                                 const std::vector<float>& w, int co, int kt,
                                 int kh, int kw) {
  int ot = it - kt + 1, oh = ih - kh + 1, ow = iw - kw + 1;
  std::vector<double> out(static_cast<size_t>(b) * co * ot * oh * ow, 0.0);
  for (int bi = 0; bi < b; ++bi)
    for (int oc = 0; oc < co; ++oc)
      for (int t = 0; t < ot; ++t)
        for (int y = 0; y < oh; ++y)
          for (int z = 0; z < ow; ++z) {
            double acc = 0;
            for (int c = 0; c < ci; ++c)
              for (int dt = 0; dt < kt; ++dt)
                for (int dy = 0; dy < kh; ++dy)
                  for (int dz = 0; dz < kw; ++dz)
                    acc += static_cast<double>(
                               x[((((bi * ci) + c) * it + t + dt) * ih + y + dy) * iw +
                                 z + dz]) *
                           w[((((oc * ci) + c) * kt + dt) * kh + dy) * kw + dz];
            out[(((bi * co + oc) * ot + t) * oh + y) * ow + z] = acc;
          }
  return out;
}

TensorD random_tensor(Shape shape, Rng& rng, bool grad = true) {
  TensorD t = TensorD::randn(std::move(shape), rng);
  t.set_requires_grad(grad);
  return t;
}

double check_op(const std::function<TensorD()>& scalar_fn, TensorD& x) {
  return gradient_check<double>(scalar_fn, x, 1e-5);
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  auto eye = TensorF::from_data({2, 2}, {1, 0, 0, 1});
  auto b = TensorF::from_data({2, 2}, {3, 4, 5, 6});
  auto c = matmul(eye, b);
  REQUIRE(c.data() == std::vector<float>{3, 4, 5, 6});

  auto r = matmul(TensorF::from_data({1, 2}, {1, 2}),
                  TensorF::from_data({2, 1}, {3, 4}));
  REQUIRE(r.shape() == Shape{1, 1});
  REQUIRE(r.data()[0] == 11.0f);
}

TEST_CASE("matmul matches naive triple-loop oracle") {
  Rng rng(42);
  auto a = TensorF::randn({5, 7}, rng);
  auto b = TensorF::randn({7, 3}, rng);
  auto c = matmul(a, b);
  auto expect = naive_matmul(a.data(), b.data(), 5, 7, 3);
  for (size_t i = 0; i < c.data().size(); ++i)
    REQUIRE(std::abs(c.data()[i] - expect[i]) < 1e-6);
}

TEST_CASE("matmul shape mismatch raises dimension error") {
  auto a = TensorF::zeros({2, 3});
  auto b = TensorF::zeros({4, 2});
  REQUIRE_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("softmax uniform and shift invariance") {
  auto u = softmax_lastdim(TensorF::zeros({3}));
  for (float v : u.data()) REQUIRE(v == Catch::Approx(1.0f / 3.0f));

  auto big = softmax_lastdim(TensorF::from_data({2}, {1000.0f, 1000.0f}));
  REQUIRE(big.data()[0] == Catch::Approx(0.5f));
  REQUIRE(big.data()[1] == Catch::Approx(0.5f));
  for (float v : big.data()) REQUIRE(std::isfinite(v));
}

TEST_CASE("softmax matches direct formula in f64") {
  Rng rng(7);
  auto x = TensorD::randn({4}, rng);
  auto y = softmax_lastdim(x);
  double denom = 0;
  for (double v : x.data()) denom += std::exp(v);
  for (int i = 0; i < 4; ++i)
    REQUIRE(std::abs(y.data()[i] - std::exp(x.data()[i]) / denom) < 1e-7);
}

TEST_CASE("conv3d identity kernel") {
  Rng rng(3);
  auto x = TensorF::randn({1, 1, 2, 4, 4}, rng);
  auto w = TensorF::from_data({1, 1, 1, 1, 1}, {1.0f});
  auto y = conv3d(x, w, Conv3dSpec{});
  REQUIRE(y.shape() == x.shape());
  REQUIRE(y.data() == x.data());
}

TEST_CASE("conv3d all-ones summation") {
  auto x = TensorF::filled({1, 1, 3, 3, 3}, 1.0f);
  auto w = TensorF::filled({1, 1, 3, 3, 3}, 1.0f);
  auto y = conv3d(x, w, Conv3dSpec{});
  REQUIRE(y.shape() == Shape{1, 1, 1, 1, 1});
  REQUIRE(y.data()[0] == 27.0f);
}

TEST_CASE("conv3d matches naive 7-loop oracle") {
  Rng rng(11);
  auto x = TensorF::randn({1, 2, 4, 6, 6}, rng);
  auto w = TensorF::randn({3, 2, 2, 3, 3}, rng);
  auto y = conv3d(x, w, Conv3dSpec{});
  auto expect = naive_conv3d(x.data(), 1, 2, 4, 6, 6, w.data(), 3, 2, 3, 3);
  REQUIRE(y.data().size() == expect.size());
  for (size_t i = 0; i < expect.size(); ++i)
    REQUIRE(std::abs(y.data()[i] - expect[i]) < 1e-5);
}

TEST_CASE("conv3d kernel larger than padded input raises") {
  auto x = TensorF::zeros({1, 1, 2, 2, 2});
  auto w = TensorF::zeros({1, 1, 3, 3, 3});
  REQUIRE_THROWS_AS(conv3d(x, w, Conv3dSpec{}), DimensionError);
}

TEST_CASE("conv3d strides and padding follow the floor formula") {
  Rng rng(12);
  auto x = TensorF::randn({2, 3, 4, 9, 9}, rng);
  auto w = TensorF::randn({5, 3, 1, 3, 3}, rng);
  Conv3dSpec spec;
  spec.stride = {1, 2, 2};
  spec.padding = {0, 1, 1};
  auto y = conv3d(x, w, spec);
  REQUIRE(y.shape() == Shape{2, 5, 4, 5, 5});
}

TEST_CASE("gradient_check linear and quadratic maps") {
  auto x = TensorD::from_data({3}, {1, 2, 3});
  x.set_requires_grad(true);

  double lin = gradient_check<double>([&] { return sum_all(x); }, x, 1e-4);
  REQUIRE(lin < 1e-10);

  x.zero_grad();
  auto sq = [&] { return sum_all(mul(x, x)); };
  sum_all(mul(x, x)).backward();
  REQUIRE(x.grad()[0] == Catch::Approx(2.0));
  REQUIRE(x.grad()[1] == Catch::Approx(4.0));
  REQUIRE(x.grad()[2] == Catch::Approx(6.0));
  double quad = gradient_check<double>(sq, x, 1e-4);
  REQUIRE(quad < 1e-8);
}

TEST_CASE("every differentiable op passes gradient_check in f64") {
  Rng rng(99);

  SECTION("elementwise and scalar ops") {
    auto x = random_tensor({2, 3}, rng);
    auto y = random_tensor({2, 3}, rng);
    REQUIRE(check_op([&] { return sum_all(add(x, y)); }, x) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(sub(x, y)); }, y) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(mul(x, y)); }, x) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(mul_scalar(x, 2.5)); }, x) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(add_scalar(x, 1.5)); }, x) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(gelu(x)); }, x) < 1e-4);
    REQUIRE(check_op([&] { return mean_all(mul(x, x)); }, x) < 1e-4);
    REQUIRE(check_op([&] { return mse(x, y); }, x) < 1e-4);
  }

  SECTION("matmul and bmm") {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    REQUIRE(check_op([&] { return sum_all(matmul(a, b)); }, a) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(matmul(a, b)); }, b) < 1e-4);
    auto ba = random_tensor({2, 3, 4}, rng);
    auto bb = random_tensor({2, 4, 2}, rng);
    REQUIRE(check_op([&] { return sum_all(bmm(ba, bb)); }, ba) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(bmm(ba, bb)); }, bb) < 1e-4);
  }

  SECTION("shape ops") {
    auto x = random_tensor({2, 3, 4}, rng);
    REQUIRE(check_op([&] { return sum_all(mul(reshape(x, {6, 4}), reshape(x, {6, 4}))); }, x) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(mul(permute(x, {2, 0, 1}), permute(x, {2, 0, 1}))); }, x) < 1e-4);
    auto y = random_tensor({2, 1, 4}, rng);
    REQUIRE(check_op([&] {
              auto c = concat<double>({x, y}, 1);
              return sum_all(mul(c, c));
            }, x) < 1e-4);
    REQUIRE(check_op([&] {
              auto s = slice(x, 1, 1, 2);
              return sum_all(mul(s, s));
            }, x) < 1e-4);
  }

  SECTION("normalization and attention helpers") {
    auto x = random_tensor({3, 5}, rng);
    REQUIRE(check_op([&] { return sum_all(mul(softmax_lastdim(x), x)); }, x) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(mul(layernorm_lastdim(x), x)); }, x) < 1e-4);
    auto bias = random_tensor({5}, rng);
    REQUIRE(check_op([&] { return sum_all(mul(add_bias_lastdim(x, bias), x)); }, bias) < 1e-4);
    auto t = random_tensor({2, 3, 4}, rng);
    auto sc = random_tensor({2, 4}, rng);
    auto sh = random_tensor({2, 4}, rng);
    REQUIRE(check_op([&] { return sum_all(mul(scale_shift(t, sc, sh), t)); }, sc) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(mul(scale_shift(t, sc, sh), t)); }, sh) < 1e-4);
    REQUIRE(check_op([&] { return sum_all(mul(scale_shift(t, sc, sh), t)); }, t) < 1e-4);
  }

  SECTION("conv, upsample, pooling, patches, embedding") {
    auto x = random_tensor({1, 2, 2, 4, 4}, rng);
    auto w = random_tensor({2, 2, 1, 3, 3}, rng);
    auto bias = random_tensor({2}, rng);
    Conv3dSpec spec;
    spec.padding = {0, 1, 1};
    REQUIRE(check_op([&] {
              auto y = conv3d(x, w, &bias, spec);
              return sum_all(mul(y, y));
            }, x) < 1e-4);
    REQUIRE(check_op([&] {
              auto y = conv3d(x, w, &bias, spec);
              return sum_all(mul(y, y));
            }, w) < 1e-4);
    REQUIRE(check_op([&] {
              auto y = conv3d(x, w, &bias, spec);
              return sum_all(mul(y, y));
            }, bias) < 1e-4);
    REQUIRE(check_op([&] {
              auto y = upsample2x_hw(x);
              return sum_all(mul(y, y));
            }, x) < 1e-4);
    REQUIRE(check_op([&] {
              auto y = mean_spatial(x);
              return sum_all(mul(y, y));
            }, x) < 1e-4);
    REQUIRE(check_op([&] {
              auto y = extract_patches(x, 2);
              return sum_all(mul(y, y));
            }, x) < 1e-4);
    auto tok = random_tensor({1, 8, 8}, rng);
    REQUIRE(check_op([&] {
              auto y = scatter_patches(tok, 2, 2, 4, 4, 2);
              return sum_all(mul(y, y));
            }, tok) < 1e-4);
    auto table = random_tensor({5, 3}, rng);
    std::vector<std::vector<int32_t>> ids{{0, 2, 4}, {1, 1, 3}};
    REQUIRE(check_op([&] {
              auto y = embedding(table, ids);
              return sum_all(mul(y, y));
            }, table) < 1e-4);
  }
}

TEST_CASE("concat then split along any axis is the identity") {
  Rng rng(5);
  auto x = TensorF::randn({3, 4, 5}, rng);
  for (int64_t axis = 0; axis < 3; ++axis) {
    int64_t extent = x.dim(axis);
    int64_t cut = extent / 2;
    auto left = slice(x, axis, 0, cut);
    auto right = slice(x, axis, cut, extent - cut);
    auto joined = concat<float>({left, right}, axis);
    REQUIRE(joined.shape() == x.shape());
    REQUIRE(joined.data() == x.data());
  }
}

TEST_CASE("layer normalization output has unit statistics per row") {
  Rng rng(17);
  auto x = TensorF::randn({6, 32}, rng, 3.0f);
  auto y = layernorm_lastdim(x);
  for (int r = 0; r < 6; ++r) {
    double mean = 0, var = 0;
    for (int i = 0; i < 32; ++i) mean += y.data()[r * 32 + i];
    mean /= 32;
    for (int i = 0; i < 32; ++i) {
      double d = y.data()[r * 32 + i] - mean;
      var += d * d;
    }
    var /= 32;
    REQUIRE(std::abs(mean) < 1e-6);
    REQUIRE(std::abs(var - 1.0) < 1e-5);
  }
}

TEST_CASE("finite checks flag NaN outputs as numeric errors") {
  bool prev = finite_checks();
  finite_checks() = true;
  auto x = TensorF::from_data({2}, {std::numeric_limits<float>::infinity(), 1.0f});
  auto y = TensorF::from_data({2}, {-std::numeric_limits<float>::infinity(), 1.0f});
  REQUIRE_THROWS_AS(add(x, y), NumericError);
  finite_checks() = prev;
}

TEST_CASE("randn is reproducible for a fixed seed") {
  Rng a(123), b(123);
  auto ta = TensorF::randn({64}, a);
  auto tb = TensorF::randn({64}, b);
  REQUIRE(ta.data() == tb.data());
  Rng c(124);
  REQUIRE(TensorF::randn({64}, c).data() != ta.data());
}

TEST_CASE("backward frees the tape and accumulates fan-out") {
  auto x = TensorD::from_data({2}, {3, 4});
  x.set_requires_grad(true);
  auto y = add(x, x);  // fan-out of 2
  auto loss = sum_all(y);
  loss.backward();
  REQUIRE(x.grad()[0] == 2.0);
  REQUIRE(x.grad()[1] == 2.0);
  REQUIRE(loss.node()->parents.empty());
  REQUIRE_FALSE(static_cast<bool>(loss.node()->backward));
}
