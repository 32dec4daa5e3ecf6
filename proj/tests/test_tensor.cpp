#include <cmath>

#include "doctest.h"
#include "fern/gradcheck.hpp"
#include "fern/ops.hpp"
#include "fern/tensor.hpp"

using namespace fern;

TEST_CASE("tensor_create basics") {
  Tensor t = Tensor::create({2, 2}, {1, 2, 3, 4});
  CHECK(t.shape() == Shape{2, 2});
  CHECK(t.values() == std::vector<double>{1, 2, 3, 4});
  CHECK(!t.has_grad());

  Tensor empty = Tensor::create({0}, {});
  CHECK(empty.numel() == 0);

  CHECK_THROWS_AS(Tensor::create({2}, {1, 2, 3}), std::invalid_argument);
}

TEST_CASE("backward of sum gives ones") {
  Tensor x = Tensor::create({3}, {1, 2, 3}, true);
  Tape tape;
  Tensor loss = reduce_mean(mul_scalar(x, 3.0), {0});  // mean(3x) == sum(x) for len 3
  tape.backward(loss);
  for (double g : x.grad_view()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward of x*x at 3 gives 6") {
  Tensor x = Tensor::create({1}, {3}, true);
  Tape tape;
  Tensor loss = mul(x, x);
  tape.backward(loss);
  CHECK(x.grad_view()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward of exp(-x) at 1") {
  Tensor x = Tensor::create({1}, {1}, true);
  Tape tape;
  Tensor loss = fern::exp(negate(x));
  tape.backward(loss);
  CHECK(x.grad_view()[0] == doctest::Approx(-std::exp(-1.0)).epsilon(1e-9));
}

TEST_CASE("gradient accumulation across fan-out matches fused expression") {
  // y = x*x + 2x used twice vs fused derivative 2x + 2
  Tensor x = Tensor::create({4}, {0.5, -1.5, 2.0, 3.0}, true);
  Tape tape;
  Tensor a = mul(x, x);
  Tensor b = mul_scalar(x, 2.0);
  Tensor loss = mul_scalar(reduce_mean(add(a, b), {0}), 4.0);
  tape.backward(loss);
  for (int i = 0; i < 4; ++i)
    CHECK(x.grad_view()[static_cast<size_t>(i)] ==
          doctest::Approx(2.0 * x.values()[static_cast<size_t>(i)] + 2.0).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::create({2}, {1, 2}, true);
  Tape tape;
  Tensor y = mul_scalar(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("elementwise op examples") {
  Tensor r = relu(Tensor::create({3}, {-1, 0, 2}));
  CHECK(r.values() == std::vector<double>{0, 0, 2});

  CHECK(fern::exp(Tensor::create({1}, {0})).scalar() == doctest::Approx(1.0));

  CHECK(sqrt_eps(Tensor::create({1}, {1})).scalar() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK_THROWS_AS(sqrt_eps(Tensor::create({1}, {-0.5})), std::invalid_argument);
}

TEST_CASE("conv2d forward examples") {
  // identity kernel
  Tensor x = Tensor::create({1, 1, 1, 1}, {5});
  Tensor w = Tensor::create({1, 1, 1, 1}, {1});
  Tensor y = conv2d(x, w, Tensor(), 1, 0, 1);
  CHECK(y.scalar() == doctest::Approx(5.0));

  // all-ones 3x3, padded: center sums the full window
  Tensor x1 = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor w1 = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y1 = conv2d(x1, w1, Tensor(), 1, 1, 1);
  CHECK(y1.shape() == Shape{1, 1, 3, 3});
  CHECK(y1.values()[4] == doctest::Approx(9.0));

  // grouped conv keeps shape
  Tensor x2 = Tensor::zeros({1, 3, 32, 32});
  Tensor w2 = Tensor::zeros({3, 1, 3, 3});
  Tensor y2 = conv2d(x2, w2, Tensor(), 1, 1, 3);
  CHECK(y2.shape() == Shape{1, 3, 32, 32});

  CHECK_THROWS_AS(conv2d(x2, Tensor::zeros({3, 2, 3, 3}), Tensor(), 1, 1, 3),
                  std::invalid_argument);
}

TEST_CASE("conv2d against direct summation on random input") {
  Rng rng(7);
  const int B = 2, Cin = 4, H = 6, W = 5, Cout = 6, kh = 3, kw = 3;
  for (int stride : {1, 2}) {
    for (int padding : {0, 1}) {
      std::vector<double> xv(static_cast<size_t>(B * Cin * H * W));
      std::vector<double> wv(static_cast<size_t>(Cout * Cin * kh * kw));
      std::vector<double> bv(static_cast<size_t>(Cout));
      for (auto& v : xv) v = rng.normal();
      for (auto& v : wv) v = rng.normal();
      for (auto& v : bv) v = rng.normal();
      Tensor x = Tensor::create({B, Cin, H, W}, xv);
      Tensor w = Tensor::create({Cout, Cin, kh, kw}, wv);
      Tensor b = Tensor::create({Cout}, bv);
      Tensor y = conv2d(x, w, b, stride, padding, 1);

      const int Ho = (H + 2 * padding - kh) / stride + 1;
      const int Wo = (W + 2 * padding - kw) / stride + 1;
      REQUIRE(y.shape() == Shape{B, Cout, Ho, Wo});
      for (int bb = 0; bb < B; ++bb)
        for (int co = 0; co < Cout; ++co)
          for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
              double s = bv[static_cast<size_t>(co)];
              for (int ci = 0; ci < Cin; ++ci)
                for (int r = 0; r < kh; ++r)
                  for (int c = 0; c < kw; ++c) {
                    int ih = i * stride - padding + r;
                    int iw = j * stride - padding + c;
                    if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                    s += xv[static_cast<size_t>(((bb * Cin + ci) * H + ih) * W + iw)] *
                         wv[static_cast<size_t>(((co * Cin + ci) * kh + r) * kw + c)];
                  }
              CHECK(y.values()[static_cast<size_t>(((bb * Cout + co) * Ho + i) * Wo + j)] ==
                    doctest::Approx(s).epsilon(1e-10));
            }
    }
  }
}

TEST_CASE("pool2d examples") {
  Tensor x = Tensor::create({1, 1, 2, 2}, {1, 3, 5, 7});
  CHECK(pool2d(x, PoolKind::avg, 2, 2).scalar() == doctest::Approx(4.0));
  CHECK(pool2d(x, PoolKind::max, 2, 2).scalar() == doctest::Approx(7.0));

  Tensor same = pool2d(x, PoolKind::avg, 1, 1);
  CHECK(same.values() == x.values());

  CHECK_THROWS_AS(pool2d(x, PoolKind::max, 3, 1), std::invalid_argument);
}

TEST_CASE("max pool ties route gradient to first element in scan order") {
  Tensor x = Tensor::create({1, 1, 2, 2}, {2, 2, 2, 2}, true);
  Tape tape;
  Tensor y = pool2d(x, PoolKind::max, 2, 2);
  tape.backward(y);
  CHECK(x.grad_view() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("reduce_mean examples") {
  Tensor x = Tensor::create({1, 1, 2, 2}, {1, 3, 5, 7});
  Tensor y = reduce_mean(x, {2, 3});
  CHECK(y.shape() == Shape{1, 1});
  CHECK(y.values()[0] == doctest::Approx(4.0));

  Tensor same = reduce_mean(x, {});
  CHECK(same.shape() == x.shape());
  CHECK(same.values() == x.values());

  Tensor c = reduce_mean(Tensor::create({2}, {2, 2}), {0});
  CHECK(c.scalar() == doctest::Approx(2.0));

  CHECK_THROWS_AS(reduce_mean(x, {4}), std::invalid_argument);
}

TEST_CASE("reduce_mean over non-trailing axis") {
  Tensor x = Tensor::create({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = reduce_mean(x, {0});
  CHECK(y.shape() == Shape{3});
  CHECK(y.values()[0] == doctest::Approx(2.5));
  CHECK(y.values()[1] == doctest::Approx(3.5));
  CHECK(y.values()[2] == doctest::Approx(4.5));
}

TEST_CASE("linear examples") {
  // identity weight, zero bias
  Tensor x = Tensor::create({2, 2}, {1, 2, 3, 4});
  Tensor wi = Tensor::create({2, 2}, {1, 0, 0, 1});
  Tensor b0 = Tensor::zeros({2});
  CHECK(linear(x, wi, b0).values() == x.values());

  Tensor x1 = Tensor::create({1, 2}, {1, 2});
  Tensor w1 = Tensor::create({1, 2}, {1, 1});
  CHECK(linear(x1, w1, Tensor::zeros({1})).scalar() == doctest::Approx(3.0));

  Tensor wz = Tensor::zeros({1, 2});
  Tensor b7 = Tensor::create({1}, {7});
  CHECK(linear(x1, wz, b7).scalar() == doctest::Approx(7.0));

  CHECK_THROWS_AS(linear(x1, Tensor::create({1, 3}, {1, 1, 1}), b7), std::invalid_argument);
}

TEST_CASE("batch_norm2d examples") {
  BatchNormState st(1);
  Tensor gamma = Tensor::full({1}, 1.0);
  Tensor beta = Tensor::zeros({1});

  // constant input -> zeros
  Tensor xc = Tensor::full({2, 1, 2, 2}, 3.0);
  Tensor yc = batch_norm2d(xc, gamma, beta, st, true);
  for (double v : yc.values()) CHECK(v == doctest::Approx(0.0));

  // gamma 0, beta 5 -> all 5
  BatchNormState st2(1);
  Tensor y5 = batch_norm2d(xc, Tensor::zeros({1}), Tensor::full({1}, 5.0), st2, true);
  for (double v : y5.values()) CHECK(v == doctest::Approx(5.0));

  // unit-variance input stays put
  BatchNormState st3(1);
  Tensor xpm = Tensor::create({2, 1, 1, 1}, {-1, 1});
  Tensor ypm = batch_norm2d(xpm, gamma, beta, st3, true);
  CHECK(ypm.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(ypm.values()[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("batch_norm2d running stats feed eval mode") {
  BatchNormState st(1);
  Tensor gamma = Tensor::full({1}, 1.0);
  Tensor beta = Tensor::zeros({1});
  Tensor x = Tensor::create({2, 1, 1, 1}, {0, 2});
  batch_norm2d(x, gamma, beta, st, true);
  // momentum 0.1: running_mean = 0.9*0 + 0.1*1
  CHECK(st.running_mean[0] == doctest::Approx(0.1));
  CHECK(st.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0));
  Tensor ye = batch_norm2d(x, gamma, beta, st, false);
  CHECK(ye.values()[0] == doctest::Approx((0.0 - 0.1) / std::sqrt(1.0 + 1e-5)).epsilon(1e-9));
}

TEST_CASE("combine examples") {
  CHECK(add(Tensor::create({2}, {1, 2}), Tensor::create({2}, {3, 4})).values() ==
        std::vector<double>{4, 6});

  Tensor a = Tensor::zeros({1, 2, 2, 2});
  Tensor b = Tensor::zeros({1, 3, 2, 2});
  CHECK(concat_channels({a, b}).shape() == Shape{1, 5, 2, 2});

  Tensor one = Tensor::create({1, 1, 1, 1}, {1});
  Tensor up = upsample_nearest(one, 2);
  CHECK(up.shape() == Shape{1, 1, 2, 2});
  CHECK(up.values() == std::vector<double>{1, 1, 1, 1});

  CHECK_THROWS_AS(add(Tensor::create({2}, {1, 2}), Tensor::create({3}, {1, 2, 3})),
                  std::invalid_argument);
}

TEST_CASE("softmax cross entropy examples") {
  Tensor z10 = Tensor::zeros({1, 10});
  CHECK(softmax_cross_entropy(z10, {3}).scalar() == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  Tensor z24 = Tensor::zeros({2, 24});
  CHECK(softmax_cross_entropy(z24, {0, 23}).scalar() ==
        doctest::Approx(std::log(24.0)).epsilon(1e-12));

  Tensor z = Tensor::create({1, 2}, {10, 0});
  CHECK(softmax_cross_entropy(z, {0}).scalar() ==
        doctest::Approx(std::log(1.0 + std::exp(-10.0))).epsilon(1e-9));

  CHECK_THROWS_AS(softmax_cross_entropy(z, {2}), std::invalid_argument);
}

TEST_CASE("conv and pool output shapes follow the floor formulas") {
  for (int H : {7, 8, 12, 32}) {
    for (int k : {1, 2, 3, 5}) {
      for (int s : {1, 2, 3}) {
        for (int p : {0, 1, 2}) {
          if (H + 2 * p < k) continue;
          Tensor x = Tensor::zeros({1, 1, H, H});
          Tensor w = Tensor::zeros({1, 1, k, k});
          Tensor y = conv2d(x, w, Tensor(), s, p, 1);
          const int expect = (H + 2 * p - k) / s + 1;
          CHECK(y.dim(2) == expect);
          CHECK(y.dim(3) == expect);
          if (p == 0 && k <= H) {
            Tensor yp = pool2d(x, PoolKind::avg, k, s);
            CHECK(yp.dim(2) == (H - k) / s + 1);
          }
        }
      }
    }
  }
}

TEST_CASE("forward and gradients are bit-deterministic across runs") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    std::vector<double> xv(2 * 3 * 8 * 8), wv(4 * 3 * 3 * 3);
    for (auto& v : xv) v = rng.normal();
    for (auto& v : wv) v = rng.normal();
    Tensor x = Tensor::create({2, 3, 8, 8}, xv, true);
    Tensor w = Tensor::create({4, 3, 3, 3}, wv, true);
    Tape tape;
    Tensor y = conv2d(x, w, Tensor(), 1, 1, 1);
    Tensor loss = reduce_mean(mul(y, y), {0, 1, 2, 3});
    tape.backward(loss);
    return std::make_pair(loss.scalar(), w.grad_view());
  };
  auto [l1, g1] = run(42);
  auto [l2, g2] = run(42);
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("finite difference oracle self-tests") {
  // f(x) = x^2 at x = 3
  Tensor x = Tensor::create({1}, {3}, true);
  double err = finite_difference_check([&]() { return mul(x, x); }, {x}, 1e-5);
  CHECK(err <= 1e-6);

  // relu away from the kink
  Tensor xr = Tensor::create({1}, {1}, true);
  err = finite_difference_check([&]() { return relu(xr); }, {xr}, 1e-5);
  CHECK(err <= 1e-6);

  // constant function: both sides zero
  Tensor xc = Tensor::create({1}, {2}, true);
  err = finite_difference_check([&]() { return mul_scalar(mul(xc, xc), 0.0); }, {xc}, 1e-5);
  CHECK(err == 0.0);
}
