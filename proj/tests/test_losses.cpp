#include <cmath>

#include "doctest.h"
#include "fern/gradcheck.hpp"
#include "fern/losses.hpp"
#include "fern/ops.hpp"

using namespace fern;

namespace {

// Independent scalar-loop evaluation of the four loss formulas. Kept free of
// the tensor ops on purpose: this is the oracle the implementations are
// checked against.
struct BruteForce {
  static std::vector<double> channel_means(const std::vector<double>& x, int B, int C, int H,
                                           int W) {
    std::vector<double> y(static_cast<size_t>(B) * C, 0.0);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j)
            s += x[static_cast<size_t>(((b * C + c) * H + i) * W + j)];
        y[static_cast<size_t>(b * C + c)] = s / (static_cast<double>(W) * H);
      }
    return y;
  }

  static double loss_std(const std::vector<double>& x, int B, int C, int H, int W) {
    std::vector<double> y = channel_means(x, B, C, H, W);
    double acc = 0.0;
    for (int b = 0; b < B; ++b) {
      double mu = 0.0;
      for (int c = 0; c < C; ++c) mu += y[static_cast<size_t>(b * C + c)];
      mu /= C;
      double var = 0.0;
      for (int c = 0; c < C; ++c) {
        double d = y[static_cast<size_t>(b * C + c)] - mu;
        var += d * d;
      }
      var /= C;
      acc += std::exp(-std::sqrt(var + 1e-12));
    }
    return acc / B;
  }

  static double loss_mean(const std::vector<double>& x, int B, int C, int H, int W) {
    double acc = 0.0;
    for (int b = 0; b < B; ++b) {
      double m = 0.0;
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j)
            m += x[static_cast<size_t>(((b * C + c) * H + i) * W + j)];
      m /= static_cast<double>(C) * W * H;
      acc += std::exp(-m);
    }
    return acc / B;
  }

  static double loss_feature(const std::vector<double>& x, int B, int C, int H, int W) {
    return 0.5 * (loss_std(x, B, C, H, W) + loss_mean(x, B, C, H, W));
  }
};

Tensor make_features(Rng& rng, int B, int C, int H, int W, bool requires_grad = false) {
  std::vector<double> v(static_cast<size_t>(B) * C * H * W);
  for (auto& x : v) x = std::fabs(rng.normal());  // post-relu features are non-negative
  return Tensor::create({B, C, H, W}, std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("channel_means examples") {
  Tensor x = Tensor::create({1, 1, 2, 2}, {1, 3, 5, 7});
  CHECK(channel_means(x).values()[0] == doctest::Approx(4.0));

  Tensor k = Tensor::full({2, 3, 2, 2}, 2.5);
  Tensor km = channel_means(k);
  for (double v : km.values()) CHECK(v == doctest::Approx(2.5));

  Tensor x2 = Tensor::create({1, 2, 1, 1}, {0, 2});
  CHECK(channel_means(x2).values() == std::vector<double>{0, 2});
}

TEST_CASE("loss_std hand-evaluated values") {
  // all-equal channel means -> std 0 -> exp(-sqrt(eps)) ~= 1
  Tensor eq = Tensor::full({1, 3, 2, 2}, 4.0);
  CHECK(loss_std(eq).scalar() == doctest::Approx(1.0).epsilon(1e-5));

  // Y = [0,2]: mean 1, var 1, std 1 -> e^-1
  Tensor x = Tensor::create({1, 2, 1, 1}, {0, 2});
  CHECK(loss_std(x).scalar() == doctest::Approx(0.367879441).epsilon(1e-6));

  // doubling the spread decreases the loss
  Tensor x2 = Tensor::create({1, 2, 1, 1}, {0, 4});
  CHECK(loss_std(x2).scalar() == doctest::Approx(0.135335283).epsilon(1e-6));
  CHECK(loss_std(x2).scalar() < loss_std(x).scalar());

  CHECK_THROWS_AS(loss_std(Tensor::zeros({1, 1, 2, 2})), std::invalid_argument);
}

TEST_CASE("loss_mean hand-evaluated values") {
  CHECK(loss_mean(Tensor::zeros({2, 3, 2, 2})).scalar() == doctest::Approx(1.0));

  Tensor x = Tensor::create({1, 2, 1, 1}, {0, 2});
  CHECK(loss_mean(x).scalar() == doctest::Approx(0.367879441).epsilon(1e-6));

  Tensor x3 = Tensor::full({1, 4, 3, 3}, 3.0);
  CHECK(loss_mean(x3).scalar() == doctest::Approx(0.049787068).epsilon(1e-6));
}

TEST_CASE("loss_feature combines the two terms") {
  // constant zero X: both terms at their ceiling
  Tensor z = Tensor::zeros({1, 2, 2, 2});
  CHECK(loss_feature(z).scalar() == doctest::Approx(1.0).epsilon(1e-5));

  Tensor x = Tensor::create({1, 2, 1, 1}, {0, 2});
  CHECK(loss_feature(x).scalar() == doctest::Approx(0.367879441).epsilon(1e-6));
}

TEST_CASE("loss implementations match the scalar-loop oracle on 100 random tensors") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int B = 1 + static_cast<int>(rng.below(4));
    const int C = 2 + static_cast<int>(rng.below(7));
    const int H = 1 + static_cast<int>(rng.below(5));
    const int W = 1 + static_cast<int>(rng.below(5));
    Tensor x = make_features(rng, B, C, H, W);
    const std::vector<double>& xv = x.values();

    std::vector<double> y_ref = BruteForce::channel_means(xv, B, C, H, W);
    Tensor y = channel_means(x);
    for (size_t i = 0; i < y_ref.size(); ++i)
      CHECK(y.values()[i] == doctest::Approx(y_ref[i]).epsilon(0).scale(0).epsilon(1e-12));

    CHECK(std::fabs(loss_std(x).scalar() - BruteForce::loss_std(xv, B, C, H, W)) < 1e-9);
    CHECK(std::fabs(loss_mean(x).scalar() - BruteForce::loss_mean(xv, B, C, H, W)) < 1e-9);
    CHECK(std::fabs(loss_feature(x).scalar() - BruteForce::loss_feature(xv, B, C, H, W)) < 1e-9);
  }
}

TEST_CASE("loss_std and loss_mean lie in (0,1] for non-negative features") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor x = make_features(rng, 2, 4, 3, 3);
    for (double v : {loss_std(x).scalar(), loss_mean(x).scalar(), loss_feature(x).scalar()}) {
      CHECK(v > 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("loss_mean strictly decreases when every element grows") {
  Rng rng(12);
  Tensor x = make_features(rng, 2, 3, 2, 2);
  Tensor bigger = Tensor::create(x.shape(), x.values());
  for (double& v : bigger.values()) v += 0.25;
  CHECK(loss_mean(bigger).scalar() < loss_mean(x).scalar());
}

TEST_CASE("loss_std gradient points in the spread-increasing direction") {
  // distinct channel means; above-mean channels should get negative gradient
  // (SGD then pushes them up), below-mean channels positive
  Tensor x = Tensor::create({1, 4, 1, 1}, {0.5, 1.0, 2.0, 4.0}, true);
  Tape tape;
  Tensor l = loss_std(x);
  tape.backward(l);
  const double mean = (0.5 + 1.0 + 2.0 + 4.0) / 4.0;
  for (int c = 0; c < 4; ++c) {
    const double v = x.values()[static_cast<size_t>(c)];
    const double g = x.grad_view()[static_cast<size_t>(c)];
    if (v > mean) CHECK(g < 0.0);
    if (v < mean) CHECK(g > 0.0);
  }
}

TEST_CASE("gradient fidelity of the losses") {
  Rng rng(13);
  Tensor x = make_features(rng, 2, 4, 3, 3, true);
  CHECK(finite_difference_check([&]() { return loss_std(x); }, {x}, 1e-5) <= 1e-4);
  CHECK(finite_difference_check([&]() { return loss_mean(x); }, {x}, 1e-5) <= 1e-4);
  CHECK(finite_difference_check([&]() { return loss_feature(x); }, {x}, 1e-5) <= 1e-4);
}

TEST_CASE("total_loss composes per the weighted sum") {
  const int B = 3;
  Tensor class_logits = Tensor::zeros({B, 10});
  Tensor perm_logits = Tensor::zeros({B, 24});
  Tensor features = Tensor::zeros({B, 2, 2, 2});
  std::vector<int> class_labels = {1, 2, 3};
  std::vector<int> perm_labels = {0, 5, 23};

  SUBCASE("all terms on: uniform logits and zero features") {
    LossConfig cfg;
    cfg.use_permutation_loss = true;
    cfg.use_feature_loss = true;
    LossBreakdown out =
        total_loss(class_logits, class_labels, &perm_logits, perm_labels, &features, cfg);
    CHECK(out.l_classification == doctest::Approx(std::log(10.0)).epsilon(1e-12));
    CHECK(*out.l_permutation == doctest::Approx(std::log(24.0)).epsilon(1e-12));
    CHECK(out.l_total == doctest::Approx(4.891612).epsilon(1e-6));
    // recomposition from parts
    double recomposed = out.l_classification + 0.5 * *out.l_permutation + 1.0 * *out.l_feature;
    CHECK(std::fabs(recomposed - out.l_total) < 1e-12);
  }

  SUBCASE("all auxiliary terms off") {
    LossConfig cfg;
    LossBreakdown out = total_loss(class_logits, class_labels, nullptr, {}, nullptr, cfg);
    CHECK(out.l_total == out.l_classification);
    CHECK(!out.l_permutation.has_value());
    CHECK(!out.l_feature.has_value());
  }

  SUBCASE("permutation on, feature off") {
    LossConfig cfg;
    cfg.use_permutation_loss = true;
    LossBreakdown out =
        total_loss(class_logits, class_labels, &perm_logits, perm_labels, nullptr, cfg);
    CHECK(out.l_total ==
          doctest::Approx(out.l_classification + 0.5 * *out.l_permutation).epsilon(1e-12));
  }

  SUBCASE("missing perm inputs when enabled is a contract violation") {
    LossConfig cfg;
    cfg.use_permutation_loss = true;
    CHECK_THROWS_AS(total_loss(class_logits, class_labels, nullptr, {}, nullptr, cfg),
                    std::invalid_argument);
  }
}

TEST_CASE("total_loss decomposition on random inputs is exact to 1e-12") {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const int B = 2 + static_cast<int>(rng.below(3));
    std::vector<double> cl(static_cast<size_t>(B) * 10), pl(static_cast<size_t>(B) * 24);
    for (auto& v : cl) v = rng.normal();
    for (auto& v : pl) v = rng.normal();
    Tensor class_logits = Tensor::create({B, 10}, cl);
    Tensor perm_logits = Tensor::create({B, 24}, pl);
    Tensor features = make_features(rng, B, 4, 2, 3);
    std::vector<int> class_labels, perm_labels;
    for (int b = 0; b < B; ++b) {
      class_labels.push_back(static_cast<int>(rng.below(10)));
      perm_labels.push_back(static_cast<int>(rng.below(24)));
    }
    LossConfig cfg;
    cfg.use_permutation_loss = true;
    cfg.use_feature_loss = true;
    LossBreakdown out =
        total_loss(class_logits, class_labels, &perm_logits, perm_labels, &features, cfg);
    const double recomposed = out.l_classification +
                              cfg.permutation_weight * *out.l_permutation +
                              cfg.feature_weight * *out.l_feature;
    CHECK(std::fabs(recomposed - out.l_total) < 1e-12);
    const double feat = cfg.std_mean_mix * *out.l_std + (1.0 - cfg.std_mean_mix) * *out.l_mean;
    CHECK(std::fabs(feat - *out.l_feature) < 1e-12);
  }
}

TEST_CASE("total_loss gradient reaches logits and features") {
  Rng rng(15);
  Tensor class_logits = Tensor::create({2, 10}, std::vector<double>(20, 0.1), true);
  Tensor perm_logits = Tensor::create({2, 24}, std::vector<double>(48, 0.1), true);
  Tensor features = make_features(rng, 2, 3, 2, 2, true);
  LossConfig cfg;
  cfg.use_permutation_loss = true;
  cfg.use_feature_loss = true;
  Tape tape;
  LossBreakdown out = total_loss(class_logits, {3, 7}, &perm_logits, {1, 2}, &features, cfg);
  tape.backward(out.total);
  CHECK(class_logits.has_grad());
  CHECK(perm_logits.has_grad());
  CHECK(features.has_grad());
}

TEST_CASE("classify_permuted off restricts classification loss to identity rows") {
  Tensor class_logits = Tensor::create({3, 4}, {1, 0, 0, 0, 0, 2, 0, 0, 0, 0, 3, 0});
  std::vector<int> labels = {0, 1, 2};
  LossConfig cfg;
  cfg.classify_permuted = false;
  std::vector<int> identity_rows = {0, 2};
  LossBreakdown out = total_loss(class_logits, labels, nullptr, {}, nullptr, cfg, &identity_rows);

  Tensor sub_logits = gather_rows(class_logits, identity_rows);
  double expect = softmax_cross_entropy(sub_logits, {0, 2}).scalar();
  CHECK(out.l_classification == doctest::Approx(expect).epsilon(1e-12));

  std::vector<int> none;
  LossBreakdown zero = total_loss(class_logits, labels, nullptr, {}, nullptr, cfg, &none);
  CHECK(zero.l_classification == 0.0);
}
