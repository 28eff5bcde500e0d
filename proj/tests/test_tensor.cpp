#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hattn/conv.hpp"
#include "hattn/layers.hpp"
#include "hattn/norm.hpp"
#include "hattn/ops.hpp"
#include "hattn/rng.hpp"

using namespace hattn;

TEST_CASE("conv2d output spatial arithmetic") {
  TensorF x = TensorF::zeros({1, 3, 32, 32});
  TensorF w = TensorF::zeros({8, 3, 3, 3});
  TensorF b = TensorF::zeros({8});
  TensorF y = conv2d(x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 8, 30, 30});

  TensorF x2 = TensorF::zeros({2, 4, 7, 7});
  TensorF w2 = TensorF::zeros({4, 4, 3, 3});
  CHECK(conv2d(x2, w2, TensorF(), 1, 1).shape() == Shape{2, 4, 7, 7});
  CHECK(conv2d(x2, w2, TensorF(), 2, 1).shape() == Shape{2, 4, 4, 4});

  CHECK_THROWS_AS(conv2d(x, w2, TensorF(), 1, 0), ShapeError);  // channel mismatch
}

TEST_CASE("conv_transpose2d grows spatial extent by k-1") {
  TensorF x = TensorF::zeros({1, 4, 1, 1});
  TensorF w = TensorF::zeros({4, 6, 3, 3});
  TensorF y = conv_transpose2d(x, w, TensorF());
  CHECK(y.shape() == Shape{1, 6, 3, 3});
  TensorF y2 = conv_transpose2d(y, TensorF::zeros({6, 6, 3, 3}), TensorF());
  CHECK(y2.shape() == Shape{1, 6, 5, 5});
}

TEST_CASE("softmax of a zero vector is uniform") {
  TensorF x = TensorF::zeros({1, 10});
  TensorF p = softmax_channel(x);
  for (float v : p.values()) CHECK(v == doctest::Approx(0.1).epsilon(1e-6));
}

TEST_CASE("softmax sums to one and stays in [0,1]") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    TensorF x = TensorF::zeros({3, 13, 2, 2});
    for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-30.0, 30.0));
    TensorF p = softmax_channel(x);
    for (int n = 0; n < 3; ++n)
      for (int s = 0; s < 4; ++s) {
        double total = 0;
        for (int c = 0; c < 13; ++c) {
          const float v = p.values()[(n * 13 + c) * 4 + s];
          CHECK(v >= 0.0f);
          CHECK(v <= 1.0f);
          total += v;
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
      }
  }
}

TEST_CASE("leaky_relu slope") {
  TensorF x = TensorF::from({2}, {-1.0f, 2.0f});
  TensorF y = leaky_relu(x, 0.01f);
  CHECK(y.values()[0] == doctest::Approx(-0.01));
  CHECK(y.values()[1] == doctest::Approx(2.0));
}

TEST_CASE("batch norm standardizes per channel in training mode") {
  Rng rng(7);
  TensorF x = TensorF::zeros({8, 5, 4, 4});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-3.0, 9.0));
  TensorF gamma = TensorF::full({5}, 1.0f);
  TensorF beta = TensorF::zeros({5});
  TensorF rm = TensorF::zeros({5});
  TensorF rv = TensorF::full({5}, 1.0f);
  TensorF y = batch_norm2d(x, gamma, beta, rm, rv, true);
  const int m = 8 * 4 * 4;
  for (int c = 0; c < 5; ++c) {
    double mu = 0, var = 0;
    for (int n = 0; n < 8; ++n)
      for (int s = 0; s < 16; ++s) mu += y.values()[(n * 5 + c) * 16 + s];
    mu /= m;
    for (int n = 0; n < 8; ++n)
      for (int s = 0; s < 16; ++s) {
        const double d = y.values()[(n * 5 + c) * 16 + s] - mu;
        var += d * d;
      }
    var /= m;
    CHECK(std::abs(mu) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("layer norm standardizes across channels at each position") {
  Rng rng(9);
  TensorF x = TensorF::zeros({2, 32, 3, 3});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-2.0, 5.0));
  TensorF y = layer_norm_channel(x);
  for (int n = 0; n < 2; ++n)
    for (int s = 0; s < 9; ++s) {
      double mu = 0, var = 0;
      for (int c = 0; c < 32; ++c) mu += y.values()[(n * 32 + c) * 9 + s];
      mu /= 32;
      for (int c = 0; c < 32; ++c) {
        const double d = y.values()[(n * 32 + c) * 9 + s] - mu;
        var += d * d;
      }
      var /= 32;
      CHECK(std::abs(mu) < 1e-4);
      CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("non-finite results are surfaced as errors") {
  TensorF a = TensorF::from({2}, {1.0f, 2.0f});
  TensorF b = TensorF::from({2}, {0.0f, 1.0f});
  CHECK_THROWS_AS(div(a, b), NonFiniteError);
  TensorF neg = TensorF::from({1}, {-1.0f});
  CHECK_THROWS_AS(log(neg), NonFiniteError);
}

TEST_CASE("broadcasting matches manual expansion") {
  TensorF a = TensorF::from({2, 3}, {1, 2, 3, 4, 5, 6});
  TensorF b = TensorF::from({3}, {10, 20, 30});
  TensorF s = add(a, b);
  CHECK(s.values() == std::vector<float>{11, 22, 33, 14, 25, 36});
  TensorF c = TensorF::from({2, 1}, {100, 200});
  TensorF t = add(a, c);
  CHECK(t.values() == std::vector<float>{101, 102, 103, 204, 205, 206});
  CHECK_THROWS_AS(add(a, TensorF::zeros({4})), ShapeError);
}

TEST_CASE("gather, cumsum, where semantics") {
  TensorF x = TensorF::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(gather_last(x, {2, 0}).values() == std::vector<float>{3, 4});
  CHECK(cumsum_last(x).values() == std::vector<float>{1, 3, 6, 4, 9, 15});
  TensorF m = TensorF::from({2, 3}, {1, 0, 1, 0, 1, 0});
  TensorF y = TensorF::full({2, 3}, -1.0f);
  CHECK(where(m, x, y).values() == std::vector<float>{1, -1, 3, -1, 5, -1});
  CHECK_THROWS_AS(gather_last(x, {0, 7}), ShapeError);
}

TEST_CASE("identical seed gives bit-identical init and dropout masks") {
  auto make = [](std::uint64_t seed) {
    RngPool pool(seed);
    Rng init = pool.stream("init");
    ParamStore<float> ps;
    Conv2dLayer<float> conv;
    conv.init(ps, "conv", 3, 8, 3, init);
    LinearLayer<float> lin;
    lin.init(ps, "lin", 16, 4, init);
    Rng drop = pool.stream("dropout");
    TensorF x = TensorF::full({64}, 1.0f);
    TensorF d = dropout(x, 0.5f, drop, true);
    return std::make_pair(ps.entries(), d.values());
  };
  auto [p1, d1] = make(1234);
  auto [p2, d2] = make(1234);
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].second.values() == p2[i].second.values());
  CHECK(d1 == d2);
  auto [p3, d3] = make(999);
  CHECK(p1[0].second.values() != p3[0].second.values());
}

TEST_CASE("dropout is identity in eval mode") {
  Rng rng(5);
  TensorF x = TensorF::from({3}, {1, 2, 3});
  TensorF y = dropout(x, 0.5f, rng, false);
  CHECK(y.values() == x.values());
}

TEST_CASE("reshape validates element count") {
  TensorF x = TensorF::zeros({2, 3});
  CHECK(reshape(x, {6}).shape() == Shape{6});
  CHECK_THROWS_AS(reshape(x, {7}), ShapeError);
}
