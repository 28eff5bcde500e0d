#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "hattn/checkpoint.hpp"
#include "hattn/layers.hpp"
#include "hattn/optim.hpp"

using namespace hattn;

TEST_CASE("adam leaves parameters untouched under zero gradients") {
  TensorF p = TensorF::from({3}, {1.0f, -2.0f, 3.0f});
  p.set_requires_grad(true);
  Adam<float> adam({{"p", p}}, OptimConfig{});
  adam.step();
  CHECK(p.values() == std::vector<float>{1.0f, -2.0f, 3.0f});
}

TEST_CASE("first adam step moves by about the learning rate") {
  OptimConfig cfg;
  cfg.learning_rate = 0.01;
  TensorF p = TensorF::from({2}, {0.0f, 0.0f});
  p.set_requires_grad(true);
  Adam<float> adam({{"p", p}}, cfg);
  p.ensure_grad();
  p.grad()[0] = 0.5f;
  p.grad()[1] = -3.0f;
  adam.step();
  // Bias-corrected m/sqrt(v) is sign(g) for a constant gradient.
  CHECK(p.values()[0] == doctest::Approx(-0.01).epsilon(1e-3));
  CHECK(p.values()[1] == doctest::Approx(0.01).epsilon(1e-3));
}

TEST_CASE("adam descends a quadratic bowl monotonically") {
  OptimConfig cfg;
  cfg.learning_rate = 0.01;
  TensorF p = TensorF::from({1}, {3.0f});
  p.set_requires_grad(true);
  Adam<float> adam({{"p", p}}, cfg);
  auto loss_of = [](float v) { return v * v; };
  double prev = loss_of(p.values()[0]);
  for (int step = 0; step < 100; ++step) {
    adam.zero_grad();
    p.ensure_grad();
    p.grad()[0] = 2.0f * p.values()[0];
    adam.step();
    const double cur = loss_of(p.values()[0]);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("plateau schedule") {
  OptimConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.plateau_patience = 3;

  SUBCASE("improving series leaves the rate unchanged") {
    CHECK(plateau_schedule({1.0, 0.9, 0.8, 0.7, 0.6}, cfg) == doctest::Approx(1e-3));
  }
  SUBCASE("flat series halves once per detection") {
    CHECK(plateau_schedule({1.0, 1.0, 1.0, 1.0}, cfg) == doctest::Approx(0.5e-3));
    // Six stagnant epochs after the best: exactly one more halving.
    CHECK(plateau_schedule({1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0}, cfg) == doctest::Approx(0.25e-3));
  }
  SUBCASE("improvement below tolerance counts as stagnation") {
    CHECK(plateau_schedule({1.0, 1.0 - 1e-5, 1.0 - 2e-5, 1.0 - 3e-5}, cfg) ==
          doctest::Approx(0.5e-3));
  }
  SUBCASE("empty history is an error") {
    CHECK_THROWS(plateau_schedule({}, cfg));
  }
}

TEST_CASE("checkpoint round-trips parameters, buffers and adam state") {
  const std::string path = "test_optim_ckpt.bin";
  RngPool pool(11);
  Rng init = pool.stream("init");

  auto build = [&](bool randomize) {
    ParamStore<float> ps;
    Conv2dLayer<float> conv;
    Rng r = init;  // copy: same init either way
    conv.init(ps, "m/conv", 3, 4, 3, r);
    BatchNorm2dLayer<float> bn;
    bn.init(ps, "m/bn", 4);
    if (randomize) {
      Rng r2 = pool.stream("scramble");
      for (const auto& [name, t] : ps.entries()) {
        Tensor<float> h = t;
        for (auto& v : h.values()) v = static_cast<float>(r2.uniform(-1, 1));
      }
    }
    return ps;
  };

  ParamStore<float> src = build(true);
  Adam<float> src_adam(src.entries(), OptimConfig{});
  for (const auto& [name, t] : src.entries()) {
    Tensor<float> h = t;
    h.ensure_grad();
    for (auto& g : h.grad()) g = 0.25f;
  }
  src_adam.step();
  save_checkpoint(path, src, &src_adam);

  ParamStore<float> dst = build(false);
  Adam<float> dst_adam(dst.entries(), OptimConfig{});
  load_checkpoint(path, dst, &dst_adam);

  REQUIRE(dst.entries().size() == src.entries().size());
  for (std::size_t i = 0; i < src.entries().size(); ++i)
    CHECK(dst.entries()[i].second.values() == src.entries()[i].second.values());
  for (std::size_t i = 0; i < src.buffers().size(); ++i)
    CHECK(dst.buffers()[i].second.values() == src.buffers()[i].second.values());
  CHECK(dst_adam.step_count() == src_adam.step_count());
  CHECK(dst_adam.moment1(0) == src_adam.moment1(0));
  CHECK(dst_adam.moment2(0) == src_adam.moment2(0));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint load validates names and shapes exactly") {
  const std::string path = "test_optim_ckpt2.bin";
  RngPool pool(3);
  Rng init = pool.stream("init");
  ParamStore<float> ps;
  Conv2dLayer<float> conv;
  conv.init(ps, "a/conv", 3, 4, 3, init);
  save_checkpoint(path, ps);

  SUBCASE("wrong name") {
    ParamStore<float> other;
    Conv2dLayer<float> conv2;
    Rng r = pool.stream("init2");
    conv2.init(other, "b/conv", 3, 4, 3, r);
    CHECK_THROWS(load_checkpoint(path, other));
  }
  SUBCASE("wrong shape") {
    ParamStore<float> other;
    Conv2dLayer<float> conv2;
    Rng r = pool.stream("init3");
    conv2.init(other, "a/conv", 3, 5, 3, r);
    CHECK_THROWS(load_checkpoint(path, other));
  }
  SUBCASE("missing file") {
    ParamStore<float> other;
    CHECK_THROWS(load_checkpoint("does_not_exist.bin", other));
  }
  std::remove(path.c_str());
}
