#pragma once

// Central-difference gradient oracle. Each case builds a scalar loss from a
// set of checked inputs; the tape's gradients are compared against
// (f(x+h) - f(x-h)) / 2h elementwise at 64-bit precision. The oracle knows
// nothing about how the ops implement their backward passes.

#include <functional>
#include <string>
#include <vector>

#include "hattn/conv.hpp"
#include "hattn/norm.hpp"
#include "hattn/ops.hpp"
#include "hattn/rng.hpp"

namespace gradcheck {

using hattn::Rng;
using hattn::Shape;
using hattn::TensorD;

struct GradCase {
  std::string name;
  std::vector<TensorD> inputs;  // perturbed and differentiated
  std::function<TensorD(const std::vector<TensorD>&)> build;  // scalar loss
};

inline TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.5, double hi = 1.5,
                             double keep_away_from = 0.0, double margin = 0.0) {
  TensorD t = TensorD::zeros(std::move(shape));
  for (auto& v : t.values()) {
    double x;
    do {
      x = rng.uniform(lo, hi);
    } while (margin > 0.0 && std::abs(x - keep_away_from) < margin);
    v = x;
  }
  return t;
}

// Deterministic projection weights so the scalar loss exercises every output.
inline TensorD projection_like(const TensorD& out, std::uint64_t key) {
  Rng rng(key);
  TensorD w = TensorD::zeros(out.shape());
  for (auto& v : w.values()) v = rng.uniform(-1.0, 1.0);
  return w;
}

inline TensorD project_to_scalar(const TensorD& out, std::uint64_t key = 0xabcdef) {
  return hattn::sum(hattn::mul(out, projection_like(out, key)));
}

struct GradReport {
  double max_err = 0.0;
  std::string worst_input;
};

// err = |analytic - numeric| / max(1, |analytic|, |numeric|)
inline GradReport run_case(GradCase& c, double h = 1e-5) {
  for (auto& in : c.inputs) in.set_requires_grad(true);

  hattn::Tape<double> tape;
  {
    hattn::Tape<double>::Scope scope(tape);
    TensorD loss = c.build(c.inputs);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& in : c.inputs) {
    in.ensure_grad();
    analytic.push_back(in.grad());
    in.set_requires_grad(false);
  }

  GradReport rep;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    TensorD& in = c.inputs[i];
    for (std::int64_t j = 0; j < in.numel(); ++j) {
      const double orig = in.data()[j];
      in.data()[j] = orig + h;
      const double fp = c.build(c.inputs).item();
      in.data()[j] = orig - h;
      const double fm = c.build(c.inputs).item();
      in.data()[j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) /
                         std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > rep.max_err) {
        rep.max_err = err;
        rep.worst_input = c.name + "/input" + std::to_string(i) + "[" + std::to_string(j) + "]";
      }
    }
  }
  for (auto& in : c.inputs) in.set_requires_grad(true);
  return rep;
}

// The full primitive registry. Any new differentiable op should get a case
// here; the acceptance gate runs the same list.
inline std::vector<GradCase> all_primitive_cases(std::uint64_t seed) {
  using namespace hattn;
  std::vector<GradCase> cases;
  Rng rng(seed);

  auto add_case = [&](std::string name, std::vector<TensorD> inputs,
                      std::function<TensorD(const std::vector<TensorD>&)> build) {
    cases.push_back({std::move(name), std::move(inputs), std::move(build)});
  };

  add_case("add", {random_tensor({2, 3, 4}, rng), random_tensor({2, 3, 4}, rng)},
      [](const auto& in) { return project_to_scalar(add(in[0], in[1])); });
  add_case("add_broadcast_bias", {random_tensor({2, 5, 3, 3}, rng), random_tensor({1, 5, 1, 1}, rng)},
      [](const auto& in) { return project_to_scalar(add(in[0], in[1])); });
  add_case("add_broadcast_spatial", {random_tensor({2, 4, 1, 1}, rng), random_tensor({2, 4, 5, 5}, rng)},
      [](const auto& in) { return project_to_scalar(add(in[0], in[1])); });
  add_case("sub", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
      [](const auto& in) { return project_to_scalar(sub(in[0], in[1])); });
  add_case("mul", {random_tensor({2, 3, 4}, rng), random_tensor({2, 3, 4}, rng)},
      [](const auto& in) { return project_to_scalar(mul(in[0], in[1])); });
  add_case("mul_broadcast", {random_tensor({2, 3, 4}, rng), random_tensor({4}, rng)},
      [](const auto& in) { return project_to_scalar(mul(in[0], in[1])); });
  add_case("div", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng, 0.5, 2.0)},
      [](const auto& in) { return project_to_scalar(div(in[0], in[1])); });
  add_case("add_scalar", {random_tensor({5}, rng)},
      [](const auto& in) { return project_to_scalar(add_scalar(in[0], 0.7)); });
  add_case("mul_scalar", {random_tensor({5}, rng)},
      [](const auto& in) { return project_to_scalar(mul_scalar(in[0], -1.3)); });
  add_case("exp", {random_tensor({3, 3}, rng)},
      [](const auto& in) { return project_to_scalar(exp(in[0])); });
  add_case("log", {random_tensor({3, 3}, rng, 0.2, 3.0)},
      [](const auto& in) { return project_to_scalar(log(in[0])); });
  add_case("sqrt", {random_tensor({3, 3}, rng, 0.2, 3.0)},
      [](const auto& in) { return project_to_scalar(sqrt(in[0])); });
  add_case("square", {random_tensor({3, 3}, rng)},
      [](const auto& in) { return project_to_scalar(square(in[0])); });
  add_case("leaky_relu", {random_tensor({4, 4}, rng, -1.5, 1.5, 0.0, 0.05)},
      [](const auto& in) { return project_to_scalar(leaky_relu(in[0], 0.01)); });
  add_case("softplus", {random_tensor({4, 4}, rng, -6.0, 6.0)},
      [](const auto& in) { return project_to_scalar(softplus(in[0])); });
  add_case("clamp", {random_tensor({4, 4}, rng, -2.0, 2.0, 1.0, 0.05)},
      [](const auto& in) { return project_to_scalar(clamp(in[0], -1.0, 1.0)); });
  {
    TensorD mask = TensorD::zeros({4, 4});
    Rng mrng(seed ^ 0x77);
    for (auto& v : mask.values()) v = mrng.bernoulli(0.5) ? 1.0 : 0.0;
    add_case("where", {random_tensor({4, 4}, rng), random_tensor({4, 4}, rng)},
        [mask](const auto& in) { return project_to_scalar(where(mask, in[0], in[1])); });
  }
  add_case("reshape", {random_tensor({2, 6}, rng)},
      [](const auto& in) { return project_to_scalar(reshape(in[0], {3, 4})); });
  add_case("sum", {random_tensor({3, 5}, rng)}, [](const auto& in) { return sum(in[0]); });
  add_case("mean", {random_tensor({3, 5}, rng)}, [](const auto& in) { return mean(in[0]); });
  add_case("sum_last", {random_tensor({3, 4, 5}, rng)},
      [](const auto& in) { return project_to_scalar(sum_last(in[0])); });
  add_case("mean_hw", {random_tensor({2, 3, 4, 4}, rng)},
      [](const auto& in) { return project_to_scalar(mean_hw(in[0])); });
  {
    std::vector<int> idx = {2, 0, 4, 1, 3, 3};
    add_case("gather_last", {random_tensor({2, 3, 5}, rng)},
        [idx](const auto& in) { return project_to_scalar(gather_last(in[0], idx)); });
  }
  add_case("cumsum_last", {random_tensor({2, 3, 6}, rng)},
      [](const auto& in) { return project_to_scalar(cumsum_last(in[0])); });
  add_case("slice_last", {random_tensor({2, 3, 6}, rng)},
      [](const auto& in) { return project_to_scalar(slice_last(in[0], 1, 4)); });
  add_case("pad_both_last", {random_tensor({2, 5}, rng)},
      [](const auto& in) { return project_to_scalar(pad_both_last(in[0], -3.0, 3.0)); });
  add_case("reverse_last", {random_tensor({3, 5}, rng)},
      [](const auto& in) { return project_to_scalar(reverse_last(in[0])); });
  add_case("matmul", {random_tensor({4, 6}, rng), random_tensor({6, 5}, rng)},
      [](const auto& in) { return project_to_scalar(matmul(in[0], in[1])); });
  add_case("softmax_2d", {random_tensor({4, 7}, rng)},
      [](const auto& in) { return project_to_scalar(softmax_channel(in[0])); });
  add_case("softmax_4d", {random_tensor({2, 5, 3, 3}, rng)},
      [](const auto& in) { return project_to_scalar(softmax_channel(in[0])); });

  add_case("conv2d_k3",
      {random_tensor({2, 3, 6, 6}, rng), random_tensor({4, 3, 3, 3}, rng),
       random_tensor({4}, rng)},
      [](const auto& in) { return project_to_scalar(conv2d(in[0], in[1], in[2], 1, 0)); });
  add_case("conv2d_k3_pad1",
      {random_tensor({2, 3, 5, 5}, rng), random_tensor({4, 3, 3, 3}, rng),
       random_tensor({4}, rng)},
      [](const auto& in) { return project_to_scalar(conv2d(in[0], in[1], in[2], 1, 1)); });
  add_case("conv2d_k3_stride2",
      {random_tensor({2, 3, 7, 7}, rng), random_tensor({4, 3, 3, 3}, rng),
       random_tensor({4}, rng)},
      [](const auto& in) { return project_to_scalar(conv2d(in[0], in[1], in[2], 2, 1)); });
  add_case("conv2d_k2",
      {random_tensor({2, 4, 4, 4}, rng), random_tensor({3, 4, 2, 2}, rng),
       random_tensor({3}, rng)},
      [](const auto& in) { return project_to_scalar(conv2d(in[0], in[1], in[2], 1, 0)); });
  add_case("conv2d_k1",
      {random_tensor({2, 5, 3, 3}, rng), random_tensor({4, 5, 1, 1}, rng),
       random_tensor({4}, rng)},
      [](const auto& in) { return project_to_scalar(conv2d(in[0], in[1], in[2], 1, 0)); });
  add_case("conv_transpose2d_k3",
      {random_tensor({2, 3, 3, 3}, rng), random_tensor({3, 4, 3, 3}, rng),
       random_tensor({4}, rng)},
      [](const auto& in) { return project_to_scalar(conv_transpose2d(in[0], in[1], in[2])); });

  add_case("batch_norm_train",
      {random_tensor({4, 3, 3, 3}, rng), random_tensor({3}, rng, 0.5, 1.5),
       random_tensor({3}, rng)},
      [](const auto& in) {
        TensorD rm = TensorD::zeros({3});
        TensorD rv = TensorD::full({3}, 1.0);
        return project_to_scalar(
            batch_norm2d(in[0], in[1], in[2], rm, rv, /*training=*/true));
      });
  {
    TensorD rm = random_tensor({3}, rng, -0.3, 0.3);
    TensorD rv = random_tensor({3}, rng, 0.5, 1.5);
    add_case("batch_norm_eval",
        {random_tensor({4, 3, 3, 3}, rng), random_tensor({3}, rng, 0.5, 1.5),
         random_tensor({3}, rng)},
        [rm, rv](const auto& in) {
          TensorD m = rm.detach(), v = rv.detach();
          return project_to_scalar(batch_norm2d(in[0], in[1], in[2], m, v, /*training=*/false));
        });
  }
  add_case("layer_norm", {random_tensor({3, 6, 2, 2}, rng)},
      [](const auto& in) { return project_to_scalar(layer_norm_channel(in[0])); });
  add_case("dropout", {random_tensor({4, 8}, rng)}, [seed](const auto& in) {
    Rng drop_rng(seed ^ 0x5eed);  // same mask on every evaluation
    return project_to_scalar(dropout(in[0], 0.4, drop_rng, /*training=*/true));
  });

  return cases;
}

}  // namespace gradcheck
