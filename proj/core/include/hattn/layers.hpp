#pragma once

// Parameter registry and the small layer modules the models are built from.
// Parameters are registered under hierarchical names ("perception/Fg/0/w") so
// checkpoints can validate them exactly; buffers hold non-trainable state
// such as batch-norm running statistics.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hattn/conv.hpp"
#include "hattn/norm.hpp"
#include "hattn/ops.hpp"
#include "hattn/rng.hpp"

namespace hattn {

template <typename T>
class ParamStore {
 public:
  Tensor<T> create(const std::string& name, Shape shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, t});
    return t;
  }

  Tensor<T> create_buffer(const std::string& name, Shape shape, T fill = T(0)) {
    if (buffer_index_.count(name)) throw std::invalid_argument("duplicate buffer: " + name);
    Tensor<T> t = Tensor<T>::full(std::move(shape), fill);
    buffer_index_[name] = buffers_.size();
    buffers_.push_back({name, t});
    return t;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T> at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& buffers() const { return buffers_; }

  // Parameters whose name starts with one of the given prefixes.
  std::vector<std::pair<std::string, Tensor<T>>> with_prefix(
      const std::vector<std::string>& prefixes) const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& e : entries_)
      for (const auto& p : prefixes)
        if (e.first.rfind(p, 0) == 0) {
          out.push_back(e);
          break;
        }
    return out;
  }

  void set_requires_grad(const std::vector<std::string>& prefixes, bool value) {
    for (auto& e : entries_)
      for (const auto& p : prefixes)
        if (e.first.rfind(p, 0) == 0) {
          e.second.set_requires_grad(value);
          break;
        }
  }

  void set_requires_grad_all(bool value) {
    for (auto& e : entries_) e.second.set_requires_grad(value);
  }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::vector<std::pair<std::string, Tensor<T>>> buffers_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::size_t> buffer_index_;
};

// Kaiming-uniform fill for leaky-relu networks: U(-sqrt(6/fan_in), +).
template <typename T>
void kaiming_uniform(Tensor<T>& w, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

constexpr double kLeakySlope = 0.01;

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int stride = 1, pad = 0;

  void init(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, Rng& rng,
            int stride_ = 1, int pad_ = 0, bool bias = true) {
    stride = stride_;
    pad = pad_;
    w = ps.create(name + "/w", {cout, cin, k, k});
    kaiming_uniform(w, std::int64_t(cin) * k * k, rng);
    if (bias) b = ps.create(name + "/b", {cout});
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct ConvTranspose2dLayer {
  Tensor<T> w, b;

  void init(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, Rng& rng,
            bool bias = true) {
    w = ps.create(name + "/w", {cin, cout, k, k});
    kaiming_uniform(w, std::int64_t(cin) * k * k, rng);
    if (bias) b = ps.create(name + "/b", {cout});
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv_transpose2d(x, w, b); }
};

// Dense layer on (N, In) matrices.
template <typename T>
struct LinearLayer {
  Tensor<T> w, b;  // w: (In, Out)

  void init(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng,
            bool bias = true) {
    w = ps.create(name + "/w", {in, out});
    kaiming_uniform(w, in, rng);
    if (bias) b = ps.create(name + "/b", {1, out});
  }

  void init_zero(ParamStore<T>& ps, const std::string& name, int in, int out, bool bias = true) {
    w = ps.create(name + "/w", {in, out});
    if (bias) b = ps.create(name + "/b", {1, out});
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = matmul(x, w);
    if (b.numel() > 0) y = add(y, b);
    return y;
  }
};

template <typename T>
struct BatchNorm2dLayer {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);

  void init(ParamStore<T>& ps, const std::string& name, int c) {
    gamma = ps.create(name + "/gamma", {c});
    std::fill(gamma.values().begin(), gamma.values().end(), T(1));
    beta = ps.create(name + "/beta", {c});
    running_mean = ps.create_buffer(name + "/running_mean", {c}, T(0));
    running_var = ps.create_buffer(name + "/running_var", {c}, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum);
  }
};

}  // namespace hattn
