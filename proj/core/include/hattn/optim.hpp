#pragma once

// Adam with bias correction, plus reduce-on-plateau learning-rate tracking.

#include <string>
#include <utility>
#include <vector>

#include "hattn/tensor.hpp"

namespace hattn {

struct OptimConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double plateau_factor = 0.5;   // lr multiplier on plateau
  int plateau_patience = 3;      // epochs without improvement
  double plateau_tol = 1e-4;     // absolute improvement threshold
};

// Tracks a validation metric (lower is better) and halves the rate once per
// detected plateau.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(OptimConfig cfg) : cfg_(cfg), lr_(cfg.learning_rate) {}

  double observe(double metric) {
    if (!has_best_ || metric < best_ - cfg_.plateau_tol) {
      best_ = metric;
      has_best_ = true;
      since_improve_ = 0;
    } else {
      ++since_improve_;
      if (since_improve_ >= cfg_.plateau_patience) {
        lr_ *= cfg_.plateau_factor;
        since_improve_ = 0;
      }
    }
    return lr_;
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  OptimConfig cfg_;
  double lr_;
  double best_ = 0;
  bool has_best_ = false;
  int since_improve_ = 0;
};

// Learning rate implied by a full validation-metric history.
inline double plateau_schedule(const std::vector<double>& history, const OptimConfig& cfg) {
  if (history.empty()) throw std::invalid_argument("plateau_schedule: empty history");
  PlateauScheduler sched(cfg);
  double lr = cfg.learning_rate;
  for (double m : history) lr = sched.observe(m);
  return lr;
}

template <typename T>
class Adam {
 public:
  using NamedParam = std::pair<std::string, Tensor<T>>;

  Adam(std::vector<NamedParam> params, OptimConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    lr_ = cfg_.learning_rate;
    for (auto& [name, p] : params_) {
      m_.push_back(std::vector<T>(p.numel(), T(0)));
      v_.push_back(std::vector<T>(p.numel(), T(0)));
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T eps = static_cast<T>(cfg_.epsilon);
    const T corr1 = T(1) - std::pow(b1, static_cast<T>(t_));
    const T corr2 = T(1) - std::pow(b2, static_cast<T>(t_));
    const T alpha = static_cast<T>(lr_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i].second;
      if (p.numel() != static_cast<std::int64_t>(m_[i].size()))
        throw ShapeError("adam: parameter '" + params_[i].first + "' changed shape");
      p.ensure_grad();
      const std::vector<T>& g = p.grad_view();
      std::vector<T>& m = m_[i];
      std::vector<T>& v = v_[i];
      T* pv = p.data();
      for (std::size_t j = 0; j < m.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        const T mhat = m[j] / corr1;
        const T vhat = v[j] / corr2;
        pv[j] -= alpha * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<T>& moment1(std::size_t i) { return m_[i]; }
  std::vector<T>& moment2(std::size_t i) { return v_[i]; }

 private:
  std::vector<NamedParam> params_;
  OptimConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t t_ = 0;
  double lr_;
};

}  // namespace hattn
