#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Tensor<T> is a shared handle: ops capture their inputs by handle so the
// backward pass can accumulate gradients into the original storage. A Tape
// records backward closures in execution order; backward() replays them in
// reverse and then clears the tape. Ops record onto the active tape only when
// one of their inputs requires a gradient, so forward-only evaluation carries
// no bookkeeping cost.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hattn {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& op)
      : std::runtime_error("non-finite value produced by op '" + op + "'") {}
};

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : d_(std::make_shared<TensorData<T>>()) {}

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->values.assign(shape_numel(t.d_->shape), T(0));
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.d_->values.begin(), t.d_->values.end(), value);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("from: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    return t;
  }

  const Shape& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape.at(i); }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(d_->values.size()); }

  std::vector<T>& values() { return d_->values; }
  const std::vector<T>& values() const { return d_->values; }
  T* data() { return d_->values.data(); }
  const T* data() const { return d_->values.data(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return d_->values[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    d_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<T>& grad() {
    ensure_grad();
    return d_->grad;
  }
  const std::vector<T>& grad_view() const { return d_->grad; }

  void ensure_grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
  }

  // Deep copy without gradient bookkeeping.
  Tensor detach() const {
    Tensor t;
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    return t;
  }

  Tensor clone_as() const {  // same shape, zero values
    return zeros(d_->shape);
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t.mutable_impl()->shape = d_->shape;
    t.mutable_impl()->values.assign(d_->values.begin(), d_->values.end());
    return t;
  }

  TensorData<T>* mutable_impl() { return d_.get(); }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& current() {
    static thread_local Tape* cur = nullptr;
    return cur;
  }

  // RAII activation of a tape on this thread.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(current()) { current() = &t; }
    ~Scope() { current() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  // Temporarily disable recording (lookahead paths, target construction).
  class Pause {
   public:
    Pause() : prev_(current()) { current() = nullptr; }
    ~Pause() { current() = prev_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* prev_;
  };

  void record(std::function<void()> backward_fn) {
    if (running_) throw std::logic_error("tape: op recorded during backward traversal");
    entries_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  // Reverse-order traversal seeded with d(loss)/d(loss) = 1; clears the tape.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (running_) throw std::logic_error("tape: reentrant backward");
    running_ = true;
    loss.ensure_grad();
    loss.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    running_ = false;
    entries_.clear();
  }

  void clear() { entries_.clear(); }

 private:
  std::vector<std::function<void()>> entries_;
  bool running_ = false;
};

template <typename T>
inline bool grad_mode(const Tensor<T>& a) {
  return Tape<T>::current() != nullptr && a.requires_grad();
}

template <typename T>
inline bool grad_mode(const Tensor<T>& a, const Tensor<T>& b) {
  return Tape<T>::current() != nullptr && (a.requires_grad() || b.requires_grad());
}

template <typename T>
inline bool grad_mode(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  return Tape<T>::current() != nullptr &&
         (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

}  // namespace hattn
