#pragma once

// Differentiable primitives on Tensor<T>. Every op validates shapes, checks
// its output for NaN/Inf (a non-finite value throws instead of propagating),
// and records a backward closure on the active tape when any input requires a
// gradient.
//
// Determinism contract: for every output element the accumulation order is
// fixed and independent of batch size or thread count, so a sample computed
// inside a batch is bit-identical to the same sample computed alone.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "hattn/tensor.hpp"

namespace hattn {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.values())
    if (!std::isfinite(v)) throw NonFiniteError(op);
}

namespace detail {

// Right-aligned numpy-style broadcasting.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(r);
  for (int i = 0; i < r; ++i) {
    const int da = i < r - ra ? 1 : a[i - (r - ra)];
    const int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

struct BcastPlan {
  Shape out_shape;
  std::vector<std::int64_t> stride_a, stride_b;  // 0 on broadcast dims
  std::int64_t n = 0;
};

inline BcastPlan make_bcast_plan(const Shape& a, const Shape& b) {
  BcastPlan p;
  p.out_shape = broadcast_shape(a, b);
  const int r = static_cast<int>(p.out_shape.size());
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  std::int64_t sa = 1, sb = 1;
  for (int i = r - 1; i >= 0; --i) {
    const int da = i < r - ra ? 1 : a[i - (r - ra)];
    const int db = i < r - rb ? 1 : b[i - (r - rb)];
    p.stride_a[i] = (da == 1) ? 0 : sa;
    p.stride_b[i] = (db == 1) ? 0 : sb;
    sa *= da;
    sb *= db;
  }
  p.n = shape_numel(p.out_shape);
  return p;
}

// Odometer walk over the broadcast output; fn(out_index, offset_a, offset_b).
template <typename Fn>
void for_each_bcast(const BcastPlan& p, Fn&& fn) {
  const int r = static_cast<int>(p.out_shape.size());
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<int> idx(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < p.n; ++i) {
    fn(i, oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      oa += p.stride_a[d];
      ob += p.stride_b[d];
      if (idx[d] < p.out_shape[d]) break;
      oa -= p.stride_a[d] * p.out_shape[d];
      ob -= p.stride_b[d] * p.out_shape[d];
      idx[d] = 0;
    }
  }
}

template <typename T, typename FwdFn, typename DaFn, typename DbFn>
Tensor<T> binary_op(const char* name, Tensor<T> a, Tensor<T> b, FwdFn fwd, DaFn dfda,
                    DbFn dfdb) {
  if (a.shape() == b.shape()) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    check_finite(out, name);
    if (grad_mode(a, b)) {
      out.set_requires_grad(true);
      Tape<T>::current()->record([a, b, out, dfda, dfdb]() mutable {
        const T* pa = a.data();
        const T* pb = b.data();
        if (!out.has_grad()) return;
        const std::vector<T>& go = out.grad_view();
        const std::int64_t n = out.numel();
        if (a.requires_grad()) {
          std::vector<T>& ga = a.grad();
          for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i] * dfda(pa[i], pb[i]);
        }
        if (b.requires_grad()) {
          std::vector<T>& gb = b.grad();
          for (std::int64_t i = 0; i < n; ++i) gb[i] += go[i] * dfdb(pa[i], pb[i]);
        }
      });
    }
    return out;
  }
  BcastPlan plan = make_bcast_plan(a.shape(), b.shape());
  Tensor<T> out = Tensor<T>::zeros(plan.out_shape);
  {
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for_each_bcast(plan, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
      po[i] = fwd(pa[oa], pb[ob]);
    });
  }
  check_finite(out, name);
  if (grad_mode(a, b)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([a, b, out, plan, dfda, dfdb]() mutable {
      const T* pa = a.data();
      const T* pb = b.data();
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      const bool need_a = a.requires_grad();
      const bool need_b = b.requires_grad();
      if (need_a) a.ensure_grad();
      if (need_b) b.ensure_grad();
      T* ga = need_a ? a.grad().data() : nullptr;
      T* gb = need_b ? b.grad().data() : nullptr;
      for_each_bcast(plan, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
        if (need_a) ga[oa] += go[i] * dfda(pa[oa], pb[ob]);
        if (need_b) gb[ob] += go[i] * dfdb(pa[oa], pb[ob]);
      });
    });
  }
  return out;
}

template <typename T, typename FwdFn, typename GradFn>
Tensor<T> unary_op(const char* name, Tensor<T> x, FwdFn fwd, GradFn dfdx) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  check_finite(out, name);
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, dfdx]() mutable {
      const T* px = x.data();
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      const std::int64_t n = out.numel();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i] * dfdx(px[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  return detail::binary_op(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  return detail::binary_op(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  return detail::binary_op(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(Tensor<T> a, Tensor<T> b) {
  return detail::binary_op(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> add_scalar(Tensor<T> x, T s) {
  return detail::unary_op(
      "add_scalar", x, [s](T v) { return v + s; }, [](T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(Tensor<T> x, T s) {
  return detail::unary_op(
      "mul_scalar", x, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <typename T>
Tensor<T> neg(Tensor<T> x) {
  return mul_scalar(x, T(-1));
}

template <typename T>
Tensor<T> exp(Tensor<T> x) {
  return detail::unary_op(
      "exp", x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Tensor<T> log(Tensor<T> x) {
  return detail::unary_op(
      "log", x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <typename T>
Tensor<T> sqrt(Tensor<T> x) {
  return detail::unary_op(
      "sqrt", x, [](T v) { return std::sqrt(v); },
      [](T v) { return T(0.5) / std::sqrt(v); });
}

template <typename T>
Tensor<T> square(Tensor<T> x) {
  return detail::unary_op(
      "square", x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

template <typename T>
Tensor<T> leaky_relu(Tensor<T> x, T slope) {
  return detail::unary_op(
      "leaky_relu", x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> softplus(Tensor<T> x) {
  auto f = [](T v) -> T {
    if (v > T(20)) return v;
    if (v < T(-20)) return std::exp(v);
    return std::log1p(std::exp(v));
  };
  auto g = [](T v) -> T {  // sigmoid
    if (v >= T(0)) {
      const T e = std::exp(-v);
      return T(1) / (T(1) + e);
    }
    const T e = std::exp(v);
    return e / (T(1) + e);
  };
  return detail::unary_op("softplus", x, f, g);
}

// Gradient passes through where lo <= x <= hi and is zero where clamped.
template <typename T>
Tensor<T> clamp(Tensor<T> x, T lo, T hi) {
  return detail::unary_op(
      "clamp", x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T v) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// Elementwise select by a constant 0/1 mask (mask is not differentiated).
template <typename T>
Tensor<T> where(const Tensor<T>& mask, Tensor<T> a, Tensor<T> b) {
  if (mask.shape() != a.shape() || a.shape() != b.shape())
    throw ShapeError("where: mismatched shapes");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pm = mask.data();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pm[i] != T(0) ? pa[i] : pb[i];
  check_finite(out, "where");
  if (grad_mode(a, b)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([mask, a, b, out]() mutable {
      const T* pm = mask.data();
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      const std::int64_t n = out.numel();
      if (a.requires_grad()) {
        std::vector<T>& ga = a.grad();
        for (std::int64_t i = 0; i < n; ++i)
          if (pm[i] != T(0)) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        std::vector<T>& gb = b.grad();
        for (std::int64_t i = 0; i < n; ++i)
          if (pm[i] == T(0)) gb[i] += go[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- reshaping

template <typename T>
Tensor<T> reshape(Tensor<T> x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
  Tensor<T> out = Tensor<T>::from(std::move(new_shape), x.values());
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(Tensor<T> x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  check_finite(out, "sum");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out]() mutable {
      const T g = out.grad_view()[0];
      std::vector<T>& gx = x.grad();
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tensor<T> x) {
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Sum over the trailing axis: (..., K) -> (...).
template <typename T>
Tensor<T> sum_last(Tensor<T> x) {
  if (x.rank() < 1) throw ShapeError("sum_last: rank-0 input");
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  const std::int64_t k = x.shape().back();
  const std::int64_t rows = x.numel() / k;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::int64_t j = 0; j < k; ++j) acc += px[r * k + j];
    po[r] = acc;
  }
  check_finite(out, "sum_last");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, k, rows]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < k; ++j) gx[r * k + j] += go[r];
    });
  }
  return out;
}

// Mean over spatial dims: (N,C,H,W) -> (N,C,1,1).
template <typename T>
Tensor<T> mean_hw(Tensor<T> x) {
  if (x.rank() != 4) throw ShapeError("mean_hw expects NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t hw = std::int64_t(h) * w;
  Tensor<T> out = Tensor<T>::zeros({n, c, 1, 1});
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t nc = 0; nc < std::int64_t(n) * c; ++nc) {
    T acc = 0;
    for (std::int64_t i = 0; i < hw; ++i) acc += px[nc * hw + i];
    po[nc] = acc / static_cast<T>(hw);
  }
  check_finite(out, "mean_hw");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, n, c, hw]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      const T inv = T(1) / static_cast<T>(hw);
      for (std::int64_t nc = 0; nc < std::int64_t(n) * c; ++nc)
        for (std::int64_t i = 0; i < hw; ++i) gx[nc * hw + i] += go[nc] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------- gather etc.

// y[r] = x[r, idx[r]] for x of shape (..., K); idx is row-major over the
// leading dims. Indices are plain data and receive no gradient.
template <typename T>
Tensor<T> gather_last(Tensor<T> x, const std::vector<int>& idx) {
  if (x.rank() < 1) throw ShapeError("gather_last: rank-0 input");
  const std::int64_t k = x.shape().back();
  const std::int64_t rows = x.numel() / k;
  if (static_cast<std::int64_t>(idx.size()) != rows)
    throw ShapeError("gather_last: index count " + std::to_string(idx.size()) +
                     " != rows " + std::to_string(rows));
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const int j = idx[r];
    if (j < 0 || j >= k) throw ShapeError("gather_last: index out of range");
    po[r] = px[r * k + j];
  }
  check_finite(out, "gather_last");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, idx, k, rows]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r) gx[r * k + idx[r]] += go[r];
    });
  }
  return out;
}

// Contiguous slice along the trailing axis: (..., K) -> (..., len).
template <typename T>
Tensor<T> slice_last(Tensor<T> x, int start, int len) {
  if (x.rank() < 1) throw ShapeError("slice_last: rank-0 input");
  const std::int64_t k = x.shape().back();
  if (start < 0 || len <= 0 || start + len > k) throw ShapeError("slice_last: bad range");
  const std::int64_t rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = len;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < len; ++j) po[r * len + j] = px[r * k + start + j];
  check_finite(out, "slice_last");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, k, rows, start, len]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < len; ++j) gx[r * k + start + j] += go[r * len + j];
    });
  }
  return out;
}

// Prepend/append a constant column along the trailing axis. The constant is
// not differentiated; its gradient column is dropped.
template <typename T>
Tensor<T> pad_last(Tensor<T> x, T front_value, T back_value, bool front, bool back) {
  if (x.rank() < 1) throw ShapeError("pad_last: rank-0 input");
  const std::int64_t k = x.shape().back();
  const int extra = (front ? 1 : 0) + (back ? 1 : 0);
  const std::int64_t rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = static_cast<int>(k) + extra;
  const std::int64_t ko = k + extra;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* px = x.data();
  T* po = out.data();
  const int off = front ? 1 : 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (front) po[r * ko] = front_value;
    for (std::int64_t j = 0; j < k; ++j) po[r * ko + off + j] = px[r * k + j];
    if (back) po[r * ko + ko - 1] = back_value;
  }
  check_finite(out, "pad_last");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, k, ko, rows, off]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < k; ++j) gx[r * k + j] += go[r * ko + off + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> pad_front_last(Tensor<T> x, T value) {
  return pad_last(x, value, T(0), true, false);
}

template <typename T>
Tensor<T> pad_both_last(Tensor<T> x, T front_value, T back_value) {
  return pad_last(x, front_value, back_value, true, true);
}

// Reverse the trailing axis.
template <typename T>
Tensor<T> reverse_last(Tensor<T> x) {
  if (x.rank() < 1) throw ShapeError("reverse_last: rank-0 input");
  const std::int64_t k = x.shape().back();
  const std::int64_t rows = x.numel() / k;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < k; ++j) po[r * k + j] = px[r * k + (k - 1 - j)];
  check_finite(out, "reverse_last");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, k, rows]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < k; ++j) gx[r * k + (k - 1 - j)] += go[r * k + j];
    });
  }
  return out;
}

// Inclusive cumulative sum along the trailing axis.
template <typename T>
Tensor<T> cumsum_last(Tensor<T> x) {
  if (x.rank() < 1) throw ShapeError("cumsum_last: rank-0 input");
  const std::int64_t k = x.shape().back();
  const std::int64_t rows = x.numel() / k;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      acc += px[r * k + j];
      po[r * k + j] = acc;
    }
  }
  check_finite(out, "cumsum_last");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, k, rows]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        T acc = 0;
        for (std::int64_t j = k - 1; j >= 0; --j) {
          acc += go[r * k + j];
          gx[r * k + j] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- matmul

namespace detail {

// C(m,n) += A(m,k) * B(k,n). Fixed k-ascending accumulation per element.
template <typename T>
void gemm_nn_acc(int m, int k, int n, const T* A, const T* B, T* C) {
#pragma omp parallel for schedule(static) if (std::int64_t(m) * k * n > 65536)
  for (int i = 0; i < m; ++i) {
    T* c = C + std::int64_t(i) * n;
    const T* a = A + std::int64_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = a[p];
      const T* b = B + std::int64_t(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C(m,k) += G(m,n) * B(k,n)^T  (i.e. C[i,p] += dot(G[i,:], B[p,:])).
template <typename T>
void gemm_nt_acc(int m, int n, int k, const T* G, const T* B, T* C) {
#pragma omp parallel for schedule(static) if (std::int64_t(m) * k * n > 65536)
  for (int i = 0; i < m; ++i) {
    const T* g = G + std::int64_t(i) * n;
    T* c = C + std::int64_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const T* b = B + std::int64_t(p) * n;
      T acc = 0;
      for (int j = 0; j < n; ++j) acc += g[j] * b[j];
      c[p] += acc;
    }
  }
}

// C(k,n) += A(m,k)^T * G(m,n).
template <typename T>
void gemm_tn_acc(int m, int k, int n, const T* A, const T* G, T* C) {
#pragma omp parallel for schedule(static) if (std::int64_t(m) * k * n > 65536)
  for (int p = 0; p < k; ++p) {
    T* c = C + std::int64_t(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = A[std::int64_t(i) * k + p];
      const T* g = G + std::int64_t(i) * n;
      for (int j = 0; j < n; ++j) c[j] += av * g[j];
    }
  }
}

}  // namespace detail

// 2-D matrix product: (m,k) x (k,n) -> (m,n).
template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::gemm_nn_acc(m, k, n, a.data(), b.data(), out.data());
  check_finite(out, "matmul");
  if (grad_mode(a, b)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      if (a.requires_grad()) {
        a.ensure_grad();
        detail::gemm_nt_acc(m, n, k, go.data(), b.data(), a.grad().data());
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        detail::gemm_tn_acc(m, k, n, a.data(), go.data(), b.grad().data());
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- softmax

// Numerically stable softmax over axis 1 of (N, C, ...) tensors.
template <typename T>
Tensor<T> softmax_channel(Tensor<T> x) {
  if (x.rank() < 2) throw ShapeError("softmax_channel expects rank >= 2");
  const int n = x.dim(0), c = x.dim(1);
  std::int64_t inner = 1;
  for (int i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t s = 0; s < inner; ++s) {
      const std::int64_t base = b * c * inner + s;
      T mx = px[base];
      for (int j = 1; j < c; ++j) mx = std::max(mx, px[base + j * inner]);
      T z = 0;
      for (int j = 0; j < c; ++j) {
        const T e = std::exp(px[base + j * inner] - mx);
        po[base + j * inner] = e;
        z += e;
      }
      const T inv = T(1) / z;
      for (int j = 0; j < c; ++j) po[base + j * inner] *= inv;
    }
  }
  check_finite(out, "softmax");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, n, c, inner]() mutable {
      const T* py = out.data();
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t s = 0; s < inner; ++s) {
          const std::int64_t base = b * c * inner + s;
          T dot = 0;
          for (int j = 0; j < c; ++j) dot += go[base + j * inner] * py[base + j * inner];
          for (int j = 0; j < c; ++j) {
            const std::int64_t at = base + j * inner;
            gx[at] += py[at] * (go[at] - dot);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace hattn
