#pragma once

// Convolution primitives. conv2d is im2col + GEMM; the patch matrix is
// rebuilt in the backward pass instead of cached, which keeps activation
// memory flat over long unrolled episodes. conv_transpose2d covers the
// stride-1 case used for spatial upsampling (out = in + k - 1).

#include "hattn/ops.hpp"

namespace hattn {

namespace detail {

// col is (Cin*Kh*Kw) x (Ho*Wo), row-major.
template <typename T>
void im2col(const T* x, int cin, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo,
            T* col) {
  const std::int64_t l = std::int64_t(ho) * wo;
  for (int c = 0; c < cin; ++c) {
    for (int dy = 0; dy < kh; ++dy) {
      for (int dx = 0; dx < kw; ++dx) {
        T* row = col + (std::int64_t(c) * kh * kw + dy * kw + dx) * l;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + dy - pad;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + dx - pad;
            row[std::int64_t(oy) * wo + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w)
                    ? x[(std::int64_t(c) * h + iy) * w + ix]
                    : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* col, int cin, int h, int w, int kh, int kw, int stride, int pad, int ho,
                int wo, T* x) {
  const std::int64_t l = std::int64_t(ho) * wo;
  for (int c = 0; c < cin; ++c) {
    for (int dy = 0; dy < kh; ++dy) {
      for (int dx = 0; dx < kw; ++dx) {
        const T* row = col + (std::int64_t(c) * kh * kw + dy * kw + dx) * l;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + dy - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + dx - pad;
            if (ix < 0 || ix >= w) continue;
            x[(std::int64_t(c) * h + iy) * w + ix] += row[std::int64_t(oy) * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: (N,Cin,H,W), w: (Cout,Cin,Kh,Kw), b: (Cout) or empty tensor.
template <typename T>
Tensor<T> conv2d(Tensor<T> x, Tensor<T> w, Tensor<T> b, int stride = 1,
                 int pad = 0) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects NCHW x and OIHW w");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) throw ShapeError("conv2d: channel mismatch");
  const bool has_bias = b.numel() > 0;
  if (has_bias && (b.rank() != 1 || b.dim(0) != cout)) throw ShapeError("conv2d: bad bias shape");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (ww + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1 || (h + 2 * pad - kh) % stride || (ww + 2 * pad - kw) % stride)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                     shape_str(w.shape()) + " stride " + std::to_string(stride) + " pad " +
                     std::to_string(pad));

  const std::int64_t k = std::int64_t(cin) * kh * kw;
  const std::int64_t l = std::int64_t(ho) * wo;
  Tensor<T> out = Tensor<T>::zeros({n, cout, ho, wo});
  std::vector<T> col(k * l);
  for (int i = 0; i < n; ++i) {
    detail::im2col(x.data() + std::int64_t(i) * cin * h * ww, cin, h, ww, kh, kw, stride, pad, ho,
                   wo, col.data());
    T* y = out.data() + std::int64_t(i) * cout * l;
    detail::gemm_nn_acc<T>(cout, static_cast<int>(k), static_cast<int>(l), w.data(), col.data(),
                           y);
    if (has_bias) {
      for (int o = 0; o < cout; ++o) {
        const T bo = b.data()[o];
        for (std::int64_t s = 0; s < l; ++s) y[o * l + s] += bo;
      }
    }
  }
  check_finite(out, "conv2d");

  const bool need = Tape<T>::current() != nullptr &&
                    (x.requires_grad() || w.requires_grad() || (has_bias && b.requires_grad()));
  if (need) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, w, b, out, stride, pad, n, cin, h, ww, cout, kh, kw, ho, wo, k,
                                l, has_bias]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T> col(k * l);
      const bool need_x = x.requires_grad();
      const bool need_w = w.requires_grad();
      if (need_x) x.ensure_grad();
      if (need_w) w.ensure_grad();
      if (has_bias && b.requires_grad()) {
        std::vector<T>& gb = b.grad();
        for (int o = 0; o < cout; ++o) {
          T acc = 0;
          for (int i = 0; i < n; ++i) {
            const T* g = go.data() + (std::int64_t(i) * cout + o) * l;
            for (std::int64_t s = 0; s < l; ++s) acc += g[s];
          }
          gb[o] += acc;
        }
      }
      std::vector<T> dcol(need_x ? k * l : 0);
      for (int i = 0; i < n; ++i) {
        const T* g = go.data() + std::int64_t(i) * cout * l;
        if (need_w) {
          detail::im2col(x.data() + std::int64_t(i) * cin * h * ww, cin, h, ww, kh, kw, stride,
                         pad, ho, wo, col.data());
          detail::gemm_nt_acc<T>(cout, static_cast<int>(l), static_cast<int>(k), g, col.data(),
                                 w.grad().data());
        }
        if (need_x) {
          std::fill(dcol.begin(), dcol.end(), T(0));
          detail::gemm_tn_acc<T>(cout, static_cast<int>(k), static_cast<int>(l), w.data(), g,
                                 dcol.data());
          detail::col2im_acc(dcol.data(), cin, h, ww, kh, kw, stride, pad, ho, wo,
                             x.grad().data() + std::int64_t(i) * cin * h * ww);
        }
      }
    });
  }
  return out;
}

// x: (N,Cin,H,W), w: (Cin,Cout,Kh,Kw), b: (Cout) or empty. Stride 1, no
// padding: output is (N,Cout,H+Kh-1,W+Kw-1).
template <typename T>
Tensor<T> conv_transpose2d(Tensor<T> x, Tensor<T> w, Tensor<T> b) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv_transpose2d expects NCHW x");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != cin) throw ShapeError("conv_transpose2d: channel mismatch");
  const bool has_bias = b.numel() > 0;
  if (has_bias && (b.rank() != 1 || b.dim(0) != cout))
    throw ShapeError("conv_transpose2d: bad bias shape");
  const int ho = h + kh - 1, wo = ww + kw - 1;

  Tensor<T> out = Tensor<T>::zeros({n, cout, ho, wo});
  // Gather form: each output element sums its valid (ci,dy,dx) contributions
  // in fixed order.
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < cout; ++o) {
      T* y = out.data() + (std::int64_t(i) * cout + o) * ho * wo;
      for (int u = 0; u < ho; ++u) {
        for (int v = 0; v < wo; ++v) {
          T acc = has_bias ? b.data()[o] : T(0);
          for (int c = 0; c < cin; ++c) {
            const T* xs = x.data() + (std::int64_t(i) * cin + c) * h * ww;
            const T* ws = w.data() + (std::int64_t(c) * cout + o) * kh * kw;
            const int dy0 = std::max(0, u - h + 1), dy1 = std::min(kh - 1, u);
            for (int dy = dy0; dy <= dy1; ++dy) {
              const int iy = u - dy;
              const int dx0 = std::max(0, v - ww + 1), dx1 = std::min(kw - 1, v);
              for (int dx = dx0; dx <= dx1; ++dx) acc += xs[iy * ww + (v - dx)] * ws[dy * kw + dx];
            }
          }
          y[u * wo + v] = acc;
        }
      }
    }
  }
  check_finite(out, "conv_transpose2d");

  const bool need = Tape<T>::current() != nullptr &&
                    (x.requires_grad() || w.requires_grad() || (has_bias && b.requires_grad()));
  if (need) {
    out.set_requires_grad(true);
    Tape<T>::current()->record(
        [x, w, b, out, n, cin, h, ww, cout, kh, kw, ho, wo, has_bias]() mutable {
          if (!out.has_grad()) return;
          const std::vector<T>& go = out.grad_view();
          if (has_bias && b.requires_grad()) {
            std::vector<T>& gb = b.grad();
            for (int o = 0; o < cout; ++o) {
              T acc = 0;
              for (int i = 0; i < n; ++i) {
                const T* g = go.data() + (std::int64_t(i) * cout + o) * ho * wo;
                for (std::int64_t s = 0; s < std::int64_t(ho) * wo; ++s) acc += g[s];
              }
              gb[o] += acc;
            }
          }
          if (x.requires_grad()) {
            std::vector<T>& gx = x.grad();
            for (int i = 0; i < n; ++i)
              for (int c = 0; c < cin; ++c) {
                T* gxs = gx.data() + (std::int64_t(i) * cin + c) * h * ww;
                for (int iy = 0; iy < h; ++iy)
                  for (int ix = 0; ix < ww; ++ix) {
                    T acc = 0;
                    for (int o = 0; o < cout; ++o) {
                      const T* g = go.data() + (std::int64_t(i) * cout + o) * ho * wo;
                      const T* ws = w.data() + (std::int64_t(c) * cout + o) * kh * kw;
                      for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx)
                          acc += g[(iy + dy) * wo + (ix + dx)] * ws[dy * kw + dx];
                    }
                    gxs[iy * ww + ix] += acc;
                  }
              }
          }
          if (w.requires_grad()) {
            std::vector<T>& gw = w.grad();
            for (int c = 0; c < cin; ++c)
              for (int o = 0; o < cout; ++o) {
                T* gws = gw.data() + (std::int64_t(c) * cout + o) * kh * kw;
                for (int dy = 0; dy < kh; ++dy)
                  for (int dx = 0; dx < kw; ++dx) {
                    T acc = 0;
                    for (int i = 0; i < n; ++i) {
                      const T* xs = x.data() + (std::int64_t(i) * cin + c) * h * ww;
                      const T* g = go.data() + (std::int64_t(i) * cout + o) * ho * wo;
                      for (int iy = 0; iy < h; ++iy)
                        for (int ix = 0; ix < ww; ++ix)
                          acc += xs[iy * ww + ix] * g[(iy + dy) * wo + (ix + dx)];
                    }
                    gws[dy * kw + dx] += acc;
                  }
              }
          }
        });
  }
  return out;
}

}  // namespace hattn
