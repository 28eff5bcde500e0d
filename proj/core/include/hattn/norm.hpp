#pragma once

// Normalization layers and dropout.

#include "hattn/ops.hpp"
#include "hattn/rng.hpp"

namespace hattn {

// Batch normalization over (N,H,W) per channel. In training mode the batch
// statistics normalize the output and the running buffers are updated
// in place (they are state, not differentiable parameters). In eval mode the
// running statistics are used.
template <typename T>
Tensor<T> batch_norm2d(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                       Tensor<T> running_mean, Tensor<T> running_var, bool training,
                       T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 4) throw ShapeError("batch_norm2d expects NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    throw ShapeError("batch_norm2d: per-channel parameter size mismatch");
  const std::int64_t m = std::int64_t(n) * h * w;  // reduction count per channel
  const std::int64_t hw = std::int64_t(h) * w;

  std::vector<T> mean_c(c), invstd_c(c);
  if (training) {
    for (int j = 0; j < c; ++j) {
      T s = 0;
      for (int i = 0; i < n; ++i) {
        const T* px = x.data() + (std::int64_t(i) * c + j) * hw;
        for (std::int64_t k = 0; k < hw; ++k) s += px[k];
      }
      const T mu = s / static_cast<T>(m);
      T v = 0;
      for (int i = 0; i < n; ++i) {
        const T* px = x.data() + (std::int64_t(i) * c + j) * hw;
        for (std::int64_t k = 0; k < hw; ++k) {
          const T d = px[k] - mu;
          v += d * d;
        }
      }
      const T var = v / static_cast<T>(m);
      mean_c[j] = mu;
      invstd_c[j] = T(1) / std::sqrt(var + eps);
      const T unbiased = m > 1 ? v / static_cast<T>(m - 1) : var;
      running_mean.data()[j] = (T(1) - momentum) * running_mean.data()[j] + momentum * mu;
      running_var.data()[j] = (T(1) - momentum) * running_var.data()[j] + momentum * unbiased;
    }
  } else {
    for (int j = 0; j < c; ++j) {
      mean_c[j] = running_mean.data()[j];
      invstd_c[j] = T(1) / std::sqrt(running_var.data()[j] + eps);
    }
  }

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const T* px = x.data() + (std::int64_t(i) * c + j) * hw;
      T* po = out.data() + (std::int64_t(i) * c + j) * hw;
      const T g = gamma.data()[j], bb = beta.data()[j], mu = mean_c[j], is = invstd_c[j];
      for (std::int64_t k = 0; k < hw; ++k) po[k] = g * (px[k] - mu) * is + bb;
    }
  }
  check_finite(out, "batch_norm2d");

  const bool need =
      Tape<T>::current() != nullptr &&
      (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  if (need) {
    out.set_requires_grad(true);
    Tape<T>::current()->record(
        [x, gamma, beta, out, mean_c, invstd_c, training, n, c, hw, m]() mutable {
          if (!out.has_grad()) return;
          const std::vector<T>& go = out.grad_view();
          // Per-channel sums of dy and dy*xhat.
          std::vector<T> sum_dy(c, T(0)), sum_dyx(c, T(0));
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
              const T* px = x.data() + (std::int64_t(i) * c + j) * hw;
              const T* g = go.data() + (std::int64_t(i) * c + j) * hw;
              const T mu = mean_c[j], is = invstd_c[j];
              T sd = 0, sx = 0;
              for (std::int64_t k = 0; k < hw; ++k) {
                sd += g[k];
                sx += g[k] * (px[k] - mu) * is;
              }
              sum_dy[j] += sd;
              sum_dyx[j] += sx;
            }
          if (beta.requires_grad()) {
            std::vector<T>& gb = beta.grad();
            for (int j = 0; j < c; ++j) gb[j] += sum_dy[j];
          }
          if (gamma.requires_grad()) {
            std::vector<T>& gg = gamma.grad();
            for (int j = 0; j < c; ++j) gg[j] += sum_dyx[j];
          }
          if (x.requires_grad()) {
            std::vector<T>& gx = x.grad();
            const T invm = T(1) / static_cast<T>(m);
            for (int i = 0; i < n; ++i)
              for (int j = 0; j < c; ++j) {
                const T* px = x.data() + (std::int64_t(i) * c + j) * hw;
                const T* g = go.data() + (std::int64_t(i) * c + j) * hw;
                T* gxp = gx.data() + (std::int64_t(i) * c + j) * hw;
                const T mu = mean_c[j], is = invstd_c[j], gam = gamma.data()[j];
                if (training) {
                  for (std::int64_t k = 0; k < hw; ++k) {
                    const T xh = (px[k] - mu) * is;
                    gxp[k] += gam * is * (g[k] - sum_dy[j] * invm - xh * sum_dyx[j] * invm);
                  }
                } else {
                  for (std::int64_t k = 0; k < hw; ++k) gxp[k] += gam * is * g[k];
                }
              }
          }
        });
  }
  return out;
}

// Layer normalization over the channel axis at each (n, spatial) position.
// No learned affine: the output is the plain standardized activation.
template <typename T>
Tensor<T> layer_norm_channel(Tensor<T> x, T eps = T(1e-5)) {
  if (x.rank() < 2) throw ShapeError("layer_norm_channel expects rank >= 2");
  const int n = x.dim(0), c = x.dim(1);
  std::int64_t inner = 1;
  for (int i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> invstd(std::size_t(n) * inner), mean(std::size_t(n) * inner);
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t s = 0; s < inner; ++s) {
      const std::int64_t base = b * c * inner + s;
      T mu = 0;
      for (int j = 0; j < c; ++j) mu += px[base + j * inner];
      mu /= static_cast<T>(c);
      T v = 0;
      for (int j = 0; j < c; ++j) {
        const T d = px[base + j * inner] - mu;
        v += d * d;
      }
      const T is = T(1) / std::sqrt(v / static_cast<T>(c) + eps);
      mean[b * inner + s] = mu;
      invstd[b * inner + s] = is;
      for (int j = 0; j < c; ++j) po[base + j * inner] = (px[base + j * inner] - mu) * is;
    }
  check_finite(out, "layer_norm");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, mean, invstd, n, c, inner]() mutable {
      const T* py = out.data();
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t s = 0; s < inner; ++s) {
          const std::int64_t base = b * c * inner + s;
          const T is = invstd[b * inner + s];
          T sd = 0, sy = 0;
          for (int j = 0; j < c; ++j) {
            sd += go[base + j * inner];
            sy += go[base + j * inner] * py[base + j * inner];
          }
          sd /= static_cast<T>(c);
          sy /= static_cast<T>(c);
          for (int j = 0; j < c; ++j) {
            const std::int64_t at = base + j * inner;
            gx[at] += is * (go[at] - sd - py[at] * sy);
          }
        }
    });
  }
  return out;
}

// Inverted dropout: active only in training mode; the mask comes from the
// caller's RNG substream so a given seed reproduces it bit for bit.
template <typename T>
Tensor<T> dropout(Tensor<T> x, T p, Rng& rng, bool training) {
  if (!training || p <= T(0)) return x;
  if (p >= T(1)) throw std::invalid_argument("dropout: p must be < 1");
  const T scale = T(1) / (T(1) - p);
  std::vector<T> mask(x.numel());
  for (auto& mv : mask) mv = rng.uniform() < static_cast<double>(p) ? T(0) : scale;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * mask[i];
  check_finite(out, "dropout");
  if (grad_mode(x)) {
    out.set_requires_grad(true);
    Tape<T>::current()->record([x, out, mask]() mutable {
      if (!out.has_grad()) return;
      const std::vector<T>& go = out.grad_view();
      std::vector<T>& gx = x.grad();
      for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += go[i] * mask[i];
    });
  }
  return out;
}

}  // namespace hattn
