#pragma once

// Conditional normalizing flows: autoregressive neural spline layers with
// Flip and ActNorm between them, composed into a stack that samples from and
// scores the posterior q(z|h).
//
// The monotone rational-quadratic spline maps [-B,B] onto [-B,B] through K
// bins and is the identity outside. Given bin knots (w,v) and knot
// derivatives d, with s the bin's secant slope and xi the position inside the
// bin, the transform, its derivative, and its analytic inverse (the root in
// [0,1] of a per-bin quadratic) follow the standard closed forms.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "hattn/layers.hpp"
#include "hattn/ops.hpp"
#include "hattn/rng.hpp"

namespace hattn::flows {

constexpr double kMinBinSize = 1e-3;
constexpr double kMinDerivative = 1e-3;

// Raw conditioner output per transformed dimension: K widths, K heights,
// K-1 interior derivatives.
inline int params_per_dim(int bins) { return 3 * bins - 1; }

// Shift making a zero raw derivative map to exactly 1 after softplus+floor.
template <typename T>
T deriv_raw_shift() {
  return static_cast<T>(std::log(std::exp(1.0 - kMinDerivative) - 1.0));
}

template <typename T>
struct SplineParams {
  std::vector<T> knot_x;  // K+1, strictly increasing, spans [-B, B]
  std::vector<T> knot_y;  // K+1, strictly increasing, spans [-B, B]
  std::vector<T> derivs;  // K-1 interior knot derivatives, positive
  T tail_bound = T(3);

  int bins() const { return static_cast<int>(knot_x.size()) - 1; }

  // Boundary derivatives are pinned to 1 so the tails continue linearly.
  T deriv_at(int k) const {
    const int K = bins();
    if (k <= 0 || k >= K) return T(1);
    return derivs[k - 1];
  }

  void validate() const {
    const int K = bins();
    if (K < 1 || knot_y.size() != knot_x.size() ||
        static_cast<int>(derivs.size()) != K - 1)
      throw std::invalid_argument("spline: inconsistent parameter sizes");
    const T tol = static_cast<T>(0.5 * kMinBinSize);
    for (int k = 0; k < K; ++k) {
      if (!(knot_x[k + 1] - knot_x[k] > tol) || !(knot_y[k + 1] - knot_y[k] > tol))
        throw std::invalid_argument("spline: knots not strictly increasing");
    }
    for (T d : derivs)
      if (!(d > T(0))) throw std::invalid_argument("spline: non-positive derivative");
  }
};

// Identity spline: uniform bins, matching knots, unit derivatives.
template <typename T>
SplineParams<T> identity_spline(int bins, T tail_bound) {
  SplineParams<T> p;
  p.tail_bound = tail_bound;
  p.knot_x.resize(bins + 1);
  p.knot_y.resize(bins + 1);
  for (int k = 0; k <= bins; ++k)
    p.knot_x[k] = p.knot_y[k] = -tail_bound + T(2) * tail_bound * T(k) / T(bins);
  p.derivs.assign(bins - 1, T(1));
  return p;
}

namespace detail {

template <typename T>
int find_bin(const std::vector<T>& knots, T v) {
  const int K = static_cast<int>(knots.size()) - 1;
  int k = static_cast<int>(std::upper_bound(knots.begin(), knots.end(), v) - knots.begin()) - 1;
  return std::clamp(k, 0, K - 1);
}

}  // namespace detail

// Spline value and derivative at one point. Outside the tail bound the
// transform is the identity with derivative 1.
template <typename T>
std::pair<T, T> rqs_eval(T z, const SplineParams<T>& p) {
  p.validate();
  const T B = p.tail_bound;
  if (z < -B || z > B) return {z, T(1)};
  const int k = detail::find_bin(p.knot_x, z);
  const T wk = p.knot_x[k], wk1 = p.knot_x[k + 1];
  const T vk = p.knot_y[k], vk1 = p.knot_y[k + 1];
  const T dk = p.deriv_at(k), dk1 = p.deriv_at(k + 1);
  const T dw = wk1 - wk, dv = vk1 - vk;
  const T s = dv / dw;
  const T xi = (z - wk) / dw;
  const T omx = T(1) - xi;
  const T q = xi * omx;
  const T denom = s + (dk1 + dk - T(2) * s) * q;
  const T y = vk + dv * (s * xi * xi + dk * q) / denom;
  const T dy = s * s * (dk1 * xi * xi + T(2) * s * q + dk * omx * omx) / (denom * denom);
  return {y, dy};
}

// Analytic inverse: solve the per-bin quadratic in xi and take the [0,1]
// root. A root outside [0,1] (or a negative discriminant) signals corrupted
// parameters.
template <typename T>
T rqs_invert(T y, const SplineParams<T>& p) {
  p.validate();
  const T B = p.tail_bound;
  if (y < -B || y > B) return y;
  const int k = detail::find_bin(p.knot_y, y);
  const T wk = p.knot_x[k], wk1 = p.knot_x[k + 1];
  const T vk = p.knot_y[k], vk1 = p.knot_y[k + 1];
  const T dk = p.deriv_at(k), dk1 = p.deriv_at(k + 1);
  const T dw = wk1 - wk, dv = vk1 - vk;
  const T s = dv / dw;
  const T e = dk1 + dk - T(2) * s;
  const T r = y - vk;
  const T a = dv * (s - dk) + r * e;
  const T b = dv * dk - r * e;
  const T c = -s * r;
  const T disc = b * b - T(4) * a * c;
  if (disc < T(0)) throw std::runtime_error("spline inverse: negative discriminant");
  const T xi = (T(2) * c) / (-b - std::sqrt(disc));
  if (!(xi > T(-1e-6) && xi < T(1) + T(1e-6)))
    throw std::runtime_error("spline inverse: no root in [0,1]");
  return wk + std::clamp(xi, T(0), T(1)) * dw;
}

// Autoregressive conditioner: one masked hidden layer. Parameters for
// dimension i depend only on z(j<i) and on the conditioning vector h.
template <typename T>
struct MaskedConditioner {
  int dim = 0, cond_dim = 0, bins = 0, hidden = 0;
  Tensor<T> w1, b1, u1;  // (d,H) masked, (1,H), (ch,H)
  Tensor<T> w2, b2;      // (H, d*P) masked, (1, d*P)
  Tensor<T> m1, m2;      // constant masks

  void init(ParamStore<T>& ps, const std::string& name, int d, int ch, int K, Rng& rng) {
    dim = d;
    cond_dim = ch;
    bins = K;
    hidden = 2 * d;
    const int P = params_per_dim(K);
    w1 = ps.create(name + "/w1", {d, hidden});
    kaiming_uniform(w1, d, rng);
    b1 = ps.create(name + "/b1", {1, hidden});
    u1 = ps.create(name + "/u1", {ch, hidden});
    kaiming_uniform(u1, ch, rng);
    // Zero-initialized output layer: every spline starts as the identity.
    w2 = ps.create(name + "/w2", {hidden, d * P});
    b2 = ps.create(name + "/b2", {1, d * P});

    // Degree masks. Hidden degrees cycle over 1..d-1 (d=1 leaves no valid
    // degree, so that single dimension is conditioned on h alone).
    std::vector<int> deg(hidden, 0);
    for (int u = 0; u < hidden; ++u) deg[u] = d > 1 ? (u % (d - 1)) + 1 : 0;
    m1 = Tensor<T>::zeros({d, hidden});
    for (int j = 0; j < d; ++j)
      for (int u = 0; u < hidden; ++u)
        if (d > 1 && j + 1 <= deg[u]) m1.data()[j * hidden + u] = T(1);
    m2 = Tensor<T>::zeros({hidden, d * P});
    for (int u = 0; u < hidden; ++u)
      for (int i = 0; i < d; ++i)
        if (d > 1 && deg[u] <= i && deg[u] >= 1)
          for (int t = 0; t < P; ++t) m2.data()[u * d * P + i * P + t] = T(1);
  }

  // (N,d) x (N,ch) -> (N, d*P)
  Tensor<T> forward(Tensor<T> z, Tensor<T> h) const {
    Tensor<T> pre = add(add(matmul(z, mul(w1, m1)), matmul(h, u1)), b1);
    Tensor<T> hid = leaky_relu(pre, static_cast<T>(kLeakySlope));
    return add(matmul(hid, mul(w2, m2)), b2);
  }
};

// Maps raw conditioner output to valid spline parameters, in tensor form for
// the differentiable forward pass.
template <typename T>
struct SplineMaps {
  Tensor<T> knot_x, knot_y;  // (N, d, K+1)
  Tensor<T> derivs;          // (N, d, K+1), boundaries pinned to 1
};

template <typename T>
SplineMaps<T> spline_maps_from_raw(Tensor<T> raw, int n, int d, int K, T tail_bound) {
  const int P = params_per_dim(K);
  Tensor<T> raw3 = reshape(raw, {n, d, P});
  const T minw = static_cast<T>(kMinBinSize);
  const T mind = static_cast<T>(kMinDerivative);
  auto knots_from = [&](Tensor<T> part) {
    Tensor<T> sm = reshape(softmax_channel(reshape(part, {n * d, K})), {n, d, K});
    Tensor<T> bin = add_scalar(mul_scalar(sm, T(2) * tail_bound - T(K) * minw), minw);
    return add_scalar(pad_front_last(cumsum_last(bin), T(0)), -tail_bound);
  };
  SplineMaps<T> out;
  out.knot_x = knots_from(slice_last(raw3, 0, K));
  out.knot_y = knots_from(slice_last(raw3, K, K));
  Tensor<T> di = add_scalar(softplus(add_scalar(slice_last(raw3, 2 * K, K - 1),
                                                deriv_raw_shift<T>())),
                            mind);
  out.derivs = pad_both_last(di, T(1), T(1));
  return out;
}

// One autoregressive spline layer.
template <typename T>
struct NsfLayer {
  MaskedConditioner<T> cond;
  T tail_bound = T(3);

  void init(ParamStore<T>& ps, const std::string& name, int d, int ch, int K, T B, Rng& rng) {
    tail_bound = B;
    cond.init(ps, name, d, ch, K, rng);
  }

  // Differentiable forward: returns (y (N,d), logdet (N)).
  std::pair<Tensor<T>, Tensor<T>> forward(Tensor<T> z, Tensor<T> h) const {
    const int n = z.dim(0), d = z.dim(1), K = cond.bins;
    const T B = tail_bound;
    SplineMaps<T> maps = spline_maps_from_raw(cond.forward(z, h), n, d, K, B);

    // Bin location and the inside-tail mask are data, not gradients.
    std::vector<int> idx_lo(std::size_t(n) * d), idx_hi(std::size_t(n) * d);
    Tensor<T> inside = Tensor<T>::zeros({n, d});
    {
      const T* pz = z.data();
      const T* kx = maps.knot_x.data();
      for (std::int64_t r = 0; r < std::int64_t(n) * d; ++r) {
        const T zv = std::clamp(pz[r], -B, B);
        const T* row = kx + r * (K + 1);
        int k = static_cast<int>(std::upper_bound(row, row + K + 1, zv) - row) - 1;
        k = std::clamp(k, 0, K - 1);
        idx_lo[r] = k;
        idx_hi[r] = k + 1;
        inside.data()[r] = (pz[r] >= -B && pz[r] <= B) ? T(1) : T(0);
      }
    }

    Tensor<T> wk = gather_last(maps.knot_x, idx_lo), wk1 = gather_last(maps.knot_x, idx_hi);
    Tensor<T> vk = gather_last(maps.knot_y, idx_lo), vk1 = gather_last(maps.knot_y, idx_hi);
    Tensor<T> dk = gather_last(maps.derivs, idx_lo), dk1 = gather_last(maps.derivs, idx_hi);

    Tensor<T> zc = clamp(z, -B, B);
    Tensor<T> dw = sub(wk1, wk);
    Tensor<T> dv = sub(vk1, vk);
    Tensor<T> s = div(dv, dw);
    Tensor<T> xi = div(sub(zc, wk), dw);
    Tensor<T> omx = add_scalar(neg(xi), T(1));
    Tensor<T> q = mul(xi, omx);
    Tensor<T> e = sub(add(dk1, dk), mul_scalar(s, T(2)));
    Tensor<T> denom = add(s, mul(e, q));
    Tensor<T> num = mul(dv, add(mul(s, square(xi)), mul(dk, q)));
    Tensor<T> y_spline = add(vk, div(num, denom));
    Tensor<T> dy_num =
        add(add(mul(dk1, square(xi)), mul_scalar(mul(s, q), T(2))), mul(dk, square(omx)));
    Tensor<T> dy = div(mul(square(s), dy_num), square(denom));

    Tensor<T> y = where(inside, y_spline, z);
    Tensor<T> logdet_elem = where(inside, log(dy), Tensor<T>::zeros({n, d}));
    return {y, sum_last(logdet_elem)};
  }

  static SplineParams<T> extract_params(const SplineMaps<T>& maps, int d, int K, int sample,
                                        int i, T tail_bound) {
    SplineParams<T> p;
    p.tail_bound = tail_bound;
    const std::int64_t base = (std::int64_t(sample) * d + i) * (K + 1);
    p.knot_x.assign(maps.knot_x.data() + base, maps.knot_x.data() + base + K + 1);
    p.knot_y.assign(maps.knot_y.data() + base, maps.knot_y.data() + base + K + 1);
    p.derivs.assign(maps.derivs.data() + base + 1, maps.derivs.data() + base + K);
    return p;
  }

  // Per-dimension parameters implied by an input prefix; dimension i of the
  // result only reflects z(j<i) and h.
  std::vector<SplineParams<T>> spline_params(Tensor<T> z, Tensor<T> h, int sample) const {
    const int n = z.dim(0), d = z.dim(1), K = cond.bins;
    typename Tape<T>::Pause pause;
    SplineMaps<T> maps = spline_maps_from_raw(cond.forward(z, h), n, d, K, tail_bound);
    std::vector<SplineParams<T>> out(d);
    for (int i = 0; i < d; ++i) out[i] = extract_params(maps, d, K, sample, i, tail_bound);
    return out;
  }

  // Sequential inverse over dimensions: one conditioner pass per dimension,
  // since dimension i's parameters need z(j<i) recovered first. Also returns
  // the forward log|det J| evaluated at the recovered input.
  std::pair<Tensor<T>, Tensor<T>> inverse(Tensor<T> y, Tensor<T> h) const {
    typename Tape<T>::Pause pause;
    const int n = y.dim(0), d = y.dim(1), K = cond.bins;
    Tensor<T> z = Tensor<T>::zeros({n, d});
    Tensor<T> logdet = Tensor<T>::zeros({n});
    for (int i = 0; i < d; ++i) {
      SplineMaps<T> maps = spline_maps_from_raw(cond.forward(z, h), n, d, K, tail_bound);
      for (int s = 0; s < n; ++s) {
        SplineParams<T> p = extract_params(maps, d, K, s, i, tail_bound);
        const T zi = rqs_invert(y.data()[std::int64_t(s) * d + i], p);
        z.data()[std::int64_t(s) * d + i] = zi;
        logdet.data()[s] += std::log(rqs_eval(zi, p).second);
      }
    }
    return {z, logdet};
  }
};

// Element reversal; volume preserving.
template <typename T>
Tensor<T> flip(Tensor<T> z) {
  return reverse_last(z);
}

// Conditional elementwise affine map z' = s(h) * z + b(h) with s = exp(raw),
// so log|det J| is just the sum of the raw scales.
template <typename T>
struct ActNormLayer {
  int dim = 0;
  LinearLayer<T> cond;  // h -> (raw_s, raw_b), zero-initialized

  void init(ParamStore<T>& ps, const std::string& name, int d, int ch) {
    dim = d;
    cond.init_zero(ps, name + "/cond", ch, 2 * d);
  }

  std::pair<Tensor<T>, Tensor<T>> forward(Tensor<T> z, Tensor<T> h) const {
    Tensor<T> raw = cond.forward(h);
    Tensor<T> raw_s = slice_last(raw, 0, dim);
    Tensor<T> raw_b = slice_last(raw, dim, dim);
    Tensor<T> scale = exp(raw_s);
    for (T sv : scale.values())
      if (sv == T(0)) throw std::runtime_error("actnorm: zero scale");
    return {add(mul(scale, z), raw_b), sum_last(raw_s)};
  }

  std::pair<Tensor<T>, Tensor<T>> inverse(Tensor<T> zp, Tensor<T> h) const {
    Tensor<T> raw = cond.forward(h);
    Tensor<T> raw_s = slice_last(raw, 0, dim);
    Tensor<T> raw_b = slice_last(raw, dim, dim);
    return {div(sub(zp, raw_b), exp(raw_s)), sum_last(raw_s)};
  }

  // Data-dependent init: set the conditioner bias so this layer standardizes
  // the given batch of activations (the weight starts at zero, so the
  // predicted scale/shift is constant across the batch).
  void init_from_batch(const Tensor<T>& z_batch) {
    const int n = z_batch.dim(0);
    for (int i = 0; i < dim; ++i) {
      double mu = 0, var = 0;
      for (int s = 0; s < n; ++s) mu += z_batch.data()[std::int64_t(s) * dim + i];
      mu /= n;
      for (int s = 0; s < n; ++s) {
        const double dx = z_batch.data()[std::int64_t(s) * dim + i] - mu;
        var += dx * dx;
      }
      var /= n;
      const double sd = std::sqrt(var + 1e-8);
      cond.b.data()[i] = static_cast<T>(-std::log(sd));
      cond.b.data()[dim + i] = static_cast<T>(-mu / sd);
    }
  }
};

// The posterior machinery: a conditional base Gaussian followed by n_s groups
// of [NSF, Flip, ActNorm] in the sampling direction. With use_flows off the
// posterior is the plain diagonal Gaussian (the ablation configuration).
template <typename T>
struct FlowStack {
  int dim = 0, cond_dim = 0, groups_n = 0, bins = 8;
  T tail_bound = T(3);
  bool use_flows = true;
  LinearLayer<T> base_head;  // h -> (mean, logvar), zero-initialized

  struct Group {
    NsfLayer<T> nsf;
    ActNormLayer<T> act;
  };
  std::vector<Group> groups;

  void init(ParamStore<T>& ps, const std::string& name, int d, int ch, int n_s, int K, T B,
            bool flows_enabled, Rng& rng) {
    dim = d;
    cond_dim = ch;
    groups_n = flows_enabled ? n_s : 0;
    bins = K;
    tail_bound = B;
    use_flows = flows_enabled;
    base_head.init_zero(ps, name + "/base", ch, 2 * d);
    groups.resize(groups_n);
    for (int g = 0; g < groups_n; ++g) {
      groups[g].nsf.init(ps, name + "/g" + std::to_string(g) + "/nsf", d, ch, K, B, rng);
      groups[g].act.init(ps, name + "/g" + std::to_string(g) + "/act", d, ch);
    }
  }

  int layer_count() const { return 3 * groups_n; }

  std::pair<Tensor<T>, Tensor<T>> base_params(Tensor<T> h) const {
    Tensor<T> raw = base_head.forward(h);
    Tensor<T> mean = slice_last(raw, 0, dim);
    Tensor<T> logvar = clamp(slice_last(raw, dim, dim), T(-10), T(10));
    return {mean, logvar};
  }

  // z0 -> zN through all layers; also the summed forward log|det J|.
  std::pair<Tensor<T>, Tensor<T>> transform(Tensor<T> z0, Tensor<T> h) const {
    Tensor<T> z = z0;
    Tensor<T> logdet = Tensor<T>::zeros({z0.dim(0)});
    for (int g = 0; g < groups_n; ++g) {
      auto [z1, ld1] = groups[g].nsf.forward(z, h);
      Tensor<T> z2 = flip(z1);
      auto [z3, ld3] = groups[g].act.forward(z2, h);
      z = z3;
      logdet = add(logdet, add(ld1, ld3));
    }
    return {z, logdet};
  }

  // zN -> z0; returns the forward-direction log|det J| evaluated along the
  // recovered path. Forward-only (never recorded on a tape).
  std::pair<Tensor<T>, Tensor<T>> invert(Tensor<T> zN, Tensor<T> h) const {
    typename Tape<T>::Pause pause;
    Tensor<T> z = zN;
    Tensor<T> logdet = Tensor<T>::zeros({zN.dim(0)});
    for (int g = groups_n - 1; g >= 0; --g) {
      auto [za, lda] = groups[g].act.inverse(z, h);
      Tensor<T> zf = flip(za);
      auto [zn, ldn] = groups[g].nsf.inverse(zf, h);
      z = zn;
      logdet = add(logdet, add(lda, ldn));
    }
    return {z, logdet};
  }

  // Reparameterized sample and its log-density, both differentiable.
  std::pair<Tensor<T>, Tensor<T>> sample(Tensor<T> h, Rng& rng) const {
    const int n = h.dim(0);
    auto [mean, logvar] = base_params(h);
    Tensor<T> eps = Tensor<T>::zeros({n, dim});
    for (auto& v : eps.values()) v = static_cast<T>(rng.normal());
    Tensor<T> z0 = add(mean, mul(exp(mul_scalar(logvar, T(0.5))), eps));
    // log N(z0; mean, var) with z0 = mean + sd*eps substituted.
    const T log2pi = static_cast<T>(std::log(2.0 * std::numbers::pi));
    Tensor<T> logq0 =
        mul_scalar(sum_last(add_scalar(add(square(eps), logvar), log2pi)), T(-0.5));
    auto [zN, logdet] = transform(z0, h);
    Tensor<T> logq = sub(logq0, logdet);
    check_finite(zN, "flow_sample");
    return {zN, logq};
  }

  // Exact log q(zN|h) of an arbitrary point, by inverting the stack.
  Tensor<T> log_prob(Tensor<T> zN, Tensor<T> h) const {
    typename Tape<T>::Pause pause;
    auto [z0, logdet] = invert(zN, h);
    auto [mean, logvar] = base_params(h);
    const T log2pi = static_cast<T>(std::log(2.0 * std::numbers::pi));
    Tensor<T> r = sub(z0, mean);
    Tensor<T> logq0 = mul_scalar(
        sum_last(add(add_scalar(div(square(r), exp(logvar)), log2pi), logvar)), T(-0.5));
    return sub(logq0, logdet);
  }

  // Standard-normal log density of a point (the prior over the latent).
  static Tensor<T> standard_normal_log_prob(Tensor<T> z) {
    const T log2pi = static_cast<T>(std::log(2.0 * std::numbers::pi));
    return mul_scalar(sum_last(add_scalar(square(z), log2pi)), T(-0.5));
  }

  // Run one batch through the stack, standardizing each ActNorm's output on
  // the activations that reach it.
  void init_actnorms(Tensor<T> h_batch, Rng& rng) {
    if (!use_flows) return;
    typename Tape<T>::Pause pause;
    const int n = h_batch.dim(0);
    auto [mean, logvar] = base_params(h_batch);
    Tensor<T> eps = Tensor<T>::zeros({n, dim});
    for (auto& v : eps.values()) v = static_cast<T>(rng.normal());
    Tensor<T> z = add(mean, mul(exp(mul_scalar(logvar, T(0.5))), eps));
    for (int g = 0; g < groups_n; ++g) {
      auto [z1, ld1] = groups[g].nsf.forward(z, h_batch);
      (void)ld1;
      Tensor<T> z2 = flip(z1);
      groups[g].act.init_from_batch(z2);
      auto [z3, ld3] = groups[g].act.forward(z2, h_batch);
      (void)ld3;
      z = z3;
    }
  }
};

}  // namespace hattn::flows
