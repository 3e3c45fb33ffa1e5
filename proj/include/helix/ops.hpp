#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "helix/tensor.hpp"

namespace helix {

enum class Act { gelu, silu, softplus, sigmoid, exp };

namespace kernels {

inline double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double act_eval(Act kind, double x) {
  switch (kind) {
    case Act::gelu:
      return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475));
    case Act::silu:
      return x * sigmoid_stable(x);
    case Act::softplus:
      return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    case Act::sigmoid:
      return sigmoid_stable(x);
    case Act::exp:
      return std::exp(x);
  }
  return 0.0;
}

inline double act_grad(Act kind, double x) {
  switch (kind) {
    case Act::gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
      const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
      return cdf + x * pdf;
    }
    case Act::silu: {
      const double s = sigmoid_stable(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case Act::softplus:
      return sigmoid_stable(x);
    case Act::sigmoid: {
      const double s = sigmoid_stable(x);
      return s * (1.0 - s);
    }
    case Act::exp:
      return std::exp(x);
  }
  return 0.0;
}

inline const char* act_name(Act kind) {
  switch (kind) {
    case Act::gelu: return "gelu";
    case Act::silu: return "silu";
    case Act::softplus: return "softplus";
    case Act::sigmoid: return "sigmoid";
    case Act::exp: return "exp";
  }
  return "?";
}

// row-wise layer norm over the last dim; mean/rstd caches are length L
template <class T>
void ln_fwd(const T* x, const T* gamma, const T* beta, std::int64_t L, std::int64_t d, T eps,
            T* y, T* mean, T* rstd) {
  for (std::int64_t r = 0; r < L; ++r) {
    const T* xr = x + r * d;
    T mu = T(0);
    for (std::int64_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::int64_t c = 0; c < d; ++c) {
      const T dv = xr[c] - mu;
      var += dv * dv;
    }
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    T* yr = y + r * d;
    for (std::int64_t c = 0; c < d; ++c) yr[c] = gamma[c] * ((xr[c] - mu) * rs) + beta[c];
  }
}

// accumulates into dx, dgamma, dbeta
template <class T>
void ln_bwd(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, std::int64_t L,
            std::int64_t d, T* dx, T* dgamma, T* dbeta) {
  for (std::int64_t r = 0; r < L; ++r) {
    const T* xr = x + r * d;
    const T* dyr = dy + r * d;
    T* dxr = dx + r * d;
    const T mu = mean[r], rs = rstd[r];
    T sum_dyg = T(0), sum_dyg_xhat = T(0);
    for (std::int64_t c = 0; c < d; ++c) {
      const T xhat = (xr[c] - mu) * rs;
      const T dyg = dyr[c] * gamma[c];
      sum_dyg += dyg;
      sum_dyg_xhat += dyg * xhat;
      if (dgamma) dgamma[c] += dyr[c] * xhat;
      if (dbeta) dbeta[c] += dyr[c];
    }
    const T inv_d = T(1) / static_cast<T>(d);
    for (std::int64_t c = 0; c < d; ++c) {
      const T xhat = (xr[c] - mu) * rs;
      const T dyg = dyr[c] * gamma[c];
      dxr[c] += rs * (dyg - inv_d * sum_dyg - xhat * inv_d * sum_dyg_xhat);
    }
  }
}

template <class T>
void softmax_fwd(const T* x, std::int64_t L, std::int64_t n, T* p) {
  for (std::int64_t r = 0; r < L; ++r) {
    const T* xr = x + r * n;
    T* pr = p + r * n;
    T mx = xr[0];
    for (std::int64_t c = 1; c < n; ++c) mx = std::max(mx, xr[c]);
    T denom = T(0);
    for (std::int64_t c = 0; c < n; ++c) {
      pr[c] = std::exp(xr[c] - mx);
      denom += pr[c];
    }
    const T inv = T(1) / denom;
    for (std::int64_t c = 0; c < n; ++c) pr[c] *= inv;
  }
}

// dS += P * (dP - rowdot(dP, P)); accumulates into ds
template <class T>
void softmax_bwd(const T* p, const T* dp, std::int64_t L, std::int64_t n, T* ds) {
  for (std::int64_t r = 0; r < L; ++r) {
    const T* pr = p + r * n;
    const T* dpr = dp + r * n;
    T* dsr = ds + r * n;
    T dot = T(0);
    for (std::int64_t c = 0; c < n; ++c) dot += dpr[c] * pr[c];
    for (std::int64_t c = 0; c < n; ++c) dsr[c] += pr[c] * (dpr[c] - dot);
  }
}

// x: [Cin x T], w: [Cout x Cin/groups x k], out: [Cout x Tout].
// pad_left zeros are implicit; output position t reads inputs
// [t*stride - pad_left, t*stride - pad_left + k).
template <class T>
void conv1d_fwd(const T* x, const T* w, const T* b, std::int64_t cin, std::int64_t t_in,
                std::int64_t cout, std::int64_t k, std::int64_t stride, std::int64_t pad_left,
                std::int64_t groups, std::int64_t t_out, T* y) {
  const std::int64_t cpg = cin / groups;
  const std::int64_t opg = cout / groups;
  for (std::int64_t co = 0; co < cout; ++co) {
    const std::int64_t g = co / opg;
    for (std::int64_t t = 0; t < t_out; ++t) {
      T acc = b ? b[co] : T(0);
      const std::int64_t start = t * stride - pad_left;
      for (std::int64_t ci = 0; ci < cpg; ++ci) {
        const T* xr = x + (g * cpg + ci) * t_in;
        const T* wr = w + (co * cpg + ci) * k;
        for (std::int64_t j = 0; j < k; ++j) {
          const std::int64_t idx = start + j;
          if (idx >= 0 && idx < t_in) acc += wr[j] * xr[idx];
        }
      }
      y[co * t_out + t] = acc;
    }
  }
}

template <class T>
void conv1d_bwd(const T* x, const T* w, const T* dy, std::int64_t cin, std::int64_t t_in,
                std::int64_t cout, std::int64_t k, std::int64_t stride, std::int64_t pad_left,
                std::int64_t groups, std::int64_t t_out, T* dx, T* dw, T* db) {
  const std::int64_t cpg = cin / groups;
  const std::int64_t opg = cout / groups;
  for (std::int64_t co = 0; co < cout; ++co) {
    const std::int64_t g = co / opg;
    for (std::int64_t t = 0; t < t_out; ++t) {
      const T gy = dy[co * t_out + t];
      if (db) db[co] += gy;
      const std::int64_t start = t * stride - pad_left;
      for (std::int64_t ci = 0; ci < cpg; ++ci) {
        const T* xr = x + (g * cpg + ci) * t_in;
        const T* wr = w + (co * cpg + ci) * k;
        T* dxr = dx ? dx + (g * cpg + ci) * t_in : nullptr;
        T* dwr = dw ? dw + (co * cpg + ci) * k : nullptr;
        for (std::int64_t j = 0; j < k; ++j) {
          const std::int64_t idx = start + j;
          if (idx < 0 || idx >= t_in) continue;
          if (dwr) dwr[j] += gy * xr[idx];
          if (dxr) dxr[idx] += gy * wr[j];
        }
      }
    }
  }
}

template <class T>
void conv2d_fwd(const T* x, const T* w, const T* b, std::int64_t cin, std::int64_t h,
                std::int64_t www, std::int64_t cout, std::int64_t kh, std::int64_t kw,
                std::int64_t sh, std::int64_t sw, std::int64_t h_out, std::int64_t w_out, T* y) {
  for (std::int64_t co = 0; co < cout; ++co) {
    for (std::int64_t oh = 0; oh < h_out; ++oh) {
      for (std::int64_t ow = 0; ow < w_out; ++ow) {
        T acc = b ? b[co] : T(0);
        for (std::int64_t ci = 0; ci < cin; ++ci) {
          const T* xp = x + ci * h * www;
          const T* wp = w + (co * cin + ci) * kh * kw;
          for (std::int64_t i = 0; i < kh; ++i) {
            const T* xrow = xp + (oh * sh + i) * www + ow * sw;
            const T* wrow = wp + i * kw;
            for (std::int64_t j = 0; j < kw; ++j) acc += wrow[j] * xrow[j];
          }
        }
        y[(co * h_out + oh) * w_out + ow] = acc;
      }
    }
  }
}

template <class T>
void conv2d_bwd(const T* x, const T* w, const T* dy, std::int64_t cin, std::int64_t h,
                std::int64_t www, std::int64_t cout, std::int64_t kh, std::int64_t kw,
                std::int64_t sh, std::int64_t sw, std::int64_t h_out, std::int64_t w_out, T* dx,
                T* dw, T* db) {
  for (std::int64_t co = 0; co < cout; ++co) {
    for (std::int64_t oh = 0; oh < h_out; ++oh) {
      for (std::int64_t ow = 0; ow < w_out; ++ow) {
        const T gy = dy[(co * h_out + oh) * w_out + ow];
        if (db) db[co] += gy;
        for (std::int64_t ci = 0; ci < cin; ++ci) {
          const T* xp = x + ci * h * www;
          T* dxp = dx ? dx + ci * h * www : nullptr;
          const T* wp = w + (co * cin + ci) * kh * kw;
          T* dwp = dw ? dw + (co * cin + ci) * kh * kw : nullptr;
          for (std::int64_t i = 0; i < kh; ++i) {
            for (std::int64_t j = 0; j < kw; ++j) {
              const std::int64_t xi = (oh * sh + i) * www + ow * sw + j;
              if (dwp) dwp[i * kw + j] += gy * xp[xi];
              if (dxp) dxp[xi] += gy * wp[i * kw + j];
            }
          }
        }
      }
    }
  }
}

}  // namespace kernels

template <class T>
Tensor<T> pointwise(const Tensor<T>& x, Act kind) {
  Tensor<T> out(x.shape());
  const T* px = x.data().data();
  T* po = out.raw().data();
  const std::size_t n = static_cast<std::size_t>(x.size());
  for (std::size_t i = 0; i < n; ++i) {
    po[i] = static_cast<T>(kernels::act_eval(kind, static_cast<double>(px[i])));
  }
  ensure_finite(po, n, kernels::act_name(kind));
  if (tracing<T>({&x})) {
    record_backward(out, [xb = x.buf_, xg = x.gs_, og = out.gs_, kind, n] {
      const T* g = out_grad(og);
      if (!g) return;
      if (xg && xg->requires_grad) {
        std::vector<T> dx(n);
        for (std::size_t i = 0; i < n; ++i) {
          dx[i] = g[i] * static_cast<T>(kernels::act_grad(kind, static_cast<double>(xb->v[i])));
        }
        accumulate_grad(xg, dx.data(), n, kernels::act_name(kind));
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) { return pointwise(x, Act::gelu); }
template <class T>
Tensor<T> silu(const Tensor<T>& x) { return pointwise(x, Act::silu); }
template <class T>
Tensor<T> softplus(const Tensor<T>& x) { return pointwise(x, Act::softplus); }

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (x.rank() != 2) throw ShapeError("layer_norm: need rank 2, got " + shape_str(x.shape()));
  const std::int64_t L = x.dim(0), d = x.dim(1);
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: scale/shift " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " for width " + std::to_string(d));
  }
  if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
  Tensor<T> out(x.shape());
  auto mean = make_buffer<T>(static_cast<std::size_t>(L));
  auto rstd = make_buffer<T>(static_cast<std::size_t>(L));
  kernels::ln_fwd(x.data().data(), gamma.data().data(), beta.data().data(), L, d, eps,
                  out.raw().data(), mean->v.data(), rstd->v.data());
  ensure_finite(out.raw().data(), static_cast<std::size_t>(out.size()), "layer_norm");
  if (tracing<T>({&x, &gamma, &beta})) {
    record_backward(out, [xb = x.buf_, gb = gamma.buf_, xg = x.gs_, gg = gamma.gs_, bg = beta.gs_,
                          og = out.gs_, mean, rstd, L, d] {
      const T* g = out_grad(og);
      if (!g) return;
      std::vector<T> dx(static_cast<std::size_t>(L * d), T(0));
      std::vector<T> dgamma(static_cast<std::size_t>(d), T(0));
      std::vector<T> dbeta(static_cast<std::size_t>(d), T(0));
      kernels::ln_bwd(xb->v.data(), gb->v.data(), mean->v.data(), rstd->v.data(), g, L, d,
                      dx.data(), dgamma.data(), dbeta.data());
      accumulate_grad(xg, dx.data(), dx.size(), "layer_norm");
      accumulate_grad(gg, dgamma.data(), dgamma.size(), "layer_norm");
      accumulate_grad(bg, dbeta.data(), dbeta.size(), "layer_norm");
    });
  }
  return out;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("softmax_rows: need rank 2, got " + shape_str(x.shape()));
  const std::int64_t L = x.dim(0), n = x.dim(1);
  Tensor<T> out(x.shape());
  kernels::softmax_fwd(x.data().data(), L, n, out.raw().data());
  ensure_finite(out.raw().data(), static_cast<std::size_t>(out.size()), "softmax_rows");
  if (tracing<T>({&x})) {
    record_backward(out, [ob = out.buf_, xg = x.gs_, og = out.gs_, L, n] {
      const T* g = out_grad(og);
      if (!g) return;
      if (xg && xg->requires_grad) {
        std::vector<T> dx(static_cast<std::size_t>(L * n), T(0));
        kernels::softmax_bwd(ob->v.data(), g, L, n, dx.data());
        accumulate_grad(xg, dx.data(), dx.size(), "softmax_rows");
      }
    });
  }
  return out;
}

enum class Pad1d { none, causal };

// x: [Cin x T], w: [Cout x Cin/groups x k], bias optional (empty tensor skips it)
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::int64_t stride, Pad1d pad, std::int64_t groups = 1) {
  if (x.rank() != 2 || w.rank() != 3) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()));
  }
  const std::int64_t cin = x.dim(0), t_in = x.dim(1);
  const std::int64_t cout = w.dim(0), cpg = w.dim(1), k = w.dim(2);
  if (groups < 1 || cin % groups != 0 || cout % groups != 0 || cpg != cin / groups) {
    throw ShapeError("conv1d: weight " + shape_str(w.shape()) + " incompatible with " +
                     std::to_string(cin) + " input channels in " + std::to_string(groups) +
                     " groups");
  }
  if (bias.defined() && bias.size() != cout) {
    throw ShapeError("conv1d: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                     " output channels");
  }
  if (stride < 1) throw ConfigError("conv1d: stride must be >= 1");
  std::int64_t pad_left = 0, t_out = 0;
  if (pad == Pad1d::causal) {
    if (stride != 1) throw ConfigError("conv1d: causal padding requires stride 1");
    pad_left = k - 1;
    t_out = t_in;
  } else {
    if (k > t_in) {
      throw ShapeError("conv1d: kernel " + std::to_string(k) + " longer than input " +
                       std::to_string(t_in));
    }
    t_out = (t_in - k) / stride + 1;
  }
  Tensor<T> out(Shape{cout, t_out});
  const T* pb = bias.defined() ? bias.data().data() : nullptr;
  kernels::conv1d_fwd(x.data().data(), w.data().data(), pb, cin, t_in, cout, k, stride, pad_left,
                      groups, t_out, out.raw().data());
  ensure_finite(out.raw().data(), static_cast<std::size_t>(out.size()), "conv1d");
  const bool has_bias = bias.defined();
  if ((has_bias && tracing<T>({&x, &w, &bias})) || (!has_bias && tracing<T>({&x, &w}))) {
    auto bgs = has_bias ? bias.gs_ : nullptr;
    record_backward(out, [xb = x.buf_, wb = w.buf_, xg = x.gs_, wg = w.gs_, bgs, og = out.gs_, cin,
                          t_in, cout, k, stride, pad_left, groups, t_out] {
      const T* g = out_grad(og);
      if (!g) return;
      const bool need_x = xg && xg->requires_grad;
      const bool need_w = wg && wg->requires_grad;
      const bool need_b = bgs && bgs->requires_grad;
      std::vector<T> dx(need_x ? static_cast<std::size_t>(cin * t_in) : 0, T(0));
      std::vector<T> dw(need_w ? wb->v.size() : 0, T(0));
      std::vector<T> db(need_b ? static_cast<std::size_t>(cout) : 0, T(0));
      kernels::conv1d_bwd(xb->v.data(), wb->v.data(), g, cin, t_in, cout, k, stride, pad_left,
                          groups, t_out, need_x ? dx.data() : nullptr,
                          need_w ? dw.data() : nullptr, need_b ? db.data() : nullptr);
      if (need_x) accumulate_grad(xg, dx.data(), dx.size(), "conv1d");
      if (need_w) accumulate_grad(wg, dw.data(), dw.size(), "conv1d");
      if (need_b) accumulate_grad(bgs, db.data(), db.size(), "conv1d");
    });
  }
  return out;
}

// x: [Cin x H x W], w: [Cout x Cin x kh x kw], valid padding
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::int64_t sh,
                 std::int64_t sw) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()));
  }
  const std::int64_t cin = x.dim(0), h = x.dim(1), ww = x.dim(2);
  const std::int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (bias.defined() && bias.size() != cout) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                     " output channels");
  }
  if (sh < 1 || sw < 1) throw ConfigError("conv2d: strides must be >= 1");
  if (kh > h || kw > ww) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than input " + std::to_string(h) + "x" + std::to_string(ww));
  }
  const std::int64_t h_out = (h - kh) / sh + 1;
  const std::int64_t w_out = (ww - kw) / sw + 1;
  Tensor<T> out(Shape{cout, h_out, w_out});
  const T* pb = bias.defined() ? bias.data().data() : nullptr;
  kernels::conv2d_fwd(x.data().data(), w.data().data(), pb, cin, h, ww, cout, kh, kw, sh, sw,
                      h_out, w_out, out.raw().data());
  ensure_finite(out.raw().data(), static_cast<std::size_t>(out.size()), "conv2d");
  const bool has_bias = bias.defined();
  if ((has_bias && tracing<T>({&x, &w, &bias})) || (!has_bias && tracing<T>({&x, &w}))) {
    auto bgs = has_bias ? bias.gs_ : nullptr;
    record_backward(out, [xb = x.buf_, wb = w.buf_, xg = x.gs_, wg = w.gs_, bgs, og = out.gs_, cin,
                          h, ww, cout, kh, kw, sh, sw, h_out, w_out] {
      const T* g = out_grad(og);
      if (!g) return;
      const bool need_x = xg && xg->requires_grad;
      const bool need_w = wg && wg->requires_grad;
      const bool need_b = bgs && bgs->requires_grad;
      std::vector<T> dx(need_x ? static_cast<std::size_t>(cin * h * ww) : 0, T(0));
      std::vector<T> dw(need_w ? wb->v.size() : 0, T(0));
      std::vector<T> db(need_b ? static_cast<std::size_t>(cout) : 0, T(0));
      kernels::conv2d_bwd(xb->v.data(), wb->v.data(), g, cin, h, ww, cout, kh, kw, sh, sw, h_out,
                          w_out, need_x ? dx.data() : nullptr, need_w ? dw.data() : nullptr,
                          need_b ? db.data() : nullptr);
      if (need_x) accumulate_grad(xg, dx.data(), dx.size(), "conv2d");
      if (need_w) accumulate_grad(wg, dw.data(), dw.size(), "conv2d");
      if (need_b) accumulate_grad(bgs, db.data(), db.size(), "conv2d");
    });
  }
  return out;
}

// [C x Hp x Wp] feature grid -> [Wp*Hp x C] token sequence, time (W) major:
// token t*Hp+f holds channel vector at grid cell (f, t).
template <class T>
Tensor<T> grid_to_tokens(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("grid_to_tokens: need rank 3, got " + shape_str(x.shape()));
  const std::int64_t c = x.dim(0), hp = x.dim(1), wp = x.dim(2);
  Tensor<T> out(Shape{wp * hp, c});
  const T* px = x.data().data();
  T* po = out.raw().data();
  for (std::int64_t t = 0; t < wp; ++t) {
    for (std::int64_t f = 0; f < hp; ++f) {
      T* dst = po + (t * hp + f) * c;
      for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] = px[(ch * hp + f) * wp + t];
    }
  }
  if (tracing<T>({&x})) {
    record_backward(out, [xg = x.gs_, og = out.gs_, c, hp, wp] {
      const T* g = out_grad(og);
      if (!g) return;
      if (xg && xg->requires_grad) {
        std::vector<T> dx(static_cast<std::size_t>(c * hp * wp));
        for (std::int64_t t = 0; t < wp; ++t) {
          for (std::int64_t f = 0; f < hp; ++f) {
            const T* src = g + (t * hp + f) * c;
            for (std::int64_t ch = 0; ch < c; ++ch) dx[(ch * hp + f) * wp + t] = src[ch];
          }
        }
        accumulate_grad(xg, dx.data(), dx.size(), "grid_to_tokens");
      }
    });
  }
  return out;
}

// loss = -sum_i target_i * log softmax(logits)_i; target is a probability
// vector (one-hot or a mixup blend) and never receives gradient.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.size() != target.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  const std::int64_t n = logits.size();
  const T* pl = logits.data().data();
  const T* pt = target.data().data();
  T mx = pl[0];
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, pl[i]);
  T sum = T(0);
  for (std::int64_t i = 0; i < n; ++i) sum += std::exp(pl[i] - mx);
  const T lse = mx + std::log(sum);
  T loss = T(0);
  T tmass = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    loss -= pt[i] * (pl[i] - lse);
    tmass += pt[i];
  }
  if (std::abs(static_cast<double>(tmass) - 1.0) > 1e-4) {
    throw ConfigError("cross_entropy: target mass " + std::to_string(static_cast<double>(tmass)) +
                      ", expected a probability vector");
  }
  Tensor<T> out(Shape{1});
  out.raw()[0] = loss;
  ensure_finite(out.raw().data(), 1, "cross_entropy");
  if (tracing<T>({&logits})) {
    record_backward(out, [lb = logits.buf_, tb = target.buf_, lg = logits.gs_, og = out.gs_, n,
                          mx, sum] {
      const T* g = out_grad(og);
      if (!g) return;
      if (lg && lg->requires_grad) {
        std::vector<T> dl(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
          const T p = std::exp(lb->v[i] - mx) / sum;
          dl[i] = g[0] * (p - tb->v[i]);
        }
        accumulate_grad(lg, dl.data(), dl.size(), "cross_entropy");
      }
    });
  }
  return out;
}

}  // namespace helix
