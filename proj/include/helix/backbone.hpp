#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>

#include "helix/memory.hpp"
#include "helix/ops.hpp"
#include "helix/tensor.hpp"

namespace helix {

// Logical activation budget the attention path is checked against when no
// explicit budget is installed by the caller.
inline constexpr std::size_t kDefaultActivationBudget = std::size_t(4) << 30;

struct SSMConfig {
  std::int64_t d_model = 256;
  std::int64_t d_state = 32;
  std::int64_t d_conv = 4;
  std::int64_t expand = 2;

  std::int64_t d_inner() const { return expand * d_model; }
  std::int64_t dt_rank() const { return (d_model + 15) / 16; }

  void validate() const {
    if (d_model < 1 || d_state < 1 || d_conv < 1 || expand < 1) {
      throw ConfigError("ssm config: all dims must be positive (d_model " +
                        std::to_string(d_model) + ", d_state " + std::to_string(d_state) +
                        ", d_conv " + std::to_string(d_conv) + ", expand " +
                        std::to_string(expand) + ")");
    }
  }
};

// ---- parameter matching ----

struct ParamBudget {
  std::int64_t p_mamba = 0;
  std::int64_t p_mha = 0;
  std::int64_t p_norms = 0;
  std::int64_t d_ffn = 0;
};

// FFN width that brings an attention block closest to (without exceeding) a
// bidirectional SSM block's parameter count. The divisor 2d+1 counts both FFN
// matrices and the first bias; the second bias rides along as slack.
inline ParamBudget solve_ffn_width(std::int64_t p_mamba, std::int64_t d) {
  ParamBudget r;
  r.p_mamba = p_mamba;
  r.p_mha = 4 * d * d + 4 * d;
  r.p_norms = 4 * d;
  const std::int64_t avail = p_mamba - r.p_mha - r.p_norms;
  const std::int64_t denom = 2 * d + 1;
  if (avail < denom) {
    throw ConfigError("ffn width: block budget " + std::to_string(p_mamba) +
                      " leaves no room for an FFN at width " + std::to_string(d) +
                      " (attention fixed costs " + std::to_string(r.p_mha + r.p_norms) + ")");
  }
  r.d_ffn = avail / denom;
  return r;
}

// Closed-form count for one scan direction; kept in sync with
// SelectiveSSMParams by the golden-count test.
inline std::int64_t ssm_direction_param_count(const SSMConfig& cfg) {
  const std::int64_t d = cfg.d_model, di = cfg.d_inner(), ns = cfg.d_state;
  const std::int64_t r = cfg.dt_rank(), k = cfg.d_conv;
  return d * 2 * di      // w_in
         + di * k + di   // depthwise conv
         + di * (r + 2 * ns)  // x_proj
         + r * di + di   // dt up-projection and bias
         + di * ns       // a_log
         + di            // d_skip
         + di * d;       // w_out
}

inline std::int64_t bimamba_param_count(const SSMConfig& cfg) {
  return 2 * ssm_direction_param_count(cfg) + 2 * cfg.d_model +
         cfg.d_model * 2 * cfg.d_model;
}

// ---- selective SSM ----

template <class T>
struct SelectiveSSMParams {
  Tensor<T> w_in;    // [d, 2*d_inner], stream then gate
  Tensor<T> conv_w;  // [d_inner, 1, d_conv] depthwise
  Tensor<T> conv_b;  // [d_inner]
  Tensor<T> x_proj;  // [d_inner, dt_rank + 2*d_state]
  Tensor<T> dt_w;    // [dt_rank, d_inner]
  Tensor<T> dt_b;    // [d_inner]
  Tensor<T> a_log;   // [d_inner, d_state], state decay is -exp(a_log)
  Tensor<T> d_skip;  // [d_inner]
  Tensor<T> w_out;   // [d_inner, d]

  void init(const SSMConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::int64_t d = cfg.d_model, di = cfg.d_inner(), ns = cfg.d_state;
    const std::int64_t r = cfg.dt_rank(), k = cfg.d_conv;
    w_in = Tensor<T>(Shape{d, 2 * di}, true);
    conv_w = Tensor<T>(Shape{di, 1, k}, true);
    conv_b = Tensor<T>(Shape{di}, true);
    x_proj = Tensor<T>(Shape{di, r + 2 * ns}, true);
    dt_w = Tensor<T>(Shape{r, di}, true);
    dt_b = Tensor<T>(Shape{di}, true);
    a_log = Tensor<T>(Shape{di, ns}, true);
    d_skip = Tensor<T>::full(Shape{di}, T(1));
    d_skip.set_requires_grad(true);
    w_out = Tensor<T>(Shape{di, d}, true);

    fill_fan_in(w_in, rng, d);
    fill_fan_in(conv_w, rng, k);
    fill_fan_in(conv_b, rng, k);
    fill_fan_in(x_proj, rng, di);
    fill_fan_in(dt_w, rng, r);
    // Step sizes start log-uniform in [1e-3, 0.1]; the bias stores the
    // softplus preimage so the forward pass can stay a plain softplus.
    {
      auto b = dt_b.raw();
      const double lo = std::log(1e-3), hi = std::log(0.1);
      for (std::int64_t c = 0; c < di; ++c) {
        const double dt = std::exp(rng.uniform(lo, hi));
        b[c] = static_cast<T>(std::log(std::expm1(dt)));
      }
    }
    // S4D-real: channel-independent decay spectrum 1..d_state.
    {
      auto a = a_log.raw();
      for (std::int64_t c = 0; c < di; ++c) {
        for (std::int64_t s = 0; s < ns; ++s) {
          a[c * ns + s] = static_cast<T>(std::log(static_cast<double>(s + 1)));
        }
      }
    }
    fill_fan_in(w_out, rng, di);
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w_in", w_in);
    fn(prefix + ".conv_w", conv_w);
    fn(prefix + ".conv_b", conv_b);
    fn(prefix + ".x_proj", x_proj);
    fn(prefix + ".dt_w", dt_w);
    fn(prefix + ".dt_b", dt_b);
    fn(prefix + ".a_log", a_log);
    fn(prefix + ".d_skip", d_skip);
    fn(prefix + ".w_out", w_out);
  }
};

namespace detail {

// One recurrence step: h <- exp(dt*a) (.) h + (dt*u) b,  y = <c_row, h> + d*u.
// h is [di x ns] row-major, updated in place.
template <class T>
void scan_step(const T* u_row, const T* dt_row, const T* b_row, const T* c_row, const T* a,
               const T* dsk, std::int64_t di, std::int64_t ns, T* h, T* y_row) {
  for (std::int64_t c = 0; c < di; ++c) {
    const T dt = dt_row[c];
    const T du = dt * u_row[c];
    const T* arow = a + c * ns;
    T* hrow = h + c * ns;
    T acc = T(0);
    for (std::int64_t s = 0; s < ns; ++s) {
      hrow[s] = std::exp(dt * arow[s]) * hrow[s] + du * b_row[s];
      acc += c_row[s] * hrow[s];
    }
    y_row[c] = acc + dsk[c] * u_row[c];
  }
}

}  // namespace detail

// Length of the recomputation window the scan's backward pass works in. The
// forward pass stores one [d_inner x d_state] state snapshot per window, so
// activation memory stays linear in L with a small constant.
inline constexpr std::int64_t kScanChunk = 64;

// y[t] = C_t . h_t + D (.) u_t with h_t = exp(dt_t A) (.) h_{t-1} + (dt_t B_t) u_t,
// h_0 = 0, A strictly negative. Sequential in t.
template <class T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& b_seq,
                         const Tensor<T>& c_seq, const Tensor<T>& a, const Tensor<T>& d_skip) {
  if (u.rank() != 2 || delta.shape() != u.shape()) {
    throw ShapeError("selective_scan: input " + shape_str(u.shape()) + " vs step sizes " +
                     shape_str(delta.shape()));
  }
  const std::int64_t L = u.dim(0), di = u.dim(1);
  if (b_seq.rank() != 2 || c_seq.shape() != b_seq.shape() || b_seq.dim(0) != L) {
    throw ShapeError("selective_scan: B " + shape_str(b_seq.shape()) + ", C " +
                     shape_str(c_seq.shape()) + " for " + std::to_string(L) + " steps");
  }
  const std::int64_t ns = b_seq.dim(1);
  if (a.rank() != 2 || a.dim(0) != di || a.dim(1) != ns || d_skip.size() != di) {
    throw ShapeError("selective_scan: state matrix " + shape_str(a.shape()) + ", skip " +
                     shape_str(d_skip.shape()) + " for " + std::to_string(di) + " channels x " +
                     std::to_string(ns) + " states");
  }
  {
    const T* dr = delta.data().data();
    for (std::int64_t i = 0; i < L * di; ++i) {
      if (!(dr[i] > T(0))) {
        throw NumericError("selective_scan: step size " + std::to_string(static_cast<double>(dr[i])) +
                           " at position " + std::to_string(i / di) + " channel " +
                           std::to_string(i % di) + " is not positive");
      }
    }
  }

  const bool rec = tracing<T>({&u, &delta, &b_seq, &c_seq, &a, &d_skip});
  const std::int64_t state_n = di * ns;
  const std::int64_t n_chunks = (L + kScanChunk - 1) / kScanChunk;

  Tensor<T> out(Shape{L, di});
  auto ckpt = std::make_shared<counted_vector<T>>();
  if (rec && n_chunks > 1) ckpt->reserve(static_cast<std::size_t>((n_chunks - 1) * state_n));

  {
    counted_vector<T> h(static_cast<std::size_t>(state_n), T(0));
    const T* up = u.data().data();
    const T* dp = delta.data().data();
    const T* bp = b_seq.data().data();
    const T* cp = c_seq.data().data();
    const T* ap = a.data().data();
    const T* sp = d_skip.data().data();
    T* yp = out.raw().data();
    for (std::int64_t t = 0; t < L; ++t) {
      if (rec && t > 0 && t % kScanChunk == 0) {
        ckpt->insert(ckpt->end(), h.begin(), h.end());
      }
      detail::scan_step(up + t * di, dp + t * di, bp + t * ns, cp + t * ns, ap, sp, di, ns,
                        h.data(), yp + t * di);
    }
  }
  ensure_finite(out.raw().data(), static_cast<std::size_t>(L * di), "selective_scan");

  if (rec) {
    record_backward(out, [u, delta, b_seq, c_seq, a, d_skip, ckpt, og = out.gs_, L, di, ns,
                          state_n] {
      const T* dy = out_grad(og);
      if (!dy) return;
      const T* up = u.data().data();
      const T* dp = delta.data().data();
      const T* bp = b_seq.data().data();
      const T* cp = c_seq.data().data();
      const T* ap = a.data().data();
      const T* sp = d_skip.data().data();

      counted_vector<T> du(static_cast<std::size_t>(L * di), T(0));
      counted_vector<T> ddt(static_cast<std::size_t>(L * di), T(0));
      counted_vector<T> db(static_cast<std::size_t>(L * ns), T(0));
      counted_vector<T> dc(static_cast<std::size_t>(L * ns), T(0));
      counted_vector<T> da(static_cast<std::size_t>(state_n), T(0));
      counted_vector<T> dsk(static_cast<std::size_t>(di), T(0));
      counted_vector<T> g(static_cast<std::size_t>(state_n), T(0));
      counted_vector<T> hist(static_cast<std::size_t>((kScanChunk + 1) * state_n));

      const std::int64_t n_chunks = (L + kScanChunk - 1) / kScanChunk;
      for (std::int64_t j = n_chunks - 1; j >= 0; --j) {
        const std::int64_t t0 = j * kScanChunk;
        const std::int64_t m = std::min(kScanChunk, L - t0);
        // replay this window from its entry state; hist slot i holds the
        // state after step t0+i-1
        if (j == 0) {
          std::fill(hist.begin(), hist.begin() + state_n, T(0));
        } else {
          const T* src = ckpt->data() + (j - 1) * state_n;
          std::copy(src, src + state_n, hist.begin());
        }
        counted_vector<T> ydrop(static_cast<std::size_t>(di));
        for (std::int64_t i = 0; i < m; ++i) {
          const std::int64_t t = t0 + i;
          T* hcur = hist.data() + (i + 1) * state_n;
          std::copy(hist.data() + i * state_n, hist.data() + i * state_n + state_n, hcur);
          detail::scan_step(up + t * di, dp + t * di, bp + t * ns, cp + t * ns, ap, sp, di, ns,
                            hcur, ydrop.data());
        }
        for (std::int64_t i = m - 1; i >= 0; --i) {
          const std::int64_t t = t0 + i;
          const T* hprev = hist.data() + i * state_n;
          const T* hcur = hist.data() + (i + 1) * state_n;
          const T* dyr = dy + t * di;
          const T* ur = up + t * di;
          const T* dtr = dp + t * di;
          const T* br = bp + t * ns;
          const T* cr = cp + t * ns;
          T* dbr = db.data() + t * ns;
          T* dcr = dc.data() + t * ns;
          for (std::int64_t c = 0; c < di; ++c) {
            const T dyc = dyr[c];
            const T uc = ur[c];
            const T dt = dtr[c];
            dsk[c] += dyc * uc;
            const T* arow = ap + c * ns;
            const T* hpr = hprev + c * ns;
            const T* hcr = hcur + c * ns;
            T* grow = g.data() + c * ns;
            T* darow = da.data() + c * ns;
            T du_acc = dyc * sp[c];
            T ddt_acc = T(0);
            for (std::int64_t s = 0; s < ns; ++s) {
              const T gh = grow[s] + dyc * cr[s];
              dcr[s] += dyc * hcr[s];
              const T ab = std::exp(dt * arow[s]);
              du_acc += gh * dt * br[s];
              dbr[s] += gh * dt * uc;
              ddt_acc += gh * (ab * arow[s] * hpr[s] + br[s] * uc);
              darow[s] += gh * ab * dt * hpr[s];
              grow[s] = gh * ab;
            }
            du[t * di + c] += du_acc;
            ddt[t * di + c] += ddt_acc;
          }
        }
      }

      if (u.gs_ && u.gs_->requires_grad) accumulate_grad(u.gs_, du.data(), du.size(), "selective_scan");
      if (delta.gs_ && delta.gs_->requires_grad)
        accumulate_grad(delta.gs_, ddt.data(), ddt.size(), "selective_scan");
      if (b_seq.gs_ && b_seq.gs_->requires_grad)
        accumulate_grad(b_seq.gs_, db.data(), db.size(), "selective_scan");
      if (c_seq.gs_ && c_seq.gs_->requires_grad)
        accumulate_grad(c_seq.gs_, dc.data(), dc.size(), "selective_scan");
      if (a.gs_ && a.gs_->requires_grad) accumulate_grad(a.gs_, da.data(), da.size(), "selective_scan");
      if (d_skip.gs_ && d_skip.gs_->requires_grad)
        accumulate_grad(d_skip.gs_, dsk.data(), dsk.size(), "selective_scan");
    });
  }
  return out;
}

// One direction of the bidirectional layer. Strictly causal: token t depends
// only on tokens <= t (causal conv plus a left-to-right scan).
template <class T>
Tensor<T> mamba_direction(const Tensor<T>& x, const SelectiveSSMParams<T>& p,
                          const SSMConfig& cfg) {
  const std::int64_t di = cfg.d_inner(), ns = cfg.d_state, r = cfg.dt_rank();
  if (x.rank() != 2 || x.dim(1) != cfg.d_model) {
    throw ShapeError("mamba_direction: input " + shape_str(x.shape()) + " for width " +
                     std::to_string(cfg.d_model));
  }
  auto xz = matmul(x, p.w_in);
  auto stream = slice_cols(xz, 0, di);
  auto gate = slice_cols(xz, di, 2 * di);
  auto conv = conv1d(transpose2d(stream), p.conv_w, p.conv_b, 1, Pad1d::causal, di);
  auto cs = silu(transpose2d(conv));
  auto proj = matmul(cs, p.x_proj);
  auto dt_low = slice_cols(proj, 0, r);
  auto b_seq = slice_cols(proj, r, r + ns);
  auto c_seq = slice_cols(proj, r + ns, r + 2 * ns);
  auto delta = softplus(add_bias_rows(matmul(dt_low, p.dt_w), p.dt_b));
  auto a = scale(pointwise(p.a_log, Act::exp), T(-1));
  auto y = selective_scan(cs, delta, b_seq, c_seq, a, p.d_skip);
  auto gated = mul(y, silu(gate));
  return matmul(gated, p.w_out);
}

// ---- bidirectional block ----

template <class T>
struct BiMambaBlock {
  Tensor<T> norm_g, norm_b;
  SelectiveSSMParams<T> fwd, bwd;
  Tensor<T> w_proj;  // [d, 2d]

  void init(const SSMConfig& cfg, Rng& rng) {
    const std::int64_t d = cfg.d_model;
    norm_g = Tensor<T>::full(Shape{d}, T(1));
    norm_b = Tensor<T>(Shape{d});
    norm_g.set_requires_grad(true);
    norm_b.set_requires_grad(true);
    fwd.init(cfg, rng);
    bwd.init(cfg, rng);
    w_proj = Tensor<T>(Shape{d, 2 * d}, true);
    fill_fan_in(w_proj, rng, 2 * d);
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".norm_g", norm_g);
    fn(prefix + ".norm_b", norm_b);
    fwd.visit(prefix + ".fwd", fn);
    bwd.visit(prefix + ".bwd", fn);
    fn(prefix + ".w_proj", w_proj);
  }
};

template <class T>
Tensor<T> bimamba_block(const Tensor<T>& x, const BiMambaBlock<T>& b, const SSMConfig& cfg) {
  auto h = layer_norm(x, b.norm_g, b.norm_b);
  auto yf = mamba_direction(h, b.fwd, cfg);
  auto yb = flip_rows(mamba_direction(flip_rows(h), b.bwd, cfg));
  return add(x, matmul_nt(concat_cols(yf, yb), b.w_proj));
}

// ---- attention block ----

template <class T>
struct AttentionBlock {
  std::int64_t heads = 4;
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;  // [d,d] and [d]
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> ffn_w1, ffn_b1;  // [d, d_ffn], [d_ffn]
  Tensor<T> ffn_w2, ffn_b2;  // [d_ffn, d], [d]

  void init(std::int64_t d, std::int64_t d_ffn, std::int64_t n_heads, Rng& rng) {
    if (n_heads < 1 || d % n_heads != 0) {
      throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    if (d_ffn < 1) throw ConfigError("attention: ffn width " + std::to_string(d_ffn));
    heads = n_heads;
    auto norm_pair = [&](Tensor<T>& g, Tensor<T>& b) {
      g = Tensor<T>::full(Shape{d}, T(1));
      b = Tensor<T>(Shape{d});
      g.set_requires_grad(true);
      b.set_requires_grad(true);
    };
    norm_pair(ln1_g, ln1_b);
    norm_pair(ln2_g, ln2_b);
    auto proj = [&](Tensor<T>& w, Tensor<T>& b) {
      w = Tensor<T>(Shape{d, d}, true);
      b = Tensor<T>(Shape{d}, true);
      fill_fan_in(w, rng, d);
      fill_fan_in(b, rng, d);
    };
    proj(w_q, b_q);
    proj(w_k, b_k);
    proj(w_v, b_v);
    proj(w_o, b_o);
    ffn_w1 = Tensor<T>(Shape{d, d_ffn}, true);
    ffn_b1 = Tensor<T>(Shape{d_ffn}, true);
    ffn_w2 = Tensor<T>(Shape{d_ffn, d}, true);
    ffn_b2 = Tensor<T>(Shape{d}, true);
    fill_fan_in(ffn_w1, rng, d);
    fill_fan_in(ffn_b1, rng, d);
    fill_fan_in(ffn_w2, rng, d_ffn);
    fill_fan_in(ffn_b2, rng, d_ffn);
  }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".ln1_g", ln1_g);
    fn(prefix + ".ln1_b", ln1_b);
    fn(prefix + ".w_q", w_q);
    fn(prefix + ".b_q", b_q);
    fn(prefix + ".w_k", w_k);
    fn(prefix + ".b_k", b_k);
    fn(prefix + ".w_v", w_v);
    fn(prefix + ".b_v", b_v);
    fn(prefix + ".w_o", w_o);
    fn(prefix + ".b_o", b_o);
    fn(prefix + ".ln2_g", ln2_g);
    fn(prefix + ".ln2_b", ln2_b);
    fn(prefix + ".ffn_w1", ffn_w1);
    fn(prefix + ".ffn_b1", ffn_b1);
    fn(prefix + ".ffn_w2", ffn_w2);
    fn(prefix + ".ffn_b2", ffn_b2);
  }
};

namespace detail {

template <class T>
void gather_cols(const T* src, std::int64_t rows, std::int64_t d, std::int64_t c0, std::int64_t w,
                 T* dst) {
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy(src + r * d + c0, src + r * d + c0 + w, dst + r * w);
  }
}

template <class T>
void scatter_cols(const T* src, std::int64_t rows, std::int64_t d, std::int64_t c0, std::int64_t w,
                  T* dst) {
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy(src + r * w, src + r * w + w, dst + r * d + c0);
  }
}

template <class T>
void add_rows_bias(T* m, std::int64_t rows, std::int64_t d, const T* bias) {
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < d; ++c) m[r * d + c] += bias[c];
  }
}

template <class T>
void colsum_into(const T* m, std::int64_t rows, std::int64_t d, T* out) {
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < d; ++c) out[c] += m[r * d + c];
  }
}

// H = gamma (.) (x - mean) * rstd + beta, rebuilt from the stats kept at
// forward time; bit-identical to the forward normalization.
template <class T>
void ln_replay(const T* x, const T* gamma, const T* beta, const T* mean, const T* rstd,
               std::int64_t rows, std::int64_t d, T* h) {
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < d; ++c) {
      h[r * d + c] = gamma[c] * ((x[r * d + c] - mean[r]) * rstd[r]) + beta[c];
    }
  }
}

}  // namespace detail

// Pre-norm multi-head self-attention with residual: out = x + W_o(attn) + b_o.
// The forward pass keeps only the input, the normalization stats and the
// softmax weights; everything else is recomputed when gradients are needed, so
// live memory is h*L^2 plus a few L*d scratch rows. The h*L^2 term is checked
// against the activation budget up front and is the term that makes long
// sequences infeasible on this path.
template <class T>
Tensor<T> fused_attention(const Tensor<T>& x, const AttentionBlock<T>& blk) {
  if (x.rank() != 2 || x.dim(1) != blk.w_q.dim(0)) {
    throw ShapeError("attention: input " + shape_str(x.shape()) + " vs projection " +
                     shape_str(blk.w_q.shape()));
  }
  const std::int64_t L = x.dim(0), d = x.dim(1), nh = blk.heads, dh = d / nh;
  auto& meter = MemoryMeter::get();
  const std::size_t score_bytes =
      static_cast<std::size_t>(nh) * static_cast<std::size_t>(L) * static_cast<std::size_t>(L) *
      sizeof(T);
  if (meter.budget() != 0 && meter.live_bytes() + score_bytes > meter.budget()) {
    throw FeasibilityError(meter.live_bytes() + score_bytes, meter.budget(),
                           "attention scores for " + std::to_string(L) + " tokens x " +
                               std::to_string(nh) + " heads");
  }
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));

  auto mean = std::make_shared<counted_vector<T>>(static_cast<std::size_t>(L));
  auto rstd = std::make_shared<counted_vector<T>>(static_cast<std::size_t>(L));
  auto pstore = std::make_shared<counted_vector<T>>(static_cast<std::size_t>(nh * L * L));
  Tensor<T> out(Shape{L, d});
  {
    counted_vector<T> h(static_cast<std::size_t>(L * d));
    kernels::ln_fwd(x.data().data(), blk.ln1_g.data().data(), blk.ln1_b.data().data(), L, d,
                    T(1e-5), h.data(), mean->data(), rstd->data());
    counted_vector<T> q(static_cast<std::size_t>(L * d));
    counted_vector<T> k(static_cast<std::size_t>(L * d));
    counted_vector<T> v(static_cast<std::size_t>(L * d));
    kernels::gemm(false, false, L, d, d, h.data(), blk.w_q.data().data(), q.data());
    kernels::gemm(false, false, L, d, d, h.data(), blk.w_k.data().data(), k.data());
    kernels::gemm(false, false, L, d, d, h.data(), blk.w_v.data().data(), v.data());
    detail::add_rows_bias(q.data(), L, d, blk.b_q.data().data());
    detail::add_rows_bias(k.data(), L, d, blk.b_k.data().data());
    detail::add_rows_bias(v.data(), L, d, blk.b_v.data().data());
    for (auto& qv : q) qv *= sc;

    counted_vector<T> qh(static_cast<std::size_t>(L * dh));
    counted_vector<T> kh(static_cast<std::size_t>(L * dh));
    counted_vector<T> vh(static_cast<std::size_t>(L * dh));
    counted_vector<T> oh(static_cast<std::size_t>(L * dh));
    counted_vector<T> o(static_cast<std::size_t>(L * d));
    for (std::int64_t hd = 0; hd < nh; ++hd) {
      detail::gather_cols(q.data(), L, d, hd * dh, dh, qh.data());
      detail::gather_cols(k.data(), L, d, hd * dh, dh, kh.data());
      detail::gather_cols(v.data(), L, d, hd * dh, dh, vh.data());
      T* p = pstore->data() + hd * L * L;
      kernels::gemm(false, true, L, L, dh, qh.data(), kh.data(), p);
      kernels::softmax_fwd(p, L, L, p);
      kernels::gemm(false, false, L, dh, L, p, vh.data(), oh.data());
      detail::scatter_cols(oh.data(), L, d, hd * dh, dh, o.data());
    }
    kernels::gemm(false, false, L, d, d, o.data(), blk.w_o.data().data(), out.raw().data());
    detail::add_rows_bias(out.raw().data(), L, d, blk.b_o.data().data());
    const T* xr = x.data().data();
    T* orr = out.raw().data();
    for (std::int64_t i = 0; i < L * d; ++i) orr[i] += xr[i];
  }
  ensure_finite(out.raw().data(), static_cast<std::size_t>(L * d), "attention");

  if (tracing<T>({&x, &blk.w_q, &blk.w_k, &blk.w_v, &blk.w_o, &blk.ln1_g})) {
    record_backward(out, [x, b = blk, mean, rstd, pstore, og = out.gs_, L, d, nh, dh, sc] {
      const T* dy = out_grad(og);
      if (!dy) return;
      const std::size_t nd = static_cast<std::size_t>(L * d);
      // residual path
      counted_vector<T> dx(dy, dy + nd);

      counted_vector<T> h(nd);
      detail::ln_replay(x.data().data(), b.ln1_g.data().data(), b.ln1_b.data().data(),
                        mean->data(), rstd->data(), L, d, h.data());
      counted_vector<T> q(nd), k(nd), v(nd);
      kernels::gemm(false, false, L, d, d, h.data(), b.w_q.data().data(), q.data());
      kernels::gemm(false, false, L, d, d, h.data(), b.w_k.data().data(), k.data());
      kernels::gemm(false, false, L, d, d, h.data(), b.w_v.data().data(), v.data());
      detail::add_rows_bias(q.data(), L, d, b.b_q.data().data());
      detail::add_rows_bias(k.data(), L, d, b.b_k.data().data());
      detail::add_rows_bias(v.data(), L, d, b.b_v.data().data());
      for (auto& qv : q) qv *= sc;

      // rebuild concatenated head outputs for the W_o gradient
      counted_vector<T> o(nd);
      counted_vector<T> qh(static_cast<std::size_t>(L * dh));
      counted_vector<T> kh(static_cast<std::size_t>(L * dh));
      counted_vector<T> vh(static_cast<std::size_t>(L * dh));
      counted_vector<T> oh(static_cast<std::size_t>(L * dh));
      for (std::int64_t hd = 0; hd < nh; ++hd) {
        detail::gather_cols(v.data(), L, d, hd * dh, dh, vh.data());
        const T* p = pstore->data() + hd * L * L;
        kernels::gemm(false, false, L, dh, L, p, vh.data(), oh.data());
        detail::scatter_cols(oh.data(), L, d, hd * dh, dh, o.data());
      }

      counted_vector<T> dwo(static_cast<std::size_t>(d * d));
      counted_vector<T> dbo(static_cast<std::size_t>(d), T(0));
      kernels::gemm(true, false, d, d, L, o.data(), dy, dwo.data());
      detail::colsum_into(dy, L, d, dbo.data());
      counted_vector<T> dout_attn(nd);
      kernels::gemm(false, true, L, d, d, dy, b.w_o.data().data(), dout_attn.data());

      counted_vector<T> dq(nd, T(0)), dk(nd, T(0)), dv(nd, T(0));
      {
        counted_vector<T> doh(static_cast<std::size_t>(L * dh));
        counted_vector<T> dvh(static_cast<std::size_t>(L * dh));
        counted_vector<T> dqh(static_cast<std::size_t>(L * dh));
        counted_vector<T> dkh(static_cast<std::size_t>(L * dh));
        for (std::int64_t hd = 0; hd < nh; ++hd) {
          detail::gather_cols(q.data(), L, d, hd * dh, dh, qh.data());
          detail::gather_cols(k.data(), L, d, hd * dh, dh, kh.data());
          detail::gather_cols(v.data(), L, d, hd * dh, dh, vh.data());
          detail::gather_cols(dout_attn.data(), L, d, hd * dh, dh, doh.data());
          const T* p = pstore->data() + hd * L * L;
          counted_vector<T> dp(static_cast<std::size_t>(L * L));
          kernels::gemm(false, true, L, L, dh, doh.data(), vh.data(), dp.data());
          kernels::gemm(true, false, L, dh, L, p, doh.data(), dvh.data());
          counted_vector<T> ds(static_cast<std::size_t>(L * L));
          kernels::softmax_bwd(p, dp.data(), L, L, ds.data());
          kernels::gemm(false, false, L, dh, L, ds.data(), kh.data(), dqh.data());
          kernels::gemm(true, false, L, dh, L, ds.data(), qh.data(), dkh.data());
          detail::scatter_cols(dqh.data(), L, d, hd * dh, dh, dq.data());
          detail::scatter_cols(dkh.data(), L, d, hd * dh, dh, dk.data());
          detail::scatter_cols(dvh.data(), L, d, hd * dh, dh, dv.data());
        }
      }
      // q was scaled after its affine map
      for (auto& qv : dq) qv *= sc;

      counted_vector<T> dh_full(nd, T(0));
      auto affine_bwd = [&](const counted_vector<T>& dout, const Tensor<T>& w, const Tensor<T>& wb) {
        if (w.gs_ && w.gs_->requires_grad) {
          counted_vector<T> dw(static_cast<std::size_t>(d * d));
          kernels::gemm(true, false, d, d, L, h.data(), dout.data(), dw.data());
          accumulate_grad(w.gs_, dw.data(), dw.size(), "attention");
        }
        if (wb.gs_ && wb.gs_->requires_grad) {
          counted_vector<T> dbv(static_cast<std::size_t>(d), T(0));
          detail::colsum_into(dout.data(), L, d, dbv.data());
          accumulate_grad(wb.gs_, dbv.data(), dbv.size(), "attention");
        }
        kernels::gemm(false, true, L, d, d, dout.data(), w.data().data(), dh_full.data(), true);
      };
      affine_bwd(dq, b.w_q, b.b_q);
      affine_bwd(dk, b.w_k, b.b_k);
      affine_bwd(dv, b.w_v, b.b_v);
      if (b.w_o.gs_ && b.w_o.gs_->requires_grad)
        accumulate_grad(b.w_o.gs_, dwo.data(), dwo.size(), "attention");
      if (b.b_o.gs_ && b.b_o.gs_->requires_grad)
        accumulate_grad(b.b_o.gs_, dbo.data(), dbo.size(), "attention");

      counted_vector<T> dg(static_cast<std::size_t>(d), T(0));
      counted_vector<T> dbeta(static_cast<std::size_t>(d), T(0));
      kernels::ln_bwd(x.data().data(), b.ln1_g.data().data(), mean->data(), rstd->data(),
                      dh_full.data(), L, d, dx.data(), dg.data(), dbeta.data());
      if (b.ln1_g.gs_ && b.ln1_g.gs_->requires_grad)
        accumulate_grad(b.ln1_g.gs_, dg.data(), dg.size(), "attention");
      if (b.ln1_b.gs_ && b.ln1_b.gs_->requires_grad)
        accumulate_grad(b.ln1_b.gs_, dbeta.data(), dbeta.size(), "attention");
      if (x.gs_ && x.gs_->requires_grad) accumulate_grad(x.gs_, dx.data(), dx.size(), "attention");
    });
  }
  return out;
}

// Pre-norm GELU FFN with residual: out = a + W2(gelu(W1 ln(a) + b1)) + b2.
// Only the input and the normalization stats survive the forward pass; the
// [L x d_ffn] intermediates are rebuilt in backward.
template <class T>
Tensor<T> fused_ffn(const Tensor<T>& a, const AttentionBlock<T>& blk) {
  const std::int64_t L = a.dim(0), d = a.dim(1), f = blk.ffn_w1.dim(1);
  if (a.rank() != 2 || blk.ffn_w1.dim(0) != d) {
    throw ShapeError("ffn: input " + shape_str(a.shape()) + " vs W1 " +
                     shape_str(blk.ffn_w1.shape()));
  }
  auto mean = std::make_shared<counted_vector<T>>(static_cast<std::size_t>(L));
  auto rstd = std::make_shared<counted_vector<T>>(static_cast<std::size_t>(L));
  Tensor<T> out(Shape{L, d});
  {
    counted_vector<T> u(static_cast<std::size_t>(L * d));
    kernels::ln_fwd(a.data().data(), blk.ln2_g.data().data(), blk.ln2_b.data().data(), L, d,
                    T(1e-5), u.data(), mean->data(), rstd->data());
    counted_vector<T> z(static_cast<std::size_t>(L * f));
    kernels::gemm(false, false, L, f, d, u.data(), blk.ffn_w1.data().data(), z.data());
    detail::add_rows_bias(z.data(), L, f, blk.ffn_b1.data().data());
    for (auto& zv : z) zv = static_cast<T>(kernels::act_eval(Act::gelu, static_cast<double>(zv)));
    kernels::gemm(false, false, L, d, f, z.data(), blk.ffn_w2.data().data(), out.raw().data());
    detail::add_rows_bias(out.raw().data(), L, d, blk.ffn_b2.data().data());
    const T* ar = a.data().data();
    T* orr = out.raw().data();
    for (std::int64_t i = 0; i < L * d; ++i) orr[i] += ar[i];
  }
  ensure_finite(out.raw().data(), static_cast<std::size_t>(L * d), "ffn");

  if (tracing<T>({&a, &blk.ffn_w1, &blk.ffn_w2, &blk.ln2_g})) {
    record_backward(out, [a, b = blk, mean, rstd, og = out.gs_, L, d, f] {
      const T* dy = out_grad(og);
      if (!dy) return;
      const std::size_t nd = static_cast<std::size_t>(L * d);
      counted_vector<T> dx(dy, dy + nd);
      counted_vector<T> u(nd);
      detail::ln_replay(a.data().data(), b.ln2_g.data().data(), b.ln2_b.data().data(),
                        mean->data(), rstd->data(), L, d, u.data());
      counted_vector<T> z(static_cast<std::size_t>(L * f));
      kernels::gemm(false, false, L, f, d, u.data(), b.ffn_w1.data().data(), z.data());
      detail::add_rows_bias(z.data(), L, f, b.ffn_b1.data().data());
      counted_vector<T> g(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) {
        g[i] = static_cast<T>(kernels::act_eval(Act::gelu, static_cast<double>(z[i])));
      }
      if (b.ffn_w2.gs_ && b.ffn_w2.gs_->requires_grad) {
        counted_vector<T> dw2(static_cast<std::size_t>(f * d));
        kernels::gemm(true, false, f, d, L, g.data(), dy, dw2.data());
        accumulate_grad(b.ffn_w2.gs_, dw2.data(), dw2.size(), "ffn");
      }
      if (b.ffn_b2.gs_ && b.ffn_b2.gs_->requires_grad) {
        counted_vector<T> db2(static_cast<std::size_t>(d), T(0));
        detail::colsum_into(dy, L, d, db2.data());
        accumulate_grad(b.ffn_b2.gs_, db2.data(), db2.size(), "ffn");
      }
      counted_vector<T> dz(z.size());
      kernels::gemm(false, true, L, f, d, dy, b.ffn_w2.data().data(), dz.data());
      for (std::size_t i = 0; i < z.size(); ++i) {
        dz[i] *= static_cast<T>(kernels::act_grad(Act::gelu, static_cast<double>(z[i])));
      }
      if (b.ffn_w1.gs_ && b.ffn_w1.gs_->requires_grad) {
        counted_vector<T> dw1(static_cast<std::size_t>(d * f));
        kernels::gemm(true, false, d, f, L, u.data(), dz.data(), dw1.data());
        accumulate_grad(b.ffn_w1.gs_, dw1.data(), dw1.size(), "ffn");
      }
      if (b.ffn_b1.gs_ && b.ffn_b1.gs_->requires_grad) {
        counted_vector<T> db1(static_cast<std::size_t>(f), T(0));
        detail::colsum_into(dz.data(), L, f, db1.data());
        accumulate_grad(b.ffn_b1.gs_, db1.data(), db1.size(), "ffn");
      }
      counted_vector<T> du(nd);
      kernels::gemm(false, true, L, d, f, dz.data(), b.ffn_w1.data().data(), du.data());
      counted_vector<T> dg(static_cast<std::size_t>(d), T(0));
      counted_vector<T> dbeta(static_cast<std::size_t>(d), T(0));
      kernels::ln_bwd(a.data().data(), b.ln2_g.data().data(), mean->data(), rstd->data(),
                      du.data(), L, d, dx.data(), dg.data(), dbeta.data());
      if (b.ln2_g.gs_ && b.ln2_g.gs_->requires_grad)
        accumulate_grad(b.ln2_g.gs_, dg.data(), dg.size(), "ffn");
      if (b.ln2_b.gs_ && b.ln2_b.gs_->requires_grad)
        accumulate_grad(b.ln2_b.gs_, dbeta.data(), dbeta.size(), "ffn");
      if (a.gs_ && a.gs_->requires_grad) accumulate_grad(a.gs_, dx.data(), dx.size(), "ffn");
    });
  }
  return out;
}

template <class T>
Tensor<T> attention_block(const Tensor<T>& x, const AttentionBlock<T>& blk) {
  return fused_ffn(fused_attention(x, blk), blk);
}

// Exact scalar parameter count of anything exposing visit().
template <class T, class Block>
std::int64_t count_params(Block& b) {
  std::int64_t n = 0;
  b.visit("", [&n](const std::string&, Tensor<T>& t) { n += t.size(); });
  return n;
}

}  // namespace helix
