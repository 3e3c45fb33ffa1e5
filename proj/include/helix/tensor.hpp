#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "helix/errors.hpp"
#include "helix/memory.hpp"
#include "helix/rng.hpp"

namespace helix {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
struct Buffer {
  counted_vector<T> v;
  explicit Buffer(std::size_t n) : v(n, T(0)) {}
};

template <class T>
using BufPtr = std::shared_ptr<Buffer<T>>;

template <class T>
BufPtr<T> make_buffer(std::size_t n) {
  return std::make_shared<Buffer<T>>(n);
}

// Gradient accumulation point. Kept separate from the value buffer so a
// backward closure can hold a tensor's grad slot without pinning its values
// in memory; intermediates whose values are not needed by any backward rule
// are freed as soon as the forward handles go out of scope.
template <class T>
struct GradSlot {
  bool requires_grad = false;
  std::size_t n = 0;
  BufPtr<T> g;
};

template <class T>
using GradPtr = std::shared_ptr<GradSlot<T>>;

template <class T>
void ensure_finite(const T* p, std::size_t n, const char* op) {
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(p[i]))) {
      throw NumericError(std::string("non-finite value produced by op '") + op +
                         "' at flat index " + std::to_string(i));
    }
  }
}

// dst-slot += src, rejecting non-finite contributions before they can poison
// the accumulator.
template <class T>
void accumulate_grad(const GradPtr<T>& gs, const T* src, std::size_t n, const char* op) {
  if (!gs || !gs->requires_grad) return;
  ensure_finite(src, n, op);
  if (!gs->g) gs->g = make_buffer<T>(gs->n);
  T* dst = gs->g->v.data();
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false) : shape_(std::move(shape)) {
    buf_ = make_buffer<T>(static_cast<std::size_t>(numel(shape_)));
    gs_ = std::make_shared<GradSlot<T>>();
    gs_->requires_grad = requires_grad;
    gs_->n = static_cast<std::size_t>(numel(shape_));
  }

  static Tensor from_data(Shape shape, const std::vector<T>& data) {
    Tensor t(std::move(shape));
    if (static_cast<std::int64_t>(data.size()) != t.size()) {
      throw ShapeError("from_data: " + std::to_string(data.size()) + " values for shape " +
                       shape_str(t.shape()));
    }
    for (std::int64_t i = 0; i < t.size(); ++i) t.buf_->v[i] = data[i];
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (auto& x : t.buf_->v) x = value;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t size() const { return static_cast<std::int64_t>(buf_ ? buf_->v.size() : 0); }
  bool defined() const { return static_cast<bool>(buf_); }

  std::span<const T> data() const { return {buf_->v.data(), buf_->v.size()}; }

  // Mutation is only legal before the tensor is consumed by an op
  // (initialization, checkpoint load). After that tensors are immutable.
  std::span<T> raw() { return {buf_->v.data(), buf_->v.size()}; }

  bool requires_grad() const { return gs_ && gs_->requires_grad; }
  void set_requires_grad(bool rg) { gs_->requires_grad = rg; }

  std::span<const T> grad() const {
    static const std::vector<T> empty;
    if (!gs_ || !gs_->g) return {empty.data(), std::size_t(0)};
    return {gs_->g->v.data(), gs_->g->v.size()};
  }

  bool has_grad() const { return gs_ && gs_->g != nullptr; }

  void zero_grad() {
    if (gs_ && gs_->g) {
      for (auto& x : gs_->g->v) x = T(0);
    }
  }

  // engine internals
  BufPtr<T> buf_;
  GradPtr<T> gs_;

 private:
  Shape shape_;
};

// Records one backward closure per op, replayed in reverse. Closures are
// destroyed as they run, so captured buffers are released incrementally and
// the live-memory curve during backward mirrors the forward layer by layer.
template <class T>
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  std::size_t size() const { return nodes_.size(); }
  bool spent() const { return spent_; }

  void backward(const Tensor<T>& loss) {
    if (spent_) throw Error("backward: tape already consumed; re-record the forward pass");
    if (loss.size() != 1) {
      throw Error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw Error("backward: loss does not depend on any recorded operation");
    }
    spent_ = true;
    loss.gs_->g = make_buffer<T>(1);
    loss.gs_->g->v[0] = T(1);
    while (!nodes_.empty()) {
      auto fn = std::move(nodes_.back());
      nodes_.pop_back();
      fn();
    }
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool spent_ = false;
  Tape* prev_;
  static inline thread_local Tape* active_ = nullptr;
};

template <class T>
bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <class T, class Fn>
void record_backward(Tensor<T>& out, Fn&& fn) {
  out.gs_->requires_grad = true;
  Tape<T>::active()->record(std::forward<Fn>(fn));
}

// Incoming gradient of an op output, or nullptr if nothing downstream
// contributed (the op's inputs then receive no gradient from this path).
template <class T>
const T* out_grad(const GradPtr<T>& gs) {
  return gs->g ? gs->g->v.data() : nullptr;
}

namespace kernels {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

// C = op(A) * op(B), optionally accumulating. A is m x k after transposition,
// B is k x n, C is m x n.
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          const T* b, T* c, bool accumulate = false) {
  ECMap<T> A(a, trans_a ? k : m, trans_a ? m : k);
  ECMap<T> B(b, trans_b ? n : k, trans_b ? k : n);
  EMap<T> C(c, m, n);
  if (trans_a && trans_b) {
    if (accumulate) C.noalias() += A.transpose() * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  } else if (trans_a) {
    if (accumulate) C.noalias() += A.transpose() * B;
    else C.noalias() = A.transpose() * B;
  } else if (trans_b) {
    if (accumulate) C.noalias() += A * B.transpose();
    else C.noalias() = A * B.transpose();
  } else {
    if (accumulate) C.noalias() += A * B;
    else C.noalias() = A * B;
  }
}

}  // namespace kernels

// ---- elementwise and linear-algebra ops ----

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.raw().data();
  const std::size_t n = static_cast<std::size_t>(out.size());
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  ensure_finite(po, n, "add");
  if (tracing<T>({&a, &b})) {
    record_backward(out, [ag = a.gs_, bg = b.gs_, og = out.gs_, n] {
      const T* g = out_grad(og);
      if (!g) return;
      accumulate_grad(ag, g, n, "add");
      accumulate_grad(bg, g, n, "add");
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.raw().data();
  const std::size_t n = static_cast<std::size_t>(out.size());
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  ensure_finite(po, n, "sub");
  if (tracing<T>({&a, &b})) {
    record_backward(out, [ag = a.gs_, bg = b.gs_, og = out.gs_, n] {
      const T* g = out_grad(og);
      if (!g) return;
      accumulate_grad(ag, g, n, "sub");
      if (bg && bg->requires_grad) {
        std::vector<T> neg(n);
        for (std::size_t i = 0; i < n; ++i) neg[i] = -g[i];
        accumulate_grad(bg, neg.data(), n, "sub");
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.raw().data();
  const std::size_t n = static_cast<std::size_t>(out.size());
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  ensure_finite(po, n, "mul");
  if (tracing<T>({&a, &b})) {
    record_backward(out, [ab = a.buf_, bb = b.buf_, ag = a.gs_, bg = b.gs_, og = out.gs_, n] {
      const T* g = out_grad(og);
      if (!g) return;
      std::vector<T> tmp(n);
      if (ag && ag->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) tmp[i] = g[i] * bb->v[i];
        accumulate_grad(ag, tmp.data(), n, "mul");
      }
      if (bg && bg->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) tmp[i] = g[i] * ab->v[i];
        accumulate_grad(bg, tmp.data(), n, "mul");
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  T* po = out.raw().data();
  const std::size_t n = static_cast<std::size_t>(out.size());
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  ensure_finite(po, n, "scale");
  if (tracing<T>({&a})) {
    record_backward(out, [ag = a.gs_, og = out.gs_, c, n] {
      const T* g = out_grad(og);
      if (!g) return;
      std::vector<T> tmp(n);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = g[i] * c;
      accumulate_grad(ag, tmp.data(), n, "scale");
    });
  }
  return out;
}

// x: [L x n], bias: [n], broadcast over rows
template <class T>
Tensor<T> add_bias_rows(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0)) {
    throw ShapeError("add_bias_rows: " + shape_str(x.shape()) + " with bias " +
                     shape_str(bias.shape()));
  }
  const std::int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> out(x.shape());
  const T* px = x.data().data();
  const T* pb = bias.data().data();
  T* po = out.raw().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) po[r * cols + c] = px[r * cols + c] + pb[c];
  }
  ensure_finite(po, static_cast<std::size_t>(out.size()), "add_bias_rows");
  if (tracing<T>({&x, &bias})) {
    record_backward(out, [xg = x.gs_, bg = bias.gs_, og = out.gs_, rows, cols] {
      const T* g = out_grad(og);
      if (!g) return;
      accumulate_grad(xg, g, static_cast<std::size_t>(rows * cols), "add_bias_rows");
      if (bg && bg->requires_grad) {
        std::vector<T> db(static_cast<std::size_t>(cols), T(0));
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t c = 0; c < cols; ++c) db[c] += g[r * cols + c];
        }
        accumulate_grad(bg, db.data(), db.size(), "add_bias_rows");
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  kernels::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.raw().data());
  ensure_finite(out.raw().data(), static_cast<std::size_t>(out.size()), "matmul");
  if (tracing<T>({&a, &b})) {
    record_backward(out, [ab = a.buf_, bb = b.buf_, ag = a.gs_, bg = b.gs_, og = out.gs_, m, n, k] {
      const T* g = out_grad(og);
      if (!g) return;
      if (ag && ag->requires_grad) {
        std::vector<T> da(static_cast<std::size_t>(m * k));
        kernels::gemm<T>(false, true, m, k, n, g, bb->v.data(), da.data());
        accumulate_grad(ag, da.data(), da.size(), "matmul");
      }
      if (bg && bg->requires_grad) {
        std::vector<T> db(static_cast<std::size_t>(k * n));
        kernels::gemm<T>(true, false, k, n, m, ab->v.data(), g, db.data());
        accumulate_grad(bg, db.data(), db.size(), "matmul");
      }
    });
  }
  return out;
}

// a: [m x k], w: [n x k], out = a * w^T. Lets weights keep their declared
// [out_features x in_features] layout without a transpose copy.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& w) {
  if (a.rank() != 2 || w.rank() != 2 || a.dim(1) != w.dim(1)) {
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(w.shape()) + "^T");
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = w.dim(0);
  Tensor<T> out(Shape{m, n});
  kernels::gemm<T>(false, true, m, n, k, a.data().data(), w.data().data(), out.raw().data());
  ensure_finite(out.raw().data(), static_cast<std::size_t>(out.size()), "matmul_nt");
  if (tracing<T>({&a, &w})) {
    record_backward(out, [ab = a.buf_, wb = w.buf_, ag = a.gs_, wg = w.gs_, og = out.gs_, m, n, k] {
      const T* g = out_grad(og);
      if (!g) return;
      if (ag && ag->requires_grad) {
        std::vector<T> da(static_cast<std::size_t>(m * k));
        kernels::gemm<T>(false, false, m, k, n, g, wb->v.data(), da.data());
        accumulate_grad(ag, da.data(), da.size(), "matmul_nt");
      }
      if (wg && wg->requires_grad) {
        std::vector<T> dw(static_cast<std::size_t>(n * k));
        kernels::gemm<T>(true, false, n, k, m, g, ab->v.data(), dw.data());
        accumulate_grad(wg, dw.data(), dw.size(), "matmul_nt");
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose2d: need rank 2, got " + shape_str(x.shape()));
  const std::int64_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{c, r});
  const T* px = x.data().data();
  T* po = out.raw().data();
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) po[j * r + i] = px[i * c + j];
  }
  if (tracing<T>({&x})) {
    record_backward(out, [xg = x.gs_, og = out.gs_, r, c] {
      const T* g = out_grad(og);
      if (!g) return;
      if (xg && xg->requires_grad) {
        std::vector<T> dx(static_cast<std::size_t>(r * c));
        for (std::int64_t i = 0; i < r; ++i) {
          for (std::int64_t j = 0; j < c; ++j) dx[i * c + j] = g[j * r + i];
        }
        accumulate_grad(xg, dx.data(), dx.size(), "transpose2d");
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw ShapeError("concat_cols: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<T> out(Shape{rows, ca + cb});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.raw().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < ca; ++c) po[r * (ca + cb) + c] = pa[r * ca + c];
    for (std::int64_t c = 0; c < cb; ++c) po[r * (ca + cb) + ca + c] = pb[r * cb + c];
  }
  if (tracing<T>({&a, &b})) {
    record_backward(out, [ag = a.gs_, bg = b.gs_, og = out.gs_, rows, ca, cb] {
      const T* g = out_grad(og);
      if (!g) return;
      if (ag && ag->requires_grad) {
        std::vector<T> da(static_cast<std::size_t>(rows * ca));
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t c = 0; c < ca; ++c) da[r * ca + c] = g[r * (ca + cb) + c];
        }
        accumulate_grad(ag, da.data(), da.size(), "concat_cols");
      }
      if (bg && bg->requires_grad) {
        std::vector<T> db(static_cast<std::size_t>(rows * cb));
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t c = 0; c < cb; ++c) db[r * cb + c] = g[r * (ca + cb) + ca + c];
        }
        accumulate_grad(bg, db.data(), db.size(), "concat_cols");
      }
    });
  }
  return out;
}

// columns [from, to)
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::int64_t from, std::int64_t to) {
  if (x.rank() != 2 || from < 0 || to > x.dim(1) || from >= to) {
    throw ShapeError("slice_cols: [" + std::to_string(from) + ", " + std::to_string(to) +
                     ") of " + shape_str(x.shape()));
  }
  const std::int64_t rows = x.dim(0), cols = x.dim(1), w = to - from;
  Tensor<T> out(Shape{rows, w});
  const T* px = x.data().data();
  T* po = out.raw().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < w; ++c) po[r * w + c] = px[r * cols + from + c];
  }
  if (tracing<T>({&x})) {
    record_backward(out, [xg = x.gs_, og = out.gs_, rows, cols, from, w] {
      const T* g = out_grad(og);
      if (!g) return;
      if (xg && xg->requires_grad) {
        std::vector<T> dx(static_cast<std::size_t>(rows * cols), T(0));
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t c = 0; c < w; ++c) dx[r * cols + from + c] = g[r * w + c];
        }
        accumulate_grad(xg, dx.data(), dx.size(), "slice_cols");
      }
    });
  }
  return out;
}

// reverses row order (time reversal for [L x d] sequences)
template <class T>
Tensor<T> flip_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("flip_rows: need rank 2, got " + shape_str(x.shape()));
  const std::int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> out(x.shape());
  const T* px = x.data().data();
  T* po = out.raw().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = px + (rows - 1 - r) * cols;
    T* dst = po + r * cols;
    for (std::int64_t c = 0; c < cols; ++c) dst[c] = src[c];
  }
  if (tracing<T>({&x})) {
    record_backward(out, [xg = x.gs_, og = out.gs_, rows, cols] {
      const T* g = out_grad(og);
      if (!g) return;
      if (xg && xg->requires_grad) {
        std::vector<T> dx(static_cast<std::size_t>(rows * cols));
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t c = 0; c < cols; ++c) dx[r * cols + c] = g[(rows - 1 - r) * cols + c];
        }
        accumulate_grad(xg, dx.data(), dx.size(), "flip_rows");
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out(Shape{1});
  const T* px = x.data().data();
  T acc = T(0);
  for (std::int64_t i = 0; i < x.size(); ++i) acc += px[i];
  out.raw()[0] = acc;
  ensure_finite(out.raw().data(), 1, "sum_all");
  if (tracing<T>({&x})) {
    const std::size_t n = static_cast<std::size_t>(x.size());
    record_backward(out, [xg = x.gs_, og = out.gs_, n] {
      const T* g = out_grad(og);
      if (!g) return;
      if (xg && xg->requires_grad) {
        std::vector<T> dx(n, g[0]);
        accumulate_grad(xg, dx.data(), n, "sum_all");
      }
    });
  }
  return out;
}

// mean over the first k rows of [L x d] -> [1 x d]
template <class T>
Tensor<T> mean_first_rows(const Tensor<T>& x, std::int64_t k) {
  if (x.rank() != 2) throw ShapeError("mean_first_rows: need rank 2, got " + shape_str(x.shape()));
  if (k < 1 || k > x.dim(0)) {
    throw ConfigError("mean_first_rows: window " + std::to_string(k) +
                      " outside sequence length " + std::to_string(x.dim(0)));
  }
  const std::int64_t cols = x.dim(1);
  Tensor<T> out(Shape{1, cols});
  const T* px = x.data().data();
  T* po = out.raw().data();
  for (std::int64_t c = 0; c < cols; ++c) po[c] = T(0);
  for (std::int64_t r = 0; r < k; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) po[c] += px[r * cols + c];
  }
  const T inv = T(1) / static_cast<T>(k);
  for (std::int64_t c = 0; c < cols; ++c) po[c] *= inv;
  ensure_finite(po, static_cast<std::size_t>(cols), "mean_first_rows");
  if (tracing<T>({&x})) {
    const std::int64_t rows = x.dim(0);
    record_backward(out, [xg = x.gs_, og = out.gs_, rows, cols, k, inv] {
      const T* g = out_grad(og);
      if (!g) return;
      if (xg && xg->requires_grad) {
        std::vector<T> dx(static_cast<std::size_t>(rows * cols), T(0));
        for (std::int64_t r = 0; r < k; ++r) {
          for (std::int64_t c = 0; c < cols; ++c) dx[r * cols + c] = g[c] * inv;
        }
        accumulate_grad(xg, dx.data(), dx.size(), "mean_first_rows");
      }
    });
  }
  return out;
}

// ---- init helpers (not taped) ----

template <class T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
  for (auto& x : t.raw()) x = static_cast<T>(rng.uniform(lo, hi));
}

template <class T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean, double stddev) {
  for (auto& x : t.raw()) x = static_cast<T>(mean + stddev * rng.normal());
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
template <class T>
void fill_fan_in(Tensor<T>& t, Rng& rng, std::int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  fill_uniform(t, rng, -bound, bound);
}

}  // namespace helix
