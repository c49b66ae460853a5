#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <thread>
#include <utility>
#include <vector>

#include "attnfd/autodiff.hpp"
#include "attnfd/tensor.hpp"

namespace attnfd {

enum class Act { relu, sigmoid };
enum class PoolKind { avg, max };

/// Integer class-id map for a batch of label images (255 = ignore by convention).
struct LabelBatch {
  int n = 0, h = 0, w = 0;
  std::vector<int32_t> v;

  LabelBatch() = default;
  LabelBatch(int n_, int h_, int w_) : n(n_), h(h_), w(w_), v(std::size_t(n_) * h_ * w_, 0) {}
  int64_t size() const { return int64_t(n) * h * w; }
  int32_t& at(int i, int y, int x) { return v[std::size_t((int64_t(i) * h + y) * w + x)]; }
  int32_t at(int i, int y, int x) const { return v[std::size_t((int64_t(i) * h + y) * w + x)]; }
};

constexpr int kIgnoreIndex = 255;

namespace detail {

inline int intra_op_threads() {
  static int cached = [] {
    int hw = int(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* e = std::getenv("AFD_THREADS")) {
      int cap = std::atoi(e);
      if (cap >= 1 && cap < hw) hw = cap;
    }
    return hw;
  }();
  return cached;
}

/// Runs fn(begin, end) over [0, n) split into at most intra_op_threads()
/// contiguous chunks. Chunk boundaries depend only on n and the thread cap,
/// so any floating-point reduction done per chunk stays reproducible.
template <class F>
void parallel_for(int64_t n, F&& fn) {
  int k = std::min<int64_t>(intra_op_threads(), n);
  if (k <= 1) {
    if (n > 0) fn(0, n);
    return;
  }
  int64_t chunk = (n + k - 1) / k;
  std::vector<std::thread> pool;
  pool.reserve(std::size_t(k));
  for (int t = 0; t < k; ++t) {
    int64_t b = t * chunk, e = std::min<int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& th : pool) th.join();
}

inline void require_rank(const Tensor& t, int r, const char* op) {
  if (t.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         t.shape_str());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

/// Shape padded with leading 1s to rank 4.
inline std::array<int64_t, 4> ext4(const Tensor& t) {
  std::array<int64_t, 4> e{1, 1, 1, 1};
  int r = t.rank();
  for (int i = 0; i < r; ++i) e[std::size_t(4 - r + i)] = t.extent(i);
  return e;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  require_finite(a.value(), "add");
  require_finite(b.value(), "add");
  Tensor out = a.value();
  const real* pb = b.value().data();
  real* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) po[i] += pb[i];
  Tape* t = common_tape({&a, &b});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {a, b}, [](Tape& tp, const Tape::Node& n) {
    tp.accumulate(n.inputs[0], n.grad);
    tp.accumulate(n.inputs[1], n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  require_finite(a.value(), "sub");
  require_finite(b.value(), "sub");
  Tensor out = a.value();
  const real* pb = b.value().data();
  real* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) po[i] -= pb[i];
  Tape* t = common_tape({&a, &b});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {a, b}, [](Tape& tp, const Tape::Node& n) {
    tp.accumulate(n.inputs[0], n.grad);
    if (tp.wants(n.inputs[1])) {
      Tensor g = n.grad;
      for (int64_t i = 0; i < g.size(); ++i) g[i] = -g[i];
      tp.accumulate(n.inputs[1], g);
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  require_finite(a.value(), "mul");
  require_finite(b.value(), "mul");
  Tensor out = a.value();
  const real* pb = b.value().data();
  real* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) po[i] *= pb[i];
  Tape* t = common_tape({&a, &b});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {a, b}, [](Tape& tp, const Tape::Node& n) {
    const Tensor& av = n.inputs[0].value();
    const Tensor& bv = n.inputs[1].value();
    if (tp.wants(n.inputs[0])) {
      Tensor g = n.grad;
      for (int64_t i = 0; i < g.size(); ++i) g[i] *= bv[i];
      tp.accumulate(n.inputs[0], g);
    }
    if (tp.wants(n.inputs[1])) {
      Tensor g = n.grad;
      for (int64_t i = 0; i < g.size(); ++i) g[i] *= av[i];
      tp.accumulate(n.inputs[1], g);
    }
  });
}

inline Var scale(const Var& a, real c) {
  require_finite(a.value(), "scale");
  Tensor out = a.value();
  real* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) po[i] *= c;
  Tape* t = common_tape({&a});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {a}, [c](Tape& tp, const Tape::Node& n) {
    Tensor g = n.grad;
    for (int64_t i = 0; i < g.size(); ++i) g[i] *= c;
    tp.accumulate(n.inputs[0], g);
  });
}

namespace detail {

/// Shared loop for broadcast mul/add: b's extents must each equal a's or 1.
template <bool Multiply>
Tensor broadcast_fw(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != b.rank())
    throw DimensionError(std::string(op) + ": rank mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
  auto ea = ext4(a), eb = ext4(b);
  std::array<int64_t, 4> sb{};
  int64_t stride = 1;
  for (int i = 3; i >= 0; --i) {
    if (eb[std::size_t(i)] != ea[std::size_t(i)] && eb[std::size_t(i)] != 1)
      throw DimensionError(std::string(op) + ": incompatible extents " + a.shape_str() + " vs " +
                           b.shape_str());
    sb[std::size_t(i)] = (eb[std::size_t(i)] == 1) ? 0 : stride;
    stride *= eb[std::size_t(i)];
  }
  Tensor out = a;
  real* po = out.data();
  const real* pb = b.data();
  int64_t idx = 0;
  for (int64_t i0 = 0; i0 < ea[0]; ++i0)
    for (int64_t i1 = 0; i1 < ea[1]; ++i1)
      for (int64_t i2 = 0; i2 < ea[2]; ++i2) {
        const real* row = pb + i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        if (sb[3] == 0) {
          real v = row[0];
          for (int64_t i3 = 0; i3 < ea[3]; ++i3, ++idx)
            po[idx] = Multiply ? po[idx] * v : po[idx] + v;
        } else {
          for (int64_t i3 = 0; i3 < ea[3]; ++i3, ++idx)
            po[idx] = Multiply ? po[idx] * row[i3] : po[idx] + row[i3];
        }
      }
  return out;
}

/// Reduces g (shaped like a) onto b's shape by summing broadcast axes.
inline Tensor reduce_to_shape(const Tensor& g, const Tensor& bshape_like,
                              const Tensor& a_like) {
  auto ea = ext4(a_like), eb = ext4(bshape_like);
  Tensor out(bshape_like.shape());
  std::array<int64_t, 4> sb{};
  int64_t stride = 1;
  for (int i = 3; i >= 0; --i) {
    sb[std::size_t(i)] = (eb[std::size_t(i)] == 1) ? 0 : stride;
    stride *= eb[std::size_t(i)];
  }
  const real* pg = g.data();
  real* po = out.data();
  int64_t idx = 0;
  for (int64_t i0 = 0; i0 < ea[0]; ++i0)
    for (int64_t i1 = 0; i1 < ea[1]; ++i1)
      for (int64_t i2 = 0; i2 < ea[2]; ++i2) {
        real* row = po + i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        for (int64_t i3 = 0; i3 < ea[3]; ++i3, ++idx) row[i3 * sb[3]] += pg[idx];
      }
  return out;
}

}  // namespace detail

/// Elementwise product after virtually expanding b over a's axes where b has
/// extent 1. Channel maps (n,c,1,1) and spatial maps (n,1,h,w) both gate a
/// (n,c,h,w) feature through this.
inline Var broadcast_mul(const Var& a, const Var& b) {
  require_finite(a.value(), "broadcast_mul");
  require_finite(b.value(), "broadcast_mul");
  Tensor out = detail::broadcast_fw<true>(a.value(), b.value(), "broadcast_mul");
  Tape* t = common_tape({&a, &b});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {a, b}, [](Tape& tp, const Tape::Node& n) {
    const Tensor& av = n.inputs[0].value();
    const Tensor& bv = n.inputs[1].value();
    if (tp.wants(n.inputs[0]))
      tp.accumulate(n.inputs[0], detail::broadcast_fw<true>(n.grad, bv, "broadcast_mul"));
    if (tp.wants(n.inputs[1])) {
      Tensor ga = detail::broadcast_fw<true>(n.grad, av, "broadcast_mul");
      tp.accumulate(n.inputs[1], detail::reduce_to_shape(ga, bv, av));
    }
  });
}

inline Var broadcast_add(const Var& a, const Var& b) {
  require_finite(a.value(), "broadcast_add");
  require_finite(b.value(), "broadcast_add");
  Tensor out = detail::broadcast_fw<false>(a.value(), b.value(), "broadcast_add");
  Tape* t = common_tape({&a, &b});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {a, b}, [](Tape& tp, const Tape::Node& n) {
    tp.accumulate(n.inputs[0], n.grad);
    if (tp.wants(n.inputs[1]))
      tp.accumulate(n.inputs[1],
                    detail::reduce_to_shape(n.grad, n.inputs[1].value(), n.inputs[0].value()));
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Var relu(const Var& x) {
  require_finite(x.value(), "relu");
  Tensor out = x.value();
  real* p = out.data();
  for (int64_t i = 0; i < out.size(); ++i) p[i] = p[i] > 0 ? p[i] : 0;
  Tape* t = common_tape({&x});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {x}, [](Tape& tp, const Tape::Node& n) {
    const Tensor& xv = n.inputs[0].value();
    Tensor g = n.grad;
    for (int64_t i = 0; i < g.size(); ++i)
      if (xv[i] <= 0) g[i] = 0;
    tp.accumulate(n.inputs[0], g);
  });
}

inline Var sigmoid(const Var& x) {
  require_finite(x.value(), "sigmoid");
  Tensor out = x.value();
  real* p = out.data();
  for (int64_t i = 0; i < out.size(); ++i) p[i] = real(1) / (real(1) + std::exp(-p[i]));
  Tape* t = common_tape({&x});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {x}, [](Tape& tp, const Tape::Node& n) {
    Tensor g = n.grad;
    const real* s = n.value.data();
    for (int64_t i = 0; i < g.size(); ++i) g[i] *= s[i] * (real(1) - s[i]);
    tp.accumulate(n.inputs[0], g);
  });
}

inline Var activation(const Var& x, Act kind) {
  return kind == Act::relu ? relu(x) : sigmoid(x);
}

// ---------------------------------------------------------------------------
// Dense (affine) layer
// ---------------------------------------------------------------------------

/// y[n, d_out] = x[n, d_in] * w[d_out, d_in]^T + b[d_out]
inline Var dense(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  detail::require_rank(xv, 2, "dense");
  detail::require_rank(wv, 2, "dense");
  detail::require_rank(bv, 1, "dense");
  const int n = xv.extent(0), din = xv.extent(1);
  const int dout = wv.extent(0);
  if (wv.extent(1) != din || bv.extent(0) != dout)
    throw DimensionError("dense: inner extents disagree: x" + xv.shape_str() + " w" +
                         wv.shape_str() + " b" + bv.shape_str());
  require_finite(xv, "dense");
  require_finite(wv, "dense");
  require_finite(bv, "dense");

  Tensor out({n, dout});
  for (int i = 0; i < n; ++i) {
    const real* xr = xv.data() + int64_t(i) * din;
    real* yr = out.data() + int64_t(i) * dout;
    for (int o = 0; o < dout; ++o) {
      const real* wr = wv.data() + int64_t(o) * din;
      real acc = bv[o];
      for (int k = 0; k < din; ++k) acc += xr[k] * wr[k];
      yr[o] = acc;
    }
  }
  Tape* t = common_tape({&x, &w, &b});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {x, w, b}, [n, din, dout](Tape& tp, const Tape::Node& nd) {
    const Tensor& xv = nd.inputs[0].value();
    const Tensor& wv = nd.inputs[1].value();
    const real* g = nd.grad.data();
    if (tp.wants(nd.inputs[0])) {
      Tensor dx({n, din});
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < dout; ++o) {
          real gv = g[int64_t(i) * dout + o];
          const real* wr = wv.data() + int64_t(o) * din;
          real* dr = dx.data() + int64_t(i) * din;
          for (int k = 0; k < din; ++k) dr[k] += gv * wr[k];
        }
      tp.accumulate(nd.inputs[0], std::move(dx));
    }
    if (tp.wants(nd.inputs[1])) {
      Tensor dw({dout, din});
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < dout; ++o) {
          real gv = g[int64_t(i) * dout + o];
          const real* xr = xv.data() + int64_t(i) * din;
          real* dr = dw.data() + int64_t(o) * din;
          for (int k = 0; k < din; ++k) dr[k] += gv * xr[k];
        }
      tp.accumulate(nd.inputs[1], std::move(dw));
    }
    if (tp.wants(nd.inputs[2])) {
      Tensor db({dout});
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < dout; ++o) db[o] += g[int64_t(i) * dout + o];
      tp.accumulate(nd.inputs[2], std::move(db));
    }
  });
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation), im2col + blocked inner products
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  int n, ci, h, w, co, kh, kw, stride, pad, oh, ow;
  int64_t L() const { return int64_t(ci) * kh * kw; }
  int64_t P() const { return int64_t(oh) * ow; }
  bool is_1x1_direct() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& k, const Tensor& b, int stride,
                          int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(k, 4, "conv2d");
  require_rank(b, 1, "conv2d");
  ConvDims d;
  d.n = x.extent(0);
  d.ci = x.extent(1);
  d.h = x.extent(2);
  d.w = x.extent(3);
  d.co = k.extent(0);
  d.kh = k.extent(2);
  d.kw = k.extent(3);
  d.stride = stride;
  d.pad = pad;
  if (k.extent(1) != d.ci)
    throw DimensionError("conv2d: input channels disagree: x" + x.shape_str() + " kernel" +
                         k.shape_str());
  if (b.extent(0) != d.co) throw DimensionError("conv2d: bias extent must equal out channels");
  if (stride < 1 || pad < 0) throw GeometryError("conv2d: stride must be >=1 and pad >=0");
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw || d.oh < 1 || d.ow < 1)
    throw GeometryError("conv2d: nonpositive output extent for x" + x.shape_str() + " kernel" +
                        k.shape_str());
  return d;
}

inline void im2col(const real* xs, const ConvDims& d, real* cols) {
  const int64_t P = d.P();
  for (int c = 0; c < d.ci; ++c)
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        real* row = cols + ((int64_t(c) * d.kh + ky) * d.kw + kx) * P;
        for (int oy = 0; oy < d.oh; ++oy) {
          int iy = oy * d.stride + ky - d.pad;
          real* dst = row + int64_t(oy) * d.ow;
          if (iy < 0 || iy >= d.h) {
            std::fill(dst, dst + d.ow, real(0));
            continue;
          }
          const real* src = xs + (int64_t(c) * d.h + iy) * d.w;
          for (int ox = 0; ox < d.ow; ++ox) {
            int ix = ox * d.stride + kx - d.pad;
            dst[ox] = (ix >= 0 && ix < d.w) ? src[ix] : real(0);
          }
        }
      }
}

inline void col2im_add(const real* cols, const ConvDims& d, real* dxs) {
  const int64_t P = d.P();
  for (int c = 0; c < d.ci; ++c)
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        const real* row = cols + ((int64_t(c) * d.kh + ky) * d.kw + kx) * P;
        for (int oy = 0; oy < d.oh; ++oy) {
          int iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.h) continue;
          real* dst = dxs + (int64_t(c) * d.h + iy) * d.w;
          const real* src = row + int64_t(oy) * d.ow;
          for (int ox = 0; ox < d.ow; ++ox) {
            int ix = ox * d.stride + kx - d.pad;
            if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
          }
        }
      }
}

/// out[co, P] = A[co, L] * B[L, P] + bias, unrolled 4 wide over L.
inline void gemm_a_b(const real* A, const real* B, const real* bias, real* out, int co,
                     int64_t L, int64_t P) {
  for (int oc = 0; oc < co; ++oc) {
    real* orow = out + int64_t(oc) * P;
    std::fill(orow, orow + P, bias ? bias[oc] : real(0));
    const real* arow = A + int64_t(oc) * L;
    int64_t l = 0;
    for (; l + 4 <= L; l += 4) {
      real a0 = arow[l], a1 = arow[l + 1], a2 = arow[l + 2], a3 = arow[l + 3];
      const real* b0 = B + l * P;
      const real* b1 = b0 + P;
      const real* b2 = b1 + P;
      const real* b3 = b2 + P;
      for (int64_t p = 0; p < P; ++p)
        orow[p] += a0 * b0[p] + a1 * b1[p] + a2 * b2[p] + a3 * b3[p];
    }
    for (; l < L; ++l) {
      real a = arow[l];
      const real* br = B + l * P;
      for (int64_t p = 0; p < P; ++p) orow[p] += a * br[p];
    }
  }
}

/// dK[co, L] += G[co, P] * B[L, P]^T  (dot products over P, 4 rows of B at a time)
inline void gemm_g_bt_acc(const real* G, const real* B, real* dK, int co, int64_t L,
                          int64_t P) {
  for (int oc = 0; oc < co; ++oc) {
    const real* grow = G + int64_t(oc) * P;
    real* drow = dK + int64_t(oc) * L;
    int64_t l = 0;
    for (; l + 4 <= L; l += 4) {
      const real* b0 = B + l * P;
      const real* b1 = b0 + P;
      const real* b2 = b1 + P;
      const real* b3 = b2 + P;
      real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      for (int64_t p = 0; p < P; ++p) {
        real g = grow[p];
        s0 += g * b0[p];
        s1 += g * b1[p];
        s2 += g * b2[p];
        s3 += g * b3[p];
      }
      drow[l] += s0;
      drow[l + 1] += s1;
      drow[l + 2] += s2;
      drow[l + 3] += s3;
    }
    for (; l < L; ++l) {
      const real* br = B + l * P;
      real s = 0;
      for (int64_t p = 0; p < P; ++p) s += grow[p] * br[p];
      drow[l] += s;
    }
  }
}

/// dB[L, P] += A[co, L]^T * G[co, P]  (axpy over P, 4 rows of G at a time)
inline void gemm_at_g_acc(const real* A, const real* G, real* dB, int co, int64_t L,
                          int64_t P) {
  for (int64_t l = 0; l < L; ++l) {
    real* drow = dB + l * P;
    int oc = 0;
    for (; oc + 4 <= co; oc += 4) {
      real a0 = A[int64_t(oc) * L + l];
      real a1 = A[int64_t(oc + 1) * L + l];
      real a2 = A[int64_t(oc + 2) * L + l];
      real a3 = A[int64_t(oc + 3) * L + l];
      const real* g0 = G + int64_t(oc) * P;
      const real* g1 = g0 + P;
      const real* g2 = g1 + P;
      const real* g3 = g2 + P;
      for (int64_t p = 0; p < P; ++p)
        drow[p] += a0 * g0[p] + a1 * g1[p] + a2 * g2[p] + a3 * g3[p];
    }
    for (; oc < co; ++oc) {
      real a = A[int64_t(oc) * L + l];
      const real* gr = G + int64_t(oc) * P;
      for (int64_t p = 0; p < P; ++p) drow[p] += a * gr[p];
    }
  }
}

inline Tensor conv2d_fw(const Tensor& x, const Tensor& k, const Tensor& b, const ConvDims& d) {
  Tensor out({d.n, d.co, d.oh, d.ow});
  const int64_t L = d.L(), P = d.P();
  const int64_t xstride = int64_t(d.ci) * d.h * d.w;
  const int64_t ostride = int64_t(d.co) * P;
  parallel_for(d.n, [&](int64_t n0, int64_t n1) {
    std::vector<real> cols;
    if (!d.is_1x1_direct()) cols.resize(std::size_t(L * P));
    for (int64_t i = n0; i < n1; ++i) {
      const real* xs = x.data() + i * xstride;
      const real* B = xs;
      if (!d.is_1x1_direct()) {
        im2col(xs, d, cols.data());
        B = cols.data();
      }
      gemm_a_b(k.data(), B, b.data(), out.data() + i * ostride, d.co, L, P);
    }
  });
  return out;
}

struct ConvGrads {
  Tensor dx, dk, db;
};

inline ConvGrads conv2d_bw(const Tensor& x, const Tensor& k, const Tensor& g, const ConvDims& d,
                           bool want_dx, bool want_dk, bool want_db) {
  ConvGrads r;
  const int64_t L = d.L(), P = d.P();
  const int64_t xstride = int64_t(d.ci) * d.h * d.w;
  const int64_t gstride = int64_t(d.co) * P;
  if (want_dx) r.dx = Tensor(x.shape());
  if (want_dk) r.dk = Tensor(k.shape());
  if (want_db) r.db = Tensor({d.co});

  int chunks = std::min<int64_t>(intra_op_threads(), d.n);
  if (chunks < 1) chunks = 1;
  int64_t chunk = (d.n + chunks - 1) / chunks;
  std::vector<Tensor> dk_part(want_dk ? std::size_t(chunks) : 0);
  std::vector<Tensor> db_part(want_db ? std::size_t(chunks) : 0);

  parallel_for(d.n, [&](int64_t n0, int64_t n1) {
    std::size_t ci_part = std::size_t(n0 / chunk);
    Tensor* dkp = want_dk ? &dk_part[ci_part] : nullptr;
    Tensor* dbp = want_db ? &db_part[ci_part] : nullptr;
    if (dkp && dkp->size() == 0) *dkp = Tensor(k.shape());
    if (dbp && dbp->size() == 0) *dbp = Tensor({d.co});
    std::vector<real> cols, dcols;
    if (!d.is_1x1_direct()) {
      if (want_dk) cols.resize(std::size_t(L * P));
      if (want_dx) dcols.resize(std::size_t(L * P));
    }
    for (int64_t i = n0; i < n1; ++i) {
      const real* gs = g.data() + i * gstride;
      if (want_db) {
        for (int oc = 0; oc < d.co; ++oc) {
          const real* grow = gs + int64_t(oc) * P;
          real s = 0;
          for (int64_t p = 0; p < P; ++p) s += grow[p];
          (*dbp)[oc] += s;
        }
      }
      if (want_dk) {
        const real* B = x.data() + i * xstride;
        if (!d.is_1x1_direct()) {
          im2col(x.data() + i * xstride, d, cols.data());
          B = cols.data();
        }
        gemm_g_bt_acc(gs, B, dkp->data(), d.co, L, P);
      }
      if (want_dx) {
        if (d.is_1x1_direct()) {
          gemm_at_g_acc(k.data(), gs, r.dx.data() + i * xstride, d.co, L, P);
        } else {
          std::fill(dcols.begin(), dcols.end(), real(0));
          gemm_at_g_acc(k.data(), gs, dcols.data(), d.co, L, P);
          col2im_add(dcols.data(), d, r.dx.data() + i * xstride);
        }
      }
    }
  });
  for (std::size_t c = 0; c < dk_part.size(); ++c)
    if (dk_part[c].size())
      for (int64_t i = 0; i < r.dk.size(); ++i) r.dk[i] += dk_part[c][i];
  for (std::size_t c = 0; c < db_part.size(); ++c)
    if (db_part[c].size())
      for (int64_t i = 0; i < r.db.size(); ++i) r.db[i] += db_part[c][i];
  return r;
}

}  // namespace detail

/// Zero-padded cross-correlation: x (n,ci,h,w) with kernel (co,ci,kh,kw) and
/// per-channel bias.
inline Var conv2d(const Var& x, const Var& k, const Var& b, int stride = 1, int pad = 0) {
  detail::ConvDims d = detail::conv_dims(x.value(), k.value(), b.value(), stride, pad);
  require_finite(x.value(), "conv2d");
  require_finite(k.value(), "conv2d");
  require_finite(b.value(), "conv2d");
  Tensor out = detail::conv2d_fw(x.value(), k.value(), b.value(), d);
  Tape* t = common_tape({&x, &k, &b});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {x, k, b}, [d](Tape& tp, const Tape::Node& n) {
    bool wx = tp.wants(n.inputs[0]);
    bool wk = tp.wants(n.inputs[1]);
    bool wb = tp.wants(n.inputs[2]);
    detail::ConvGrads g =
        detail::conv2d_bw(n.inputs[0].value(), n.inputs[1].value(), n.grad, d, wx, wk, wb);
    if (wx) tp.accumulate(n.inputs[0], std::move(g.dx));
    if (wk) tp.accumulate(n.inputs[1], std::move(g.dk));
    if (wb) tp.accumulate(n.inputs[2], std::move(g.db));
  });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Global spatial reduction per channel: (n,c,h,w) -> (n,c,1,1).
/// Max routes its gradient to the first maximum in row-major order.
inline Var pool_spatial(const Var& x, PoolKind kind) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "pool_spatial");
  require_finite(xv, "pool_spatial");
  const int n = xv.extent(0), c = xv.extent(1);
  const int64_t hw = int64_t(xv.extent(2)) * xv.extent(3);
  Tensor out({n, c, 1, 1});
  std::vector<int64_t> argmax;
  if (kind == PoolKind::max) argmax.resize(std::size_t(n) * c);
  for (int64_t s = 0; s < int64_t(n) * c; ++s) {
    const real* row = xv.data() + s * hw;
    if (kind == PoolKind::avg) {
      real acc = 0;
      for (int64_t i = 0; i < hw; ++i) acc += row[i];
      out[s] = acc / real(hw);
    } else {
      int64_t best = 0;
      for (int64_t i = 1; i < hw; ++i)
        if (row[i] > row[best]) best = i;
      out[s] = row[best];
      argmax[std::size_t(s)] = best;
    }
  }
  Tape* t = common_tape({&x});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {x},
                   [kind, hw, argmax = std::move(argmax)](Tape& tp, const Tape::Node& nd) {
                     Tensor dx(nd.inputs[0].value().shape());
                     const real* g = nd.grad.data();
                     int64_t slices = nd.grad.size();
                     for (int64_t s = 0; s < slices; ++s) {
                       real* row = dx.data() + s * hw;
                       if (kind == PoolKind::avg) {
                         real v = g[s] / real(hw);
                         for (int64_t i = 0; i < hw; ++i) row[i] = v;
                       } else {
                         row[argmax[std::size_t(s)]] = g[s];
                       }
                     }
                     tp.accumulate(nd.inputs[0], std::move(dx));
                   });
}

/// Per-pixel reduction across channels: (n,c,h,w) -> (n,1,h,w).
inline Var pool_channel(const Var& x, PoolKind kind) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "pool_channel");
  require_finite(xv, "pool_channel");
  const int n = xv.extent(0), c = xv.extent(1);
  const int64_t hw = int64_t(xv.extent(2)) * xv.extent(3);
  Tensor out({n, 1, xv.extent(2), xv.extent(3)});
  std::vector<int32_t> argmax;
  if (kind == PoolKind::max) argmax.resize(std::size_t(n) * hw);
  for (int i = 0; i < n; ++i) {
    const real* base = xv.data() + int64_t(i) * c * hw;
    real* orow = out.data() + int64_t(i) * hw;
    for (int64_t p = 0; p < hw; ++p) {
      if (kind == PoolKind::avg) {
        real acc = 0;
        for (int j = 0; j < c; ++j) acc += base[int64_t(j) * hw + p];
        orow[p] = acc / real(c);
      } else {
        int best = 0;
        for (int j = 1; j < c; ++j)
          if (base[int64_t(j) * hw + p] > base[int64_t(best) * hw + p]) best = j;
        orow[p] = base[int64_t(best) * hw + p];
        argmax[std::size_t(int64_t(i) * hw + p)] = best;
      }
    }
  }
  Tape* t = common_tape({&x});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {x},
                   [kind, c, hw, argmax = std::move(argmax)](Tape& tp, const Tape::Node& nd) {
                     Tensor dx(nd.inputs[0].value().shape());
                     const real* g = nd.grad.data();
                     int64_t nn = nd.grad.extent(0);
                     for (int64_t i = 0; i < nn; ++i) {
                       real* base = dx.data() + i * c * hw;
                       const real* grow = g + i * hw;
                       for (int64_t p = 0; p < hw; ++p) {
                         if (kind == PoolKind::avg) {
                           real v = grow[p] / real(c);
                           for (int j = 0; j < c; ++j) base[int64_t(j) * hw + p] = v;
                         } else {
                           base[int64_t(argmax[std::size_t(i * hw + p)]) * hw + p] = grow[p];
                         }
                       }
                     }
                     tp.accumulate(nd.inputs[0], std::move(dx));
                   });
}

// ---------------------------------------------------------------------------
// Bilinear resize (align-corners-false, edge clamp)
// ---------------------------------------------------------------------------

namespace detail {

struct ResizeTap {
  int i0, i1;
  real f;  // weight of i1
};

inline std::vector<ResizeTap> resize_taps(int in, int out) {
  std::vector<ResizeTap> taps(std::size_t(out), ResizeTap{});
  const real s = real(in) / real(out);
  for (int o = 0; o < out; ++o) {
    real src = (real(o) + real(0.5)) * s - real(0.5);
    if (src < 0) src = 0;
    int i0 = std::min(int(src), in - 1);
    taps[std::size_t(o)] = {i0, std::min(i0 + 1, in - 1), src - real(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear interpolation to (oh, ow); sample centers at (i+0.5)*h/oh - 0.5,
/// clamped at the edges. Same-size resize is an exact identity.
inline Var bilinear_resize(const Var& x, int oh, int ow) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "bilinear_resize");
  if (oh < 1 || ow < 1) throw GeometryError("bilinear_resize: target extents must be >= 1");
  require_finite(xv, "bilinear_resize");
  const int n = xv.extent(0), c = xv.extent(1), h = xv.extent(2), w = xv.extent(3);

  if (oh == h && ow == w) {
    Tensor out = xv;
    Tape* t = common_tape({&x});
    if (!t) return Var::constant(std::move(out));
    return t->record(std::move(out), {x}, [](Tape& tp, const Tape::Node& nd) {
      tp.accumulate(nd.inputs[0], nd.grad);
    });
  }

  auto ty = detail::resize_taps(h, oh);
  auto tx = detail::resize_taps(w, ow);
  Tensor out({n, c, oh, ow});
  for (int64_t s = 0; s < int64_t(n) * c; ++s) {
    const real* plane = xv.data() + s * h * w;
    real* oplane = out.data() + s * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const auto& yt = ty[std::size_t(oy)];
      const real* r0 = plane + int64_t(yt.i0) * w;
      const real* r1 = plane + int64_t(yt.i1) * w;
      real* orow = oplane + int64_t(oy) * ow;
      for (int ox = 0; ox < ow; ++ox) {
        const auto& xt = tx[std::size_t(ox)];
        real top = r0[xt.i0] + xt.f * (r0[xt.i1] - r0[xt.i0]);
        real bot = r1[xt.i0] + xt.f * (r1[xt.i1] - r1[xt.i0]);
        orow[ox] = top + yt.f * (bot - top);
      }
    }
  }
  Tape* t = common_tape({&x});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {x},
                   [ty = std::move(ty), tx = std::move(tx), h, w, oh, ow](Tape& tp,
                                                                          const Tape::Node& nd) {
                     Tensor dx(nd.inputs[0].value().shape());
                     const real* g = nd.grad.data();
                     int64_t slices = int64_t(nd.grad.extent(0)) * nd.grad.extent(1);
                     for (int64_t s = 0; s < slices; ++s) {
                       real* plane = dx.data() + s * h * w;
                       const real* gplane = g + s * oh * ow;
                       for (int oy = 0; oy < oh; ++oy) {
                         const auto& yt = ty[std::size_t(oy)];
                         for (int ox = 0; ox < ow; ++ox) {
                           const auto& xt = tx[std::size_t(ox)];
                           real gv = gplane[int64_t(oy) * ow + ox];
                           real w00 = (1 - yt.f) * (1 - xt.f), w01 = (1 - yt.f) * xt.f;
                           real w10 = yt.f * (1 - xt.f), w11 = yt.f * xt.f;
                           plane[int64_t(yt.i0) * w + xt.i0] += w00 * gv;
                           plane[int64_t(yt.i0) * w + xt.i1] += w01 * gv;
                           plane[int64_t(yt.i1) * w + xt.i0] += w10 * gv;
                           plane[int64_t(yt.i1) * w + xt.i1] += w11 * gv;
                         }
                       }
                     }
                     tp.accumulate(nd.inputs[0], std::move(dx));
                   });
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

inline Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out(shape, std::vector<real>(x.value().data(), x.value().data() + x.value().size()));
  Tape* t = common_tape({&x});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {x}, [](Tape& tp, const Tape::Node& nd) {
    const Tensor& xv = nd.inputs[0].value();
    Tensor g(xv.shape(), std::vector<real>(nd.grad.data(), nd.grad.data() + nd.grad.size()));
    tp.accumulate(nd.inputs[0], std::move(g));
  });
}

inline Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank(av, 4, "concat_channels");
  detail::require_rank(bv, 4, "concat_channels");
  if (av.extent(0) != bv.extent(0) || av.extent(2) != bv.extent(2) ||
      av.extent(3) != bv.extent(3))
    throw DimensionError("concat_channels: " + av.shape_str() + " vs " + bv.shape_str());
  const int n = av.extent(0), ca = av.extent(1), cb = bv.extent(1);
  const int64_t hw = int64_t(av.extent(2)) * av.extent(3);
  Tensor out({n, ca + cb, av.extent(2), av.extent(3)});
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + (int64_t(i) * (ca + cb)) * hw, av.data() + int64_t(i) * ca * hw,
                std::size_t(ca * hw) * sizeof(real));
    std::memcpy(out.data() + (int64_t(i) * (ca + cb) + ca) * hw,
                bv.data() + int64_t(i) * cb * hw, std::size_t(cb * hw) * sizeof(real));
  }
  Tape* t = common_tape({&a, &b});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {a, b}, [ca, cb, hw](Tape& tp, const Tape::Node& nd) {
    int n = nd.grad.extent(0);
    if (tp.wants(nd.inputs[0])) {
      Tensor ga(nd.inputs[0].value().shape());
      for (int i = 0; i < n; ++i)
        std::memcpy(ga.data() + int64_t(i) * ca * hw,
                    nd.grad.data() + (int64_t(i) * (ca + cb)) * hw,
                    std::size_t(ca * hw) * sizeof(real));
      tp.accumulate(nd.inputs[0], std::move(ga));
    }
    if (tp.wants(nd.inputs[1])) {
      Tensor gb(nd.inputs[1].value().shape());
      for (int i = 0; i < n; ++i)
        std::memcpy(gb.data() + int64_t(i) * cb * hw,
                    nd.grad.data() + (int64_t(i) * (ca + cb) + ca) * hw,
                    std::size_t(cb * hw) * sizeof(real));
      tp.accumulate(nd.inputs[1], std::move(gb));
    }
  });
}

inline Var sum_all(const Var& x) {
  require_finite(x.value(), "sum_all");
  real acc = 0;
  const real* p = x.value().data();
  for (int64_t i = 0; i < x.value().size(); ++i) acc += p[i];
  Tensor out = Tensor::scalar(acc);
  Tape* t = common_tape({&x});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {x}, [](Tape& tp, const Tape::Node& nd) {
    tp.accumulate(nd.inputs[0], Tensor::full(nd.inputs[0].value().shape(), nd.grad[0]));
  });
}

/// Mean of elementwise squared differences.
inline Var mean_squared_diff(const Var& a, const Var& b) {
  Var d = sub(a, b);
  return scale(sum_all(mul(d, d)), real(1) / real(a.value().size()));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over non-ignored pixels of -log softmax(logits)[label]. Pixels whose
/// label equals ignore_index contribute neither loss nor gradient; with every
/// pixel ignored the loss is 0 with zero gradient.
inline Var softmax_cross_entropy(const Var& logits, const LabelBatch& labels,
                                 int ignore_index = kIgnoreIndex) {
  const Tensor& z = logits.value();
  detail::require_rank(z, 4, "softmax_cross_entropy");
  const int n = z.extent(0), K = z.extent(1), h = z.extent(2), w = z.extent(3);
  if (labels.n != n || labels.h != h || labels.w != w)
    throw DimensionError("softmax_cross_entropy: label map " + std::to_string(labels.n) + "x" +
                         std::to_string(labels.h) + "x" + std::to_string(labels.w) +
                         " does not match logits " + z.shape_str());
  require_finite(z, "softmax_cross_entropy");
  const int64_t hw = int64_t(h) * w;
  int64_t scored = 0;
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    const real* base = z.data() + int64_t(i) * K * hw;
    for (int64_t p = 0; p < hw; ++p) {
      int32_t lab = labels.v[std::size_t(i * hw + p)];
      if (lab == ignore_index) continue;
      if (lab < 0 || lab >= K)
        throw LabelError("softmax_cross_entropy: label " + std::to_string(lab) +
                         " outside [0," + std::to_string(K) + ")");
      real m = base[p];
      for (int k = 1; k < K; ++k) m = std::max(m, base[int64_t(k) * hw + p]);
      real se = 0;
      for (int k = 0; k < K; ++k) se += std::exp(base[int64_t(k) * hw + p] - m);
      acc += (m + std::log(se)) - base[int64_t(lab) * hw + p];
      ++scored;
    }
  }
  Tensor out = Tensor::scalar(scored ? real(acc / double(scored)) : real(0));
  Tape* t = common_tape({&logits});
  if (!t) return Var::constant(std::move(out));
  return t->record(
      std::move(out), {logits},
      [labels, ignore_index, scored](Tape& tp, const Tape::Node& nd) {
        const Tensor& z = nd.inputs[0].value();
        Tensor dz(z.shape());
        if (scored > 0) {
          const int n = z.extent(0), K = z.extent(1);
          const int64_t hw = int64_t(z.extent(2)) * z.extent(3);
          const real gscale = nd.grad[0] / real(scored);
          for (int i = 0; i < n; ++i) {
            const real* base = z.data() + int64_t(i) * K * hw;
            real* dbase = dz.data() + int64_t(i) * K * hw;
            for (int64_t p = 0; p < hw; ++p) {
              int32_t lab = labels.v[std::size_t(i * hw + p)];
              if (lab == ignore_index) continue;
              real m = base[p];
              for (int k = 1; k < K; ++k) m = std::max(m, base[int64_t(k) * hw + p]);
              real se = 0;
              for (int k = 0; k < K; ++k) se += std::exp(base[int64_t(k) * hw + p] - m);
              for (int k = 0; k < K; ++k) {
                real soft = std::exp(base[int64_t(k) * hw + p] - m) / se;
                dbase[int64_t(k) * hw + p] += gscale * (soft - (k == lab ? real(1) : real(0)));
              }
            }
          }
        }
        tp.accumulate(nd.inputs[0], std::move(dz));
      });
}

/// Pixel-mean of T^2 * KL(softmax(teacher/T) || softmax(student/T)).
/// The teacher is a detached constant; gradient flows to the student only.
inline Var kd_loss(const Var& student_logits, const Var& teacher_logits, real temperature) {
  const Tensor& s = student_logits.value();
  const Tensor& tv = teacher_logits.value();
  detail::require_rank(s, 4, "kd_loss");
  detail::require_same_shape(s, tv, "kd_loss");
  if (!(temperature > 0)) throw ContractError("kd_loss: temperature must be positive");
  if (teacher_logits.tracked())
    throw ContractError("kd_loss: teacher logits must be detached");
  require_finite(s, "kd_loss");
  require_finite(tv, "kd_loss");
  const int n = s.extent(0), K = s.extent(1);
  const int64_t hw = int64_t(s.extent(2)) * s.extent(3);
  const int64_t M = int64_t(n) * hw;
  const real T = temperature;

  auto log_softmax_at = [K, hw](const real* base, int64_t p, real T, std::vector<real>& out) {
    real m = base[p] / T;
    for (int k = 1; k < K; ++k) m = std::max(m, base[int64_t(k) * hw + p] / T);
    real se = 0;
    for (int k = 0; k < K; ++k) se += std::exp(base[int64_t(k) * hw + p] / T - m);
    real lse = m + std::log(se);
    for (int k = 0; k < K; ++k) out[std::size_t(k)] = base[int64_t(k) * hw + p] / T - lse;
  };

  double acc = 0;
  {
    std::vector<real> lps(std::size_t(K), 0), lpt(std::size_t(K), 0);
    for (int i = 0; i < n; ++i) {
      const real* sb = s.data() + int64_t(i) * K * hw;
      const real* tb = tv.data() + int64_t(i) * K * hw;
      for (int64_t p = 0; p < hw; ++p) {
        log_softmax_at(sb, p, T, lps);
        log_softmax_at(tb, p, T, lpt);
        for (int k = 0; k < K; ++k)
          acc += std::exp(lpt[std::size_t(k)]) * (lpt[std::size_t(k)] - lps[std::size_t(k)]);
      }
    }
  }
  Tensor out = Tensor::scalar(real(acc) * T * T / real(M));
  Tape* t = common_tape({&student_logits});
  if (!t) return Var::constant(std::move(out));
  Tensor teacher_copy = tv;
  return t->record(
      std::move(out), {student_logits},
      [teacher_copy = std::move(teacher_copy), T, M, log_softmax_at](Tape& tp,
                                                                     const Tape::Node& nd) {
        const Tensor& s = nd.inputs[0].value();
        const int n = s.extent(0), K = s.extent(1);
        const int64_t hw = int64_t(s.extent(2)) * s.extent(3);
        Tensor ds(s.shape());
        std::vector<real> lps(std::size_t(K), 0), lpt(std::size_t(K), 0);
        const real gscale = nd.grad[0] * T / real(M);
        for (int i = 0; i < n; ++i) {
          const real* sb = s.data() + int64_t(i) * K * hw;
          const real* tb = teacher_copy.data() + int64_t(i) * K * hw;
          real* db = ds.data() + int64_t(i) * K * hw;
          for (int64_t p = 0; p < hw; ++p) {
            log_softmax_at(sb, p, T, lps);
            log_softmax_at(tb, p, T, lpt);
            for (int k = 0; k < K; ++k)
              db[int64_t(k) * hw + p] +=
                  gscale * (std::exp(lps[std::size_t(k)]) - std::exp(lpt[std::size_t(k)]));
          }
        }
        tp.accumulate(nd.inputs[0], std::move(ds));
      });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

constexpr real kNormEps = real(1e-12);

/// y = x / ||x|| over contiguous slices of length `len`; slices with norm
/// below kNormEps pass through unchanged. VJP: (g - y (g.y)) / ||x||.
inline Tensor slice_l2_normalize_fw(const Tensor& x, int64_t len) {
  Tensor out = x;
  real* p = out.data();
  const int64_t slices = x.size() / len;
  for (int64_t s = 0; s < slices; ++s) {
    real* row = p + s * len;
    real sq = 0;
    for (int64_t i = 0; i < len; ++i) sq += row[i] * row[i];
    real r = std::sqrt(sq);
    if (r < kNormEps) continue;
    for (int64_t i = 0; i < len; ++i) row[i] /= r;
  }
  return out;
}

inline Tensor slice_l2_normalize_bw(const Tensor& x, const Tensor& y, const Tensor& g,
                                    int64_t len) {
  Tensor dx(x.shape());
  const int64_t slices = x.size() / len;
  for (int64_t s = 0; s < slices; ++s) {
    const real* xr = x.data() + s * len;
    const real* yr = y.data() + s * len;
    const real* gr = g.data() + s * len;
    real* dr = dx.data() + s * len;
    real sq = 0;
    for (int64_t i = 0; i < len; ++i) sq += xr[i] * xr[i];
    real r = std::sqrt(sq);
    if (r < kNormEps) {
      for (int64_t i = 0; i < len; ++i) dr[i] = gr[i];
      continue;
    }
    real gy = 0;
    for (int64_t i = 0; i < len; ++i) gy += gr[i] * yr[i];
    for (int64_t i = 0; i < len; ++i) dr[i] = (gr[i] - yr[i] * gy) / r;
  }
  return dx;
}

}  // namespace detail

/// Divides each channel plane f[i,j,:,:] by its L2 (Frobenius) norm;
/// near-zero channels (norm < 1e-12) pass through unchanged.
inline Var channel_normalize(const Var& f) {
  const Tensor& fv = f.value();
  detail::require_rank(fv, 4, "channel_normalize");
  require_finite(fv, "channel_normalize");
  const int64_t len = int64_t(fv.extent(2)) * fv.extent(3);
  Tensor out = detail::slice_l2_normalize_fw(fv, len);
  Tape* t = common_tape({&f});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {f}, [len](Tape& tp, const Tape::Node& nd) {
    tp.accumulate(nd.inputs[0],
                  detail::slice_l2_normalize_bw(nd.inputs[0].value(), nd.value, nd.grad, len));
  });
}

/// Alternative reading of channel normalization: the length-c vector at each
/// pixel is scaled to unit L2 norm (near-zero vectors pass through).
inline Var pixel_vector_normalize(const Var& f) {
  const Tensor& fv = f.value();
  detail::require_rank(fv, 4, "pixel_vector_normalize");
  require_finite(fv, "pixel_vector_normalize");
  const int n = fv.extent(0), c = fv.extent(1);
  const int64_t hw = int64_t(fv.extent(2)) * fv.extent(3);

  auto norm_at = [c, hw](const real* base, int64_t p) {
    real sq = 0;
    for (int j = 0; j < c; ++j) {
      real v = base[int64_t(j) * hw + p];
      sq += v * v;
    }
    return std::sqrt(sq);
  };

  Tensor out = fv;
  for (int i = 0; i < n; ++i) {
    real* base = out.data() + int64_t(i) * c * hw;
    const real* xbase = fv.data() + int64_t(i) * c * hw;
    for (int64_t p = 0; p < hw; ++p) {
      real r = norm_at(xbase, p);
      if (r < detail::kNormEps) continue;
      for (int j = 0; j < c; ++j) base[int64_t(j) * hw + p] /= r;
    }
  }
  Tape* t = common_tape({&f});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {f}, [n, c, hw, norm_at](Tape& tp, const Tape::Node& nd) {
    const Tensor& x = nd.inputs[0].value();
    const Tensor& y = nd.value;
    Tensor dx(x.shape());
    for (int i = 0; i < n; ++i) {
      const real* xb = x.data() + int64_t(i) * c * hw;
      const real* yb = y.data() + int64_t(i) * c * hw;
      const real* gb = nd.grad.data() + int64_t(i) * c * hw;
      real* db = dx.data() + int64_t(i) * c * hw;
      for (int64_t p = 0; p < hw; ++p) {
        real r = norm_at(xb, p);
        if (r < detail::kNormEps) {
          for (int j = 0; j < c; ++j) db[int64_t(j) * hw + p] = gb[int64_t(j) * hw + p];
          continue;
        }
        real gy = 0;
        for (int j = 0; j < c; ++j) gy += gb[int64_t(j) * hw + p] * yb[int64_t(j) * hw + p];
        for (int j = 0; j < c; ++j)
          db[int64_t(j) * hw + p] =
              (gb[int64_t(j) * hw + p] - yb[int64_t(j) * hw + p] * gy) / r;
      }
    }
    tp.accumulate(nd.inputs[0], std::move(dx));
  });
}

struct SampleNormalizeResult {
  Var normalized;
  std::vector<uint8_t> degenerate;  // per-sample: norm was below threshold
};

/// Scales each sample slice to unit Frobenius norm; all-zero (degenerate)
/// samples pass through and are flagged.
inline SampleNormalizeResult sample_frobenius_normalize(const Var& x) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "sample_frobenius_normalize");
  require_finite(xv, "sample_frobenius_normalize");
  const int64_t len = xv.size() / xv.extent(0);
  SampleNormalizeResult res;
  res.degenerate.resize(std::size_t(xv.extent(0)), 0);
  for (int i = 0; i < xv.extent(0); ++i) {
    const real* row = xv.data() + int64_t(i) * len;
    real sq = 0;
    for (int64_t j = 0; j < len; ++j) sq += row[j] * row[j];
    if (std::sqrt(sq) < detail::kNormEps) res.degenerate[std::size_t(i)] = 1;
  }
  Tensor out = detail::slice_l2_normalize_fw(xv, len);
  Tape* t = common_tape({&x});
  if (!t) {
    res.normalized = Var::constant(std::move(out));
    return res;
  }
  res.normalized = t->record(std::move(out), {x}, [len](Tape& tp, const Tape::Node& nd) {
    tp.accumulate(nd.inputs[0],
                  detail::slice_l2_normalize_bw(nd.inputs[0].value(), nd.value, nd.grad, len));
  });
  return res;
}

/// |x|^p for integer p >= 1 (p=1 uses the 0-at-0 subgradient).
inline Var abs_pow(const Var& x, int p) {
  if (p < 1) throw ContractError("abs_pow: power must be >= 1");
  const Tensor& xv = x.value();
  require_finite(xv, "abs_pow");
  Tensor out = xv;
  real* o = out.data();
  for (int64_t i = 0; i < out.size(); ++i)
    o[i] = (p == 2) ? o[i] * o[i] : std::pow(std::fabs(o[i]), real(p));
  Tape* t = common_tape({&x});
  if (!t) return Var::constant(std::move(out));
  return t->record(std::move(out), {x}, [p](Tape& tp, const Tape::Node& nd) {
    const Tensor& xv = nd.inputs[0].value();
    Tensor g = nd.grad;
    for (int64_t i = 0; i < g.size(); ++i) {
      real v = xv[i];
      real sign = v > 0 ? real(1) : (v < 0 ? real(-1) : real(0));
      g[i] *= real(p) * (p == 2 ? std::fabs(v) : std::pow(std::fabs(v), real(p - 1))) * sign;
    }
    tp.accumulate(nd.inputs[0], g);
  });
}

}  // namespace attnfd
