#pragma once

#include <utility>
#include <vector>

#include "attnfd/autodiff.hpp"
#include "attnfd/init.hpp"
#include "attnfd/ops.hpp"

namespace attnfd {

/// Parameters of one CBAM block: a shared two-layer channel MLP with
/// reduction r, and a 7x7 conv over the [avg, max] channel-pooled pair.
/// Weights start uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
struct CbamParams {
  int channels = 0;
  int reduction = 0;
  Param w0, b0, w1, b1;          // channel MLP: c -> c/r -> c
  Param spatial_kernel, spatial_bias;  // spatial: (1,2,7,7) conv, one bias

  CbamParams() = default;
  CbamParams(int c, int r, Rng& rng) : channels(c), reduction(r) {
    if (c < 1 || r < 1 || c % r != 0)
      throw ContractError("cbam: channels (" + std::to_string(c) +
                          ") must be a positive multiple of reduction (" + std::to_string(r) +
                          ")");
    const int hidden = c / r;
    w0 = Param(uniform_fanin_init(rng, {hidden, c}, c));
    b0 = Param(Tensor({hidden}));
    w1 = Param(uniform_fanin_init(rng, {c, hidden}, hidden));
    b1 = Param(Tensor({c}));
    spatial_kernel = Param(uniform_fanin_init(rng, {1, 2, 7, 7}, 2 * 7 * 7));
    spatial_bias = Param(Tensor({1}));
  }

  std::vector<Param*> params() {
    return {&w0, &b0, &w1, &b1, &spatial_kernel, &spatial_bias};
  }
  std::vector<const Param*> params() const {
    return {&w0, &b0, &w1, &b1, &spatial_kernel, &spatial_bias};
  }

  void set_trainable(bool t) {
    for (Param* p : params()) p->trainable = t;
  }
};

/// Tape bindings of one CBAM block for a single forward pass.
struct CbamVars {
  Var w0, b0, w1, b1, spatial_kernel, spatial_bias;
};

inline CbamVars bind_cbam(Tape* tape, CbamParams& p) {
  return {use_param(tape, p.w0),             use_param(tape, p.b0),
          use_param(tape, p.w1),             use_param(tape, p.b1),
          use_param(tape, p.spatial_kernel), use_param(tape, p.spatial_bias)};
}

/// Constant (no-gradient) bindings, for frozen or off-tape evaluation.
inline CbamVars bind_cbam_const(const CbamParams& p) {
  auto c = [](const Param& q) { return Var::constant(q.value); };
  return {c(p.w0), c(p.b0), c(p.w1), c(p.b1), c(p.spatial_kernel), c(p.spatial_bias)};
}

/// M_C(F) = sigmoid(MLP(avgpool F) + MLP(maxpool F)), shape (n,c,1,1).
inline Var channel_attention(const Var& f, const CbamVars& v) {
  const Tensor& fv = f.value();
  detail::require_rank(fv, 4, "channel_attention");
  const int n = fv.extent(0), c = fv.extent(1);
  if (v.w0.value().extent(1) != c)
    throw DimensionError("channel_attention: feature has " + std::to_string(c) +
                         " channels but MLP expects " +
                         std::to_string(v.w0.value().extent(1)));
  auto mlp = [&](Var x) { return dense(relu(dense(x, v.w0, v.b0)), v.w1, v.b1); };
  Var avg = reshape(pool_spatial(f, PoolKind::avg), {n, c});
  Var mx = reshape(pool_spatial(f, PoolKind::max), {n, c});
  return reshape(sigmoid(add(mlp(avg), mlp(mx))), {n, c, 1, 1});
}

/// M_S(F') = sigmoid(conv7x7([avgpool_c F'; maxpool_c F'])), shape (n,1,h,w).
inline Var spatial_attention(const Var& f, const CbamVars& v) {
  detail::require_rank(f.value(), 4, "spatial_attention");
  Var pooled = concat_channels(pool_channel(f, PoolKind::avg), pool_channel(f, PoolKind::max));
  return sigmoid(conv2d(pooled, v.spatial_kernel, v.spatial_bias, 1, 3));
}

struct CbamOut {
  Var refined;       // F'' = M_S(F') * F'
  Var intermediate;  // F'  = M_C(F) * F
  Var mc;            // (n,c,1,1)
  Var ms;            // (n,1,h,w)
};

/// Full CBAM refinement: channel gate first, then spatial gate.
inline CbamOut cbam_refine(const Var& f, const CbamVars& v) {
  CbamOut out;
  out.mc = channel_attention(f, v);
  out.intermediate = broadcast_mul(f, out.mc);
  out.ms = spatial_attention(out.intermediate, v);
  out.refined = broadcast_mul(out.intermediate, out.ms);
  return out;
}

inline CbamOut cbam_refine(const Var& f, Tape* tape, CbamParams& p) {
  CbamVars v = bind_cbam(tape, p);
  return cbam_refine(f, v);
}

struct AtMapResult {
  Var map;  // (n,1,h,w)
  std::vector<uint8_t> degenerate;
};

/// Parameter-free activation attention map: per-pixel sum over channels of
/// |F|^power, then normalized to unit Frobenius norm per sample. An all-zero
/// feature yields a zero map flagged degenerate.
inline AtMapResult at_map(const Var& f, int power = 2) {
  const Tensor& fv = f.value();
  detail::require_rank(fv, 4, "at_map");
  if (power < 1) throw ContractError("at_map: power must be >= 1");
  const int c = fv.extent(1);
  Var summed = scale(pool_channel(abs_pow(f, power), PoolKind::avg), real(c));
  SampleNormalizeResult sn = sample_frobenius_normalize(summed);
  return {sn.normalized, std::move(sn.degenerate)};
}

}  // namespace attnfd
