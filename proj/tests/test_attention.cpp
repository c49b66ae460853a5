#include <gtest/gtest.h>

#include <cmath>

#include "attnfd/attention.hpp"
#include "fd_check.hpp"

using namespace attnfd;

namespace {

CbamParams zero_cbam(int c, int r) {
  Rng rng(1);
  CbamParams p(c, r, rng);
  for (Param* q : p.params())
    for (int64_t i = 0; i < q->value.size(); ++i) q->value[i] = 0;
  return p;
}

CbamParams random_cbam(int c, int r, uint64_t seed) {
  Rng rng(seed);
  return CbamParams(c, r, rng);
}

real sigma(real x) { return real(1) / (real(1) + std::exp(-x)); }

}  // namespace

TEST(CbamParams, RejectsBadReduction) {
  Rng rng(1);
  EXPECT_THROW(CbamParams(6, 4, rng), ContractError);
  EXPECT_THROW(CbamParams(0, 1, rng), ContractError);
}

TEST(ChannelAttention, ZeroParamsGiveHalf) {
  CbamParams p = zero_cbam(4, 2);
  Rng rng(5);
  Var f = Var::constant(fdcheck::random_tensor(rng, {2, 4, 3, 3}));
  Tensor mc = channel_attention(f, bind_cbam_const(p)).value();
  for (int64_t i = 0; i < mc.size(); ++i) EXPECT_DOUBLE_EQ(mc[i], 0.5);
}

TEST(ChannelAttention, PoolingCoincidenceOnConstantChannels) {
  // per-channel constant input: avgpool == maxpool == d, so M_C = sigma(2*MLP(d))
  CbamParams p = random_cbam(4, 2, 7);
  Tensor f({1, 4, 2, 2});
  const real d[4] = {real(0.3), real(-1.2), real(0.55), real(2.0)};
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 4; ++i) f[c * 4 + i] = d[c];
  Tensor mc = channel_attention(Var::constant(f), bind_cbam_const(p)).value();

  // straight-line MLP on the descriptor
  real h[2];
  for (int j = 0; j < 2; ++j) {
    real s = p.b0.value[j];
    for (int c = 0; c < 4; ++c) s += p.w0.value[j * 4 + c] * d[c];
    h[j] = std::max(real(0), s);
  }
  for (int c = 0; c < 4; ++c) {
    real s = p.b1.value[c];
    for (int j = 0; j < 2; ++j) s += p.w1.value[c * 2 + j] * h[j];
    EXPECT_NEAR(mc[c], sigma(2 * s), 1e-12);
  }
}

TEST(ChannelAttention, StraightLineOracle) {
  CbamParams p = random_cbam(4, 2, 11);
  Rng rng(13);
  Tensor f = fdcheck::random_tensor(rng, {1, 4, 3, 3});
  Tensor mc = channel_attention(Var::constant(f), bind_cbam_const(p)).value();

  real avg[4], mx[4];
  for (int c = 0; c < 4; ++c) {
    real s = 0, m = f[c * 9];
    for (int i = 0; i < 9; ++i) {
      s += f[c * 9 + i];
      m = std::max(m, f[c * 9 + i]);
    }
    avg[c] = s / 9;
    mx[c] = m;
  }
  auto mlp = [&](const real* x, int c_out) {
    real h[2];
    for (int j = 0; j < 2; ++j) {
      real s = p.b0.value[j];
      for (int c = 0; c < 4; ++c) s += p.w0.value[j * 4 + c] * x[c];
      h[j] = std::max(real(0), s);
    }
    real s = p.b1.value[c_out];
    for (int j = 0; j < 2; ++j) s += p.w1.value[c_out * 2 + j] * h[j];
    return s;
  };
  for (int c = 0; c < 4; ++c)
    EXPECT_NEAR(mc[c], sigma(mlp(avg, c) + mlp(mx, c)), 1e-12);
}

TEST(ChannelAttention, RejectsChannelMismatch) {
  CbamParams p = random_cbam(4, 2, 17);
  Var f = Var::constant(Tensor({1, 6, 2, 2}));
  EXPECT_THROW(channel_attention(f, bind_cbam_const(p)), DimensionError);
}

TEST(SpatialAttention, ZeroParamsGiveHalf) {
  CbamParams p = zero_cbam(4, 2);
  Rng rng(19);
  Var f = Var::constant(fdcheck::random_tensor(rng, {2, 4, 5, 5}));
  Tensor ms = spatial_attention(f, bind_cbam_const(p)).value();
  EXPECT_EQ(ms.extent(1), 1);
  EXPECT_EQ(ms.extent(2), 5);
  for (int64_t i = 0; i < ms.size(); ++i) EXPECT_DOUBLE_EQ(ms[i], 0.5);
}

TEST(SpatialAttention, SingleChannelDescriptorsCoincide) {
  // c=1: avg and max channel pools are both copies of F, so the conv sees
  // the same plane twice
  Rng rng(29);
  Tensor f = fdcheck::random_tensor(rng, {1, 1, 8, 8});
  Var fv = Var::constant(f);
  Tensor avg = pool_channel(fv, PoolKind::avg).value();
  Tensor mx = pool_channel(fv, PoolKind::max).value();
  EXPECT_EQ(avg, mx);
}

TEST(SpatialAttention, StraightLineOracle) {
  CbamParams p = random_cbam(4, 2, 31);
  Rng rng(37);
  Tensor f = fdcheck::random_tensor(rng, {1, 3, 8, 8});
  // spatial attention ignores channel count of p; feed a 3-channel input
  Tensor ms = spatial_attention(Var::constant(f), bind_cbam_const(p)).value();

  real desc[2][8][8];
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      real s = 0, m = f.at4(0, 0, y, x);
      for (int c = 0; c < 3; ++c) {
        s += f.at4(0, c, y, x);
        m = std::max(m, f.at4(0, c, y, x));
      }
      desc[0][y][x] = s / 3;
      desc[1][y][x] = m;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      real s = p.spatial_bias.value[0];
      for (int c = 0; c < 2; ++c)
        for (int ky = 0; ky < 7; ++ky)
          for (int kx = 0; kx < 7; ++kx) {
            const int iy = y + ky - 3, ix = x + kx - 3;
            if (iy < 0 || iy >= 8 || ix < 0 || ix >= 8) continue;
            s += p.spatial_kernel.value[(c * 7 + ky) * 7 + kx] * desc[c][iy][ix];
          }
      EXPECT_NEAR(ms.at4(0, 0, y, x), sigma(s), 1e-12);
    }
}

TEST(CbamRefine, ZeroParamsQuarterInput) {
  CbamParams p = zero_cbam(4, 2);
  Rng rng(41);
  Tensor f = fdcheck::random_tensor(rng, {2, 4, 3, 3});
  Tensor out = cbam_refine(Var::constant(f), bind_cbam_const(p)).refined.value();
  for (int64_t i = 0; i < f.size(); ++i) EXPECT_DOUBLE_EQ(out[i], real(0.25) * f[i]);
}

TEST(CbamRefine, ZeroInputStaysZero) {
  CbamParams p = random_cbam(4, 2, 43);
  Tensor f({2, 4, 3, 3});
  Tensor out = cbam_refine(Var::constant(f), bind_cbam_const(p)).refined.value();
  for (int64_t i = 0; i < out.size(); ++i) EXPECT_DOUBLE_EQ(out[i], 0.0);
}

TEST(CbamRefine, CompositionOracle) {
  CbamParams p = random_cbam(8, 4, 47);
  Rng rng(53);
  Var f = Var::constant(fdcheck::random_tensor(rng, {2, 8, 4, 4}));
  CbamVars v = bind_cbam_const(p);
  CbamOut got = cbam_refine(f, v);
  Var mc = channel_attention(f, v);
  Var fprime = broadcast_mul(f, mc);
  Var ms = spatial_attention(fprime, v);
  Var expect = broadcast_mul(fprime, ms);
  EXPECT_EQ(got.refined.value(), expect.value());
  EXPECT_EQ(got.mc.value(), mc.value());
  EXPECT_EQ(got.ms.value(), ms.value());
}

TEST(CbamRefine, GatesInOpenIntervalAndContractive) {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    CbamParams p = random_cbam(4, 2, seed);
    Rng rng(seed + 100);
    Tensor f = fdcheck::random_tensor(rng, {1, 4, 3, 3}, -3, 3);
    CbamOut out = cbam_refine(Var::constant(f), bind_cbam_const(p));
    const Tensor& mc = out.mc.value();
    const Tensor& ms = out.ms.value();
    for (int64_t i = 0; i < mc.size(); ++i) {
      EXPECT_GT(mc[i], 0.0);
      EXPECT_LT(mc[i], 1.0);
    }
    for (int64_t i = 0; i < ms.size(); ++i) {
      EXPECT_GT(ms[i], 0.0);
      EXPECT_LT(ms[i], 1.0);
    }
    const Tensor& rf = out.refined.value();
    for (int64_t i = 0; i < rf.size(); ++i) EXPECT_LE(std::abs(rf[i]), std::abs(f[i]));
  }
}

TEST(CbamRefine, BatchPermutationEquivariance) {
  CbamParams p = random_cbam(4, 2, 59);
  Rng rng(61);
  Tensor f = fdcheck::random_tensor(rng, {3, 4, 3, 3});
  Tensor fp(f.shape());
  const int perm[3] = {2, 0, 1};
  const int64_t plane = 4 * 3 * 3;
  for (int i = 0; i < 3; ++i)
    std::copy(f.data() + perm[i] * plane, f.data() + (perm[i] + 1) * plane,
              fp.data() + i * plane);
  Tensor out = cbam_refine(Var::constant(f), bind_cbam_const(p)).refined.value();
  Tensor outp = cbam_refine(Var::constant(fp), bind_cbam_const(p)).refined.value();
  for (int i = 0; i < 3; ++i)
    for (int64_t j = 0; j < plane; ++j)
      EXPECT_DOUBLE_EQ(outp[i * plane + j], out[perm[i] * plane + j]);
}

TEST(SharedMlp, GradientSumsBothBranches) {
  // d/dw0 of sigma(mlp(avg)+mlp(max)) splits additively across branches
  CbamParams p = random_cbam(4, 2, 67);
  Rng rng(71);
  Tensor f = fdcheck::random_tensor(rng, {1, 4, 3, 3});
  Tensor w = fdcheck::random_tensor(rng, {1, 4, 1, 1});

  auto run = [&](bool avg_live, bool max_live) {
    for (Param* q : p.params()) q->zero_grad();
    Tape tape;
    Var fv = Var::constant(f);
    const int n = 1, c = 4;
    Var avg = reshape(pool_spatial(fv, PoolKind::avg), {n, c});
    Var mx = reshape(pool_spatial(fv, PoolKind::max), {n, c});
    auto mlp = [&](Var x, bool live) {
      Var w0 = live ? tape.leaf(p.w0) : Var::constant(p.w0.value);
      Var b0 = Var::constant(p.b0.value);
      Var w1 = Var::constant(p.w1.value);
      Var b1 = Var::constant(p.b1.value);
      return dense(relu(dense(x, w0, b0)), w1, b1);
    };
    Var mcv = reshape(sigmoid(add(mlp(avg, avg_live), mlp(mx, max_live))), {n, c, 1, 1});
    tape.backward(fdcheck::weighted_sum(mcv, w));
    return p.w0.grad;
  };

  Tensor g_both = run(true, true);
  Tensor g_avg = run(true, false);
  Tensor g_max = run(false, true);
  bool avg_nonzero = false, max_nonzero = false;
  for (int64_t i = 0; i < g_both.size(); ++i) {
    EXPECT_NEAR(g_both[i], g_avg[i] + g_max[i], 1e-12);
    avg_nonzero = avg_nonzero || g_avg[i] != 0;
    max_nonzero = max_nonzero || g_max[i] != 0;
  }
  EXPECT_TRUE(avg_nonzero);
  EXPECT_TRUE(max_nonzero);
}

TEST(Attention, FiniteDifferences) {
  Rng rng(73);
  for (int inst = 0; inst < 3; ++inst) {
    CbamParams p = random_cbam(4, 2, 80 + uint64_t(inst));
    Param f = fdcheck::random_param(rng, {2, 4, 3, 3});
    Tensor wmc = fdcheck::random_tensor(rng, {2, 4, 1, 1});
    Tensor wms = fdcheck::random_tensor(rng, {2, 1, 3, 3});
    Tensor wrf = fdcheck::random_tensor(rng, {2, 4, 3, 3});
    std::vector<Param*> params = {&f, &p.w0, &p.b0, &p.w1, &p.b1, &p.spatial_kernel,
                                  &p.spatial_bias};
    auto fmc = [&](Tape* t) {
      return fdcheck::weighted_sum(channel_attention(use_param(t, f), bind_cbam(t, p)), wmc);
    };
    auto fms = [&](Tape* t) {
      return fdcheck::weighted_sum(spatial_attention(use_param(t, f), bind_cbam(t, p)), wms);
    };
    auto frf = [&](Tape* t) {
      return fdcheck::weighted_sum(cbam_refine(use_param(t, f), bind_cbam(t, p)).refined, wrf);
    };
    fdcheck::FdResult r1 = fdcheck::check("channel_attention", params, fmc);
    fdcheck::FdResult r2 = fdcheck::check("spatial_attention", params, fms);
    fdcheck::FdResult r3 = fdcheck::check("cbam_refine", params, frf);
    EXPECT_EQ(r1.failed, 0) << r1.first_failure;
    EXPECT_EQ(r2.failed, 0) << r2.first_failure;
    EXPECT_EQ(r3.failed, 0) << r3.first_failure;
  }
}

TEST(AtMap, SingleChannelSquare) {
  Tensor f({1, 1, 2, 2}, {1, -2, 3, 0});
  AtMapResult r = at_map(Var::constant(f), 2);
  ASSERT_EQ(r.degenerate.size(), 1u);
  EXPECT_FALSE(r.degenerate[0]);
  // squares: 1,4,9,0; Frobenius norm of the map
  const double n = std::sqrt(1.0 + 16.0 + 81.0 + 0.0);
  const double expect[4] = {1 / n, 4 / n, 9 / n, 0};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(r.map.value()[i], expect[i], 1e-12);
}

TEST(AtMap, ZeroInputFlaggedDegenerate) {
  Tensor f({2, 3, 2, 2});
  f[0] = 1;  // sample 0 non-degenerate, sample 1 all zero
  AtMapResult r = at_map(Var::constant(f), 2);
  ASSERT_EQ(r.degenerate.size(), 2u);
  EXPECT_FALSE(r.degenerate[0]);
  EXPECT_TRUE(r.degenerate[1]);
  for (int64_t i = 4; i < 8; ++i) EXPECT_DOUBLE_EQ(r.map.value()[i], 0.0);
}

TEST(AtMap, BruteForceOracle) {
  Rng rng(79);
  Tensor f = fdcheck::random_tensor(rng, {1, 4, 2, 2});
  Tensor got = at_map(Var::constant(f), 2).map.value();
  real raw[4];
  for (int i = 0; i < 4; ++i) {
    raw[i] = 0;
    for (int c = 0; c < 4; ++c) {
      const real v = f[c * 4 + i];
      raw[i] += v * v;
    }
  }
  real norm = 0;
  for (int i = 0; i < 4; ++i) norm += raw[i] * raw[i];
  norm = std::sqrt(norm);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(got[i], raw[i] / norm, 1e-12);
}

TEST(AtMap, RejectsBadPower) {
  Tensor f({1, 1, 2, 2});
  EXPECT_THROW(at_map(Var::constant(f), 0), ContractError);
}
