#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "attnfd/attention.hpp"
#include "attnfd/autodiff.hpp"
#include "attnfd/init.hpp"
#include "attnfd/ops.hpp"

namespace attnfd {

struct SegNetConfig {
  int in_channels = 3;
  int num_classes = 4;
  std::vector<int> widths = {32, 64, 128};  // one entry per stride-2 stage
  int reduction = 8;                        // CBAM reduction the widths must admit

  int depth() const { return int(widths.size()); }
};

/// conv3x3 followed by a per-channel affine (gamma, beta). The affine stands
/// in for a norm layer but uses no batch statistics, keeping every forward
/// pass a pure function of (params, input).
struct ConvBlock {
  Param k, b, gamma, beta;

  std::vector<Param*> params() { return {&k, &b, &gamma, &beta}; }
};

/// Tiny encoder-decoder segmentation net with named pre-ReLU tap points:
///   B: after the last backbone stage, E: after the context block,
///   D: after the decoder conv, right before the 1x1 classifier.
class Network {
 public:
  SegNetConfig cfg;
  std::vector<ConvBlock> stages;
  ConvBlock ctx1, ctx2;
  ConvBlock dec;
  Param cls_k, cls_b;

  static Network build(const SegNetConfig& cfg, uint64_t seed) {
    if (cfg.widths.empty()) throw ConfigError("segnet: widths must be nonempty");
    if (cfg.in_channels < 1 || cfg.num_classes < 2)
      throw ConfigError("segnet: need in_channels >= 1 and num_classes >= 2");
    for (int w : cfg.widths)
      if (w < 1 || cfg.reduction < 1 || w % cfg.reduction != 0)
        throw ConfigError("segnet: width " + std::to_string(w) +
                          " not divisible by cbam reduction " + std::to_string(cfg.reduction));
    Network net;
    net.cfg = cfg;
    Rng rng(seed);
    int ci = cfg.in_channels;
    for (int w : cfg.widths) {
      net.stages.push_back(make_block(rng, ci, w));
      ci = w;
    }
    const int bottom = cfg.widths.back();
    net.ctx1 = make_block(rng, bottom, bottom);
    net.ctx2 = make_block(rng, bottom, bottom);
    net.dec = make_block(rng, bottom, bottom);
    net.cls_k = Param(he_init(rng, {cfg.num_classes, bottom, 1, 1}, bottom));
    net.cls_b = Param(Tensor({cfg.num_classes}));
    return net;
  }

  std::vector<std::pair<std::string, Param*>> named_params() {
    std::vector<std::pair<std::string, Param*>> out;
    auto block = [&out](const std::string& prefix, ConvBlock& cb) {
      out.emplace_back(prefix + ".k", &cb.k);
      out.emplace_back(prefix + ".b", &cb.b);
      out.emplace_back(prefix + ".gamma", &cb.gamma);
      out.emplace_back(prefix + ".beta", &cb.beta);
    };
    for (std::size_t i = 0; i < stages.size(); ++i)
      block("net.stage" + std::to_string(i), stages[i]);
    block("net.ctx1", ctx1);
    block("net.ctx2", ctx2);
    block("net.dec", dec);
    out.emplace_back("net.cls.k", &cls_k);
    out.emplace_back("net.cls.b", &cls_b);
    return out;
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& [name, p] : named_params()) out.push_back(p);
    return out;
  }

  int64_t param_count() {
    int64_t n = 0;
    for (Param* p : params()) n += p->value.size();
    return n;
  }

  void freeze() {
    for (Param* p : params()) p->trainable = false;
  }

  bool frozen() {
    for (Param* p : params())
      if (p->trainable) return false;
    return true;
  }

 private:
  static ConvBlock make_block(Rng& rng, int ci, int co) {
    ConvBlock cb;
    cb.k = Param(he_init(rng, {co, ci, 3, 3}, int64_t(ci) * 9));
    cb.b = Param(Tensor({co}));
    cb.gamma = Param(Tensor::full({1, co, 1, 1}, real(1)));
    cb.beta = Param(Tensor({1, co, 1, 1}));
    return cb;
  }
};

struct TapBundle {
  Var B, E, D;
  Var logits;  // (n, K, h, w) at input resolution
};

/// Optional in-path CBAM substitution used to calibrate teacher attention:
/// at each hooked tap the refined feature replaces the raw one for the rest
/// of the pass.
struct InPathCbam {
  CbamVars* B = nullptr;
  CbamVars* E = nullptr;
  CbamVars* D = nullptr;
};

namespace detail {

inline Var conv_affine(Tape* tape, ConvBlock& cb, const Var& x, int stride, int pad) {
  Var h = conv2d(x, use_param(tape, cb.k), use_param(tape, cb.b), stride, pad);
  h = broadcast_mul(h, use_param(tape, cb.gamma));
  return broadcast_add(h, use_param(tape, cb.beta));
}

}  // namespace detail

/// One full forward pass capturing all taps pre-ReLU plus upsampled logits.
/// Pass tape=nullptr (or a fully frozen net) for a constant-folded pass that
/// records nothing.
inline TapBundle forward_with_taps(Network& net, Tape* tape, const Var& x,
                                   const InPathCbam* inpath = nullptr) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "forward_with_taps");
  if (xv.extent(1) != net.cfg.in_channels)
    throw DimensionError("forward_with_taps: input has " + std::to_string(xv.extent(1)) +
                         " channels, network expects " + std::to_string(net.cfg.in_channels));
  const int H = xv.extent(2), W = xv.extent(3);
  const int div = 1 << net.cfg.depth();
  if (H % div != 0 || W % div != 0)
    throw GeometryError("forward_with_taps: input " + std::to_string(H) + "x" +
                        std::to_string(W) + " not divisible by 2^" +
                        std::to_string(net.cfg.depth()));

  TapBundle taps;
  Var h = x;
  for (std::size_t i = 0; i < net.stages.size(); ++i) {
    h = detail::conv_affine(tape, net.stages[i], h, 2, 1);
    if (i + 1 == net.stages.size()) {
      if (inpath && inpath->B) h = cbam_refine(h, *inpath->B).refined;
      taps.B = h;
    }
    h = relu(h);
  }
  h = relu(detail::conv_affine(tape, net.ctx1, h, 1, 1));
  h = detail::conv_affine(tape, net.ctx2, h, 1, 1);
  if (inpath && inpath->E) h = cbam_refine(h, *inpath->E).refined;
  taps.E = h;
  h = relu(h);
  h = detail::conv_affine(tape, net.dec, h, 1, 1);
  if (inpath && inpath->D) h = cbam_refine(h, *inpath->D).refined;
  taps.D = h;
  h = relu(h);
  Var logits = conv2d(h, use_param(tape, net.cls_k), use_param(tape, net.cls_b), 1, 0);
  taps.logits = bilinear_resize(logits, H, W);
  return taps;
}

}  // namespace attnfd
