#pragma once

// Composite building blocks: stem, ASU (attention-based shuffle unit),
// stride ASU, Bi-FM (bi-direction fusion module), and ConvBlock.
// Every block carries its own analytic parameter/MAC accounting, kept in
// lockstep with the runtime counter (tests assert exact equality).

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpnet/attention.hpp"
#include "dpnet/tensor.hpp"
#include "dpnet/weights.hpp"

namespace dpnet {

template <typename T>
struct Conv2dLayer {
  Tensor<T> w;
  std::optional<Tensor<T>> b;
  int stride = 1;
  int pad = 0;
  int groups = 1;

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad, groups); }

  std::uint64_t params() const {
    return static_cast<std::uint64_t>(w.size()) + (b ? static_cast<std::uint64_t>(b->size()) : 0);
  }
  std::pair<int, int> out_hw(int h, int wd) const {
    return {(h + 2 * pad - w.dim(2)) / stride + 1, (wd + 2 * pad - w.dim(3)) / stride + 1};
  }
  std::uint64_t macs(int h, int wd) const {
    auto [oh, ow] = out_hw(h, wd);
    return static_cast<std::uint64_t>(w.dim(0)) * oh * ow * w.dim(1) * w.dim(2) * w.dim(3);
  }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma, beta;
  mutable Tensor<T> run_mean, run_var;  // updated in place during training
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.9);

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    return batch_norm(x, gamma, beta, run_mean, run_var, eps, momentum, training);
  }
  std::uint64_t params() const { return 2 * static_cast<std::uint64_t>(gamma.size()); }
};

// conv (bias folded into BN) -> BN -> optional relu
template <typename T>
struct ConvBn {
  Conv2dLayer<T> conv;
  BatchNormLayer<T> bn;
  bool act = false;

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    Tensor<T> y = bn.forward(conv.forward(x), training);
    return act ? relu(y) : y;
  }
  std::uint64_t params() const { return conv.params() + bn.params(); }
  std::uint64_t macs(int h, int w) const { return conv.macs(h, w); }
};

namespace detail {

template <typename T>
ConvBn<T> make_conv_bn(WeightBuilder<T>& wb, const std::string& prefix, int ci, int co, int k,
                       int stride, int pad, int groups, bool act) {
  ConvBn<T> layer;
  const std::int64_t fan_in = static_cast<std::int64_t>(ci / groups) * k * k;
  layer.conv.w = wb.kaiming_uniform(prefix + ".w", {co, ci / groups, k, k}, fan_in);
  layer.conv.stride = stride;
  layer.conv.pad = pad;
  layer.conv.groups = groups;
  layer.bn.gamma = wb.constant(prefix + ".bn.g", {co}, T(1), false);
  layer.bn.beta = wb.constant(prefix + ".bn.b", {co}, T(0), false);
  layer.bn.run_mean = wb.buffer(prefix + ".bn.rm", {co}, T(0));
  layer.bn.run_var = wb.buffer(prefix + ".bn.rv", {co}, T(1));
  layer.act = act;
  return layer;
}

// Output projections and LN biases start at zero, so each attention block
// begins at the neutral-gate identity.
template <typename T>
LscmWeights<T> make_attention_weights(WeightBuilder<T>& wb, const std::string& prefix,
                                      const AttentionConfig& cfg) {
  const int c = cfg.channels, cr = cfg.channels / cfg.r, k2 = cfg.k * cfg.k;
  LscmWeights<T> w;
  w.w_sp_k = wb.kaiming_uniform(prefix + ".sp_k", {c, cr}, c);
  w.w_sp_q = wb.kaiming_uniform(prefix + ".sp_q", {c, cr}, c);
  w.w_sp_o = wb.constant(prefix + ".sp_o", {k2, 1}, T(0), true);
  w.w_ch_k = wb.kaiming_uniform(prefix + ".ch_k", {c, c}, c);
  w.w_ch_q = wb.kaiming_uniform(prefix + ".ch_q", {cr, c}, c);
  w.w_ch_o = wb.constant(prefix + ".ch_o", {cr, 1}, T(0), true);
  w.ln_sp_gamma = wb.constant(prefix + ".ln_sp.g", {1}, T(1), false);
  w.ln_sp_beta = wb.constant(prefix + ".ln_sp.b", {1}, T(0), false);
  w.ln_ch_gamma = wb.constant(prefix + ".ln_ch.g", {1}, T(1), false);
  w.ln_ch_beta = wb.constant(prefix + ".ln_ch.b", {1}, T(0), false);
  return w;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stem: 3x3 stride-2 conv -> BN -> relu -> 2x2 max-pool stride 2

template <typename T>
struct StemBlock {
  ConvBn<T> conv;

  static StemBlock build(WeightBuilder<T>& wb, const std::string& prefix, int in_ch, int out_ch) {
    return {detail::make_conv_bn(wb, prefix + ".conv", in_ch, out_ch, 3, 2, 1, 1, true)};
  }

  Tensor<T> forward(const Tensor<T>& image, bool training) const {
    if (image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0)
      shape_fail("stem input H,W must be divisible by 4, got " + shape_str(image.shape()));
    return pool2d(conv.forward(image, training), PoolMode::kMax, 2, 2);
  }

  std::uint64_t params() const { return conv.params(); }
  std::uint64_t macs(int h, int w) const { return conv.macs(h, w); }
};

// ---------------------------------------------------------------------------
// ASU: split -> (identity | 1x1 -> DW5x5 -> LSCM -> 1x1) -> concat -> shuffle

template <typename T>
struct AsuBlock {
  AttentionConfig att;
  ConvBn<T> pw1, dw, pw2;
  LscmWeights<T> lscm;

  static AsuBlock build(WeightBuilder<T>& wb, const std::string& prefix, int channels, int k, int r) {
    if (channels % 2 != 0) shape_fail(prefix + ": ASU channels must be even");
    const int c = channels / 2;
    if (c % r != 0)
      shape_fail(prefix + ": ASU branch width " + std::to_string(c) + " not divisible by r=" +
                 std::to_string(r));
    AsuBlock b;
    b.att = {k, r, c};
    b.pw1 = detail::make_conv_bn(wb, prefix + ".pw1", c, c, 1, 1, 0, 1, true);
    b.dw = detail::make_conv_bn(wb, prefix + ".dw", c, c, 5, 1, 2, c, false);
    b.lscm = detail::make_attention_weights(wb, prefix + ".lscm", b.att);
    b.pw2 = detail::make_conv_bn(wb, prefix + ".pw2", c, c, 1, 1, 0, 1, true);
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    auto [identity, transform] = split_channels(x);
    Tensor<T> t = pw1.forward(transform, training);
    t = dw.forward(t, training);
    t = lscm_forward(t, att, lscm);
    t = pw2.forward(t, training);
    return channel_shuffle(concat_channels(identity, t), 2);
  }

  std::uint64_t params() const {
    return pw1.params() + dw.params() + pw2.params() + lscm_param_count(att.channels, att.k, att.r);
  }
  std::uint64_t macs(int h, int w) const {
    return pw1.macs(h, w) + dw.macs(h, w) + pw2.macs(h, w) + lscm_macs(h * w, att.channels, att.k, att.r);
  }
};

// ---------------------------------------------------------------------------
// Stride ASU: both branches consume the full input and halve the resolution.

template <typename T>
struct AsuStrideBlock {
  AttentionConfig att;
  ConvBn<T> id_dw, id_pw;
  ConvBn<T> tr_pw1, tr_dw, tr_pw2;
  LscmWeights<T> lscm;

  static AsuStrideBlock build(WeightBuilder<T>& wb, const std::string& prefix, int in_ch, int out_ch,
                              int k, int r) {
    if (out_ch % 2 != 0) shape_fail(prefix + ": stride-ASU output channels must be even");
    const int c = out_ch / 2;
    if (c % r != 0)
      shape_fail(prefix + ": stride-ASU branch width " + std::to_string(c) + " not divisible by r=" +
                 std::to_string(r));
    AsuStrideBlock b;
    b.att = {k, r, c};
    b.id_dw = detail::make_conv_bn(wb, prefix + ".id_dw", in_ch, in_ch, 5, 2, 2, in_ch, false);
    b.id_pw = detail::make_conv_bn(wb, prefix + ".id_pw", in_ch, c, 1, 1, 0, 1, true);
    b.tr_pw1 = detail::make_conv_bn(wb, prefix + ".tr_pw1", in_ch, c, 1, 1, 0, 1, true);
    b.tr_dw = detail::make_conv_bn(wb, prefix + ".tr_dw", c, c, 5, 2, 2, c, false);
    b.lscm = detail::make_attention_weights(wb, prefix + ".lscm", b.att);
    b.tr_pw2 = detail::make_conv_bn(wb, prefix + ".tr_pw2", c, c, 1, 1, 0, 1, true);
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
      shape_fail("stride-ASU input H,W must be even, got " + shape_str(x.shape()));
    Tensor<T> id = id_pw.forward(id_dw.forward(x, training), training);
    Tensor<T> t = tr_pw1.forward(x, training);
    t = tr_dw.forward(t, training);
    t = lscm_forward(t, att, lscm);
    t = tr_pw2.forward(t, training);
    return channel_shuffle(concat_channels(id, t), 2);
  }

  std::uint64_t params() const {
    return id_dw.params() + id_pw.params() + tr_pw1.params() + tr_dw.params() + tr_pw2.params() +
           lscm_param_count(att.channels, att.k, att.r);
  }
  std::uint64_t macs(int h, int w) const {
    const int oh = h / 2, ow = w / 2;
    return id_dw.macs(h, w) + id_pw.macs(oh, ow) + tr_pw1.macs(h, w) + tr_dw.macs(h, w) +
           tr_pw2.macs(oh, ow) + lscm_macs(oh * ow, att.channels, att.k, att.r);
  }
};

// ---------------------------------------------------------------------------
// Bi-FM: cross-resolution bridge. Low->high: 1x1 conv then nearest x2 per
// stage. High->low: per stage a 5x5 stride-2 depth-wise conv with channel
// multiplier 2. Both fusions are element-wise additions, so zero cross
// kernels make the bridge an exact identity.

template <typename T>
struct BiFmBlock {
  int scale = 2;  // 2 or 4
  ConvBn<T> low_to_high;                // 1x1: n*C -> C
  std::vector<ConvBn<T>> high_to_low;   // log2(n) depth-wise stride stages

  static BiFmBlock build(WeightBuilder<T>& wb, const std::string& prefix, int high_ch, int n, int k,
                         int r) {
    (void)k;
    (void)r;
    if (n != 2 && n != 4) shape_fail(prefix + ": Bi-FM scale must be 2 or 4");
    BiFmBlock b;
    b.scale = n;
    b.low_to_high = detail::make_conv_bn(wb, prefix + ".l2h", n * high_ch, high_ch, 1, 1, 0, 1, false);
    int c = high_ch;
    for (int s = 0; n >> (s + 1); ++s) {
      b.high_to_low.push_back(
          detail::make_conv_bn(wb, prefix + ".h2l" + std::to_string(s), c, 2 * c, 5, 2, 2, c, false));
      c *= 2;
    }
    return b;
  }

  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& f_high, const Tensor<T>& f_low,
                                          bool training) const {
    const int c = f_high.dim(0);
    if (f_low.dim(0) != scale * c || f_low.dim(1) * scale != f_high.dim(1) ||
        f_low.dim(2) * scale != f_high.dim(2))
      shape_fail("Bi-FM inputs inconsistent with scale " + std::to_string(scale) + ": " +
                 shape_str(f_high.shape()) + " vs " + shape_str(f_low.shape()));
    Tensor<T> up = low_to_high.forward(f_low, training);
    for (int s = 0; scale >> (s + 1); ++s) up = resample2d(up, ResampleMode::kUp2);
    Tensor<T> down = f_high;
    for (const auto& stage : high_to_low) down = stage.forward(down, training);
    return {add(f_high, up), add(f_low, down)};
  }

  std::uint64_t params() const {
    std::uint64_t p = low_to_high.params();
    for (const auto& s : high_to_low) p += s.params();
    return p;
  }
  std::uint64_t macs(int high_h, int high_w) const {
    std::uint64_t m = low_to_high.macs(high_h / scale, high_w / scale);
    int h = high_h, w = high_w;
    for (const auto& s : high_to_low) {
      m += s.macs(h, w);
      h /= 2;
      w /= 2;
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// ConvBlock: DW5x5 -> BN -> 1x1 -> BN -> relu, channel preserving.

template <typename T>
struct ConvBlock {
  ConvBn<T> dw, pw;

  static ConvBlock build(WeightBuilder<T>& wb, const std::string& prefix, int channels) {
    ConvBlock b;
    b.dw = detail::make_conv_bn(wb, prefix + ".dw", channels, channels, 5, 1, 2, channels, false);
    b.pw = detail::make_conv_bn(wb, prefix + ".pw", channels, channels, 1, 1, 0, 1, true);
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    return pw.forward(dw.forward(x, training), training);
  }

  std::uint64_t params() const { return dw.params() + pw.params(); }
  std::uint64_t macs(int h, int w) const { return dw.macs(h, w) + pw.macs(h, w); }
};

}  // namespace dpnet
