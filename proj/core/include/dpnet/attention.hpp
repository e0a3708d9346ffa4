#pragma once

// Lightweight self-correlation (LSCM) and cross-correlation (LCCM-TD/BU)
// attention. Each block gates the input sequence with a pixel-to-region
// spatial map and a channel-to-group-channel map computed from a k x k
// pooled summary, so cost stays linear in the input resolution.

#include <string>

#include "dpnet/tensor.hpp"

namespace dpnet {

struct AttentionConfig {
  int k = 5;  // pooled summary size
  int r = 8;  // channel reduction ratio
  int channels = 0;

  void validate(int h, int w, const std::string& site) const {
    if (k < 1 || r < 1) shape_fail(site + ": attention k and r must be >= 1");
    if (channels % r != 0)
      shape_fail(site + ": channels " + std::to_string(channels) + " not divisible by r=" +
                 std::to_string(r));
    if (k * k >= h * w)
      shape_fail(site + ": pooled size k^2=" + std::to_string(k * k) +
                 " must be smaller than H*W=" + std::to_string(h * w));
  }
};

template <typename T>
struct LscmWeights {
  Tensor<T> w_sp_k;  // (C, C/r)
  Tensor<T> w_sp_q;  // (C, C/r)
  Tensor<T> w_sp_o;  // (k^2, 1)
  Tensor<T> w_ch_k;  // (C, C)
  Tensor<T> w_ch_q;  // (C/r, C)
  Tensor<T> w_ch_o;  // (C/r, 1)
  Tensor<T> ln_sp_gamma, ln_sp_beta;  // scalars over the HW-length logit vector
  Tensor<T> ln_ch_gamma, ln_ch_beta;  // scalars over the C-length logit vector
};

template <typename T>
using LccmWeights = LscmWeights<T>;

namespace detail {

template <typename T>
void check_attention_weights(const LscmWeights<T>& w, const AttentionConfig& cfg,
                             const std::string& site) {
  const int c = cfg.channels, cr = cfg.channels / cfg.r, k2 = cfg.k * cfg.k;
  auto expect = [&](const Tensor<T>& t, Shape s, const char* name) {
    if (t.shape() != s)
      shape_fail(site + ": weight " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                 shape_str(s));
  };
  expect(w.w_sp_k, {c, cr}, "w_sp_k");
  expect(w.w_sp_q, {c, cr}, "w_sp_q");
  expect(w.w_sp_o, {k2, 1}, "w_sp_o");
  expect(w.w_ch_k, {c, c}, "w_ch_k");
  expect(w.w_ch_q, {cr, c}, "w_ch_q");
  expect(w.w_ch_o, {cr, 1}, "w_ch_o");
}

// sigma(LN(K Q^T W_o)) for either attention branch; the logit vector is
// normalized over its single non-unit axis.
template <typename T>
Tensor<T> correlation_gate(const Tensor<T>& keys, const Tensor<T>& queries, const Tensor<T>& w_o,
                           const Tensor<T>& ln_gamma, const Tensor<T>& ln_beta, T eps) {
  Tensor<T> logits = matmul(matmul(keys, transpose2d(queries)), w_o);
  return sigmoid(layer_norm(logits, ln_gamma, ln_beta, eps));
}

// (S_sp [N,1] column-reweight X) + (S_ch [C,1] row-reweight X), X is [N,C].
template <typename T>
Tensor<T> reweight(const Tensor<T>& x, const Tensor<T>& s_sp, const Tensor<T>& s_ch) {
  return add(mul(s_sp, x), mul(transpose2d(s_ch), x));
}

}  // namespace detail

inline constexpr double kAttentionLnEps = 1e-5;

template <typename T>
Tensor<T> lscm_forward(const Tensor<T>& f, const AttentionConfig& cfg, const LscmWeights<T>& w) {
  if (f.rank() != 3) shape_fail("lscm input must be [C,H,W], got " + shape_str(f.shape()));
  const int c = f.dim(0), h = f.dim(1), ww = f.dim(2);
  if (c != cfg.channels)
    shape_fail("lscm input channels " + std::to_string(c) + " != configured " +
               std::to_string(cfg.channels));
  cfg.validate(h, ww, "lscm");
  detail::check_attention_weights(w, cfg, "lscm");
  const T eps = static_cast<T>(kAttentionLnEps);

  Tensor<T> x = chw_to_positions(f);                                         // [HW, C]
  Tensor<T> xp = chw_to_positions(pool2d(f, PoolMode::kAdaptiveAverage, cfg.k));  // [k^2, C]

  Tensor<T> k_sp = matmul(x, w.w_sp_k);
  Tensor<T> q_sp = matmul(xp, w.w_sp_q);
  Tensor<T> s_sp = detail::correlation_gate(k_sp, q_sp, w.w_sp_o, w.ln_sp_gamma, w.ln_sp_beta, eps);

  Tensor<T> xp_t = transpose2d(xp);  // [C, k^2]
  Tensor<T> k_ch = matmul(w.w_ch_k, xp_t);
  Tensor<T> q_ch = matmul(w.w_ch_q, xp_t);
  Tensor<T> s_ch = detail::correlation_gate(k_ch, q_ch, w.w_ch_o, w.ln_ch_gamma, w.ln_ch_beta, eps);

  return positions_to_chw(detail::reweight(x, s_sp, s_ch), c, h, ww);
}

// Top-down cross-correlation: gates computed against the pooled low-resolution
// input reweight the high-resolution map, which also carries the residual.
template <typename T>
Tensor<T> lccm_td_forward(const Tensor<T>& f_high, const Tensor<T>& f_low,
                          const AttentionConfig& cfg, const LccmWeights<T>& w) {
  if (f_high.rank() != 3 || f_low.rank() != 3)
    shape_fail("lccm inputs must be [C,H,W]");
  if (f_high.dim(0) != f_low.dim(0))
    shape_fail("lccm channel mismatch: " + shape_str(f_high.shape()) + " vs " + shape_str(f_low.shape()));
  if (f_high.dim(1) != 2 * f_low.dim(1) || f_high.dim(2) != 2 * f_low.dim(2))
    shape_fail("lccm-td high input must be exactly 2x the low input, got " +
               shape_str(f_high.shape()) + " vs " + shape_str(f_low.shape()));
  const int c = f_high.dim(0), hh = f_high.dim(1), wh = f_high.dim(2);
  if (c != cfg.channels)
    shape_fail("lccm input channels " + std::to_string(c) + " != configured " +
               std::to_string(cfg.channels));
  cfg.validate(f_low.dim(1), f_low.dim(2), "lccm-td");
  detail::check_attention_weights(w, cfg, "lccm-td");
  const T eps = static_cast<T>(kAttentionLnEps);

  Tensor<T> x_h = chw_to_positions(f_high);                                            // [HhWh, C]
  Tensor<T> xp_h = chw_to_positions(pool2d(f_high, PoolMode::kAdaptiveAverage, cfg.k));  // [k^2, C]
  Tensor<T> xp_l = chw_to_positions(pool2d(f_low, PoolMode::kAdaptiveAverage, cfg.k));   // [k^2, C]

  Tensor<T> s_sp = detail::correlation_gate(matmul(x_h, w.w_sp_k), matmul(xp_l, w.w_sp_q), w.w_sp_o,
                                            w.ln_sp_gamma, w.ln_sp_beta, eps);
  Tensor<T> s_ch = detail::correlation_gate(matmul(w.w_ch_k, transpose2d(xp_h)),
                                            matmul(w.w_ch_q, transpose2d(xp_l)), w.w_ch_o,
                                            w.ln_ch_gamma, w.ln_ch_beta, eps);

  Tensor<T> x_w = detail::reweight(x_h, s_sp, s_ch);
  return positions_to_chw(add(x_w, x_h), c, hh, wh);
}

// Bottom-up direction: the spatial key sequence comes from the 2x-downsampled
// high-resolution map so the gate has one entry per low-resolution position;
// queries come from the pooled opposite-scale input. Reweight and residual
// apply to the low-resolution map.
template <typename T>
Tensor<T> lccm_bu_forward(const Tensor<T>& f_low, const Tensor<T>& f_high,
                          const AttentionConfig& cfg, const LccmWeights<T>& w) {
  if (f_high.rank() != 3 || f_low.rank() != 3)
    shape_fail("lccm inputs must be [C,H,W]");
  if (f_high.dim(0) != f_low.dim(0))
    shape_fail("lccm channel mismatch: " + shape_str(f_high.shape()) + " vs " + shape_str(f_low.shape()));
  if (f_high.dim(1) != 2 * f_low.dim(1) || f_high.dim(2) != 2 * f_low.dim(2))
    shape_fail("lccm-bu high input must be exactly 2x the low input, got " +
               shape_str(f_high.shape()) + " vs " + shape_str(f_low.shape()));
  const int c = f_low.dim(0), hl = f_low.dim(1), wl = f_low.dim(2);
  if (c != cfg.channels)
    shape_fail("lccm input channels " + std::to_string(c) + " != configured " +
               std::to_string(cfg.channels));
  cfg.validate(hl, wl, "lccm-bu");
  detail::check_attention_weights(w, cfg, "lccm-bu");
  const T eps = static_cast<T>(kAttentionLnEps);

  Tensor<T> x_l = chw_to_positions(f_low);                                              // [HlWl, C]
  Tensor<T> x_hd = chw_to_positions(resample2d(f_high, ResampleMode::kDown2));            // [HlWl, C]
  Tensor<T> xp_h = chw_to_positions(pool2d(f_high, PoolMode::kAdaptiveAverage, cfg.k));   // [k^2, C]
  Tensor<T> xp_l = chw_to_positions(pool2d(f_low, PoolMode::kAdaptiveAverage, cfg.k));    // [k^2, C]

  Tensor<T> s_sp = detail::correlation_gate(matmul(x_hd, w.w_sp_k), matmul(xp_h, w.w_sp_q), w.w_sp_o,
                                            w.ln_sp_gamma, w.ln_sp_beta, eps);
  Tensor<T> s_ch = detail::correlation_gate(matmul(w.w_ch_k, transpose2d(xp_h)),
                                            matmul(w.w_ch_q, transpose2d(xp_l)), w.w_ch_o,
                                            w.ln_ch_gamma, w.ln_ch_beta, eps);

  Tensor<T> x_w = detail::reweight(x_l, s_sp, s_ch);
  return positions_to_chw(add(x_w, x_l), c, hl, wl);
}

// Multiply counts of the matmuls each forward issues, mirrored analytically so
// the static analyzer agrees with the runtime counter bit for bit.
inline std::uint64_t lscm_macs(int n, int c, int k, int r) {
  const std::uint64_t k2 = static_cast<std::uint64_t>(k) * k;
  const std::uint64_t cr = static_cast<std::uint64_t>(c) / r;
  std::uint64_t m = 0;
  m += static_cast<std::uint64_t>(n) * c * cr;  // K_sp
  m += k2 * c * cr;                             // Q_sp
  m += static_cast<std::uint64_t>(n) * cr * k2; // K_sp Q_sp^T
  m += static_cast<std::uint64_t>(n) * k2;      // x W_sp_o
  m += static_cast<std::uint64_t>(c) * c * k2;  // K_ch
  m += cr * c * k2;                             // Q_ch
  m += static_cast<std::uint64_t>(c) * k2 * cr; // K_ch Q_ch^T
  m += static_cast<std::uint64_t>(c) * cr;      // x W_ch_o
  return m;
}

// LCCM issues the same matmuls with n spatial key rows (n = HhWh for TD,
// n = HlWl for BU) and the extra Q_sp projection from the pooled sequence.
inline std::uint64_t lccm_macs(int n, int c, int k, int r) { return lscm_macs(n, c, k, r); }

inline std::uint64_t lscm_param_count(int c, int k, int r) {
  const std::uint64_t k2 = static_cast<std::uint64_t>(k) * k;
  const std::uint64_t cr = static_cast<std::uint64_t>(c) / r;
  return static_cast<std::uint64_t>(c) * cr * 2 + k2      // spatial projections
         + static_cast<std::uint64_t>(c) * c + cr * static_cast<std::uint64_t>(c) + cr  // channel
         + 4;                                              // two LN affine pairs
}

}  // namespace dpnet
