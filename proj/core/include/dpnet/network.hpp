#pragma once

// Full detector assembly: dual-path backbone, cross-scale attention neck,
// decoupled-free head, plus box decode/encode and NMS.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpnet/attention.hpp"
#include "dpnet/blocks.hpp"
#include "dpnet/tensor.hpp"
#include "dpnet/weights.hpp"

namespace dpnet {

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NetConfig {
  int num_classes = 80;
  int input_size = 320;
  int in_channels = 3;
  int k = 5;
  int r = 8;
  int stem_channels = 24;
  int stage2_channels = 128;   // also the HRP width
  int stage3_channels = 256;
  int stage4_channels = 512;
  int stage2_asus = 3;         // ASUs following the stride ASU
  int stage3_asus = 7;
  int stage4_asus = 3;
  int stage3_hrp_asus = 8;
  int stage4_hrp_asus = 4;
  int neck_width = 224;
  int head_width = 224;
  std::uint64_t seed = 1;

  void validate() const {
    if (input_size <= 0 || input_size % 32 != 0)
      shape_fail("input_size must be a positive multiple of 32, got " + std::to_string(input_size));
    if (num_classes < 1) shape_fail("num_classes must be >= 1");
    if (k < 1 || r < 1) shape_fail("k and r must be >= 1");
    if (head_width != neck_width)
      shape_fail("head_width must equal neck_width (ConvBlocks are channel preserving)");
    if (neck_width % r != 0) shape_fail("neck_width must be divisible by r");
    for (int c : {stage2_channels, stage3_channels, stage4_channels})
      if (c % 2 != 0 || (c / 2) % r != 0) shape_fail("stage widths must be even with half divisible by r");
  }
  int head_channels() const { return num_classes + 5; }
};

// One backbone row, in the layout of the architecture table: layer index,
// per-path op names and output shapes as [H, W, C]. HRP fields stay empty
// for the single-path layers.
struct TraceRow {
  int layer = 0;
  std::string lrp_op;
  std::array<int, 3> lrp_shape{};
  std::string hrp_op;
  std::array<int, 3> hrp_shape{};
  bool has_hrp = false;
};

struct LayerStat {
  std::string name;
  std::string kind;
  Shape out_shape;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct Detection {
  int cls = 0;
  double score = 0;
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
};

template <typename T>
struct Taps {
  Tensor<T> c1, c2, c3;
  Tensor<T> m1, m2, m3;
  Tensor<T> f1, f2, f3;
};

template <typename T>
class DpNet {
 public:
  explicit DpNet(const NetConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    WeightBuilder<T> wb(store_, cfg_.seed, &params_);
    const int kk = cfg_.k, r = cfg_.r;

    stem_ = StemBlock<T>::build(wb, "stem", cfg_.in_channels, cfg_.stem_channels);
    s2_down_ = AsuStrideBlock<T>::build(wb, "s2.down", cfg_.stem_channels, cfg_.stage2_channels, kk, r);
    for (int i = 0; i < cfg_.stage2_asus; ++i)
      s2_.push_back(AsuBlock<T>::build(wb, "s2.asu" + std::to_string(i), cfg_.stage2_channels, kk, r));

    s3_down_ = AsuStrideBlock<T>::build(wb, "s3.down", cfg_.stage2_channels, cfg_.stage3_channels, kk, r);
    for (int i = 0; i < cfg_.stage3_asus; ++i)
      s3_lrp_.push_back(AsuBlock<T>::build(wb, "s3.asu" + std::to_string(i), cfg_.stage3_channels, kk, r));
    for (int i = 0; i < cfg_.stage3_hrp_asus; ++i)
      s3_hrp_.push_back(AsuBlock<T>::build(wb, "s3.hrp" + std::to_string(i), cfg_.stage2_channels, kk, r));
    s3_fuse_ = BiFmBlock<T>::build(wb, "s3.fuse", cfg_.stage2_channels, cfg_.stage3_channels / cfg_.stage2_channels, kk, r);

    s4_down_ = AsuStrideBlock<T>::build(wb, "s4.down", cfg_.stage3_channels, cfg_.stage4_channels, kk, r);
    for (int i = 0; i < cfg_.stage4_asus; ++i)
      s4_lrp_.push_back(AsuBlock<T>::build(wb, "s4.asu" + std::to_string(i), cfg_.stage4_channels, kk, r));
    for (int i = 0; i < cfg_.stage4_hrp_asus; ++i)
      s4_hrp_.push_back(AsuBlock<T>::build(wb, "s4.hrp" + std::to_string(i), cfg_.stage2_channels, kk, r));
    s4_fuse_ = BiFmBlock<T>::build(wb, "s4.fuse", cfg_.stage2_channels, cfg_.stage4_channels / cfg_.stage2_channels, kk, r);

    const int w = cfg_.neck_width;
    lat1_ = make_biased_conv(wb, "neck.lat1", cfg_.stage2_channels, w);
    lat2_ = make_biased_conv(wb, "neck.lat2", cfg_.stage3_channels, w);
    lat3_ = make_biased_conv(wb, "neck.lat3", cfg_.stage4_channels, w);
    neck_att_ = {kk, r, w};
    td2_ = detail::make_attention_weights(wb, "neck.td2", neck_att_);
    td1_ = detail::make_attention_weights(wb, "neck.td1", neck_att_);
    bu2_ = detail::make_attention_weights(wb, "neck.bu2", neck_att_);
    bu3_ = detail::make_attention_weights(wb, "neck.bu3", neck_att_);

    for (int s = 0; s < 3; ++s) {
      const std::string p = "head" + std::to_string(s);
      head_blocks_[s][0] = ConvBlock<T>::build(wb, p + ".cb0", w);
      head_blocks_[s][1] = ConvBlock<T>::build(wb, p + ".cb1", w);
      head_out_[s] = make_biased_conv(wb, p + ".out", w, cfg_.head_channels());
    }
  }

  const NetConfig& config() const { return cfg_; }

  // Copies values from a loaded store into the live graph, matching by name.
  void assign_weights(const WeightStore<T>& loaded) {
    for (auto& [name, tensor] : store_.entries()) {
      auto it = loaded.entries().find(name);
      if (it == loaded.entries().end()) throw FormatError("weight file is missing entry " + name);
      if (it->second.shape() != tensor.shape())
        throw FormatError("weight " + name + " has shape " + shape_str(it->second.shape()) +
                          ", expected " + shape_str(tensor.shape()));
      tensor.values() = it->second.values();
    }
    if (loaded.size() != store_.size())
      throw FormatError("weight file has " + std::to_string(loaded.size()) + " entries, expected " +
                        std::to_string(store_.size()));
  }
  WeightStore<T>& store() { return store_; }
  const WeightStore<T>& store() const { return store_; }
  std::vector<ParamRef<T>>& params() { return params_; }
  const std::vector<ParamRef<T>>& params() const { return params_; }

  std::array<Tensor<T>, 3> forward(const Tensor<T>& image, bool training = false,
                                   Taps<T>* taps = nullptr) const {
    if (image.rank() != 3 || image.dim(0) != cfg_.in_channels || image.dim(1) != cfg_.input_size ||
        image.dim(2) != cfg_.input_size)
      shape_fail("expected image [" + std::to_string(cfg_.in_channels) + "," +
                 std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) + "], got " +
                 shape_str(image.shape()));

    Tensor<T> x = check(stem_.forward(image, training), "stem");
    x = check(s2_down_.forward(x, training), "s2.down");
    for (std::size_t i = 0; i < s2_.size(); ++i)
      x = check(s2_[i].forward(x, training), "s2.asu" + std::to_string(i));

    Tensor<T> low = check(s3_down_.forward(x, training), "s3.down");
    for (std::size_t i = 0; i < s3_lrp_.size(); ++i)
      low = check(s3_lrp_[i].forward(low, training), "s3.asu" + std::to_string(i));
    Tensor<T> high = x;
    for (std::size_t i = 0; i < s3_hrp_.size(); ++i)
      high = check(s3_hrp_[i].forward(high, training), "s3.hrp" + std::to_string(i));
    auto [h3, l3] = s3_fuse_.forward(high, low, training);
    check(h3, "s3.fuse.high");
    check(l3, "s3.fuse.low");
    Tensor<T> c2 = l3;

    low = check(s4_down_.forward(l3, training), "s4.down");
    for (std::size_t i = 0; i < s4_lrp_.size(); ++i)
      low = check(s4_lrp_[i].forward(low, training), "s4.asu" + std::to_string(i));
    high = h3;
    for (std::size_t i = 0; i < s4_hrp_.size(); ++i)
      high = check(s4_hrp_[i].forward(high, training), "s4.hrp" + std::to_string(i));
    auto [c1, c3] = s4_fuse_.forward(high, low, training);
    check(c1, "s4.fuse.high");
    check(c3, "s4.fuse.low");

    Tensor<T> m1 = check(lat1_.forward(c1), "neck.lat1");
    Tensor<T> m2 = check(lat2_.forward(c2), "neck.lat2");
    Tensor<T> m3 = check(lat3_.forward(c3), "neck.lat3");
    Tensor<T> t2 = check(lccm_td_forward(m2, m3, neck_att_, td2_), "neck.td2");
    Tensor<T> t1 = check(lccm_td_forward(m1, t2, neck_att_, td1_), "neck.td1");
    Tensor<T> f1 = t1;
    Tensor<T> f2 = check(lccm_bu_forward(t2, f1, neck_att_, bu2_), "neck.bu2");
    Tensor<T> f3 = check(lccm_bu_forward(m3, f2, neck_att_, bu3_), "neck.bu3");

    if (taps) *taps = {c1, c2, c3, m1, m2, m3, f1, f2, f3};

    std::array<Tensor<T>, 3> fs = {f1, f2, f3};
    std::array<Tensor<T>, 3> out;
    for (int s = 0; s < 3; ++s) {
      Tensor<T> h = head_blocks_[s][0].forward(fs[s], training);
      h = head_blocks_[s][1].forward(h, training);
      out[s] = check(head_out_[s].forward(h), "head" + std::to_string(s));
    }
    return out;
  }

  std::uint64_t total_params() const {
    std::uint64_t n = 0;
    for (const auto& s : stats()) n += s.params;
    return n;
  }
  std::uint64_t total_macs() const {
    std::uint64_t n = 0;
    for (const auto& s : stats()) n += s.macs;
    return n;
  }

  // Analytic per-layer accounting. Totals match the runtime multiply counter
  // exactly, which the tests pin down.
  std::vector<LayerStat> stats() const {
    std::vector<LayerStat> rows;
    const int s = cfg_.input_size;
    const int s4 = s / 4, s8 = s / 8, s16 = s / 16, s32 = s / 32;
    const int c2 = cfg_.stage2_channels, c3 = cfg_.stage3_channels, c4 = cfg_.stage4_channels;

    rows.push_back({"stem", "stem", {cfg_.stem_channels, s4, s4}, stem_.params(), stem_.macs(s, s)});
    rows.push_back({"s2.down", "asu_s", {c2, s8, s8}, s2_down_.params(), s2_down_.macs(s4, s4)});
    for (std::size_t i = 0; i < s2_.size(); ++i)
      rows.push_back({"s2.asu" + std::to_string(i), "asu", {c2, s8, s8}, s2_[i].params(), s2_[i].macs(s8, s8)});

    rows.push_back({"s3.down", "asu_s", {c3, s16, s16}, s3_down_.params(), s3_down_.macs(s8, s8)});
    for (std::size_t i = 0; i < s3_lrp_.size(); ++i)
      rows.push_back({"s3.asu" + std::to_string(i), "asu", {c3, s16, s16}, s3_lrp_[i].params(), s3_lrp_[i].macs(s16, s16)});
    for (std::size_t i = 0; i < s3_hrp_.size(); ++i)
      rows.push_back({"s3.hrp" + std::to_string(i), "asu", {c2, s8, s8}, s3_hrp_[i].params(), s3_hrp_[i].macs(s8, s8)});
    rows.push_back({"s3.fuse", "bifm", {c3, s16, s16}, s3_fuse_.params(), s3_fuse_.macs(s8, s8)});

    rows.push_back({"s4.down", "asu_s", {c4, s32, s32}, s4_down_.params(), s4_down_.macs(s16, s16)});
    for (std::size_t i = 0; i < s4_lrp_.size(); ++i)
      rows.push_back({"s4.asu" + std::to_string(i), "asu", {c4, s32, s32}, s4_lrp_[i].params(), s4_lrp_[i].macs(s32, s32)});
    for (std::size_t i = 0; i < s4_hrp_.size(); ++i)
      rows.push_back({"s4.hrp" + std::to_string(i), "asu", {c2, s8, s8}, s4_hrp_[i].params(), s4_hrp_[i].macs(s8, s8)});
    rows.push_back({"s4.fuse", "bifm", {c4, s32, s32}, s4_fuse_.params(), s4_fuse_.macs(s8, s8)});

    const int w = cfg_.neck_width;
    const int hw1 = s8 * s8, hw2 = s16 * s16, hw3 = s32 * s32;
    rows.push_back({"neck.lat1", "conv1x1", {w, s8, s8}, lat1_.params(), lat1_.macs(s8, s8)});
    rows.push_back({"neck.lat2", "conv1x1", {w, s16, s16}, lat2_.params(), lat2_.macs(s16, s16)});
    rows.push_back({"neck.lat3", "conv1x1", {w, s32, s32}, lat3_.params(), lat3_.macs(s32, s32)});
    const std::uint64_t lp = lscm_param_count(w, cfg_.k, cfg_.r);
    rows.push_back({"neck.td2", "lccm_td", {w, s16, s16}, lp, lccm_macs(hw2, w, cfg_.k, cfg_.r)});
    rows.push_back({"neck.td1", "lccm_td", {w, s8, s8}, lp, lccm_macs(hw1, w, cfg_.k, cfg_.r)});
    rows.push_back({"neck.bu2", "lccm_bu", {w, s16, s16}, lp, lccm_macs(hw2, w, cfg_.k, cfg_.r)});
    rows.push_back({"neck.bu3", "lccm_bu", {w, s32, s32}, lp, lccm_macs(hw3, w, cfg_.k, cfg_.r)});

    const std::array<int, 3> hs = {s8, s16, s32};
    for (int i = 0; i < 3; ++i) {
      const std::string p = "head" + std::to_string(i);
      rows.push_back({p + ".cb0", "convblock", {w, hs[i], hs[i]}, head_blocks_[i][0].params(),
                      head_blocks_[i][0].macs(hs[i], hs[i])});
      rows.push_back({p + ".cb1", "convblock", {w, hs[i], hs[i]}, head_blocks_[i][1].params(),
                      head_blocks_[i][1].macs(hs[i], hs[i])});
      rows.push_back({p + ".out", "conv1x1", {cfg_.head_channels(), hs[i], hs[i]}, head_out_[i].params(),
                      head_out_[i].macs(hs[i], hs[i])});
    }
    return rows;
  }

  // Backbone rows in the layout of the architecture table.
  std::vector<TraceRow> trace() const {
    std::vector<TraceRow> rows;
    const int s = cfg_.input_size;
    const int c2 = cfg_.stage2_channels, c3 = cfg_.stage3_channels, c4 = cfg_.stage4_channels;
    int layer = 1;
    auto single = [&](const std::string& op, int h, int c) {
      TraceRow r;
      r.layer = layer++;
      r.lrp_op = op;
      r.lrp_shape = {h, h, c};
      rows.push_back(r);
    };
    auto dual = [&](const std::string& lop, int lh, int lc, const std::string& hop, int hh, int hc) {
      TraceRow r;
      r.layer = layer++;
      r.lrp_op = lop;
      r.lrp_shape = {lh, lh, lc};
      r.hrp_op = hop;
      r.hrp_shape = {hh, hh, hc};
      r.has_hrp = true;
      rows.push_back(r);
    };

    single("3x3 Conv, s", s / 2, cfg_.stem_channels);
    single("2x2 Maxpooling", s / 4, cfg_.stem_channels);
    single("ASU, s", s / 8, c2);
    for (int i = 0; i < cfg_.stage2_asus; ++i) single("ASU", s / 8, c2);

    dual("ASU, s", s / 16, c3, "ASU", s / 8, c2);
    const int s3_pairs = std::max(cfg_.stage3_asus, cfg_.stage3_hrp_asus - 1);
    for (int i = 0; i < s3_pairs; ++i) dual("ASU", s / 16, c3, "ASU", s / 8, c2);
    dual("Bi-FM", s / 16, c3, "Bi-FM", s / 8, c2);

    dual("ASU, s", s / 32, c4, "ASU", s / 8, c2);
    const int s4_pairs = std::max(cfg_.stage4_asus, cfg_.stage4_hrp_asus - 1);
    for (int i = 0; i < s4_pairs; ++i) dual("ASU", s / 32, c4, "ASU", s / 8, c2);
    dual("Bi-FM", s / 32, c4, "Bi-FM", s / 8, c2);
    return rows;
  }

 private:
  static Conv2dLayer<T> make_biased_conv(WeightBuilder<T>& wb, const std::string& prefix, int ci, int co) {
    Conv2dLayer<T> c;
    c.w = wb.kaiming_uniform(prefix + ".w", {co, ci, 1, 1}, ci);
    c.b = wb.constant(prefix + ".b", {co}, T(0), false);
    return c;
  }

  Tensor<T> check(Tensor<T> t, const std::string& name) const {
    if (!all_finite(t)) throw NumericError("non-finite values after layer " + name);
    return t;
  }

  NetConfig cfg_;
  WeightStore<T> store_;
  std::vector<ParamRef<T>> params_;

  StemBlock<T> stem_;
  AsuStrideBlock<T> s2_down_, s3_down_, s4_down_;
  std::vector<AsuBlock<T>> s2_, s3_lrp_, s3_hrp_, s4_lrp_, s4_hrp_;
  BiFmBlock<T> s3_fuse_, s4_fuse_;
  Conv2dLayer<T> lat1_, lat2_, lat3_;
  AttentionConfig neck_att_;
  LccmWeights<T> td2_, td1_, bu2_, bu3_;
  std::array<std::array<ConvBlock<T>, 2>, 3> head_blocks_;
  std::array<Conv2dLayer<T>, 3> head_out_;
};

// ---------------------------------------------------------------------------
// Decode / encode / NMS

inline double box_iou(const Detection& a, const Detection& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double ua = (a.x_max - a.x_min) * (a.y_max - a.y_min) +
                    (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
  return ua > 0 ? inter / ua : 0.0;
}

// Box deltas for a cell: center offsets in cell units, log-scaled size.
struct BoxDeltas {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

inline BoxDeltas encode_box(double cx, double cy, double w, double h, int i, int j, int stride) {
  return {cx / stride - j, cy / stride - i, std::log(w / stride), std::log(h / stride)};
}

inline void decode_box(const BoxDeltas& d, int i, int j, int stride, double& cx, double& cy,
                       double& w, double& h) {
  cx = (j + d.dx) * stride;
  cy = (i + d.dy) * stride;
  w = std::exp(d.dw) * stride;
  h = std::exp(d.dh) * stride;
}

template <typename T>
std::vector<Detection> decode(const std::array<Tensor<T>, 3>& heads, int num_classes,
                              double score_threshold,
                              const std::array<int, 3>& strides = {8, 16, 32}) {
  std::vector<Detection> out;
  for (int s = 0; s < 3; ++s) {
    const Tensor<T>& t = heads[s];
    if (t.rank() != 3 || t.dim(0) != num_classes + 5)
      shape_fail("decode: head " + std::to_string(s) + " has shape " + shape_str(t.shape()) +
                 ", expected " + std::to_string(num_classes + 5) + " channels");
    const int h = t.dim(1), w = t.dim(2);
    const auto& v = t.values();
    auto at = [&](int c, int i, int j) { return static_cast<double>(v[(c * h + i) * w + j]); };
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double iou_p = 1.0 / (1.0 + std::exp(-at(num_classes + 4, i, j)));
        BoxDeltas d{at(num_classes, i, j), at(num_classes + 1, i, j), at(num_classes + 2, i, j),
                    at(num_classes + 3, i, j)};
        double cx, cy, bw, bh;
        decode_box(d, i, j, strides[s], cx, cy, bw, bh);
        for (int c = 0; c < num_classes; ++c) {
          const double p = 1.0 / (1.0 + std::exp(-at(c, i, j)));
          const double score = p * iou_p;
          if (score >= score_threshold)
            out.push_back({c, score, cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2});
        }
      }
  }
  return out;
}

// Default initialization starts every gate at the neutral identity: the gate
// output projections are zero, so the gate logits are a constant vector and
// their layer norm sits at its zero-variance point. Gradient checks there are
// meaningless (the K/Q projections have exactly zero gradient, and the layer
// norm curvature blows up central differences), so before a finite-difference
// run the output projections are moved to a generic point.
template <typename T>
void randomize_gate_projections(DpNet<T>& net, std::uint64_t seed, double scale = 0.1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& p : net.params()) {
    const auto& n = p.name;
    const bool is_gate_o = n.size() > 5 && (n.compare(n.size() - 5, 5, ".sp_o") == 0 ||
                                            n.compare(n.size() - 5, 5, ".ch_o") == 0);
    if (!is_gate_o) continue;
    for (std::int64_t i = 0; i < p.tensor.size(); ++i) p.tensor.mut(i) = static_cast<T>(dist(rng));
  }
}

inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  std::vector<bool> dead(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dead[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t j = i + 1; j < dets.size(); ++j)
      if (!dead[j] && dets[j].cls == dets[i].cls && box_iou(dets[i], dets[j]) > iou_threshold)
        dead[j] = true;
  }
  return kept;
}

}  // namespace dpnet
