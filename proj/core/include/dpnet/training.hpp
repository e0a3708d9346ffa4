#pragma once

// Loss terms, SGD with warmup+cosine schedule, and a synthetic overfit
// harness that drives the full network end to end.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dpnet/network.hpp"
#include "dpnet/tensor.hpp"
#include "dpnet/weights.hpp"

namespace dpnet {

struct LossConfig {
  double alpha = 1.0;  // weight of the IoU-prediction term
  double beta = 0.5;   // weight of the box-regression term
};

struct OptimConfig {
  double base_lr = 1.5e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 0;
  int warmup_epochs = 5;
};

struct GtBox {
  int cls = 0;
  double cx = 0, cy = 0, w = 0, h = 0;  // input-pixel units
};

template <typename T>
struct LossTerms {
  Tensor<T> cls, iou, reg;
  int n_pos = 0;
};

namespace detail {

// Positive cells: for each box, the stride whose nominal object size (4*s)
// is closest to the box scale in log space, then the cell under the center.
// First box to claim a cell keeps it.
inline int best_stride_index(double w, double h, const std::array<int, 3>& strides) {
  const double s = std::sqrt(w * h);
  int best = 0;
  double best_d = 1e300;
  for (int i = 0; i < 3; ++i) {
    const double d = std::abs(std::log(s / (4.0 * strides[i])));
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

}  // namespace detail

template <typename T>
LossTerms<T> loss_terms(const std::array<Tensor<T>, 3>& heads, const std::vector<GtBox>& gts,
                        int num_classes, const std::array<int, 3>& strides = {8, 16, 32}) {
  std::array<std::map<std::pair<int, int>, const GtBox*>, 3> assigned;
  for (const GtBox& gt : gts) {
    if (gt.w <= 0 || gt.h <= 0) shape_fail("ground-truth boxes must have positive size");
    if (gt.cls < 0 || gt.cls >= num_classes) shape_fail("ground-truth class out of range");
    const int s = detail::best_stride_index(gt.w, gt.h, strides);
    const int hh = heads[s].dim(1), ww = heads[s].dim(2);
    const int i = std::clamp(static_cast<int>(gt.cy) / strides[s], 0, hh - 1);
    const int j = std::clamp(static_cast<int>(gt.cx) / strides[s], 0, ww - 1);
    assigned[s].emplace(std::make_pair(i, j), &gt);
  }
  int n_pos = 0;
  for (const auto& m : assigned) n_pos += static_cast<int>(m.size());
  const T inv_np = static_cast<T>(1.0 / std::max(1, n_pos));

  Tensor<T> l_cls = Tensor<T>::scalar(0);
  Tensor<T> l_iou = Tensor<T>::scalar(0);
  Tensor<T> l_reg = Tensor<T>::scalar(0);

  for (int s = 0; s < 3; ++s) {
    const Tensor<T>& head = heads[s];
    if (head.dim(0) != num_classes + 5)
      shape_fail("loss_terms: head " + std::to_string(s) + " has " + std::to_string(head.dim(0)) +
                 " channels, expected " + std::to_string(num_classes + 5));
    const int hh = head.dim(1), ww = head.dim(2);
    auto flat = [&](int c, int i, int j) {
      return static_cast<std::int64_t>(c) * hh * ww + static_cast<std::int64_t>(i) * ww + j;
    };

    std::vector<T> cls_targets(static_cast<std::size_t>(num_classes) * hh * ww, T(0));
    for (const auto& [cell, gt] : assigned[s])
      cls_targets[static_cast<std::size_t>(flat(gt->cls, cell.first, cell.second))] = T(1);
    l_cls = add(l_cls, sum(bce_with_logits(slice_channels(head, 0, num_classes), std::move(cls_targets))));

    if (assigned[s].empty()) continue;
    for (const auto& [cell, gt] : assigned[s]) {
      const auto [i, j] = cell;
      Tensor<T> dx = take(head, {flat(num_classes, i, j)});
      Tensor<T> dy = take(head, {flat(num_classes + 1, i, j)});
      Tensor<T> dw = take(head, {flat(num_classes + 2, i, j)});
      Tensor<T> dh = take(head, {flat(num_classes + 3, i, j)});
      const T st = static_cast<T>(strides[s]);
      Tensor<T> cx = scale(add(dx, Tensor<T>::scalar(static_cast<T>(j))), st);
      Tensor<T> cy = scale(add(dy, Tensor<T>::scalar(static_cast<T>(i))), st);
      Tensor<T> bw = scale(texp(dw), st);
      Tensor<T> bh = scale(texp(dh), st);
      Tensor<T> x1 = sub(cx, scale(bw, T(0.5)));
      Tensor<T> x2 = add(cx, scale(bw, T(0.5)));
      Tensor<T> y1 = sub(cy, scale(bh, T(0.5)));
      Tensor<T> y2 = add(cy, scale(bh, T(0.5)));
      const T gx1 = static_cast<T>(gt->cx - gt->w / 2), gx2 = static_cast<T>(gt->cx + gt->w / 2);
      const T gy1 = static_cast<T>(gt->cy - gt->h / 2), gy2 = static_cast<T>(gt->cy + gt->h / 2);
      Tensor<T> iw = relu(sub(emin(x2, Tensor<T>::scalar(gx2)), emax(x1, Tensor<T>::scalar(gx1))));
      Tensor<T> ih = relu(sub(emin(y2, Tensor<T>::scalar(gy2)), emax(y1, Tensor<T>::scalar(gy1))));
      Tensor<T> inter = mul(iw, ih);
      Tensor<T> uni = sub(add(mul(bw, bh), Tensor<T>::scalar(static_cast<T>(gt->w * gt->h))), inter);
      Tensor<T> iou = div(inter, uni);
      l_reg = add(l_reg, sub(Tensor<T>::scalar(T(1)), iou));

      // BCE against the live IoU as a soft label: bce(z, t) = softplus(z) - z*t,
      // with softplus(z) = bce(z, 0). Keeping t in the graph makes the loss
      // gradient exact under finite differences.
      Tensor<T> z = take(head, {flat(num_classes + 4, i, j)});
      Tensor<T> t_iou = emax(emin(iou, Tensor<T>::scalar(T(1))), Tensor<T>::scalar(T(0)));
      l_iou = add(l_iou, sub(bce_with_logits(z, {T(0)}), mul(z, t_iou)));
    }
  }

  LossTerms<T> terms;
  terms.cls = scale(l_cls, inv_np);
  terms.iou = scale(l_iou, inv_np);
  terms.reg = scale(l_reg, inv_np);
  terms.n_pos = n_pos;
  return terms;
}

template <typename T>
Tensor<T> total_loss(const LossTerms<T>& terms, const LossConfig& cfg) {
  return add(terms.cls, add(scale(terms.iou, static_cast<T>(cfg.alpha)),
                            scale(terms.reg, static_cast<T>(cfg.beta))));
}

inline double lr_schedule(int step, int steps_per_epoch, const OptimConfig& cfg) {
  if (step < 0 || steps_per_epoch <= 0) shape_fail("lr_schedule: invalid step or epoch size");
  const double warm = static_cast<double>(cfg.warmup_epochs) * steps_per_epoch;
  if (warm > 0 && step < warm) return cfg.base_lr * step / warm;
  const double total = static_cast<double>(cfg.epochs) * steps_per_epoch;
  const double span = std::max(1.0, total - warm);
  const double progress = std::clamp((step - warm) / span, 0.0, 1.0);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;
};

template <typename T>
void sgd_step(std::vector<ParamRef<T>>& params, SgdState<T>& state, double lr,
              const OptimConfig& cfg) {
  if (state.velocity.empty()) state.velocity.resize(params.size());
  if (state.velocity.size() != params.size())
    shape_fail("sgd_step: optimizer state does not match parameter list");
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p].tensor.values();
    auto& g = params[p].tensor.grad();
    auto& v = state.velocity[p];
    if (v.empty()) v.assign(w.size(), T(0));
    if (v.size() != w.size() || g.size() != w.size())
      shape_fail("sgd_step: shape mismatch for " + params[p].name);
    const T wd = params[p].weight_decay ? static_cast<T>(cfg.weight_decay) : T(0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = static_cast<T>(cfg.momentum) * v[i] + g[i] + wd * w[i];
      w[i] -= static_cast<T>(lr) * v[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic overfit harness

struct ToyScene {
  std::vector<float> image;  // [3,S,S]
  std::vector<GtBox> boxes;
};

inline std::vector<ToyScene> make_toy_scenes(int input_size, int num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count_dist(1, 3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int s = input_size;
  std::vector<ToyScene> scenes(4);
  for (auto& scene : scenes) {
    scene.image.assign(static_cast<std::size_t>(3) * s * s, 0.1f);
    const int n = count_dist(rng);
    for (int b = 0; b < n; ++b) {
      const double w = (0.15 + 0.35 * unit(rng)) * s;
      const double h = (0.15 + 0.35 * unit(rng)) * s;
      const double cx = w / 2 + unit(rng) * (s - w);
      const double cy = h / 2 + unit(rng) * (s - h);
      const int cls = static_cast<int>(unit(rng) * num_classes) % num_classes;
      const int x0 = std::max(0, static_cast<int>(cx - w / 2)), x1 = std::min(s, static_cast<int>(cx + w / 2));
      const int y0 = std::max(0, static_cast<int>(cy - h / 2)), y1 = std::min(s, static_cast<int>(cy + h / 2));
      for (int c = 0; c < 3; ++c) {
        const float shade = c == cls % 3 ? 0.9f : 0.35f;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) scene.image[(static_cast<std::size_t>(c) * s + y) * s + x] = shade;
      }
      scene.boxes.push_back({cls, cx, cy, w, h});
    }
  }
  return scenes;
}

struct ToyStep {
  int step = 0;
  double lr = 0, l_cls = 0, l_iou = 0, l_reg = 0, total = 0;
};

template <typename T>
std::vector<ToyStep> toy_overfit(DpNet<T>& net, int steps, const OptimConfig& ocfg_in,
                                 const LossConfig& lcfg, std::uint64_t seed) {
  const NetConfig& cfg = net.config();
  auto scenes = make_toy_scenes(cfg.input_size, cfg.num_classes, seed);
  const int steps_per_epoch = static_cast<int>(scenes.size());
  OptimConfig ocfg = ocfg_in;
  if (ocfg.epochs <= 0) ocfg.epochs = std::max(1, steps / steps_per_epoch);

  SgdState<T> state;
  std::vector<ToyStep> trace;
  for (int step = 0; step < steps; ++step) {
    const ToyScene& scene = scenes[static_cast<std::size_t>(step) % scenes.size()];
    std::vector<T> pixels(scene.image.begin(), scene.image.end());
    Tensor<T> image = Tensor<T>::from({3, cfg.input_size, cfg.input_size}, std::move(pixels));

    auto heads = net.forward(image, true);
    auto terms = loss_terms(heads, scene.boxes, cfg.num_classes);
    Tensor<T> loss = total_loss(terms, lcfg);
    if (!all_finite(loss))
      throw NumericError("non-finite loss at step " + std::to_string(step));

    for (auto& p : net.params()) p.tensor.zero_grad();
    backward(loss);
    const double lr = lr_schedule(step, steps_per_epoch, ocfg);
    sgd_step(net.params(), state, lr, ocfg);

    trace.push_back({step, lr, static_cast<double>(terms.cls[0]), static_cast<double>(terms.iou[0]),
                     static_cast<double>(terms.reg[0]), static_cast<double>(loss[0])});
  }
  return trace;
}

inline std::string trace_to_csv(const std::vector<ToyStep>& trace) {
  std::string out = "step,lr,l_cls,l_iou,l_reg,total\n";
  char buf[160];
  for (const auto& row : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.8g,%.8g,%.8g,%.8g,%.8g\n", row.step, row.lr, row.l_cls,
                  row.l_iou, row.l_reg, row.total);
    out += buf;
  }
  return out;
}

}  // namespace dpnet
