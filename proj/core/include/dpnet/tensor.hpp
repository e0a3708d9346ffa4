#pragma once

// Dense tensor engine with reverse-mode autodiff.
//
// A Tensor<T> is a cheap handle onto a heap node holding row-major values,
// an optional gradient buffer, and the tape edge (parents + backward rule)
// that produced it. Forward ops are pure; backward() walks the tape in
// reverse topological order and accumulates into leaf grad buffers.
// T is float (runtime dtype) or double (verification dtype).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dpnet {

// Multiply-accumulate counter. Incremented by conv2d and matmul only;
// normalization, activation, pooling and element-wise ops count zero.
inline thread_local std::uint64_t tl_mac_counter = 0;

inline void reset_mac_counter() { tl_mac_counter = 0; }
inline std::uint64_t mac_counter() { return tl_mac_counter; }

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void shape_fail(const std::string& msg) { throw ShapeError(msg); }

template <typename T>
class Tensor {
 public:
  struct Node;
  using NodePtr = std::shared_ptr<Node>;

  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on demand, same extent as value
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward;  // scatters this->grad into parents

    std::vector<T>& ensure_grad() {
      if (grad.size() != value.size()) grad.assign(value.size(), T(0));
      return grad;
    }
  };

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    for (int d : shape)
      if (d <= 0) shape_fail("tensor dimensions must be positive, got " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->value.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
      shape_fail("value count " + std::to_string(values.size()) + " does not match shape " +
                 shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T operator[](std::int64_t i) const { return node_->value[static_cast<std::size_t>(i)]; }
  T& mut(std::int64_t i) { return node_->value[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  std::vector<T>& grad() { return node_->ensure_grad(); }
  const std::vector<T>& grad() const { return const_cast<Node&>(*node_).ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
typename Tensor<T>::NodePtr make_node(Shape shape, std::vector<T> value,
                                      std::vector<typename Tensor<T>::NodePtr> parents,
                                      std::function<void(typename Tensor<T>::Node&)> backward) {
  auto n = std::make_shared<typename Tensor<T>::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return n;
}

template <typename T>
void accumulate(typename Tensor<T>::Node& dst, std::size_t i, T v) {
  dst.ensure_grad()[i] += v;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively,
// so tensors feeding several branches receive the sum of branch gradients.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) shape_fail("backward requires a scalar loss, got " + shape_str(loss.shape()));
  using Node = typename Tensor<T>::Node;
  using NodePtr = typename Tensor<T>::NodePtr;

  // Iterative post-order DFS; each node visited once.
  std::vector<NodePtr> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  if (loss.node()->requires_grad) stack.emplace_back(loss.node(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next == 0 && seen.count(node.get())) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      NodePtr child = node->parents[next++];
      if (child->requires_grad && !seen.count(child.get())) stack.emplace_back(child, 0);
    } else {
      seen.insert(node.get());
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (n.backward) {
      n.ensure_grad();
      n.backward(n);
    }
  }
}

// ---------------------------------------------------------------------------
// Shape/view ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape shape) {
  if (shape_numel(shape) != t.size())
    shape_fail("reshape from " + shape_str(t.shape()) + " to " + shape_str(shape));
  auto p = t.node();
  auto bw = [p](typename Tensor<T>::Node& out) {
    if (!p->requires_grad) return;
    auto& g = p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  };
  return Tensor<T>(detail::make_node<T>(std::move(shape), t.values(), {p}, bw));
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& t) {
  if (t.rank() != 2) shape_fail("transpose2d expects a matrix, got " + shape_str(t.shape()));
  const int m = t.dim(0), n = t.dim(1);
  std::vector<T> out(static_cast<std::size_t>(t.size()));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = t[static_cast<std::int64_t>(i) * n + j];
  auto p = t.node();
  auto bw = [p, m, n](typename Tensor<T>::Node& out_node) {
    if (!p->requires_grad) return;
    auto& g = p->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        g[static_cast<std::size_t>(i) * n + j] += out_node.grad[static_cast<std::size_t>(j) * m + i];
  };
  return Tensor<T>(detail::make_node<T>({n, m}, std::move(out), {p}, bw));
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding)

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias, int stride, int padding, int groups = 1) {
  if (input.rank() != 3) shape_fail("conv2d input must be [C,H,W], got " + shape_str(input.shape()));
  if (weight.rank() != 4) shape_fail("conv2d weight must be [Co,Ci/g,Kh,Kw], got " + shape_str(weight.shape()));
  if (stride < 1 || padding < 0) shape_fail("conv2d stride must be >=1 and padding >=0");
  const int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int co = weight.dim(0), cig = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (groups < 1 || ci % groups != 0 || co % groups != 0)
    shape_fail("conv2d groups=" + std::to_string(groups) + " must divide Ci=" + std::to_string(ci) +
               " and Co=" + std::to_string(co));
  if (cig != ci / groups)
    shape_fail("conv2d weight expects Ci/groups=" + std::to_string(ci / groups) + " input channels, got " +
               std::to_string(cig));
  if (bias && (bias->rank() != 1 || bias->dim(0) != co))
    shape_fail("conv2d bias must be [Co]=" + std::to_string(co) + ", got " + shape_str(bias->shape()));
  const int oh = (h + 2 * padding - kh) / stride + 1;
  const int ow = (w + 2 * padding - kw) / stride + 1;
  if (h + 2 * padding < kh || w + 2 * padding < kw)
    shape_fail("conv2d kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
               " larger than padded input " + shape_str(input.shape()));

  const int copg = co / groups;
  std::vector<T> out(static_cast<std::size_t>(co) * oh * ow, T(0));
  const auto& in = input.values();
  const auto& wv = weight.values();
  for (int g = 0; g < groups; ++g) {
    for (int oc = g * copg; oc < (g + 1) * copg; ++oc) {
      const T b = bias ? (*bias)[oc] : T(0);
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (int ic = 0; ic < cig; ++ic) {
            const int c = g * cig + ic;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride - padding + kx;
                if (ix < 0 || ix >= w) continue;
                acc += static_cast<double>(in[(static_cast<std::size_t>(c) * h + iy) * w + ix]) *
                       static_cast<double>(wv[((static_cast<std::size_t>(oc) * cig + ic) * kh + ky) * kw + kx]);
              }
            }
          }
          out[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] = static_cast<T>(acc + b);
        }
      }
    }
  }
  tl_mac_counter += static_cast<std::uint64_t>(co) * oh * ow * cig * kh * kw;

  auto pin = input.node();
  auto pw = weight.node();
  std::vector<typename Tensor<T>::NodePtr> parents = {pin, pw};
  typename Tensor<T>::NodePtr pb;
  if (bias) {
    pb = bias->node();
    parents.push_back(pb);
  }
  auto bw = [pin, pw, pb, stride, padding, groups, ci, h, w, co, cig, kh, kw, oh, ow,
             copg](typename Tensor<T>::Node& out_node) {
    const auto& go = out_node.grad;
    const auto& in = pin->value;
    const auto& wv = pw->value;
    std::vector<T>* gin = pin->requires_grad ? &pin->ensure_grad() : nullptr;
    std::vector<T>* gw = pw->requires_grad ? &pw->ensure_grad() : nullptr;
    std::vector<T>* gb = (pb && pb->requires_grad) ? &pb->ensure_grad() : nullptr;
    for (int g = 0; g < groups; ++g) {
      for (int oc = g * copg; oc < (g + 1) * copg; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const T gv = go[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox];
            if (gb) (*gb)[oc] += gv;
            if (!gin && !gw) continue;
            for (int ic = 0; ic < cig; ++ic) {
              const int c = g * cig + ic;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - padding + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride - padding + kx;
                  if (ix < 0 || ix >= w) continue;
                  const std::size_t ii = (static_cast<std::size_t>(c) * h + iy) * w + ix;
                  const std::size_t wi = ((static_cast<std::size_t>(oc) * cig + ic) * kh + ky) * kw + kx;
                  if (gin) (*gin)[ii] += wv[wi] * gv;
                  if (gw) (*gw)[wi] += in[ii] * gv;
                }
              }
            }
          }
        }
      }
    }
  };
  return Tensor<T>(detail::make_node<T>({co, oh, ow}, std::move(out), std::move(parents), bw));
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolMode { kMax, kAverage, kAdaptiveAverage };

template <typename T>
Tensor<T> pool2d(const Tensor<T>& input, PoolMode mode, int window_or_target, int stride = 0) {
  if (input.rank() != 3) shape_fail("pool2d input must be [C,H,W], got " + shape_str(input.shape()));
  const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const auto& in = input.values();
  auto pin = input.node();

  if (mode == PoolMode::kAdaptiveAverage) {
    const int k = window_or_target;
    if (k < 1 || k > std::min(h, w))
      shape_fail("adaptive pool target " + std::to_string(k) + " must satisfy 1<=k<=min(H,W) for " +
                 shape_str(input.shape()));
    std::vector<T> out(static_cast<std::size_t>(c) * k * k);
    auto lo = [](int i, int extent, int k_) { return (i * extent) / k_; };
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const int y0 = lo(i, h, k), y1 = lo(i + 1, h, k);
          const int x0 = lo(j, w, k), x1 = lo(j + 1, w, k);
          double acc = 0.0;
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
              acc += static_cast<double>(in[(static_cast<std::size_t>(ch) * h + y) * w + x]);
          out[(static_cast<std::size_t>(ch) * k + i) * k + j] =
              static_cast<T>(acc / ((y1 - y0) * (x1 - x0)));
        }
    auto bw = [pin, c, h, w, k, lo](typename Tensor<T>::Node& out_node) {
      if (!pin->requires_grad) return;
      auto& g = pin->ensure_grad();
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            const int y0 = lo(i, h, k), y1 = lo(i + 1, h, k);
            const int x0 = lo(j, w, k), x1 = lo(j + 1, w, k);
            const T gv = out_node.grad[(static_cast<std::size_t>(ch) * k + i) * k + j] /
                         static_cast<T>((y1 - y0) * (x1 - x0));
            for (int y = y0; y < y1; ++y)
              for (int x = x0; x < x1; ++x) g[(static_cast<std::size_t>(ch) * h + y) * w + x] += gv;
          }
    };
    return Tensor<T>(detail::make_node<T>({c, k, k}, std::move(out), {pin}, bw));
  }

  const int win = window_or_target;
  const int s = stride > 0 ? stride : win;
  if (win > h || win > w)
    shape_fail("pool window " + std::to_string(win) + " larger than input " + shape_str(input.shape()));
  const int oh = (h - win) / s + 1;
  const int ow = (w - win) / s + 1;
  std::vector<T> out(static_cast<std::size_t>(c) * oh * ow);

  if (mode == PoolMode::kMax) {
    // Remember winning input index; ties go to the first maximal element.
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_i = 0;
          for (int ky = 0; ky < win; ++ky)
            for (int kx = 0; kx < win; ++kx) {
              const std::size_t ii =
                  (static_cast<std::size_t>(ch) * h + oy * s + ky) * w + ox * s + kx;
              if (in[ii] > best) {
                best = in[ii];
                best_i = ii;
              }
            }
          const std::size_t oi = (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
          out[oi] = best;
          (*argmax)[oi] = best_i;
        }
    auto bw = [pin, argmax](typename Tensor<T>::Node& out_node) {
      if (!pin->requires_grad) return;
      auto& g = pin->ensure_grad();
      for (std::size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += out_node.grad[i];
    };
    return Tensor<T>(detail::make_node<T>({c, oh, ow}, std::move(out), {pin}, bw));
  }

  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (int ky = 0; ky < win; ++ky)
          for (int kx = 0; kx < win; ++kx)
            acc += static_cast<double>(
                in[(static_cast<std::size_t>(ch) * h + oy * s + ky) * w + ox * s + kx]);
        out[(static_cast<std::size_t>(ch) * oh + oy) * ow + ox] = static_cast<T>(acc / (win * win));
      }
  auto bw = [pin, c, h, w, win, s, oh, ow](typename Tensor<T>::Node& out_node) {
    if (!pin->requires_grad) return;
    auto& g = pin->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const T gv = out_node.grad[(static_cast<std::size_t>(ch) * oh + oy) * ow + ox] /
                       static_cast<T>(win * win);
          for (int ky = 0; ky < win; ++ky)
            for (int kx = 0; kx < win; ++kx)
              g[(static_cast<std::size_t>(ch) * h + oy * s + ky) * w + ox * s + kx] += gv;
        }
  };
  return Tensor<T>(detail::make_node<T>({c, oh, ow}, std::move(out), {pin}, bw));
}

// ---------------------------------------------------------------------------
// Resampling: nearest-neighbor x2 up, 2x2-average down

enum class ResampleMode { kUp2, kDown2 };

template <typename T>
Tensor<T> resample2d(const Tensor<T>& input, ResampleMode mode) {
  if (input.rank() != 3) shape_fail("resample2d input must be [C,H,W], got " + shape_str(input.shape()));
  const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const auto& in = input.values();
  auto pin = input.node();

  if (mode == ResampleMode::kUp2) {
    const int oh = 2 * h, ow = 2 * w;
    std::vector<T> out(static_cast<std::size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
          out[(static_cast<std::size_t>(ch) * oh + y) * ow + x] =
              in[(static_cast<std::size_t>(ch) * h + y / 2) * w + x / 2];
    auto bw = [pin, c, h, w, oh, ow](typename Tensor<T>::Node& out_node) {
      if (!pin->requires_grad) return;
      auto& g = pin->ensure_grad();
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x)
            g[(static_cast<std::size_t>(ch) * h + y / 2) * w + x / 2] +=
                out_node.grad[(static_cast<std::size_t>(ch) * oh + y) * ow + x];
    };
    return Tensor<T>(detail::make_node<T>({c, oh, ow}, std::move(out), {pin}, bw));
  }

  if (h % 2 != 0 || w % 2 != 0)
    shape_fail("down2 requires even H and W, got " + shape_str(input.shape()));
  return pool2d(input, PoolMode::kAverage, 2, 2);
}

// ---------------------------------------------------------------------------
// Matrix product (f64 accumulation for both dtypes)

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_fail("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), p = a.dim(1), q = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m) * q, T(0));
  {
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> row(static_cast<std::size_t>(q));
    for (int i = 0; i < m; ++i) {
      std::fill(row.begin(), row.end(), 0.0);
      for (int k = 0; k < p; ++k) {
        const double av_ik = static_cast<double>(av[static_cast<std::size_t>(i) * p + k]);
        const std::size_t boff = static_cast<std::size_t>(k) * q;
        for (int j = 0; j < q; ++j) row[j] += av_ik * static_cast<double>(bv[boff + j]);
      }
      for (int j = 0; j < q; ++j) out[static_cast<std::size_t>(i) * q + j] = static_cast<T>(row[j]);
    }
  }
  tl_mac_counter += static_cast<std::uint64_t>(m) * p * q;

  auto pa = a.node();
  auto pb = b.node();
  auto bw = [pa, pb, m, p, q](typename Tensor<T>::Node& out_node) {
    const auto& go = out_node.grad;
    if (pa->requires_grad) {
      auto& ga = pa->ensure_grad();
      const auto& bv = pb->value;
      for (int i = 0; i < m; ++i)
        for (int k = 0; k < p; ++k) {
          double acc = 0.0;
          for (int j = 0; j < q; ++j)
            acc += static_cast<double>(go[static_cast<std::size_t>(i) * q + j]) *
                   static_cast<double>(bv[static_cast<std::size_t>(k) * q + j]);
          ga[static_cast<std::size_t>(i) * p + k] += static_cast<T>(acc);
        }
    }
    if (pb->requires_grad) {
      auto& gb = pb->ensure_grad();
      const auto& av = pa->value;
      for (int k = 0; k < p; ++k)
        for (int j = 0; j < q; ++j) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i)
            acc += static_cast<double>(av[static_cast<std::size_t>(i) * p + k]) *
                   static_cast<double>(go[static_cast<std::size_t>(i) * q + j]);
          gb[static_cast<std::size_t>(k) * q + j] += static_cast<T>(acc);
        }
    }
  };
  return Tensor<T>(detail::make_node<T>({m, q}, std::move(out), {pa, pb}, bw));
}

// ---------------------------------------------------------------------------
// Element-wise binary ops with numpy-style broadcasting

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      shape_fail("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides mapping a flat index in the broadcast output to a flat index in the
// operand (stride 0 along broadcast axes).
inline std::vector<std::int64_t> broadcast_strides(const Shape& operand, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t s = 1;
  for (std::size_t i = operand.size(); i-- > 0;) {
    const std::size_t oi = i + (out.size() - operand.size());
    strides[oi] = operand[i] == 1 ? 0 : s;
    s *= operand[i];
  }
  return strides;
}

struct BroadcastIter {
  Shape out_shape;
  std::vector<std::int64_t> sa, sb;
  template <typename Fn>
  void for_each(Fn&& fn) const {
    const std::int64_t n = shape_numel(out_shape);
    std::vector<int> idx(out_shape.size(), 0);
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t ia = 0, ib = 0;
      for (std::size_t d = 0; d < idx.size(); ++d) {
        ia += idx[d] * sa[d];
        ib += idx[d] * sb[d];
      }
      fn(i, ia, ib);
      for (std::size_t d = idx.size(); d-- > 0;) {
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
      }
    }
  }
};

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> binary_broadcast(const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd, BwdFn bwd) {
  BroadcastIter it;
  it.out_shape = broadcast_shape(a.shape(), b.shape());
  it.sa = broadcast_strides(a.shape(), it.out_shape);
  it.sb = broadcast_strides(b.shape(), it.out_shape);
  std::vector<T> out(static_cast<std::size_t>(shape_numel(it.out_shape)));
  const auto& av = a.values();
  const auto& bv = b.values();
  it.for_each([&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
    out[static_cast<std::size_t>(i)] = fwd(av[static_cast<std::size_t>(ia)], bv[static_cast<std::size_t>(ib)]);
  });
  auto pa = a.node();
  auto pb = b.node();
  auto back = [pa, pb, it, bwd](typename Tensor<T>::Node& out_node) {
    std::vector<T>* ga = pa->requires_grad ? &pa->ensure_grad() : nullptr;
    std::vector<T>* gb = pb->requires_grad ? &pb->ensure_grad() : nullptr;
    if (!ga && !gb) return;
    it.for_each([&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
      const T go = out_node.grad[static_cast<std::size_t>(i)];
      T da, db;
      bwd(pa->value[static_cast<std::size_t>(ia)], pb->value[static_cast<std::size_t>(ib)], da, db);
      if (ga) (*ga)[static_cast<std::size_t>(ia)] += da * go;
      if (gb) (*gb)[static_cast<std::size_t>(ib)] += db * go;
    });
  };
  return Tensor<T>(detail::make_node<T>(it.out_shape, std::move(out), {pa, pb}, back));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast<T>(
      a, b, [](T x, T y) { return x + y; },
      [](T, T, T& da, T& db) {
        da = T(1);
        db = T(1);
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast<T>(
      a, b, [](T x, T y) { return x - y; },
      [](T, T, T& da, T& db) {
        da = T(1);
        db = T(-1);
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast<T>(
      a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T& da, T& db) {
        da = y;
        db = x;
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast<T>(
      a, b, [](T x, T y) { return x / y; },
      [](T x, T y, T& da, T& db) {
        da = T(1) / y;
        db = -x / (y * y);
      });
}

// Ties route the gradient to the first operand.
template <typename T>
Tensor<T> emin(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast<T>(
      a, b, [](T x, T y) { return x <= y ? x : y; },
      [](T x, T y, T& da, T& db) {
        da = x <= y ? T(1) : T(0);
        db = x <= y ? T(0) : T(1);
      });
}

template <typename T>
Tensor<T> emax(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast<T>(
      a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T& da, T& db) {
        da = x >= y ? T(1) : T(0);
        db = x >= y ? T(0) : T(1);
      });
}

// ---------------------------------------------------------------------------
// Unary element-wise ops

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary(const Tensor<T>& a, FwdFn fwd, BwdFn bwd) {
  std::vector<T> out(static_cast<std::size_t>(a.size()));
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  auto pa = a.node();
  auto back = [pa, bwd](typename Tensor<T>::Node& out_node) {
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += bwd(pa->value[i], out_node.value[i]) * out_node.grad[i];
  };
  return Tensor<T>(detail::make_node<T>(a.shape(), std::move(out), {pa}, back));
}

}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> texp(const Tensor<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::unary<T>(
      a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

// ---------------------------------------------------------------------------
// Normalization

// Layer normalization over all elements of the tensor, scalar affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (eps <= T(0)) shape_fail("layer_norm eps must be positive");
  if (gamma.size() != 1 || beta.size() != 1)
    shape_fail("layer_norm affine must be scalar, got " + shape_str(gamma.shape()) + " / " +
               shape_str(beta.shape()));
  const std::int64_t n = x.size();
  const auto& xv = x.values();
  double mean = 0.0;
  for (T v : xv) mean += static_cast<double>(v);
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (T v : xv) {
    const double d = static_cast<double>(v) - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double inv_std = 1.0 / std::sqrt(var + static_cast<double>(eps));
  const T g = gamma[0], b = beta[0];
  std::vector<T> out(static_cast<std::size_t>(n));
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*xhat)[i] = static_cast<T>((static_cast<double>(xv[i]) - mean) * inv_std);
    out[i] = g * (*xhat)[i] + b;
  }
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  auto bw = [px, pg, pb, xhat, inv_std, n](typename Tensor<T>::Node& out_node) {
    const auto& go = out_node.grad;
    if (pg->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < go.size(); ++i)
        acc += static_cast<double>(go[i]) * static_cast<double>((*xhat)[i]);
      pg->ensure_grad()[0] += static_cast<T>(acc);
    }
    if (pb->requires_grad) {
      double acc = 0.0;
      for (T v : go) acc += static_cast<double>(v);
      pb->ensure_grad()[0] += static_cast<T>(acc);
    }
    if (px->requires_grad) {
      const double g = static_cast<double>(pg->value[0]);
      double sum_go = 0.0, sum_go_xhat = 0.0;
      for (std::size_t i = 0; i < go.size(); ++i) {
        sum_go += static_cast<double>(go[i]);
        sum_go_xhat += static_cast<double>(go[i]) * static_cast<double>((*xhat)[i]);
      }
      auto& gx = px->ensure_grad();
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double xh = static_cast<double>((*xhat)[i]);
        gx[i] += static_cast<T>(g * inv_std *
                                (static_cast<double>(go[i]) - inv_n * sum_go - xh * inv_n * sum_go_xhat));
      }
    }
  };
  return Tensor<T>(detail::make_node<T>(x.shape(), std::move(out), {px, pg, pb}, bw));
}

// Per-channel batch normalization on a [C,H,W] map. Training mode normalizes
// by batch statistics and updates the running buffers in place (momentum on
// the running value); inference mode reads the running buffers.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, T eps, T momentum,
                     bool training) {
  if (eps <= T(0)) shape_fail("batch_norm eps must be positive");
  if (x.rank() != 3) shape_fail("batch_norm input must be [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  if (gamma.dim(0) != c || beta.dim(0) != c || running_mean.dim(0) != c || running_var.dim(0) != c)
    shape_fail("batch_norm affine/stat extent must equal C=" + std::to_string(c));

  const auto& xv = x.values();
  std::vector<double> mean(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      double m = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) m += static_cast<double>(xv[static_cast<std::size_t>(ch) * hw + i]);
      m /= static_cast<double>(hw);
      double v = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) {
        const double d = static_cast<double>(xv[static_cast<std::size_t>(ch) * hw + i]) - m;
        v += d * d;
      }
      v /= static_cast<double>(hw);
      mean[static_cast<std::size_t>(ch)] = m;
      var[static_cast<std::size_t>(ch)] = v;
      running_mean.mut(ch) = momentum * running_mean[ch] + (T(1) - momentum) * static_cast<T>(m);
      running_var.mut(ch) = momentum * running_var[ch] + (T(1) - momentum) * static_cast<T>(v);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[static_cast<std::size_t>(ch)] = static_cast<double>(running_mean[ch]);
      var[static_cast<std::size_t>(ch)] = static_cast<double>(running_var[ch]);
    }
  }

  std::vector<T> out(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  for (int ch = 0; ch < c; ++ch) {
    const double is = 1.0 / std::sqrt(var[static_cast<std::size_t>(ch)] + static_cast<double>(eps));
    (*inv_std)[static_cast<std::size_t>(ch)] = is;
    const T g = gamma[ch], b = beta[ch];
    for (std::int64_t i = 0; i < hw; ++i) {
      const std::size_t ii = static_cast<std::size_t>(ch) * hw + i;
      (*xhat)[ii] = static_cast<T>((static_cast<double>(xv[ii]) - mean[static_cast<std::size_t>(ch)]) * is);
      out[ii] = g * (*xhat)[ii] + b;
    }
  }

  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  auto bw = [px, pg, pb, xhat, inv_std, c, hw, training](typename Tensor<T>::Node& out_node) {
    const auto& go = out_node.grad;
    for (int ch = 0; ch < c; ++ch) {
      double sum_go = 0.0, sum_go_xhat = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) {
        const std::size_t ii = static_cast<std::size_t>(ch) * hw + i;
        sum_go += static_cast<double>(go[ii]);
        sum_go_xhat += static_cast<double>(go[ii]) * static_cast<double>((*xhat)[ii]);
      }
      if (pg->requires_grad) pg->ensure_grad()[static_cast<std::size_t>(ch)] += static_cast<T>(sum_go_xhat);
      if (pb->requires_grad) pb->ensure_grad()[static_cast<std::size_t>(ch)] += static_cast<T>(sum_go);
      if (px->requires_grad) {
        auto& gx = px->ensure_grad();
        const double g = static_cast<double>(pg->value[static_cast<std::size_t>(ch)]);
        const double is = (*inv_std)[static_cast<std::size_t>(ch)];
        const double inv_n = 1.0 / static_cast<double>(hw);
        for (std::int64_t i = 0; i < hw; ++i) {
          const std::size_t ii = static_cast<std::size_t>(ch) * hw + i;
          if (training) {
            const double xh = static_cast<double>((*xhat)[ii]);
            gx[ii] += static_cast<T>(
                g * is * (static_cast<double>(go[ii]) - inv_n * sum_go - xh * inv_n * sum_go_xhat));
          } else {
            gx[ii] += static_cast<T>(g * is * static_cast<double>(go[ii]));
          }
        }
      }
    }
  };
  return Tensor<T>(detail::make_node<T>(x.shape(), std::move(out), {px, pg, pb}, bw));
}

// ---------------------------------------------------------------------------
// Channel permutation / split / concat

template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, int groups) {
  if (x.rank() != 3) shape_fail("channel_shuffle input must be [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0);
  if (groups < 1 || c % groups != 0)
    shape_fail("channel_shuffle groups=" + std::to_string(groups) + " must divide C=" + std::to_string(c));
  const int m = c / groups;
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  std::vector<T> out(static_cast<std::size_t>(x.size()));
  const auto& in = x.values();
  // reshape (g, m) -> transpose -> flatten: input channel a*m+b lands at b*g+a
  auto perm = std::make_shared<std::vector<int>>(static_cast<std::size_t>(c));
  for (int a = 0; a < groups; ++a)
    for (int b = 0; b < m; ++b) (*perm)[static_cast<std::size_t>(b) * groups + a] = a * m + b;
  for (int oc = 0; oc < c; ++oc)
    std::copy_n(in.begin() + static_cast<std::size_t>((*perm)[oc]) * hw, hw,
                out.begin() + static_cast<std::size_t>(oc) * hw);
  auto px = x.node();
  auto bw = [px, perm, c, hw](typename Tensor<T>::Node& out_node) {
    if (!px->requires_grad) return;
    auto& g = px->ensure_grad();
    for (int oc = 0; oc < c; ++oc)
      for (std::int64_t i = 0; i < hw; ++i)
        g[static_cast<std::size_t>((*perm)[oc]) * hw + i] +=
            out_node.grad[static_cast<std::size_t>(oc) * hw + i];
  };
  return Tensor<T>(detail::make_node<T>(x.shape(), std::move(out), {px}, bw));
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  if (x.rank() != 3) shape_fail("slice_channels input must be [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0);
  if (c0 < 0 || c1 <= c0 || c1 > c)
    shape_fail("slice_channels [" + std::to_string(c0) + "," + std::to_string(c1) + ") out of range for C=" +
               std::to_string(c));
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  std::vector<T> out(static_cast<std::size_t>((c1 - c0) * hw));
  std::copy_n(x.values().begin() + static_cast<std::size_t>(c0) * hw, out.size(), out.begin());
  auto px = x.node();
  auto bw = [px, c0, hw](typename Tensor<T>::Node& out_node) {
    if (!px->requires_grad) return;
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < out_node.grad.size(); ++i)
      g[static_cast<std::size_t>(c0) * hw + i] += out_node.grad[i];
  };
  return Tensor<T>(detail::make_node<T>({c1 - c0, x.dim(1), x.dim(2)}, std::move(out), {px}, bw));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x) {
  if (x.rank() != 3) shape_fail("split_channels input must be [C,H,W], got " + shape_str(x.shape()));
  if (x.dim(0) % 2 != 0) shape_fail("split_channels requires even C, got " + std::to_string(x.dim(0)));
  const int half = x.dim(0) / 2;
  return {slice_channels(x, 0, half), slice_channels(x, half, x.dim(0))};
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    shape_fail("concat_channels spatial mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(a.size() + b.size()));
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  auto pa = a.node();
  auto pb = b.node();
  const std::size_t na = static_cast<std::size_t>(a.size());
  auto bw = [pa, pb, na](typename Tensor<T>::Node& out_node) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out_node.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out_node.grad[na + i];
    }
  };
  return Tensor<T>(detail::make_node<T>({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out),
                                        {pa, pb}, bw));
}

// ---------------------------------------------------------------------------
// Reductions / gathers / losses

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += static_cast<double>(v);
  auto px = x.node();
  auto bw = [px](typename Tensor<T>::Node& out_node) {
    if (!px->requires_grad) return;
    auto& g = px->ensure_grad();
    for (auto& v : g) v += out_node.grad[0];
  };
  return Tensor<T>(detail::make_node<T>({1}, {static_cast<T>(acc)}, {px}, bw));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), static_cast<T>(1.0 / static_cast<double>(x.size())));
}

template <typename T>
Tensor<T> take(const Tensor<T>& x, std::vector<std::int64_t> indices) {
  std::vector<T> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= x.size())
      shape_fail("take index " + std::to_string(indices[i]) + " out of range for " + shape_str(x.shape()));
    out[i] = x[indices[i]];
  }
  auto px = x.node();
  auto idx = std::make_shared<std::vector<std::int64_t>>(std::move(indices));
  auto bw = [px, idx](typename Tensor<T>::Node& out_node) {
    if (!px->requires_grad) return;
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < idx->size(); ++i)
      g[static_cast<std::size_t>((*idx)[i])] += out_node.grad[i];
  };
  const int n_out = static_cast<int>(out.size());
  return Tensor<T>(detail::make_node<T>({n_out}, std::move(out), {px}, bw));
}

// Numerically stable binary cross-entropy on logits; targets are constants.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::vector<T> targets) {
  if (static_cast<std::int64_t>(targets.size()) != logits.size())
    shape_fail("bce_with_logits target count mismatch for " + shape_str(logits.shape()));
  const auto& z = logits.values();
  std::vector<T> out(z.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = static_cast<double>(z[i]);
    const double t = static_cast<double>(targets[i]);
    out[i] = static_cast<T>(std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x))));
  }
  auto px = logits.node();
  auto tgt = std::make_shared<std::vector<T>>(std::move(targets));
  auto bw = [px, tgt](typename Tensor<T>::Node& out_node) {
    if (!px->requires_grad) return;
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(px->value[i])));
      g[i] += static_cast<T>((s - static_cast<double>((*tgt)[i]))) * out_node.grad[i];
    }
  };
  return Tensor<T>(detail::make_node<T>(logits.shape(), std::move(out), {px}, bw));
}

// Copy the values into a fresh constant leaf (cuts the tape).
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return Tensor<T>::from(x.shape(), x.values(), false);
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
  for (T v : x.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// Flatten a [C,H,W] map into the row-per-position matrix [HW, C].
template <typename T>
Tensor<T> chw_to_positions(const Tensor<T>& f) {
  if (f.rank() != 3) shape_fail("chw_to_positions input must be [C,H,W], got " + shape_str(f.shape()));
  return transpose2d(reshape(f, {f.dim(0), f.dim(1) * f.dim(2)}));
}

template <typename T>
Tensor<T> positions_to_chw(const Tensor<T>& x, int c, int h, int w) {
  return reshape(transpose2d(x), {c, h, w});
}

}  // namespace dpnet
