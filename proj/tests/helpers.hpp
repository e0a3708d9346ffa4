#pragma once

#include <random>
#include <vector>

#include "dpnet/tensor.hpp"

namespace testutil {

inline std::vector<double> random_vec(std::size_t n, std::uint64_t seed, double lo = -1.0,
                                      double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline dpnet::Tensor<double> random_tensor(dpnet::Shape shape, std::uint64_t seed,
                                           bool requires_grad = false) {
  const auto n = static_cast<std::size_t>(dpnet::shape_numel(shape));
  return dpnet::Tensor<double>::from(std::move(shape), random_vec(n, seed), requires_grad);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
