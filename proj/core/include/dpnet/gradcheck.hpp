#pragma once

// Central finite-difference verification of reverse-mode gradients.
// Always run at double precision; f32 differences drown in rounding noise.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dpnet/tensor.hpp"

namespace dpnet {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  int probes = 0;
};

struct GradCheckReport {
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;

  bool ok() const {
    for (const auto& e : entries)
      if (e.max_rel_err > tolerance) return false;
    return true;
  }
  double worst() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
};

inline double rel_err(double g_ad, double g_fd) {
  return std::abs(g_ad - g_fd) / std::max(1e-8, std::abs(g_ad) + std::abs(g_fd));
}

// build_loss must re-evaluate the graph from the current parameter values and
// return a scalar. max_probes == 0 checks every element; otherwise a seeded
// random subset per parameter group, or with probe_largest the elements with
// the largest analytic gradients (useful in deep graphs, where a random
// element often has a gradient below what central differences can resolve).
inline GradCheckReport finite_diff_check(
    const std::function<Tensor<double>()>& build_loss,
    std::vector<std::pair<std::string, Tensor<double>>> params, double tolerance,
    double step = 1e-5, int max_probes = 0, std::uint64_t seed = 7,
    bool probe_largest = false) {
  GradCheckReport report;
  report.tolerance = tolerance;

  for (auto& [name, p] : params) p.set_requires_grad(true).zero_grad();
  Tensor<double> loss = build_loss();
  backward(loss);

  std::mt19937_64 rng(seed);
  for (auto& [name, p] : params) {
    const std::vector<double> g_ad = p.grad();
    std::vector<std::int64_t> probe_idx;
    if (max_probes <= 0 || p.size() <= max_probes) {
      probe_idx.resize(static_cast<std::size_t>(p.size()));
      for (std::int64_t i = 0; i < p.size(); ++i) probe_idx[static_cast<std::size_t>(i)] = i;
    } else if (probe_largest) {
      probe_idx.resize(static_cast<std::size_t>(p.size()));
      for (std::int64_t i = 0; i < p.size(); ++i) probe_idx[static_cast<std::size_t>(i)] = i;
      std::partial_sort(probe_idx.begin(), probe_idx.begin() + max_probes, probe_idx.end(),
                        [&](std::int64_t a, std::int64_t b) {
                          return std::abs(g_ad[static_cast<std::size_t>(a)]) >
                                 std::abs(g_ad[static_cast<std::size_t>(b)]);
                        });
      probe_idx.resize(static_cast<std::size_t>(max_probes));
    } else {
      std::uniform_int_distribution<std::int64_t> dist(0, p.size() - 1);
      for (int i = 0; i < max_probes; ++i) probe_idx.push_back(dist(rng));
    }
    GradCheckEntry entry{name, 0.0, static_cast<int>(probe_idx.size())};
    for (std::int64_t i : probe_idx) {
      const double saved = p[i];
      p.mut(i) = saved + step;
      const double lp = build_loss()[0];
      p.mut(i) = saved - step;
      const double lm = build_loss()[0];
      p.mut(i) = saved;
      const double g_fd = (lp - lm) / (2.0 * step);
      entry.max_rel_err = std::max(entry.max_rel_err, rel_err(g_ad[static_cast<std::size_t>(i)], g_fd));
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace dpnet
