#pragma once

// Static cost accounting, closed-form attention complexity comparison, and
// an instrumented scaling benchmark (counter-measured MACs vs n = H*W).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpnet/attention.hpp"
#include "dpnet/network.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

struct ComplexityRow {
  std::string method;
  std::string formula;
  double value = 0;
};

struct BenchRow {
  int n = 0;
  std::uint64_t lscm_macs = 0;
  std::uint64_t dense_macs = 0;
  double lscm_ms = 0;
  double dense_ms = 0;
};

struct AnalysisReport {
  std::vector<LayerStat> layers;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
  std::vector<ComplexityRow> complexity;
  std::vector<BenchRow> bench;
  double lscm_slope = 0;
  double dense_slope = 0;
};

template <typename T>
AnalysisReport count_params_macs(const DpNet<T>& net) {
  AnalysisReport rep;
  rep.layers = net.stats();
  for (const auto& row : rep.layers) {
    rep.total_params += row.params;
    rep.total_macs += row.macs;
  }
  return rep;
}

inline std::vector<ComplexityRow> complexity_table2(std::int64_t n, std::int64_t c, std::int64_t k,
                                                    std::int64_t r) {
  const double nd = static_cast<double>(n), cd = static_cast<double>(c);
  const double k2 = static_cast<double>(k) * k, rd = static_cast<double>(r);
  std::vector<ComplexityRow> rows;
  rows.push_back({"non-local", "2*n^2*c", 2.0 * nd * nd * cd});
  rows.push_back({"danet", "2*n^2*c + 2*n*c^2", 2.0 * nd * nd * cd + 2.0 * nd * cd * cd});
  rows.push_back({"lscm", "n*c*(2 + k^2/r) + k^2*c^2/r", nd * cd * (2.0 + k2 / rd) + k2 * cd * cd / rd});
  return rows;
}

namespace detail {

// Plain full-similarity attention: S = X X^T (n x n), Y = S X. 2*n^2*c MACs.
template <typename T>
Tensor<T> dense_attention_reference(const Tensor<T>& x_positions) {
  Tensor<T> s = matmul(x_positions, transpose2d(x_positions));
  return matmul(s, x_positions);
}

inline double fit_loglog_slope(const std::vector<std::pair<double, double>>& pts) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (auto [x, y] : pts) {
    const double lx = std::log(x), ly = std::log(y);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double m = static_cast<double>(pts.size());
  return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

}  // namespace detail

// Runs LSCM and the dense reference at square resolutions `sides`, recording
// counter-measured MACs and wall time, then fits log(MACs) over log(n).
inline AnalysisReport scaling_bench(int c, int k, int r, const std::vector<int>& sides,
                                    std::uint64_t seed = 11) {
  if (sides.size() < 3) shape_fail("scaling bench needs at least 3 resolutions");
  AnalysisReport rep;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.f, 1.f);
  auto rand_tensor = [&](const Shape& shape) {
    Tensor<float> t = Tensor<float>::zeros(shape);
    for (auto& v : t.values()) v = dist(rng);
    return t;
  };

  AttentionConfig cfg{k, r, c};
  LscmWeights<float> w;
  w.w_sp_k = rand_tensor({c, c / r});
  w.w_sp_q = rand_tensor({c, c / r});
  w.w_sp_o = rand_tensor({k * k, 1});
  w.w_ch_k = rand_tensor({c, c});
  w.w_ch_q = rand_tensor({c / r, c});
  w.w_ch_o = rand_tensor({c / r, 1});
  w.ln_sp_gamma = Tensor<float>::scalar(1);
  w.ln_sp_beta = Tensor<float>::scalar(0);
  w.ln_ch_gamma = Tensor<float>::scalar(1);
  w.ln_ch_beta = Tensor<float>::scalar(0);

  std::vector<std::pair<double, double>> lscm_pts, dense_pts;
  for (int side : sides) {
    const int n = side * side;
    Tensor<float> x = rand_tensor({c, side, side});
    BenchRow row;
    row.n = n;

    reset_mac_counter();
    auto t0 = std::chrono::steady_clock::now();
    Tensor<float> y = lscm_forward(x, cfg, w);
    auto t1 = std::chrono::steady_clock::now();
    (void)y;
    row.lscm_macs = mac_counter();
    row.lscm_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

    Tensor<float> pos = chw_to_positions(x);
    reset_mac_counter();
    t0 = std::chrono::steady_clock::now();
    Tensor<float> z = detail::dense_attention_reference(pos);
    t1 = std::chrono::steady_clock::now();
    (void)z;
    row.dense_macs = mac_counter();
    row.dense_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    reset_mac_counter();

    // The pooled-summary projections cost a fixed amount regardless of n; the
    // scaling claim concerns the per-position cost, so the fit removes the
    // n-independent overhead (lscm_macs at n=0). Rows keep the raw counts.
    lscm_pts.push_back({double(n), double(row.lscm_macs - lscm_macs(0, c, k, r))});
    dense_pts.push_back({double(n), double(row.dense_macs)});
    rep.bench.push_back(row);
  }
  rep.lscm_slope = detail::fit_loglog_slope(lscm_pts);
  rep.dense_slope = detail::fit_loglog_slope(dense_pts);
  return rep;
}

inline nlohmann::json report_to_json(const AnalysisReport& rep) {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (const auto& row : rep.layers)
    j["layers"].push_back({{"name", row.name},
                           {"kind", row.kind},
                           {"out_shape", row.out_shape},
                           {"params", row.params},
                           {"macs", row.macs}});
  j["totals"] = {{"params", rep.total_params}, {"macs", rep.total_macs}};
  j["complexity"] = nlohmann::json::array();
  for (const auto& row : rep.complexity)
    j["complexity"].push_back({{"method", row.method}, {"formula", row.formula}, {"value", row.value}});
  j["bench"] = nlohmann::json::array();
  for (const auto& row : rep.bench)
    j["bench"].push_back({{"n", row.n},
                          {"lscm_macs", row.lscm_macs},
                          {"dense_macs", row.dense_macs},
                          {"lscm_ms", row.lscm_ms},
                          {"dense_ms", row.dense_ms}});
  if (!rep.bench.empty()) j["slopes"] = {{"lscm", rep.lscm_slope}, {"dense", rep.dense_slope}};
  return j;
}

inline AnalysisReport report_from_json(const nlohmann::json& j) {
  AnalysisReport rep;
  for (const auto& row : j.at("layers"))
    rep.layers.push_back({row.at("name"), row.at("kind"), row.at("out_shape").get<Shape>(),
                          row.at("params"), row.at("macs")});
  rep.total_params = j.at("totals").at("params");
  rep.total_macs = j.at("totals").at("macs");
  for (const auto& row : j.at("complexity"))
    rep.complexity.push_back({row.at("method"), row.at("formula"), row.at("value")});
  for (const auto& row : j.at("bench"))
    rep.bench.push_back({row.at("n"), row.at("lscm_macs"), row.at("dense_macs"), row.at("lscm_ms"),
                         row.at("dense_ms")});
  if (j.contains("slopes")) {
    rep.lscm_slope = j["slopes"].at("lscm");
    rep.dense_slope = j["slopes"].at("dense");
  }
  return rep;
}

inline std::string report_to_markdown(const AnalysisReport& rep) {
  std::ostringstream os;
  os << "| layer | kind | out shape | params | MACs |\n";
  os << "|---|---|---|---:|---:|\n";
  for (const auto& row : rep.layers) {
    os << "| " << row.name << " | " << row.kind << " | " << shape_str(row.out_shape) << " | "
       << row.params << " | " << row.macs << " |\n";
  }
  os << "| total | | | " << rep.total_params << " | " << rep.total_macs << " |\n";
  if (!rep.complexity.empty()) {
    os << "\n| method | formula | value |\n|---|---|---:|\n";
    for (const auto& row : rep.complexity)
      os << "| " << row.method << " | " << row.formula << " | " << row.value << " |\n";
  }
  return os.str();
}

}  // namespace dpnet
