// Wall-time scaling of the gated attention block against a dense
// full-similarity reference, over square maps of side 10..80.

#include <random>

#include <benchmark/benchmark.h>

#include "dpnet/attention.hpp"
#include "dpnet/tensor.hpp"

namespace {

constexpr int kChannels = 64;
constexpr int kPool = 5;
constexpr int kReduce = 8;

dpnet::Tensor<float> random_tensor(dpnet::Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(-1.f, 1.f);
  auto t = dpnet::Tensor<float>::zeros(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

dpnet::LscmWeights<float> random_weights(std::mt19937_64& rng) {
  dpnet::LscmWeights<float> w;
  w.w_sp_k = random_tensor({kChannels, kChannels / kReduce}, rng);
  w.w_sp_q = random_tensor({kChannels, kChannels / kReduce}, rng);
  w.w_sp_o = random_tensor({kPool * kPool, 1}, rng);
  w.w_ch_k = random_tensor({kChannels, kChannels}, rng);
  w.w_ch_q = random_tensor({kChannels / kReduce, kChannels}, rng);
  w.w_ch_o = random_tensor({kChannels / kReduce, 1}, rng);
  w.ln_sp_gamma = dpnet::Tensor<float>::scalar(1);
  w.ln_sp_beta = dpnet::Tensor<float>::scalar(0);
  w.ln_ch_gamma = dpnet::Tensor<float>::scalar(1);
  w.ln_ch_beta = dpnet::Tensor<float>::scalar(0);
  return w;
}

void BM_lscm(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  std::mt19937_64 rng(3);
  auto x = random_tensor({kChannels, side, side}, rng);
  auto w = random_weights(rng);
  dpnet::AttentionConfig cfg{kPool, kReduce, kChannels};
  for (auto _ : state) benchmark::DoNotOptimize(dpnet::lscm_forward(x, cfg, w));
  state.SetComplexityN(side * side);
}
BENCHMARK(BM_lscm)->Arg(10)->Arg(20)->Arg(40)->Arg(80)->Complexity(benchmark::oN);

void BM_dense_attention(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  std::mt19937_64 rng(3);
  auto x = dpnet::chw_to_positions(random_tensor({kChannels, side, side}, rng));
  for (auto _ : state) {
    auto s = dpnet::matmul(x, dpnet::transpose2d(x));
    benchmark::DoNotOptimize(dpnet::matmul(s, x));
  }
  state.SetComplexityN(side * side);
}
BENCHMARK(BM_dense_attention)->Arg(10)->Arg(20)->Arg(40)->Arg(80)->Complexity(benchmark::oNSquared);

}  // namespace

BENCHMARK_MAIN();
