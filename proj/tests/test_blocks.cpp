#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dpnet/blocks.hpp"
#include "dpnet/gradcheck.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace dpnet;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

struct Built {
  WeightStore<double> store;
  std::vector<ParamRef<double>> params;
};

// runs a ConvBn through the loop oracle, pulling weights out of the store
oracle::Vec oracle_conv_bn(const WeightStore<double>& store, const std::string& prefix,
                           const oracle::Vec& x, int ci, int& h, int& w, int k, int stride, int pad,
                           int groups, bool act) {
  const auto& wt = store.at(prefix + ".w");
  const int co = wt.dim(0);
  auto conv = oracle::conv2d(x, ci, h, w, wt.values(), co, k, k, {}, stride, pad, groups);
  auto y = oracle::batch_norm_train(conv.data, co, conv.h * conv.w,
                                    store.at(prefix + ".bn.g").values(),
                                    store.at(prefix + ".bn.b").values(), 1e-5);
  if (act)
    for (double& v : y) v = std::max(0.0, v);
  h = conv.h;
  w = conv.w;
  return y;
}

oracle::AttentionWeights oracle_attention(const WeightStore<double>& store,
                                          const std::string& prefix) {
  oracle::AttentionWeights o;
  o.w_sp_k = store.at(prefix + ".sp_k").values();
  o.w_sp_q = store.at(prefix + ".sp_q").values();
  o.w_sp_o = store.at(prefix + ".sp_o").values();
  o.w_ch_k = store.at(prefix + ".ch_k").values();
  o.w_ch_q = store.at(prefix + ".ch_q").values();
  o.w_ch_o = store.at(prefix + ".ch_o").values();
  o.ln_sp_gamma = store.at(prefix + ".ln_sp.g")[0];
  o.ln_sp_beta = store.at(prefix + ".ln_sp.b")[0];
  o.ln_ch_gamma = store.at(prefix + ".ln_ch.g")[0];
  o.ln_ch_beta = store.at(prefix + ".ln_ch.b")[0];
  return o;
}

// output projections default to zero; randomize them so the oracle comparison
// exercises the full dataflow
void randomize(WeightStore<double>& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-0.8, 0.8);
  for (auto& [name, t] : store.entries()) {
    if (name.ends_with(".rm") || name.ends_with(".rv")) continue;
    for (int i = 0; i < t.size(); ++i) t.mut(i) = dist(rng);
  }
}

}  // namespace

TEST_CASE("stem block matches conv-bn-relu-maxpool oracle") {
  Built b;
  WeightBuilder<double> wb(b.store, 3, &b.params);
  auto stem = StemBlock<double>::build(wb, "stem", 3, 8);
  randomize(b.store, 77);

  auto img = random_tensor({3, 16, 12}, 500);
  auto y = stem.forward(img, true);
  REQUIRE(y.shape() == Shape{8, 4, 3});

  int h = 16, w = 12;
  auto ref = oracle_conv_bn(b.store, "stem.conv", img.values(), 3, h, w, 3, 2, 1, 1, true);
  ref = oracle::maxpool2(ref, 8, h, w);
  CHECK(max_abs_diff(y.values(), ref) < 1e-12);

  reset_mac_counter();
  (void)stem.forward(img, false);
  CHECK(mac_counter() == stem.macs(16, 12));

  CHECK_THROWS_AS(stem.forward(random_tensor({3, 10, 12}, 501), true), ShapeError);
}

TEST_CASE("shuffle unit matches the composed oracle") {
  const int c = 8, h = 4, w = 5, k = 2, r = 2;
  Built b;
  WeightBuilder<double> wb(b.store, 4, &b.params);
  auto asu = AsuBlock<double>::build(wb, "asu", c, k, r);
  randomize(b.store, 78);

  auto x = random_tensor({c, h, w}, 510);
  auto y = asu.forward(x, true);
  REQUIRE(y.shape() == Shape{c, h, w});

  const int half = c / 2, hw = h * w;
  oracle::Vec identity(x.values().begin(), x.values().begin() + half * hw);
  oracle::Vec transform(x.values().begin() + half * hw, x.values().end());
  int th = h, tw = w;
  auto t = oracle_conv_bn(b.store, "asu.pw1", transform, half, th, tw, 1, 1, 0, 1, true);
  t = oracle_conv_bn(b.store, "asu.dw", t, half, th, tw, 5, 1, 2, half, false);
  t = oracle::lscm(t, half, th, tw, k, r, oracle_attention(b.store, "asu.lscm"), kAttentionLnEps);
  t = oracle_conv_bn(b.store, "asu.pw2", t, half, th, tw, 1, 1, 0, 1, true);
  oracle::Vec cat = identity;
  cat.insert(cat.end(), t.begin(), t.end());
  auto ref = oracle::channel_shuffle(cat, c, hw, 2);
  CHECK(max_abs_diff(y.values(), ref) < 1e-10);

  reset_mac_counter();
  (void)asu.forward(x, false);
  CHECK(mac_counter() == asu.macs(h, w));

  std::uint64_t stored = 0;
  for (const auto& p : b.params) stored += p.tensor.size();
  CHECK(stored == asu.params());
}

TEST_CASE("stride unit halves resolution and doubles channels across a stage") {
  const int k = 2, r = 2;
  Built b;
  WeightBuilder<double> wb(b.store, 5, &b.params);
  auto down = AsuStrideBlock<double>::build(wb, "down", 8, 16, k, r);
  randomize(b.store, 79);

  auto x = random_tensor({8, 12, 8}, 520);
  auto y = down.forward(x, true);
  REQUIRE(y.shape() == Shape{16, 6, 4});

  reset_mac_counter();
  (void)down.forward(x, false);
  CHECK(mac_counter() == down.macs(12, 8));

  std::uint64_t stored = 0;
  for (const auto& p : b.params) stored += p.tensor.size();
  CHECK(stored == down.params());

  CHECK_THROWS_AS(down.forward(random_tensor({8, 9, 8}, 521), true), ShapeError);
}

TEST_CASE("fusion bridge with zero cross kernels is an exact identity") {
  for (int n : {2, 4}) {
    CAPTURE(n);
    Built b;
    WeightBuilder<double> wb(b.store, 6, &b.params);
    auto fm = BiFmBlock<double>::build(wb, "fm", 8, n, 2, 2);
    // kernels stay at their build-time values except the cross convs, zeroed here
    for (auto& [name, t] : b.store.entries()) {
      if (name.ends_with(".w"))
        for (int i = 0; i < t.size(); ++i) t.mut(i) = 0.0;
    }

    auto f_high = random_tensor({8, 8, 8}, 530 + n);
    auto f_low = random_tensor({8 * n, 8 / n, 8 / n}, 540 + n);
    auto [high_out, low_out] = fm.forward(f_high, f_low, false);
    CHECK(max_abs_diff(high_out.values(), f_high.values()) == 0.0);
    CHECK(max_abs_diff(low_out.values(), f_low.values()) == 0.0);
  }
}

TEST_CASE("fusion bridge shapes, counts, and dataflow") {
  Built b;
  WeightBuilder<double> wb(b.store, 7, &b.params);
  auto fm = BiFmBlock<double>::build(wb, "fm", 4, 4, 2, 2);
  randomize(b.store, 80);

  auto f_high = random_tensor({4, 8, 8}, 550);
  auto f_low = random_tensor({16, 2, 2}, 551);
  auto [high_out, low_out] = fm.forward(f_high, f_low, true);
  REQUIRE(high_out.shape() == f_high.shape());
  REQUIRE(low_out.shape() == f_low.shape());

  // low->high path: 1x1 conv+BN then two nearest 2x upsamples, added to f_high
  int h = 2, w = 2;
  auto up = oracle_conv_bn(b.store, "fm.l2h", f_low.values(), 16, h, w, 1, 1, 0, 1, false);
  up = oracle::upsample2(up, 4, 2, 2);
  up = oracle::upsample2(up, 4, 4, 4);
  for (std::size_t i = 0; i < up.size(); ++i) up[i] += f_high[static_cast<int>(i)];
  CHECK(max_abs_diff(high_out.values(), up) < 1e-12);

  // high->low path: two depth-wise stride-2 stages with channel multiplier 2
  h = 8;
  w = 8;
  auto dn = oracle_conv_bn(b.store, "fm.h2l0", f_high.values(), 4, h, w, 5, 2, 2, 4, false);
  dn = oracle_conv_bn(b.store, "fm.h2l1", dn, 8, h, w, 5, 2, 2, 8, false);
  for (std::size_t i = 0; i < dn.size(); ++i) dn[i] += f_low[static_cast<int>(i)];
  CHECK(max_abs_diff(low_out.values(), dn) < 1e-12);

  reset_mac_counter();
  (void)fm.forward(f_high, f_low, false);
  CHECK(mac_counter() == fm.macs(8, 8));

  CHECK_THROWS_AS(fm.forward(f_high, random_tensor({8, 2, 2}, 552), true), ShapeError);
}

TEST_CASE("conv block matches its oracle and counts") {
  Built b;
  WeightBuilder<double> wb(b.store, 8, &b.params);
  auto cb = ConvBlock<double>::build(wb, "cb", 6);
  randomize(b.store, 81);

  auto x = random_tensor({6, 5, 7}, 560);
  auto y = cb.forward(x, true);
  REQUIRE(y.shape() == x.shape());

  int h = 5, w = 7;
  auto ref = oracle_conv_bn(b.store, "cb.dw", x.values(), 6, h, w, 5, 1, 2, 6, false);
  ref = oracle_conv_bn(b.store, "cb.pw", ref, 6, h, w, 1, 1, 0, 1, true);
  CHECK(max_abs_diff(y.values(), ref) < 1e-12);

  reset_mac_counter();
  (void)cb.forward(x, false);
  CHECK(mac_counter() == cb.macs(5, 7));
  CHECK(cb.params() == 6ull * 25 + 12 + 36 + 12);
}

TEST_CASE("finite differences validate each block over every contained weight") {
  Built b;
  WeightBuilder<double> wb(b.store, 9, &b.params);
  auto asu = AsuBlock<double>::build(wb, "asu", 4, 2, 2);
  auto down = AsuStrideBlock<double>::build(wb, "down", 4, 8, 2, 2);
  auto fm = BiFmBlock<double>::build(wb, "fm", 4, 2, 2, 2);
  randomize(b.store, 82);

  auto pick = [&](const std::string& prefix) {
    std::vector<std::pair<std::string, Tensor<double>>> ps;
    for (const auto& p : b.params)
      if (p.name.rfind(prefix, 0) == 0) ps.emplace_back(p.name, p.tensor);
    return ps;
  };

  auto xa = random_tensor({4, 6, 6}, 570, true);
  auto pa = pick("asu");
  pa.emplace_back("x", xa);
  auto ra = finite_diff_check([&] { return sum(sigmoid(asu.forward(xa, false))); }, pa, 1e-5, 1e-5, 8);
  CAPTURE(ra.worst());
  CHECK(ra.ok());

  // the stride unit feeds its attention site through two 5x5 convs, so the
  // surviving gradients are small; a larger step keeps FD above rounding noise
  auto xd = random_tensor({4, 6, 6}, 571, true);
  auto pd = pick("down");
  pd.emplace_back("x", xd);
  auto rd = finite_diff_check([&] { return sum(sigmoid(down.forward(xd, false))); }, pd, 1e-5, 1e-4, 8);
  CAPTURE(rd.worst());
  CHECK(rd.ok());

  auto xh = random_tensor({4, 6, 6}, 572, true);
  auto xl = random_tensor({8, 3, 3}, 573, true);
  auto pf = pick("fm");
  pf.emplace_back("xh", xh);
  pf.emplace_back("xl", xl);
  auto rf = finite_diff_check(
      [&] {
        auto [hi, lo] = fm.forward(xh, xl, false);
        return add(sum(sigmoid(hi)), sum(sigmoid(lo)));
      },
      pf, 1e-5, 1e-5, 8);
  CAPTURE(rf.worst());
  CHECK(rf.ok());
}
