#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <numeric>

#include "dpnet/gradcheck.hpp"
#include "dpnet/tensor.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace dpnet;
using testutil::max_abs_diff;
using testutil::random_tensor;
using testutil::random_vec;

TEST_CASE("conv2d matches the sliding-window oracle") {
  struct Case {
    int ci, h, w, co, k, stride, pad, groups;
    bool bias;
  };
  const Case cases[] = {
      {3, 7, 9, 4, 3, 1, 1, 1, true},  {4, 8, 8, 6, 3, 2, 1, 2, false},
      {6, 6, 6, 6, 5, 1, 2, 6, false}, {5, 10, 6, 2, 1, 1, 0, 1, true},
      {4, 9, 9, 8, 5, 2, 2, 4, false},
  };
  int seed = 100;
  for (const auto& c : cases) {
    CAPTURE(c.ci);
    CAPTURE(c.co);
    CAPTURE(c.groups);
    auto x = random_tensor({c.ci, c.h, c.w}, seed++);
    auto w = random_tensor({c.co, c.ci / c.groups, c.k, c.k}, seed++);
    std::optional<Tensor<double>> b;
    oracle::Vec bias_vec;
    if (c.bias) {
      auto bt = random_tensor({c.co}, seed++);
      bias_vec = bt.values();
      b = bt;
    }
    auto y = conv2d(x, w, b, c.stride, c.pad, c.groups);
    auto ref = oracle::conv2d(x.values(), c.ci, c.h, c.w, w.values(), c.co, c.k, c.k, bias_vec,
                              c.stride, c.pad, c.groups);
    REQUIRE(y.shape() == Shape{ref.c, ref.h, ref.w});
    CHECK(max_abs_diff(y.values(), ref.data) < 1e-12);
  }
}

TEST_CASE("multiply counter counts conv and matmul only") {
  reset_mac_counter();
  auto x = random_tensor({4, 8, 8}, 1);
  auto w = random_tensor({6, 2, 3, 3}, 2);
  auto y = conv2d(x, w, std::optional<Tensor<double>>{}, 2, 1, 2);
  // C_out * H' * W' * (C_in/groups) * Kh * Kw
  CHECK(mac_counter() == 6ull * 4 * 4 * 2 * 3 * 3);

  reset_mac_counter();
  auto a = random_tensor({5, 7}, 3);
  auto b = random_tensor({7, 3}, 4);
  auto m = matmul(a, b);
  CHECK(mac_counter() == 5ull * 7 * 3);

  reset_mac_counter();
  auto r = relu(y);
  auto p = pool2d(r, PoolMode::kMax, 2, 2);
  auto s = add(p, p);
  auto ln = layer_norm(m, Tensor<double>::scalar(1), Tensor<double>::scalar(0), 1e-5);
  (void)s;
  (void)ln;
  CHECK(mac_counter() == 0);
}

TEST_CASE("matmul matches the oracle") {
  auto a = random_tensor({6, 4}, 10);
  auto b = random_tensor({4, 5}, 11);
  auto ref = oracle::matmul(a.values(), 6, 4, b.values(), 5);
  CHECK(max_abs_diff(matmul(a, b).values(), ref) < 1e-14);
}

TEST_CASE("pooling matches the oracles") {
  auto x = random_tensor({3, 6, 8}, 20);
  CHECK(max_abs_diff(pool2d(x, PoolMode::kMax, 2, 2).values(),
                     oracle::maxpool2(x.values(), 3, 6, 8)) == 0.0);
  CHECK(max_abs_diff(pool2d(x, PoolMode::kAverage, 2, 2).values(),
                     oracle::avgpool2(x.values(), 3, 6, 8)) < 1e-15);

  // uneven adaptive windows: H=5 over k=3 gives row bands [0,1), [1,3), [3,5)
  auto y = random_tensor({2, 5, 7}, 21);
  CHECK(max_abs_diff(pool2d(y, PoolMode::kAdaptiveAverage, 3).values(),
                     oracle::adaptive_avg_pool(y.values(), 2, 5, 7, 3)) < 1e-15);

  // adaptive pool with k == H == W degenerates to identity
  auto z = random_tensor({2, 3, 3}, 22);
  CHECK(max_abs_diff(pool2d(z, PoolMode::kAdaptiveAverage, 3).values(), z.values()) == 0.0);
}

TEST_CASE("max pool ties send the gradient to the first maximal element") {
  auto x = Tensor<double>::from({1, 2, 2}, {1.0, 1.0, 0.0, 0.0}, true);
  auto y = pool2d(x, PoolMode::kMax, 2, 2);
  backward(sum(y));
  CHECK(x.grad() == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("resample2d up and down match the oracles") {
  auto x = random_tensor({2, 3, 4}, 30);
  CHECK(max_abs_diff(resample2d(x, ResampleMode::kUp2).values(),
                     oracle::upsample2(x.values(), 2, 3, 4)) == 0.0);
  auto y = random_tensor({2, 4, 6}, 31);
  CHECK(max_abs_diff(resample2d(y, ResampleMode::kDown2).values(),
                     oracle::avgpool2(y.values(), 2, 4, 6)) < 1e-15);
  CHECK_THROWS_AS(resample2d(random_tensor({1, 3, 4}, 32), ResampleMode::kDown2), ShapeError);
}

TEST_CASE("broadcasting follows align-right rules") {
  auto col = Tensor<double>::from({3, 1}, {1, 2, 3});
  auto row = Tensor<double>::from({1, 4}, {10, 20, 30, 40});
  auto m = mul(col, row);
  REQUIRE(m.shape() == Shape{3, 4});
  CHECK(m[0] == 10.0);
  CHECK(m[7] == 80.0);
  CHECK(m[11] == 120.0);

  auto x = random_tensor({2, 3}, 40);
  auto s = Tensor<double>::scalar(2.5);
  CHECK(max_abs_diff(mul(x, s).values(), scale(x, 2.5).values()) == 0.0);

  CHECK_THROWS_AS(add(random_tensor({2, 3}, 41), random_tensor({2, 4}, 42)), ShapeError);
}

TEST_CASE("broadcast gradients reduce over the broadcast axes") {
  auto col = random_tensor({3, 1}, 50, true);
  auto row = random_tensor({1, 4}, 51, true);
  backward(sum(mul(col, row)));
  const double row_sum = std::accumulate(row.values().begin(), row.values().end(), 0.0);
  const double col_sum = std::accumulate(col.values().begin(), col.values().end(), 0.0);
  for (int i = 0; i < 3; ++i) CHECK(col.grad()[i] == doctest::Approx(row_sum).epsilon(1e-14));
  for (int j = 0; j < 4; ++j) CHECK(row.grad()[j] == doctest::Approx(col_sum).epsilon(1e-14));
}

TEST_CASE("channel shuffle applies the reshape-transpose permutation") {
  auto x = random_tensor({6, 2, 2}, 60);
  auto y = channel_shuffle(x, 2);
  CHECK(max_abs_diff(y.values(), oracle::channel_shuffle(x.values(), 6, 4, 2)) == 0.0);
  // groups == C inverts nothing to mix with; permutation is identity for g=1
  CHECK(max_abs_diff(channel_shuffle(x, 1).values(), x.values()) == 0.0);
  CHECK_THROWS_AS(channel_shuffle(x, 4), ShapeError);
}

TEST_CASE("layer norm and batch norm match the oracles") {
  auto x = random_tensor({3, 4, 2}, 70);
  auto ln = layer_norm(x, Tensor<double>::scalar(1.3), Tensor<double>::scalar(-0.2), 1e-5);
  CHECK(max_abs_diff(ln.values(), oracle::layer_norm(x.values(), 1.3, -0.2, 1e-5)) < 1e-14);

  auto gamma = random_tensor({3}, 71);
  auto beta = random_tensor({3}, 72);
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::full({3}, 1.0);
  auto bn = batch_norm(x, gamma, beta, rm, rv, 1e-5, 0.9, true);
  CHECK(max_abs_diff(bn.values(), oracle::batch_norm_train(x.values(), 3, 8, gamma.values(),
                                                           beta.values(), 1e-5)) < 1e-13);

  // running stats move by one momentum step toward the batch stats
  double mean0 = 0.0;
  for (int i = 0; i < 8; ++i) mean0 += x[i];
  mean0 /= 8.0;
  CHECK(rm[0] == doctest::Approx(0.1 * mean0).epsilon(1e-12));

  // inference mode normalizes with the running buffers
  auto rm2 = Tensor<double>::from({3}, {0.5, 0.0, -0.5});
  auto rv2 = Tensor<double>::from({3}, {2.0, 1.0, 0.5});
  auto bn2 = batch_norm(x, gamma, beta, rm2, rv2, 1e-5, 0.9, false);
  CHECK(bn2[0] ==
        doctest::Approx(gamma[0] * (x[0] - 0.5) / std::sqrt(2.0 + 1e-5) + beta[0]).epsilon(1e-12));
}

TEST_CASE("bce with logits hits the closed forms") {
  auto z = Tensor<double>::from({3}, {0.0, 0.0, 40.0});
  auto l = bce_with_logits(z, {1.0, 0.0, 1.0});
  CHECK(l[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(l[1] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(l[2] == doctest::Approx(0.0).epsilon(1e-12));
  // large negative logit against target 1 stays finite (log1p form)
  auto big = bce_with_logits(Tensor<double>::from({1}, {-500.0}), {1.0});
  CHECK(big[0] == doctest::Approx(500.0));
}

TEST_CASE("take gathers flat indices and routes gradients back") {
  auto x = random_tensor({2, 3}, 80, true);
  auto t = take(x, {5, 0, 5});
  CHECK(t[0] == x[5]);
  CHECK(t[1] == x[0]);
  backward(sum(t));
  CHECK(x.grad()[5] == 2.0);
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK_THROWS_AS(take(x, {6}), ShapeError);
}

TEST_CASE("shared subexpressions accumulate gradients once per path") {
  // loss = sum((x + x) * (x + x)) = 4 * sum(x^2): d/dx = 8x
  auto x = random_tensor({4}, 90, true);
  auto a = add(x, x);
  backward(sum(mul(a, a)));
  for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(8.0 * x[i]).epsilon(1e-12));
}

TEST_CASE("chw/positions roundtrip is the exact transpose") {
  auto f = random_tensor({3, 2, 4}, 95);
  auto x = chw_to_positions(f);
  REQUIRE(x.shape() == Shape{8, 3});
  CHECK(x[0 * 3 + 2] == f[2 * 8 + 0]);
  CHECK(max_abs_diff(positions_to_chw(x, 3, 2, 4).values(), f.values()) == 0.0);
}

TEST_CASE("finite differences validate every op") {
  auto scalarize = [](Tensor<double> t) { return sum(sigmoid(t)); };

  std::vector<std::pair<std::string, std::function<Tensor<double>()>>> builders;
  auto x = random_tensor({3, 6, 6}, 200, true);
  auto w = random_tensor({4, 3, 3, 3}, 201, true);
  auto wd = random_tensor({3, 1, 3, 3}, 202, true);
  auto b = random_tensor({4}, 203, true);
  auto a2 = random_tensor({4, 5}, 204, true);
  auto b2 = random_tensor({5, 3}, 205, true);
  auto g = random_tensor({1}, 206, true);
  auto be = random_tensor({1}, 207, true);
  auto cg = random_tensor({3}, 208, true);
  auto cb = random_tensor({3}, 209, true);
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::full({3}, 1.0);
  auto col = random_tensor({4, 1}, 210, true);

  GradCheckReport report = finite_diff_check(
      [&] {
        Tensor<double> conv = conv2d(x, w, std::optional<Tensor<double>>(b), 2, 1, 1);
        Tensor<double> dw = conv2d(x, wd, std::optional<Tensor<double>>{}, 1, 1, 3);
        Tensor<double> mm = matmul(a2, b2);
        Tensor<double> ln = layer_norm(mm, g, be, 1e-5);
        Tensor<double> bn = batch_norm(dw, cg, cb, rm, rv, 1e-5, 0.9, true);
        Tensor<double> pools = add(pool2d(bn, PoolMode::kMax, 2, 2),
                                   pool2d(bn, PoolMode::kAverage, 2, 2));
        Tensor<double> ad = pool2d(bn, PoolMode::kAdaptiveAverage, 2);
        Tensor<double> up = resample2d(ad, ResampleMode::kUp2);
        Tensor<double> down = resample2d(x, ResampleMode::kDown2);
        Tensor<double> mixed = channel_shuffle(concat_channels(down, down), 2);
        Tensor<double> bc = mul(col, transpose2d(reshape(ln, {3, 4})));
        Tensor<double> ratio = div(texp(scale(mean(bc), 0.25)), add(sum(sigmoid(up)), Tensor<double>::scalar(2.0)));
        Tensor<double> gathered = take(mixed, {0, 7, 31});
        Tensor<double> bce = bce_with_logits(gathered, {1.0, 0.0, 0.5});
        return add(add(scalarize(pools), ratio), add(sum(bce), scalarize(bc)));
      },
      {{"x", x}, {"w", w}, {"wd", wd}, {"b", b}, {"a2", a2}, {"b2", b2},
       {"ln_g", g}, {"ln_b", be}, {"bn_g", cg}, {"bn_b", cb}, {"col", col}},
      1e-5, 1e-6);
  CAPTURE(report.worst());
  CHECK(report.ok());
}

TEST_CASE("finite differences validate piecewise ops away from their kinks") {
  // relu needs |x| > step and emin/emax need the two arms separated, otherwise
  // a probe can cross the kink and the central difference no longer matches.
  auto x = Tensor<double>::from({6}, {0.5, -0.7, 1.2, -0.3, 0.9, -1.5}, true);
  auto y = Tensor<double>::from({6}, {0.2, 0.4, -0.8, 0.6, -1.1, 0.3}, true);

  GradCheckReport report = finite_diff_check(
      [&] {
        Tensor<double> r = relu(x);
        Tensor<double> lo = emin(x, y);
        Tensor<double> hi = emax(neg(x), y);
        return add(sum(sigmoid(r)), add(sum(mul(lo, hi)), sum(neg(lo))));
      },
      {{"x", x}, {"y", y}}, 1e-5, 1e-6);
  CAPTURE(report.worst());
  CHECK(report.ok());
}

TEST_CASE("backward rejects non-scalar losses") {
  auto x = random_tensor({2, 2}, 300, true);
  CHECK_THROWS_AS(backward(x), ShapeError);
}

TEST_CASE("shape validation names the offender") {
  try {
    matmul(random_tensor({2, 3}, 301), random_tensor({2, 3}, 302));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
  }
  CHECK_THROWS_AS(conv2d(random_tensor({3, 4, 4}, 303), random_tensor({4, 2, 3, 3}, 304),
                         std::optional<Tensor<double>>{}, 1, 1, 1),
                  ShapeError);
  CHECK_THROWS_AS(Tensor<double>::from({2, 2}, {1.0}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>::zeros({0}), ShapeError);
}
