// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "test_support.hpp"

using namespace clseg;
using clseg::testing::conv2d_reference;
using clseg::testing::gradcheck;
using clseg::testing::probe;
using clseg::testing::random_mask;
using clseg::testing::random_tensor;

namespace {

TensorD vec(std::initializer_list<double> v) {
  TensorD t({static_cast<Index>(v.size())});
  Index i = 0;
  for (double x : v) t[i++] = x;
  return t;
}

double scalar_of(Tape<double>& t, Var v) { return t.value(v)[0]; }

}  // namespace

TEST_CASE("tensor rejects inconsistent shapes") {
  CHECK_THROWS_AS(TensorD({2, 0}), ConfigError);
  CHECK_THROWS_AS(TensorD({2, 2}, Eigen::VectorXd::Zero(3)), ConfigError);
  TensorD t({2, 3});
  CHECK(t.size() == 6);
  CHECK_FALSE(t.has_grad());
  t.grad();
  CHECK(t.has_grad());
}

TEST_CASE("conv2d examples") {
  SUBCASE("ones") {
    Tape<double> tape;
    Var y = conv2d(tape, tape.constant(TensorD::constant({1, 1, 3, 3}, 1.0)),
                   tape.constant(TensorD::constant({1, 1, 2, 2}, 1.0)), tape.constant(TensorD({1})), 1, 0);
    CHECK(tape.shape(y) == Shape{1, 1, 2, 2});
    for (Index i = 0; i < 4; ++i) CHECK(tape.value(y)[i] == 4.0);
  }
  SUBCASE("one-hot 1x1 kernel selects channel 0") {
    Rng rng(3);
    TensorD x = random_tensor(rng, {2, 3, 4, 5});
    TensorD k({1, 3, 1, 1});
    k[0] = 1.0;
    Tape<double> tape;
    Var y = conv2d(tape, tape.constant(x), tape.constant(k), tape.constant(TensorD({1})), 1, 0);
    for (Index n = 0; n < 2; ++n)
      for (Index p = 0; p < 20; ++p) CHECK(tape.value(y)[n * 20 + p] == x[n * 60 + p]);
  }
  SUBCASE("random configurations match sliding-window oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
      const Index n = 1 + Index(rng.below(3)), c = 1 + Index(rng.below(3)), k = 1 + Index(rng.below(4));
      const Index kh = 1 + Index(rng.below(3)), kw = 1 + Index(rng.below(3));
      const Index stride = 1 + Index(rng.below(2)), pad = Index(rng.below(2));
      const Index h = kh + Index(rng.below(6)), w = kw + Index(rng.below(6));
      TensorD x = random_tensor(rng, {n, c, h, w});
      TensorD kern = random_tensor(rng, {k, c, kh, kw});
      TensorD b = random_tensor(rng, {k});
      Tape<double> tape;
      Var y = conv2d(tape, tape.constant(x), tape.constant(kern), tape.constant(b), stride, pad);
      TensorD ref = conv2d_reference(x, kern, b, stride, pad);
      REQUIRE(tape.shape(y) == ref.shape());
      CHECK((tape.value(y).values() - ref.values()).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("shape errors") {
    Tape<double> tape;
    Var x = tape.constant(TensorD({1, 2, 4, 4}));
    CHECK_THROWS_AS(conv2d(tape, x, tape.constant(TensorD({1, 3, 3, 3})), tape.constant(TensorD({1})), 1, 0),
                    ConfigError);
    CHECK_THROWS_AS(conv2d(tape, x, tape.constant(TensorD({1, 2, 5, 5})), tape.constant(TensorD({1})), 1, 0),
                    ConfigError);
    CHECK_THROWS_AS(conv2d(tape, x, tape.constant(TensorD({1, 2, 3, 3})), tape.constant(TensorD({1})), 0, 0),
                    ConfigError);
  }
}

TEST_CASE("transpose_conv2d examples") {
  SUBCASE("1x1 unit kernel is identity") {
    Rng rng(5);
    TensorD x = random_tensor(rng, {2, 1, 3, 4});
    Tape<double> tape;
    Var y = transpose_conv2d(tape, tape.constant(x), tape.constant(TensorD::constant({1, 1, 1, 1}, 1.0)),
                             tape.constant(TensorD({1})), 1, 0);
    CHECK(tape.value(y).bit_equal(x));
  }
  SUBCASE("stride-2 upsampling of a single pixel") {
    Tape<double> tape;
    Var y = transpose_conv2d(tape, tape.constant(TensorD::constant({1, 1, 1, 1}, 3.0)),
                             tape.constant(TensorD::constant({1, 1, 2, 2}, 1.0)), tape.constant(TensorD({1})), 2, 0);
    REQUIRE(tape.shape(y) == Shape{1, 1, 2, 2});
    for (Index i = 0; i < 4; ++i) CHECK(tape.value(y)[i] == 3.0);
  }
  SUBCASE("adjoint of conv2d: matches finite-difference input gradient") {
    Rng rng(21);
    int checked = 0;
    for (int trial = 0; trial < 12; ++trial) {
      const Index n = 1 + Index(rng.below(2)), c = 1 + Index(rng.below(3)), k = 1 + Index(rng.below(3));
      const Index kh = 1 + Index(rng.below(3)), kw = 1 + Index(rng.below(3));
      const Index stride = 1 + Index(rng.below(2)), pad = Index(rng.below(2));
      // Exactly tiling geometry: (h + 2p − kh) divisible by the stride.
      const Index oh = 2 + Index(rng.below(3)), ow = 2 + Index(rng.below(3));
      const Index h = (oh - 1) * stride - 2 * pad + kh, w = (ow - 1) * stride - 2 * pad + kw;
      if (h < 1 || w < 1) continue;
      TensorD x = random_tensor(rng, {n, c, h, w});
      TensorD kern = random_tensor(rng, {k, c, kh, kw});
      TensorD zero_bias({k});
      TensorD cotangent = random_tensor(rng, {n, k, oh, ow});

      // <conv(x), y> is linear in x, so its gradient is conv's input adjoint applied to y.
      auto inner = [&]() {
        TensorD out = conv2d_reference(x, kern, zero_bias, stride, pad);
        return out.values().dot(cotangent.values());
      };
      std::vector<TensorD*> ptrs{&x};
      auto numeric = finite_diff_grad<double>(inner, ptrs, 1e-5);

      Tape<double> tape;
      Var y = transpose_conv2d(tape, tape.constant(cotangent), tape.constant(kern), tape.constant(TensorD({c})),
                               stride, pad);
      REQUIRE(tape.shape(y) == x.shape());
      CHECK((tape.value(y).values() - numeric[0]).cwiseAbs().maxCoeff() < 1e-4);
      ++checked;
    }
    CHECK(checked >= 5);
  }
}

TEST_CASE("pool2") {
  TensorD block({1, 1, 2, 2}, Eigen::Vector4d(1, 2, 3, 4));
  {
    Tape<double> tape;
    CHECK(tape.value(pool2(tape, tape.constant(block), PoolMode::max))[0] == 4.0);
    CHECK(tape.value(pool2(tape, tape.constant(block), PoolMode::avg))[0] == 2.5);
    CHECK_THROWS_AS(pool2(tape, tape.constant(TensorD({1, 1, 3, 2})), PoolMode::max), ConfigError);
  }
  SUBCASE("per-window oracle") {
    Rng rng(8);
    for (int trial = 0; trial < 5; ++trial) {
      const Index n = 1 + Index(rng.below(2)), c = 1 + Index(rng.below(3));
      const Index h = 2 * (1 + Index(rng.below(4))), w = 2 * (1 + Index(rng.below(4)));
      TensorD x = random_tensor(rng, {n, c, h, w});
      for (PoolMode mode : {PoolMode::max, PoolMode::avg}) {
        Tape<double> tape;
        const auto& y = tape.value(pool2(tape, tape.constant(x), mode));
        for (Index p = 0; p < n * c; ++p)
          for (Index oy = 0; oy < h / 2; ++oy)
            for (Index ox = 0; ox < w / 2; ++ox) {
              std::vector<double> win;
              for (Index dy = 0; dy < 2; ++dy)
                for (Index dx = 0; dx < 2; ++dx) win.push_back(x[p * h * w + (2 * oy + dy) * w + 2 * ox + dx]);
              const double expect = mode == PoolMode::max ? *std::max_element(win.begin(), win.end())
                                                          : (win[0] + win[1] + win[2] + win[3]) / 4.0;
              CHECK(y[(p * (h / 2) + oy) * (w / 2) + ox] == doctest::Approx(expect).epsilon(1e-15));
            }
      }
    }
  }
  SUBCASE("max routes gradient to argmax only") {
    TensorD x = block;
    x.zero_grad();
    Tape<double> tape;
    tape.backward(sum(tape, pool2(tape, tape.parameter(x), PoolMode::max)));
    CHECK(x.grad()[3] == 1.0);
    CHECK(x.grad().head(3).isZero());
  }
}

TEST_CASE("activations") {
  Tape<double> tape;
  const auto& r = tape.value(activation(tape, tape.constant(vec({-1, 0, 2})), Activation::relu));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);
  CHECK(tape.value(activation(tape, tape.constant(vec({0})), Activation::sigmoid))[0] == 0.5);

  Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    TensorD x = vec({rng.uniform(-4, 4)});
    x.zero_grad();
    Tape<double> t;
    t.backward(activation(t, t.parameter(x), Activation::sigmoid));
    auto sig = [&]() { return 1.0 / (1.0 + std::exp(-x[0])); };
    std::vector<TensorD*> ptrs{&x};
    CHECK(std::abs(x.grad()[0] - finite_diff_grad<double>(sig, ptrs, 1e-5)[0][0]) < 1e-6);
  }
}

TEST_CASE("loss_dice") {
  Rng rng(31);
  TensorD target = random_mask(rng, {2, 1, 4, 4});
  target[0] = 1.0;
  Tape<double> tape;
  CHECK(scalar_of(tape, loss_dice(tape, tape.constant(target), target)) <= 1e-6);
  CHECK(scalar_of(tape, loss_dice(tape, tape.constant(TensorD({2, 1, 4, 4})), TensorD::constant({2, 1, 4, 4}, 1.0))) ==
        doctest::Approx(1.0).epsilon(1e-6));
  for (int i = 0; i < 10; ++i) {
    TensorD p = random_tensor(rng, {1, 1, 5, 5}, 0.0, 1.0);
    TensorD g = random_mask(rng, {1, 1, 5, 5});
    double inter = 0, sp = 0, sg = 0;
    for (Index k = 0; k < p.size(); ++k) {
      inter += p[k] * g[k];
      sp += p[k];
      sg += g[k];
    }
    const double expect = 1.0 - (2.0 * inter + 1e-6) / (sp + sg + 1e-6);
    const double got = scalar_of(tape, loss_dice(tape, tape.constant(p), g));
    CHECK(std::abs(got - expect) < 1e-12);
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);
  }
  TensorD bad = TensorD::constant({1, 1, 2, 2}, 0.5);
  CHECK_THROWS_AS(loss_dice(tape, tape.constant(bad), bad), InputError);
}

TEST_CASE("loss_bce") {
  Rng rng(32);
  Tape<double> tape;
  TensorD g = random_mask(rng, {1, 1, 6, 6});
  CHECK(scalar_of(tape, loss_bce(tape, tape.constant(TensorD::constant({1, 1, 6, 6}, 0.5)), g)) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(scalar_of(tape, loss_bce(tape, tape.constant(g), g)) <= 1.2e-7 * std::abs(std::log(1e-7)));
  for (int i = 0; i < 10; ++i) {
    TensorD p = random_tensor(rng, {2, 1, 3, 3}, 0.0, 1.0);
    TensorD t = random_mask(rng, {2, 1, 3, 3});
    double total = 0;
    for (Index k = 0; k < p.size(); ++k) {
      const double pc = std::clamp(p[k], 1e-7, 1.0 - 1e-7);
      total += -(t[k] * std::log(pc) + (1 - t[k]) * std::log(1 - pc));
    }
    const double got = scalar_of(tape, loss_bce(tape, tape.constant(p), t));
    CHECK(std::abs(got - total / double(p.size())) < 1e-12);
    CHECK(got >= 0.0);
  }
  CHECK_THROWS_AS(loss_bce(tape, tape.constant(TensorD({1, 1, 2, 2})), TensorD::constant({1, 1, 2, 2}, 0.3)),
                  InputError);
  CHECK_THROWS_AS(loss_bce(tape, tape.constant(TensorD({1, 1, 2, 2})), TensorD({1, 1, 2, 3})), ConfigError);
  CHECK_NOTHROW(loss_distill(tape, tape.constant(TensorD({1, 1, 2, 2})), TensorD::constant({1, 1, 2, 2}, 0.3)));
}

TEST_CASE("loss_seg is the exact mean of dice and bce") {
  Rng rng(33);
  Tape<double> tape;
  TensorD ones = TensorD::constant({1, 1, 4, 4}, 1.0);
  CHECK(scalar_of(tape, loss_seg(tape, tape.constant(ones), ones)) < 1e-6);
  {
    // pred 0.5 everywhere, target all 1: dice = 1 - (2·8 + ε)/(8 + 16 + ε), bce = ln 2.
    const double dice = 1.0 - (16.0 + 1e-6) / (24.0 + 1e-6);
    const double expect = 0.5 * dice + 0.5 * std::log(2.0);
    CHECK(scalar_of(tape, loss_seg(tape, tape.constant(TensorD::constant({1, 1, 4, 4}, 0.5)), ones)) ==
          doctest::Approx(expect).epsilon(1e-12));
  }
  for (int i = 0; i < 20; ++i) {
    TensorD p = random_tensor(rng, {1, 1, 4, 4}, 0.0, 1.0);
    TensorD t = random_mask(rng, {1, 1, 4, 4});
    Var pv = tape.constant(p);
    const double d = scalar_of(tape, loss_dice(tape, pv, t));
    const double b = scalar_of(tape, loss_bce(tape, pv, t));
    CHECK(scalar_of(tape, loss_seg(tape, pv, t)) == 0.5 * d + 0.5 * b);
  }
}

TEST_CASE("loss_mse") {
  Tape<double> tape;
  Var x = tape.constant(vec({0, 0}));
  CHECK(scalar_of(tape, loss_mse(tape, x, x)) == 0.0);
  CHECK(scalar_of(tape, loss_mse(tape, x, tape.constant(vec({1, 1})))) == 1.0);
  Rng rng(34);
  for (int i = 0; i < 10; ++i) {
    TensorD a = random_tensor(rng, {7}), b = random_tensor(rng, {7});
    double s = 0;
    for (Index k = 0; k < 7; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    CHECK(std::abs(scalar_of(tape, loss_mse(tape, tape.constant(a), tape.constant(b))) - s / 7.0) < 1e-12);
  }
  CHECK_THROWS_AS(loss_mse(tape, x, tape.constant(vec({1, 1, 1}))), ConfigError);
}

TEST_CASE("backward basics") {
  SUBCASE("sum of squares") {
    TensorD theta = vec({1, 2});
    Tape<double> tape;
    tape.backward(weighted_sq_dist(tape, tape.parameter(theta), TensorD({2}), TensorD::constant({2}, 1.0)));
    CHECK(theta.grad()[0] == 2.0);
    CHECK(theta.grad()[1] == 4.0);
  }
  SUBCASE("non-scalar loss is a usage error") {
    Tape<double> tape;
    TensorD theta = vec({1, 2});
    CHECK_THROWS_AS(tape.backward(tape.parameter(theta)), UsageError);
  }
  SUBCASE("constants get no gradient; unused parameters stay zero") {
    TensorD used = vec({1, 2}), unused = vec({3});
    used.zero_grad();
    unused.zero_grad();
    TensorD c = vec({5, 6});
    Tape<double> tape;
    Var u = tape.parameter(used);
    tape.parameter(unused);
    Var k = tape.constant(c);
    tape.backward(sum(tape, add(tape, u, k)));
    CHECK(used.grad().isApprox(Eigen::Vector2d(1, 1)));
    CHECK(unused.grad().isZero());
    CHECK_FALSE(c.has_grad());
    CHECK_FALSE(tape.requires_grad(k));
  }
  SUBCASE("fan-out accumulates and each op is visited once") {
    TensorD theta = vec({3});
    theta.zero_grad();
    Tape<double> tape;
    Var t = tape.parameter(theta);
    Var y = add(tape, scale(tape, t, 2.0), t);  // 3θ
    tape.backward(sum(tape, y));
    CHECK(theta.grad()[0] == 3.0);
    CHECK(tape.backward_visits() == 3);
  }
}

TEST_CASE("gradient check: every layer and loss") {
  Rng rng(99);
  const double tol = 1e-4;
  for (int trial = 0; trial < 5; ++trial) {
    const std::uint64_t s = 1000 + std::uint64_t(trial);
    const Index n = 1 + Index(rng.below(2)), c = 1 + Index(rng.below(2)), k = 1 + Index(rng.below(3));
    const Index stride = 1 + Index(rng.below(2)), pad = Index(rng.below(2));
    const Index h = 4 + 2 * Index(rng.below(2)), w = 4 + 2 * Index(rng.below(2));

    CAPTURE(trial);
    CHECK(gradcheck({random_tensor(rng, {n, c, h, w}), random_tensor(rng, {k, c, 3, 3}), random_tensor(rng, {k})},
                    [&](Tape<double>& t, const std::vector<Var>& v) {
                      return probe(t, conv2d(t, v[0], v[1], v[2], stride, pad), s);
                    }) < tol);
    CHECK(gradcheck({random_tensor(rng, {n, c, h / 2, w / 2}), random_tensor(rng, {c, k, 2, 2}),
                     random_tensor(rng, {k})},
                    [&](Tape<double>& t, const std::vector<Var>& v) {
                      return probe(t, transpose_conv2d(t, v[0], v[1], v[2], stride, 0), s);
                    }) < tol);
    for (PoolMode mode : {PoolMode::max, PoolMode::avg}) {
      CHECK(gradcheck({random_tensor(rng, {n, c, h, w})}, [&](Tape<double>& t, const std::vector<Var>& v) {
              return probe(t, pool2(t, v[0], mode), s);
            }) < tol);
    }
    TensorD away = random_tensor(rng, {n, c, h, w});
    for (Index i = 0; i < away.size(); ++i) away[i] += away[i] >= 0 ? 0.05 : -0.05;  // keep off the relu kink
    CHECK(gradcheck({away}, [&](Tape<double>& t, const std::vector<Var>& v) {
            return probe(t, activation(t, v[0], Activation::relu), s);
          }) < tol);
    CHECK(gradcheck({random_tensor(rng, {n, c, h, w}, -3, 3)}, [&](Tape<double>& t, const std::vector<Var>& v) {
            return probe(t, activation(t, v[0], Activation::sigmoid), s);
          }) < tol);
    CHECK(gradcheck({random_tensor(rng, {n, c, h, w}), random_tensor(rng, {n, k, h, w})},
                    [&](Tape<double>& t, const std::vector<Var>& v) {
                      return probe(t, concat_channels(t, v[0], v[1]), s);
                    }) < tol);
    CHECK(gradcheck({random_tensor(rng, {n, 6}), random_tensor(rng, {k, 6}), random_tensor(rng, {k})},
                    [&](Tape<double>& t, const std::vector<Var>& v) { return probe(t, linear(t, v[0], v[1], v[2]), s); }) <
          tol);

    const Shape ms{n, 1, h, w};
    TensorD target = random_mask(rng, ms);
    TensorD soft = random_tensor(rng, ms, 0.0, 1.0);
    TensorD pred = random_tensor(rng, ms, 0.05, 0.95);
    CHECK(gradcheck({pred}, [&](Tape<double>& t, const std::vector<Var>& v) { return loss_dice(t, v[0], target); }) <
          tol);
    CHECK(gradcheck({pred}, [&](Tape<double>& t, const std::vector<Var>& v) { return loss_bce(t, v[0], target); }) <
          tol);
    CHECK(gradcheck({pred}, [&](Tape<double>& t, const std::vector<Var>& v) { return loss_seg(t, v[0], target); }) <
          tol);
    CHECK(gradcheck({pred}, [&](Tape<double>& t, const std::vector<Var>& v) { return loss_distill(t, v[0], soft); }) <
          tol);
    CHECK(gradcheck({random_tensor(rng, ms), random_tensor(rng, ms)},
                    [&](Tape<double>& t, const std::vector<Var>& v) { return loss_mse(t, v[0], v[1]); }) < tol);
  }
}

TEST_CASE("sgd_step") {
  TensorD theta = vec({1});
  sgd_step(theta, Eigen::VectorXd::Zero(1), 0.1, 0.0);
  CHECK(theta[0] == 1.0);
  sgd_step(theta, Eigen::VectorXd::Constant(1, 0.5), 0.1, 0.0);
  CHECK(theta[0] == doctest::Approx(0.95).epsilon(1e-15));
  theta[0] = 1.0;
  sgd_step(theta, Eigen::VectorXd::Zero(1), 0.1, 1.0);
  CHECK(theta[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK_THROWS_AS(sgd_step(theta, Eigen::VectorXd::Constant(1, INFINITY), 0.1, 0.0), NumericError);
  CHECK_THROWS_AS(sgd_step(theta, Eigen::VectorXd::Zero(1), 0.0, 0.0), ConfigError);
}

TEST_CASE("finite_diff_grad") {
  TensorD theta = vec({3});
  std::vector<TensorD*> ptrs{&theta};
  CHECK(std::abs(finite_diff_grad<double>([&] { return theta[0] * theta[0]; }, ptrs)[0][0] - 6.0) < 1e-8);
  for (double h : {1e-3, 1e-1, 1.0}) {
    CHECK(finite_diff_grad<double>([&] { return 4.0 * theta[0] - 2.0; }, ptrs, h)[0][0] == doctest::Approx(4.0));
  }
  CHECK(theta[0] == 3.0);
}

TEST_CASE("forward passes are deterministic") {
  Rng rng(7);
  TensorD x = random_tensor(rng, {2, 2, 8, 8}), k = random_tensor(rng, {3, 2, 3, 3}), b = random_tensor(rng, {3});
  auto run = [&]() {
    Tape<double> tape;
    Var y = conv2d(tape, tape.constant(x), tape.constant(k), tape.constant(b), 1, 1);
    y = pool2(tape, activation(tape, y, Activation::relu), PoolMode::max);
    return tape.value(y);
  };
  CHECK(run().bit_equal(run()));
}

TEST_CASE("non-finite forward is a hard error") {
  Tape<double> tape;
  TensorD x = vec({std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(scale(tape, tape.constant(x), 1.0), NumericError);
}
