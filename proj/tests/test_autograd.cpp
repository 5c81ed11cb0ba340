#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "modprompt/autograd.hpp"
#include "modprompt/rng.hpp"
#include "modprompt/train.hpp"

using namespace modprompt;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.v) v = rng.normal(0.0, scale);
  return t;
}

std::vector<GradProbe> sample_probes(const Var& leaf, int n, Rng& rng) {
  std::vector<GradProbe> probes;
  for (int i = 0; i < n; ++i)
    probes.push_back({leaf, rng.uniform_int(0, leaf->val.size() - 1)});
  return probes;
}

}  // namespace

TEST_CASE("rng streams are deterministic and well ranged") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    double x = a.uniform();
    REQUIRE(x == b.uniform());
    REQUIRE(x >= 0.0);
    REQUIRE(x < 1.0);
  }
  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    auto v = c.uniform_int(3, 9);
    REQUIRE(v >= 3);
    REQUIRE(v <= 9);
  }
}

TEST_CASE("quadratic toy loss has exact gradients") {
  Rng rng(1);
  Var p = make_leaf(random_tensor({5, 3}, rng), true);
  auto build = [&]() { return mean_all(mul(p, p)); };
  // d/dp mean(p^2) = 2p / n; central differences are exact for quadratics.
  double err = gradient_check(build, sample_probes(p, 15, rng), 1e-4);
  REQUIRE(err < 1e-8);
}

TEST_CASE("elementwise and structural ops match finite differences") {
  Rng rng(2);
  Var a = make_leaf(random_tensor({6, 4, 3}, rng, 0.5), true);
  Var b = make_leaf(random_tensor({6, 4, 3}, rng, 0.5), true);

  SECTION("add/mul/scale/silu chain") {
    auto build = [&]() { return mean_all(silu(scale(mul(add(a, b), a), 1.7))); };
    REQUIRE(gradient_check(build, sample_probes(a, 10, rng), 1e-5) < 1e-6);
    REQUIRE(gradient_check(build, sample_probes(b, 10, rng), 1e-5) < 1e-6);
  }
  SECTION("sigmoid/exp_capped") {
    auto build = [&]() { return mean_all(sigmoid(exp_capped(a, 12.0))); };
    REQUIRE(gradient_check(build, sample_probes(a, 10, rng), 1e-5) < 1e-6);
  }
  SECTION("upsample/concat") {
    auto build = [&]() { return mean_all(concat_channels(upsample2x(a), upsample2x(b))); };
    REQUIRE(gradient_check(build, sample_probes(a, 8, rng), 1e-5) < 1e-6);
  }
  SECTION("reshape/mean") {
    auto build = [&]() { return mean_all(reshape(a, {24, 3})); };
    REQUIRE(gradient_check(build, sample_probes(a, 8, rng), 1e-5) < 1e-6);
  }
}

TEST_CASE("conv ops match finite differences") {
  Rng rng(3);
  Var x = make_leaf(random_tensor({9, 7, 4}, rng, 0.5), true);
  Var w = make_leaf(random_tensor({5, 3, 3, 4}, rng, 0.3), true);
  Var b = make_leaf(random_tensor({5}, rng, 0.1), true);

  SECTION("conv2d stride 1") {
    auto build = [&]() { return mean_all(silu(conv2d(x, w, b, 1, 1))); };
    REQUIRE(gradient_check(build, sample_probes(x, 12, rng), 1e-5) < 1e-6);
    REQUIRE(gradient_check(build, sample_probes(w, 12, rng), 1e-5) < 1e-6);
    REQUIRE(gradient_check(build, sample_probes(b, 3, rng), 1e-5) < 1e-6);
  }
  SECTION("conv2d stride 2") {
    auto build = [&]() { return mean_all(conv2d(x, w, b, 2, 1)); };
    REQUIRE(gradient_check(build, sample_probes(x, 12, rng), 1e-5) < 1e-6);
    REQUIRE(gradient_check(build, sample_probes(w, 12, rng), 1e-5) < 1e-6);
  }
  SECTION("depthwise") {
    Var dw = make_leaf(random_tensor({4, 3, 3}, rng, 0.3), true);
    Var db = make_leaf(random_tensor({4}, rng, 0.1), true);
    auto build = [&]() { return mean_all(depthwise_conv2d(x, dw, db, 2, 1)); };
    REQUIRE(gradient_check(build, sample_probes(x, 10, rng), 1e-5) < 1e-6);
    REQUIRE(gradient_check(build, sample_probes(dw, 10, rng), 1e-5) < 1e-6);
  }
}

TEST_CASE("group norm matches finite differences") {
  Rng rng(4);
  Var x = make_leaf(random_tensor({5, 5, 8}, rng), true);
  Var gamma = make_leaf(random_tensor({8}, rng, 0.2), true);
  Var beta = make_leaf(random_tensor({8}, rng, 0.2), true);
  for (auto& v : gamma->val.v) v += 1.0;
  auto build = [&]() { return mean_all(silu(group_norm(x, gamma, beta, 4))); };
  REQUIRE(gradient_check(build, sample_probes(x, 16, rng), 1e-5) < 1e-5);
  REQUIRE(gradient_check(build, sample_probes(gamma, 6, rng), 1e-5) < 1e-6);
  REQUIRE(gradient_check(build, sample_probes(beta, 6, rng), 1e-5) < 1e-6);
}

TEST_CASE("matmul, row normalization, gather and losses match finite differences") {
  Rng rng(5);
  Var a = make_leaf(random_tensor({10, 6}, rng), true);
  Var e = make_leaf(random_tensor({3, 6}, rng), true);

  SECTION("matmul_nt + l2norm_rows") {
    auto build = [&]() { return mean_all(matmul_nt(l2norm_rows(a), l2norm_rows(e))); };
    REQUIRE(gradient_check(build, sample_probes(a, 12, rng), 1e-5) < 1e-6);
    REQUIRE(gradient_check(build, sample_probes(e, 12, rng), 1e-5) < 1e-6);
  }
  SECTION("bce with logits") {
    Tensor targets({10, 6});
    for (auto& v : targets.v) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    auto build = [&]() { return bce_logits_mean(a, targets); };
    REQUIRE(gradient_check(build, sample_probes(a, 15, rng), 1e-5) < 1e-6);
  }
  SECTION("gather_rows") {
    auto build = [&]() { return mean_all(gather_rows(a, {0, 3, 7})); };
    REQUIRE(gradient_check(build, sample_probes(a, 12, rng), 1e-5) < 1e-6);
  }
}

TEST_CASE("iou loss matches finite differences on overlapping boxes") {
  Rng rng(6);
  Tensor pred({4, 4});
  Tensor target({4, 4});
  for (int i = 0; i < 4; ++i) {
    double cx = rng.uniform(20, 60), cy = rng.uniform(20, 60);
    pred.at2(i, 0) = cx - rng.uniform(5, 12);
    pred.at2(i, 1) = cy - rng.uniform(5, 12);
    pred.at2(i, 2) = cx + rng.uniform(5, 12);
    pred.at2(i, 3) = cy + rng.uniform(5, 12);
    target.at2(i, 0) = cx - rng.uniform(5, 12);
    target.at2(i, 1) = cy - rng.uniform(5, 12);
    target.at2(i, 2) = cx + rng.uniform(5, 12);
    target.at2(i, 3) = cy + rng.uniform(5, 12);
  }
  Var p = make_leaf(pred, true);
  auto build = [&]() { return iou_loss_mean(p, target); };
  std::vector<GradProbe> probes;
  for (int i = 0; i < 16; ++i) probes.push_back({p, i});
  REQUIRE(gradient_check(build, probes, 1e-6) < 1e-6);
}

TEST_CASE("clamp01 straight-through keeps in-range gradients and blocks outward pushes") {
  Tensor t({3, 1, 1});
  t.v = {-0.5, 0.5, 1.5};
  Var x = make_leaf(t, true);
  Var y = mean_all(clamp01_st(x));
  REQUIRE(y->val.at(0) == Catch::Approx((0.0 + 0.5 + 1.0) / 3.0));
  backward(y);
  // Positive upstream gradient: blocked below range, passed in range and at
  // the upper violation (it pulls the value back down under descent).
  REQUIRE(x->grad.at(0) == 0.0);
  REQUIRE(x->grad.at(1) == Catch::Approx(1.0 / 3.0));
  REQUIRE(x->grad.at(2) == Catch::Approx(1.0 / 3.0));

  zero_grad(x);
  Var y2 = scale(mean_all(clamp01_st(x)), -1.0);
  backward(y2);
  REQUIRE(x->grad.at(0) == Catch::Approx(-1.0 / 3.0));
  REQUIRE(x->grad.at(2) == 0.0);
}

TEST_CASE("leaf gradients accumulate across separate graphs, as in batch loops") {
  Tensor t({2, 2});
  t.fill(2.0);
  Var x = make_leaf(t, true);
  backward(mean_all(mul(x, x)), 0.5);
  backward(mean_all(mul(x, x)), 0.5);
  // d mean(x^2)/dx = 2x/4 = 1; two half-weighted graphs sum back to 1.
  REQUIRE(x->grad.at(0) == Catch::Approx(1.0));
}
