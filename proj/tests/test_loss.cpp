#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "tdcedn/loss.hpp"
#include "tdcedn/rng.hpp"

using namespace tdcedn;

namespace {

template <typename S>
Tensor<S> random_probs(const Shape& s, Rng& rng) {
  Tensor<S> t(s);
  for (i64 i = 0; i < t.size(); ++i)
    t.ptr()[i] = static_cast<S>(0.02 + 0.96 * rng.next_uniform());
  return t;
}

template <typename S>
Tensor<S> random_mask(const Shape& s, Rng& rng) {
  Tensor<S> t(s);
  for (i64 i = 0; i < t.size(); ++i) t.ptr()[i] = (rng.next_u64() & 1) ? S(1) : S(0);
  t.ptr()[0] = S(1);
  t.ptr()[1] = S(0);
  return t;
}

}  // namespace

TEST_CASE("beta is the negative fraction") {
  Tensor<double> gt(Shape{1, 1, 10, 10});
  for (i64 i = 0; i < 10; ++i) gt.ptr()[i] = 1.0;  // 10 positives of 100
  BalancedTarget<double> t = compute_beta(gt);
  CHECK(t.beta == 0.9);
  CHECK(t.pos == 10);
  CHECK(t.neg == 90);

  // degenerate all-negative map
  CHECK(compute_beta(Tensor<double>(Shape{1, 1, 4, 4})).beta == 1.0);

  // checkerboard
  Tensor<double> cb(Shape{1, 1, 4, 4});
  for (i64 y = 0; y < 4; ++y)
    for (i64 x = 0; x < 4; ++x) cb.at(0, 0, y, x) = static_cast<double>((y + x) & 1);
  CHECK(compute_beta(cb).beta == 0.5);
}

TEST_CASE("beta rejects non-binary and multi-channel targets") {
  Tensor<double> t(Shape{1, 1, 2, 2});
  t.ptr()[0] = 0.5;
  CHECK_THROWS_AS(compute_beta(t), std::invalid_argument);
  CHECK_THROWS_AS(compute_beta(Tensor<double>(Shape{1, 2, 2, 2})), std::invalid_argument);
}

TEST_CASE("two-pixel case evaluates to ln 2") {
  auto gt = Tensor<double>::from_values(Shape{1, 1, 1, 2}, {1.0, 0.0});
  auto pred = Tensor<double>::from_values(Shape{1, 1, 1, 2}, {0.5, 0.5});
  BalancedTarget<double> t = compute_beta(gt);
  REQUIRE(t.beta == 0.5);
  const double v = balanced_bce(pred, t).value;
  CHECK(std::abs(v - std::log(2.0)) < 1e-9);
}

TEST_CASE("perfect clamped prediction gives near-zero loss") {
  Rng rng(3);
  Tensor<double> gt = random_mask<double>(Shape{1, 1, 8, 8}, rng);
  Tensor<double> pred = gt;  // probabilities exactly 0/1, clamped inside
  BalancedTarget<double> t = compute_beta(gt);
  const double eps = 1e-12;
  const double v = balanced_bce(pred, t, eps).value;
  CHECK(v >= 0.0);
  CHECK(v < 10.0 * static_cast<double>(gt.size()) * eps);
}

TEST_CASE("loss stays finite on saturated predictions") {
  auto gt = Tensor<double>::from_values(Shape{1, 1, 1, 2}, {1.0, 0.0});
  auto pred = Tensor<double>::from_values(Shape{1, 1, 1, 2}, {0.0, 1.0});  // worst case
  BalancedTarget<double> t = compute_beta(gt);
  LossValueGrad<double> r = balanced_bce(pred, t, 1e-12);
  CHECK(std::isfinite(r.value));
  CHECK(r.value > 10.0);
  for (i64 i = 0; i < 2; ++i) CHECK(std::isfinite(r.grad.ptr()[i]));
}

TEST_CASE("balanced_bce gradient signs and values") {
  auto gt = Tensor<double>::from_values(Shape{1, 1, 1, 2}, {1.0, 0.0});
  auto pred = Tensor<double>::from_values(Shape{1, 1, 1, 2}, {0.25, 0.75});
  BalancedTarget<double> t = compute_beta(gt);
  LossValueGrad<double> r = balanced_bce(pred, t);
  CHECK(r.grad.ptr()[0] == Catch::Approx(-0.5 / 0.25).epsilon(1e-12));  // pull up
  CHECK(r.grad.ptr()[1] == Catch::Approx(0.5 / 0.25).epsilon(1e-12));   // push down
  CHECK_THROWS_AS(balanced_bce(Tensor<double>(Shape{1, 1, 2, 2}), t),
                  std::invalid_argument);
}

TEST_CASE("pixel permutation leaves the loss unchanged") {
  Rng rng(4);
  Tensor<double> gt = random_mask<double>(Shape{1, 1, 4, 4}, rng);
  Tensor<double> pred = random_probs<double>(gt.shape(), rng);
  const double before = balanced_bce(pred, compute_beta(gt)).value;
  // reverse both maps with the same permutation
  Tensor<double> gt_r(gt.shape()), pred_r(pred.shape());
  for (i64 i = 0; i < gt.size(); ++i) {
    gt_r.ptr()[i] = gt.ptr()[gt.size() - 1 - i];
    pred_r.ptr()[i] = pred.ptr()[pred.size() - 1 - i];
  }
  const double after = balanced_bce(pred_r, compute_beta(gt_r)).value;
  // reordering the accumulation may shift the sum by a couple of ulps
  CHECK(after == Catch::Approx(before).epsilon(1e-14));
}

TEST_CASE("side_loss weighting rules") {
  Rng rng(5);
  Tensor<double> gt = random_mask<double>(Shape{1, 1, 4, 4}, rng);
  BalancedTarget<double> t = compute_beta(gt);
  std::vector<Tensor<double>> sides;
  for (int k = 0; k < 5; ++k) sides.push_back(random_probs<double>(gt.shape(), rng));

  LossConfig zero;
  zero.alpha = {0, 0, 0, 0, 0};
  CHECK(side_loss(sides, t, zero) == 0.0);

  LossConfig sel;
  sel.alpha = {1, 0, 0, 0, 0};
  CHECK(side_loss(sides, t, sel) ==
        Catch::Approx(balanced_bce(sides[0], t).value).epsilon(1e-15));

  std::vector<Tensor<double>> same(5, sides[2]);
  CHECK(side_loss(same, t) ==
        Catch::Approx(5.0 * balanced_bce(sides[2], t).value).epsilon(1e-12));

  // scaling every alpha by c scales the side term by exactly c
  LossConfig scaled;
  scaled.alpha = {3, 3, 3, 3, 3};
  CHECK(side_loss(sides, t, scaled) ==
        Catch::Approx(3.0 * side_loss(sides, t)).epsilon(1e-12));

  sides.pop_back();
  CHECK_THROWS_AS(side_loss(sides, t), std::invalid_argument);
}

TEST_CASE("total decomposes exactly into side plus pred") {
  Rng rng(6);
  for (int inst = 0; inst < 100; ++inst) {
    Tensor<double> gt = random_mask<double>(Shape{1, 1, 5, 5}, rng);
    BalancedTarget<double> t = compute_beta(gt);
    std::vector<Tensor<double>> sides;
    for (int k = 0; k < 5; ++k) sides.push_back(random_probs<double>(gt.shape(), rng));
    Tensor<double> pred = random_probs<double>(gt.shape(), rng);
    LossConfig cfg;
    for (int k = 0; k < 5; ++k) cfg.alpha[static_cast<std::size_t>(k)] = 0.25 + 0.5 * k;
    TotalLoss<double> r = total_loss(pred, sides, t, cfg);
    CHECK(r.total == r.side + r.pred);  // exact by construction
    CHECK(r.side == Catch::Approx(side_loss(sides, t, cfg)).epsilon(1e-15));
    CHECK(r.total >= 0.0);
  }
}

TEST_CASE("total_loss gradients carry the alpha weights") {
  Rng rng(7);
  Tensor<double> gt = random_mask<double>(Shape{1, 1, 4, 4}, rng);
  BalancedTarget<double> t = compute_beta(gt);
  std::vector<Tensor<double>> sides;
  for (int k = 0; k < 5; ++k) sides.push_back(random_probs<double>(gt.shape(), rng));
  Tensor<double> pred = random_probs<double>(gt.shape(), rng);
  LossConfig cfg;
  cfg.alpha = {2, 1, 1, 1, 0.5};
  TotalLoss<double> r = total_loss(pred, sides, t, cfg);
  REQUIRE(r.grad_sides.size() == 5);
  LossValueGrad<double> plain = balanced_bce(sides[0], t, cfg.clamp_eps);
  for (i64 i = 0; i < plain.grad.size(); ++i)
    CHECK(r.grad_sides[0].ptr()[i] ==
          Catch::Approx(2.0 * plain.grad.ptr()[i]).epsilon(1e-12));
}

TEST_CASE("loss config validation") {
  LossConfig bad;
  bad.alpha[2] = -0.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  LossConfig eps;
  eps.clamp_eps = 0.0;
  CHECK_THROWS_AS(eps.validate(), std::invalid_argument);
  eps.clamp_eps = 0.1;  // above the 1e-3 cap
  CHECK_THROWS_AS(eps.validate(), std::invalid_argument);
  eps.clamp_eps = 1e-3;
  CHECK_NOTHROW(eps.validate());
}
