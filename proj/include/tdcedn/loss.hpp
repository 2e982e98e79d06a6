#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "tdcedn/tensor.hpp"

namespace tdcedn {

// Per-image class balance for a binary contour map: beta is the fraction of
// negative (non-contour) pixels, so the rare positives are weighted by beta
// and the plentiful negatives by 1 - beta.
template <typename S>
struct BalancedTarget {
  Tensor<S> gt;
  double beta = 0.0;
  i64 pos = 0, neg = 0;
};

template <typename S>
BalancedTarget<S> compute_beta(const Tensor<S>& gt) {
  if (gt.shape().c != 1)
    throw std::invalid_argument("compute_beta: target " + gt.shape().str() +
                                " must have one channel");
  BalancedTarget<S> t;
  t.gt = gt;
  for (i64 i = 0; i < gt.size(); ++i) {
    const S v = gt.ptr()[i];
    if (v == S(0))
      ++t.neg;
    else if (v == S(1))
      ++t.pos;
    else
      throw std::invalid_argument("compute_beta: target value " + std::to_string(v) +
                                  " is not 0 or 1");
  }
  t.beta = static_cast<double>(t.neg) / static_cast<double>(t.pos + t.neg);
  return t;
}

struct LossConfig {
  // alpha[k] weights side output k+1; side 1 is the full-resolution head and
  // side 5 the coarsest.
  std::array<double, 5> alpha{1.0, 1.0, 1.0, 1.0, 1.0};
  double clamp_eps = 1e-12;

  void validate() const {
    for (double a : alpha)
      if (!(a >= 0.0)) throw std::invalid_argument("loss: negative side weight");
    if (!(clamp_eps > 0.0) || !(clamp_eps <= 1e-3))
      throw std::invalid_argument("loss: clamp_eps outside (0, 1e-3]");
  }
};

template <typename S>
struct LossValueGrad {
  double value = 0.0;
  Tensor<S> grad;  // d(loss)/d(prediction probability)
};

// Class-balanced cross entropy, summed (not averaged) over pixels:
//   -beta * sum_pos log p  -  (1 - beta) * sum_neg log(1 - p).
// Probabilities are clamped away from {0, 1} before the logs and in the
// gradient denominators, so saturated sigmoids yield large finite values
// rather than inf/NaN.
template <typename S>
LossValueGrad<S> balanced_bce(const Tensor<S>& pred, const BalancedTarget<S>& target,
                              double clamp_eps = 1e-12) {
  if (!(pred.shape() == target.gt.shape()))
    throw std::invalid_argument("balanced_bce: prediction " + pred.shape().str() +
                                " vs target " + target.gt.shape().str());
  LossValueGrad<S> r;
  r.grad = Tensor<S>(pred.shape());
  const double beta = target.beta;
  double acc = 0.0;
  for (i64 i = 0; i < pred.size(); ++i) {
    double p = static_cast<double>(pred.ptr()[i]);
    p = std::min(std::max(p, clamp_eps), 1.0 - clamp_eps);
    if (target.gt.ptr()[i] == S(1)) {
      acc -= beta * std::log(p);
      r.grad.ptr()[i] = static_cast<S>(-beta / p);
    } else {
      acc -= (1.0 - beta) * std::log(1.0 - p);
      r.grad.ptr()[i] = static_cast<S>((1.0 - beta) / (1.0 - p));
    }
  }
  r.value = acc;
  return r;
}

// Weighted deep-supervision term: sum_m alpha[m] * balanced_bce(side_m).
template <typename S>
double side_loss(const std::vector<Tensor<S>>& sides, const BalancedTarget<S>& target,
                 const LossConfig& cfg = {}) {
  cfg.validate();
  if (sides.size() != cfg.alpha.size())
    throw std::invalid_argument("side_loss: got " + std::to_string(sides.size()) +
                                " side outputs, expected " +
                                std::to_string(cfg.alpha.size()));
  double acc = 0.0;
  for (std::size_t k = 0; k < sides.size(); ++k)
    acc += cfg.alpha[k] * balanced_bce(sides[k], target, cfg.clamp_eps).value;
  return acc;
}

template <typename S>
struct TotalLoss {
  double total = 0.0, side = 0.0, pred = 0.0;
  Tensor<S> grad_pred;
  std::vector<Tensor<S>> grad_sides;  // index k corresponds to side k+1
};

// Deep-supervision objective: weighted sum of the five side losses plus the
// fused-prediction loss, all against the same balanced target.
template <typename S>
TotalLoss<S> total_loss(const Tensor<S>& pred, const std::vector<Tensor<S>>& sides,
                        const BalancedTarget<S>& target, const LossConfig& cfg = {}) {
  cfg.validate();
  if (sides.size() != cfg.alpha.size())
    throw std::invalid_argument("total_loss: got " + std::to_string(sides.size()) +
                                " side outputs, expected " +
                                std::to_string(cfg.alpha.size()));
  TotalLoss<S> r;
  r.grad_sides.reserve(sides.size());
  for (std::size_t k = 0; k < sides.size(); ++k) {
    LossValueGrad<S> lk = balanced_bce(sides[k], target, cfg.clamp_eps);
    r.side += cfg.alpha[k] * lk.value;
    r.grad_sides.push_back(scale(lk.grad, static_cast<S>(cfg.alpha[k])));
  }
  LossValueGrad<S> lp = balanced_bce(pred, target, cfg.clamp_eps);
  r.pred = lp.value;
  r.grad_pred = std::move(lp.grad);
  r.total = r.side + r.pred;
  return r;
}

}  // namespace tdcedn
