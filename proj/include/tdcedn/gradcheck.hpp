#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tdcedn/loss.hpp"
#include "tdcedn/network.hpp"

namespace tdcedn {

// ---------------------------------------------------------------------------
// Central finite-difference verification of every analytic backward pass.
// All checks run in double precision: single precision cannot resolve the
// tolerances used here.  Relative error is |a - n| / max(|a|, |n|, floor);
// the floor scales with the objective magnitude so that gradients too small
// to move the objective are compared in absolute rather than relative terms.
// ---------------------------------------------------------------------------

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 0.0;
  i64 probes = 0;
  bool pass = false;
};

inline double rel_err(double analytic, double numeric, double floor_v) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor_v});
}

inline double grad_floor(double objective) {
  return 1e-6 * std::max(1.0, std::abs(objective));
}

namespace detail {

inline Tensor<double> gaussian_tensor(const Shape& s, Rng& rng, double scale = 1.0,
                                      double offset = 0.0) {
  Tensor<double> t(s);
  for (i64 i = 0; i < t.size(); ++i)
    t.ptr()[i] = rng.next_gaussian() * scale + offset;
  return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double acc = 0.0;
  for (i64 i = 0; i < a.size(); ++i) acc += a.ptr()[i] * b.ptr()[i];
  return acc;
}

// One tensor whose every element gets probed, plus the analytic gradient the
// probes are compared against.
struct ProbeTarget {
  Tensor<double>* values;
  std::vector<double> analytic;
};

template <typename Eval>
CheckResult probe_all(std::string name, Eval&& eval, std::vector<ProbeTarget> targets,
                      double tol, double h = 1e-5) {
  CheckResult r;
  r.name = std::move(name);
  r.tol = tol;
  const double floor_v = grad_floor(eval());
  for (ProbeTarget& t : targets) {
    double* p = t.values->ptr();
    for (i64 i = 0; i < t.values->size(); ++i) {
      const double save = p[i];
      p[i] = save + h;
      const double jp = eval();
      p[i] = save - h;
      const double jm = eval();
      p[i] = save;
      const double numeric = (jp - jm) / (2.0 * h);
      r.max_rel_err = std::max(
          r.max_rel_err, rel_err(t.analytic[static_cast<std::size_t>(i)], numeric, floor_v));
      ++r.probes;
    }
  }
  r.pass = r.max_rel_err < r.tol;
  return r;
}

constexpr double kLayerTol = 1e-4;

inline CheckResult check_conv(std::uint64_t seed, i64 k, i64 c_out, const std::string& name) {
  Rng rng = Rng::stream(seed, "gc:" + name);
  Tensor<double> x = gaussian_tensor(Shape{1, 2, 4, 4}, rng, 0.8);
  Conv2dLayer<double> conv("c", 2, c_out, k);
  for (i64 i = 0; i < conv.weight().size(); ++i)
    conv.weight().ptr()[i] = rng.next_gaussian() * 0.4;
  for (i64 i = 0; i < conv.bias().size(); ++i)
    conv.bias().ptr()[i] = rng.next_gaussian() * 0.2;
  const Tensor<double> r = gaussian_tensor(Shape{1, c_out, 4, 4}, rng);

  conv.weight().ensure_grad();
  conv.bias().ensure_grad();
  conv.forward(x, true);
  Tensor<double> gx = conv.backward(r);

  auto eval = [&] { return dot(conv2d_forward(x, conv.weight(), conv.bias()), r); };
  return probe_all(name, eval,
                   {{&x, gx.data()},
                    {&conv.weight(), conv.weight().grad()},
                    {&conv.bias(), conv.bias().grad()}},
                   kLayerTol);
}

inline CheckResult check_batchnorm(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "gc:batchnorm");
  Tensor<double> x = gaussian_tensor(Shape{1, 2, 4, 4}, rng, 1.3, 0.4);
  BatchNormLayer<double> bn("b", 2);
  for (i64 c = 0; c < 2; ++c) {
    bn.gamma().ptr()[c] = 1.0 + 0.3 * rng.next_gaussian();
    bn.beta().ptr()[c] = 0.2 * rng.next_gaussian();
  }
  const Tensor<double> r = gaussian_tensor(x.shape(), rng);

  bn.gamma().ensure_grad();
  bn.beta().ensure_grad();
  bn.forward(x, Mode::train, false);
  Tensor<double> gx = bn.backward(r);

  auto eval = [&] { return dot(bn.forward(x, Mode::train, false), r); };
  return probe_all("batchnorm", eval,
                   {{&x, gx.data()},
                    {&bn.gamma(), bn.gamma().grad()},
                    {&bn.beta(), bn.beta().grad()}},
                   kLayerTol);
}

inline CheckResult check_relu(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "gc:relu");
  // Keep every input clear of the kink at zero.
  Tensor<double> x(Shape{1, 2, 4, 4});
  for (i64 i = 0; i < x.size(); ++i) {
    const double mag = 0.1 + rng.next_uniform();
    x.ptr()[i] = (rng.next_u64() & 1) ? mag : -mag;
  }
  const Tensor<double> r = gaussian_tensor(x.shape(), rng);
  ReluLayer<double> layer;
  layer.forward(x, true);
  Tensor<double> gx = layer.backward(r);
  auto eval = [&] { return dot(relu(x), r); };
  return probe_all("relu", eval, {{&x, gx.data()}}, kLayerTol);
}

inline CheckResult check_sigmoid(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "gc:sigmoid");
  Tensor<double> x = gaussian_tensor(Shape{1, 2, 4, 4}, rng, 1.5);
  const Tensor<double> r = gaussian_tensor(x.shape(), rng);
  SigmoidLayer<double> layer;
  layer.forward(x, true);
  Tensor<double> gx = layer.backward(r);
  auto eval = [&] { return dot(sigmoid(x), r); };
  return probe_all("sigmoid", eval, {{&x, gx.data()}}, kLayerTol);
}

inline CheckResult check_maxpool(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "gc:maxpool");
  // Distinct values with gaps far above the probe step, so the argmax cannot
  // flip during probing.
  Tensor<double> x(Shape{1, 2, 4, 4});
  std::vector<i64> perm(static_cast<std::size_t>(x.size()));
  for (i64 i = 0; i < x.size(); ++i) perm[static_cast<std::size_t>(i)] = i;
  for (i64 i = x.size() - 1; i > 0; --i)
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(i + 1)))]);
  for (i64 i = 0; i < x.size(); ++i)
    x.ptr()[i] = 0.05 * static_cast<double>(perm[static_cast<std::size_t>(i)] - 16);
  MaxPoolLayer<double> layer;
  PoolResult<double> fwd = maxpool2x2_forward(x);
  const Tensor<double> r = gaussian_tensor(fwd.out.shape(), rng);
  layer.forward(x, true);
  Tensor<double> gx = layer.backward(r);
  auto eval = [&] { return dot(maxpool2x2_forward(x).out, r); };
  return probe_all("maxpool2x2", eval, {{&x, gx.data()}}, kLayerTol);
}

inline CheckResult check_upsample(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "gc:upsample");
  Tensor<double> x = gaussian_tensor(Shape{1, 2, 4, 4}, rng);
  const Tensor<double> r = gaussian_tensor(Shape{1, 2, 7, 9}, rng);
  UpsampleLayer<double> layer;
  layer.forward(x, 7, 9, true);
  Tensor<double> gx = layer.backward(r);
  auto eval = [&] { return dot(bilinear_upsample(x, 7, 9), r); };
  return probe_all("bilinear_upsample", eval, {{&x, gx.data()}}, kLayerTol);
}

inline CheckResult check_dropout(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "gc:dropout");
  Tensor<double> x = gaussian_tensor(Shape{1, 2, 4, 4}, rng);
  const Tensor<double> r = gaussian_tensor(x.shape(), rng);
  DropoutLayer<double> layer("gc_drop", 0.5);
  layer.forward(x, Mode::train, seed, 3, true);
  Tensor<double> gx = layer.backward(r);
  auto eval = [&] { return dot(layer.forward(x, Mode::train, seed, 3, false), r); };
  return probe_all("dropout", eval, {{&x, gx.data()}}, kLayerTol);
}

inline CheckResult check_conv_block(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "gc:conv_block");
  ConvBlock<double> blk("gc_blk", 2, 3, 3);
  for (i64 i = 0; i < blk.conv.weight().size(); ++i)
    blk.conv.weight().ptr()[i] = rng.next_gaussian() * 0.4;
  for (i64 i = 0; i < blk.conv.bias().size(); ++i)
    blk.conv.bias().ptr()[i] = rng.next_gaussian() * 0.2;
  for (i64 c = 0; c < 3; ++c) {
    blk.bn.gamma().ptr()[c] = 1.0 + 0.3 * rng.next_gaussian();
    blk.bn.beta().ptr()[c] = 0.3 * rng.next_gaussian();
  }
  // Resample the input until no pre-relu activation sits near the kink,
  // where finite differences are meaningless.
  Tensor<double> x;
  for (int attempt = 0;; ++attempt) {
    x = gaussian_tensor(Shape{1, 2, 4, 4}, rng);
    Tensor<double> pre = blk.bn.forward(blk.conv.forward(x, false), Mode::train, false);
    double min_abs = 1e30;
    for (i64 i = 0; i < pre.size(); ++i)
      min_abs = std::min(min_abs, std::abs(pre.ptr()[i]));
    if (min_abs > 1e-3) break;
    if (attempt > 100) throw std::runtime_error("conv_block check: no kink-free input");
  }
  const Tensor<double> r = gaussian_tensor(Shape{1, 3, 4, 4}, rng);

  blk.conv.weight().ensure_grad();
  blk.conv.bias().ensure_grad();
  blk.bn.gamma().ensure_grad();
  blk.bn.beta().ensure_grad();
  blk.forward(x, Mode::train, false, true);
  Tensor<double> gx = blk.backward(r);

  auto eval = [&] { return dot(blk.forward(x, Mode::train, false, false), r); };
  return probe_all("conv_block", eval,
                   {{&x, gx.data()},
                    {&blk.conv.weight(), blk.conv.weight().grad()},
                    {&blk.conv.bias(), blk.conv.bias().grad()},
                    {&blk.bn.gamma(), blk.bn.gamma().grad()},
                    {&blk.bn.beta(), blk.bn.beta().grad()}},
                   kLayerTol);
}

inline CheckResult check_balanced_bce(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "gc:balanced_bce");
  // Probabilities away from both 0 and 1 keep the log curvature mild, which
  // this check's tight tolerance needs.
  Tensor<double> pred(Shape{1, 1, 4, 4});
  for (i64 i = 0; i < pred.size(); ++i) {
    const double z = std::clamp(rng.next_gaussian(), -2.5, 2.5);
    pred.ptr()[i] = 1.0 / (1.0 + std::exp(-z));
  }
  Tensor<double> gt(Shape{1, 1, 4, 4});
  for (i64 i = 0; i < gt.size(); ++i) gt.ptr()[i] = (rng.next_u64() & 1) ? 1.0 : 0.0;
  gt.ptr()[0] = 1.0;  // both classes must be present
  gt.ptr()[1] = 0.0;
  const BalancedTarget<double> target = compute_beta(gt);

  const LossValueGrad<double> analytic = balanced_bce(pred, target);
  auto eval = [&] { return balanced_bce(pred, target).value; };
  return probe_all("balanced_bce", eval, {{&pred, analytic.grad.data()}}, 1e-6);
}

}  // namespace detail

// Exhaustive finite-difference checks of every layer type on small random
// cases (inputs at most 1x2x4x4).
inline std::vector<CheckResult> layer_gradient_checks(std::uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(detail::check_conv(seed, 3, 3, "conv3x3"));
  out.push_back(detail::check_conv(seed, 1, 4, "conv1x1"));
  out.push_back(detail::check_conv(seed, 5, 2, "conv5x5"));
  out.push_back(detail::check_batchnorm(seed));
  out.push_back(detail::check_relu(seed));
  out.push_back(detail::check_sigmoid(seed));
  out.push_back(detail::check_maxpool(seed));
  out.push_back(detail::check_upsample(seed));
  out.push_back(detail::check_dropout(seed));
  out.push_back(detail::check_conv_block(seed));
  out.push_back(detail::check_balanced_bce(seed));
  return out;
}

struct NetCheckConfig {
  i64 height = 32, width = 32;
  i64 probes_per_layer = 20;
  double tol = 1e-3;
  double step = 1e-4;  // larger than the layer step: the objective is larger
  double positive_rate = 0.15;
};

// Spot-checks the full network: one cached train-mode forward (BN batch
// statistics, dropout active, running stats frozen) feeds the deeply
// supervised loss and fixes every discrete choice in the net; backward then
// computes the gradient of the smooth function those choices select.  Probes
// re-evaluate that same function through forward_frozen.  Differencing the
// raw forward instead would flip relu masks and pool argmaxes elsewhere in
// the net on almost every probe — with ~10^6 downstream activations a 1e-4
// step crosses dozens of kinks — and the error a crossing injects does not
// shrink with the step size, so the difference quotient converges to no
// derivative.  The replay is verified to reproduce the cached forward at the
// unperturbed point before any probing starts.
inline std::vector<CheckResult> network_gradient_check(std::uint64_t seed,
                                                       const NetCheckConfig& cfg = {}) {
  TdcednNet<double> net;
  net.init_params(seed);
  net.set_mode(Mode::train);
  net.set_iteration(0);

  Rng rng = Rng::stream(seed, "gc:e2e");
  Tensor<double> x(Shape{1, 3, cfg.height, cfg.width});
  for (i64 i = 0; i < x.size(); ++i) x.ptr()[i] = rng.next_uniform();
  Tensor<double> gt(Shape{1, 1, cfg.height, cfg.width});
  for (i64 i = 0; i < gt.size(); ++i)
    gt.ptr()[i] = rng.next_uniform() < cfg.positive_rate ? 1.0 : 0.0;
  gt.ptr()[0] = 1.0;
  gt.ptr()[1] = 0.0;
  const BalancedTarget<double> target = compute_beta(gt);
  const LossConfig lcfg;

  auto eval = [&] {
    auto out = net.forward_frozen(x);
    return total_loss(out.pred, out.sides, target, lcfg).total;
  };

  net.zero_grads();
  auto out = net.forward(x, false);
  const TotalLoss<double> tl = total_loss(out.pred, out.sides, target, lcfg);
  net.backward(tl.grad_pred, tl.grad_sides);
  const double floor_v = grad_floor(tl.total);

  {  // frozen replay must hit the exact branch the backward pass saw
    auto replay = net.forward_frozen(x);
    bool same = replay.pred.size() == out.pred.size() &&
                replay.sides.size() == out.sides.size();
    for (i64 i = 0; same && i < out.pred.size(); ++i)
      same = replay.pred.ptr()[i] == out.pred.ptr()[i];
    for (std::size_t s = 0; same && s < out.sides.size(); ++s)
      for (i64 i = 0; same && i < out.sides[s].size(); ++i)
        same = replay.sides[s].ptr()[i] == out.sides[s].ptr()[i];
    if (!same)
      throw std::logic_error("network check: frozen replay diverges from the forward pass");
  }

  // Group parameters by owning layer: everything before the final name
  // component ("conv1_1.weight" -> "conv1_1", "conv1_1.bn.gamma" ->
  // "conv1_1.bn").
  std::vector<std::pair<std::string, std::vector<ParamRef<double>*>>> layers;
  for (ParamRef<double>& p : net.params()) {
    const std::string layer = p.name.substr(0, p.name.rfind('.'));
    if (layers.empty() || layers.back().first != layer) layers.push_back({layer, {}});
    layers.back().second.push_back(&p);
  }

  std::vector<CheckResult> results;
  results.reserve(layers.size());
  for (auto& [layer, refs] : layers) {
    std::vector<std::vector<double>> analytic;
    i64 total_entries = 0;
    for (ParamRef<double>* p : refs) {
      analytic.push_back(p->tensor->grad());
      total_entries += p->tensor->size();
    }
    CheckResult r;
    r.name = layer;
    r.tol = cfg.tol;
    Rng picker = Rng::stream(seed, "gc:probe:" + layer);
    for (i64 probe = 0; probe < cfg.probes_per_layer; ++probe) {
      i64 flat = static_cast<i64>(picker.next_below(static_cast<std::uint64_t>(total_entries)));
      std::size_t which = 0;
      while (flat >= refs[which]->tensor->size()) {
        flat -= refs[which]->tensor->size();
        ++which;
      }
      double* slot = refs[which]->tensor->ptr() + flat;
      const double save = *slot;
      *slot = save + cfg.step;
      const double jp = eval();
      *slot = save - cfg.step;
      const double jm = eval();
      *slot = save;
      const double numeric = (jp - jm) / (2.0 * cfg.step);
      const double a = analytic[which][static_cast<std::size_t>(flat)];
      r.max_rel_err = std::max(r.max_rel_err, rel_err(a, numeric, floor_v));
      ++r.probes;
    }
    r.pass = r.max_rel_err < r.tol;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace tdcedn
