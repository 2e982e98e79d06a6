#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "tdcedn/rng.hpp"
#include "tdcedn/tensor.hpp"

namespace tdcedn {

enum class Mode { train, infer };

// ---------------------------------------------------------------------------
// Convolution, stride 1, odd kernel, zero padding that preserves H and W.
// Loops are arranged so the innermost statement is a contiguous axpy over x,
// which the compiler turns into FMA vector code; padding is handled by
// clipping the output range per kernel tap instead of materialising a padded
// copy.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void check_conv_args(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  const Shape& ws = w.shape();
  if (ws.h != ws.w || ws.h % 2 == 0)
    throw std::invalid_argument("conv2d: kernel " + ws.str() + " must be square and odd");
  if (ws.c != x.shape().c)
    throw std::invalid_argument("conv2d: input channels " + x.shape().str() +
                                " do not match weight " + ws.str());
  if (b.size() != ws.n)
    throw std::invalid_argument("conv2d: bias size " + std::to_string(b.size()) +
                                " for " + std::to_string(ws.n) + " output channels");
}

// Copies C planes of (H, W) into (H+2, W+2) planes with a zero border, so the
// 3x3 kernels below need no edge branches and their inner loops vectorise.
template <typename S>
void pad1_planes(const S* src, i64 C, i64 H, i64 W, std::vector<S>& buf) {
  const i64 Hp = H + 2, Wp = W + 2;
  buf.assign(static_cast<std::size_t>(C * Hp * Wp), S(0));
  for (i64 c = 0; c < C; ++c) {
    const S* sp = src + c * H * W;
    S* dp = buf.data() + c * Hp * Wp + Wp + 1;
    for (i64 y = 0; y < H; ++y) std::copy_n(sp + y * W, W, dp + y * Wp);
  }
}

// out(y, x) += sum of the nine taps of w9 over the padded plane.
template <typename S>
void conv3_tap_plane(const S* __restrict__ pad, i64 Wp, const S* __restrict__ w9,
                     S* __restrict__ out, i64 H, i64 W) {
  const S w00 = w9[0], w01 = w9[1], w02 = w9[2];
  const S w10 = w9[3], w11 = w9[4], w12 = w9[5];
  const S w20 = w9[6], w21 = w9[7], w22 = w9[8];
  for (i64 y = 0; y < H; ++y) {
    const S* __restrict__ r0 = pad + y * Wp;
    const S* __restrict__ r1 = r0 + Wp;
    const S* __restrict__ r2 = r1 + Wp;
    S* __restrict__ dst = out + y * W;
    for (i64 x = 0; x < W; ++x)
      dst[x] += w00 * r0[x] + w01 * r0[x + 1] + w02 * r0[x + 2] +
                w10 * r1[x] + w11 * r1[x + 1] + w12 * r1[x + 2] +
                w20 * r2[x] + w21 * r2[x + 1] + w22 * r2[x + 2];
  }
}

// w9 += correlation of the grad plane with the padded input plane.  Each of
// the nine taps keeps eight independent partial sums, one per lane, so the
// loop vectorises without needing to reassociate a single running sum; the
// lane sums are folded once at the end.  Summation order is therefore fixed
// by this code, not by the vector width the compiler picks.
template <typename S>
void conv3_weight_grad_plane(const S* __restrict__ pad, i64 Wp,
                             const S* __restrict__ g, S* __restrict__ w9, i64 H, i64 W) {
  constexpr int L = 8;
  S acc[9][L];
  for (auto& t : acc)
    for (S& v : t) v = 0;
  S tail[9] = {};
  for (i64 y = 0; y < H; ++y) {
    const S* __restrict__ r0 = pad + y * Wp;
    const S* __restrict__ r1 = r0 + Wp;
    const S* __restrict__ r2 = r1 + Wp;
    const S* __restrict__ gr = g + y * W;
    i64 x = 0;
    for (; x + L <= W; x += L)
      for (int l = 0; l < L; ++l) {
        const S gv = gr[x + l];
        acc[0][l] += gv * r0[x + l];
        acc[1][l] += gv * r0[x + l + 1];
        acc[2][l] += gv * r0[x + l + 2];
        acc[3][l] += gv * r1[x + l];
        acc[4][l] += gv * r1[x + l + 1];
        acc[5][l] += gv * r1[x + l + 2];
        acc[6][l] += gv * r2[x + l];
        acc[7][l] += gv * r2[x + l + 1];
        acc[8][l] += gv * r2[x + l + 2];
      }
    for (; x < W; ++x) {
      const S gv = gr[x];
      tail[0] += gv * r0[x];
      tail[1] += gv * r0[x + 1];
      tail[2] += gv * r0[x + 2];
      tail[3] += gv * r1[x];
      tail[4] += gv * r1[x + 1];
      tail[5] += gv * r1[x + 2];
      tail[6] += gv * r2[x];
      tail[7] += gv * r2[x + 1];
      tail[8] += gv * r2[x + 2];
    }
  }
  for (int t = 0; t < 9; ++t) {
    S s = tail[t];
    for (int l = 0; l < L; ++l) s += acc[t][l];
    w9[t] += s;
  }
}

template <typename S>
void axpy(S* __restrict__ dst, const S* __restrict__ src, S k, i64 n) {
  for (i64 i = 0; i < n; ++i) dst[i] += k * src[i];
}

// Reference-style path for kernel sizes without a specialisation.
template <typename S>
void conv_generic_forward(const S* xp, const S* wp, S* op, i64 H, i64 W, i64 K, i64 pad) {
  for (i64 ky = 0; ky < K; ++ky) {
    const i64 dy = ky - pad;
    const i64 y0 = std::max<i64>(0, -dy), y1 = std::min<i64>(H, H - dy);
    for (i64 kx = 0; kx < K; ++kx) {
      const S wv = wp[ky * K + kx];
      const i64 dx = kx - pad;
      const i64 x0 = std::max<i64>(0, -dx), x1 = std::min<i64>(W, W - dx);
      const S* src = xp + (y0 + dy) * W + dx;
      S* dst = op + y0 * W;
      for (i64 y = y0; y < y1; ++y, src += W, dst += W)
        for (i64 xi = x0; xi < x1; ++xi) dst[xi] += wv * src[xi];
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> conv2d_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  detail::check_conv_args(x, w, b);
  const i64 N = x.shape().n, CI = x.shape().c, H = x.shape().h, W = x.shape().w;
  const i64 CO = w.shape().n, K = w.shape().h, pad = (K - 1) / 2;
  Tensor<S> out(Shape{N, CO, H, W});
  const i64 plane = H * W, pplane = (H + 2) * (W + 2);
  std::vector<S> padbuf;
  for (i64 n = 0; n < N; ++n) {
    S* obase = out.ptr() + n * CO * plane;
    for (i64 o = 0; o < CO; ++o)
      std::fill(obase + o * plane, obase + (o + 1) * plane, b.ptr()[o]);
    if (K == 3) {
      detail::pad1_planes(x.ptr() + n * CI * plane, CI, H, W, padbuf);
      for (i64 o = 0; o < CO; ++o)
        for (i64 i = 0; i < CI; ++i)
          detail::conv3_tap_plane(padbuf.data() + i * pplane, W + 2,
                                  w.ptr() + (o * CI + i) * 9, obase + o * plane, H, W);
    } else {
      for (i64 o = 0; o < CO; ++o)
        for (i64 i = 0; i < CI; ++i) {
          const S* wp = w.ptr() + (o * CI + i) * K * K;
          if (K == 1)
            detail::axpy(obase + o * plane, x.ptr() + (n * CI + i) * plane, wp[0], plane);
          else
            detail::conv_generic_forward(x.ptr() + (n * CI + i) * plane, wp,
                                         obase + o * plane, H, W, K, pad);
        }
    }
  }
  return out;
}

template <typename S>
struct Conv2dGrads {
  Tensor<S> x, w, b;
};

template <typename S>
Conv2dGrads<S> conv2d_backward(const Tensor<S>& x, const Tensor<S>& w,
                               const Tensor<S>& grad_out) {
  const i64 N = x.shape().n, CI = x.shape().c, H = x.shape().h, W = x.shape().w;
  const i64 CO = w.shape().n, K = w.shape().h, pad = (K - 1) / 2;
  if (!(grad_out.shape() == Shape{N, CO, H, W}))
    throw std::invalid_argument("conv2d_backward: grad shape " + grad_out.shape().str());
  Conv2dGrads<S> g{Tensor<S>(x.shape()), Tensor<S>(w.shape()),
                   Tensor<S>(Shape{CO, 1, 1, 1})};
  const i64 plane = H * W, pplane = (H + 2) * (W + 2);
  std::vector<S> padx, padg;
  for (i64 n = 0; n < N; ++n) {
    for (i64 o = 0; o < CO; ++o) {
      const S* gp = grad_out.ptr() + (n * CO + o) * plane;
      S acc = 0;
      for (i64 p = 0; p < plane; ++p) acc += gp[p];
      g.b.ptr()[o] += acc;
    }
    if (K == 3) {
      detail::pad1_planes(x.ptr() + n * CI * plane, CI, H, W, padx);
      detail::pad1_planes(grad_out.ptr() + n * CO * plane, CO, H, W, padg);
      for (i64 o = 0; o < CO; ++o) {
        const S* gp = grad_out.ptr() + (n * CO + o) * plane;
        for (i64 i = 0; i < CI; ++i)
          detail::conv3_weight_grad_plane(padx.data() + i * pplane, W + 2, gp,
                                          g.w.ptr() + (o * CI + i) * 9, H, W);
      }
      // dL/dx is the grad correlated with the 180-degree-flipped kernel.
      S* gxbase = g.x.ptr() + n * CI * plane;
      for (i64 i = 0; i < CI; ++i)
        for (i64 o = 0; o < CO; ++o) {
          const S* wp = w.ptr() + (o * CI + i) * 9;
          S wf[9];
          for (int k = 0; k < 9; ++k) wf[k] = wp[8 - k];
          detail::conv3_tap_plane(padg.data() + o * pplane, W + 2, wf,
                                  gxbase + i * plane, H, W);
        }
      continue;
    }
    for (i64 o = 0; o < CO; ++o) {
      const S* gp = grad_out.ptr() + (n * CO + o) * plane;
      for (i64 i = 0; i < CI; ++i) {
        const S* xp = x.ptr() + (n * CI + i) * plane;
        S* gxp = g.x.ptr() + (n * CI + i) * plane;
        const S* wp = w.ptr() + (o * CI + i) * K * K;
        S* gwp = g.w.ptr() + (o * CI + i) * K * K;
        if (K == 1) {
          S wacc = 0;
          for (i64 p = 0; p < plane; ++p) wacc += gp[p] * xp[p];
          gwp[0] += wacc;
          detail::axpy(gxp, gp, wp[0], plane);
          continue;
        }
        for (i64 ky = 0; ky < K; ++ky) {
          const i64 dy = ky - pad;
          const i64 y0 = std::max<i64>(0, -dy), y1 = std::min<i64>(H, H - dy);
          for (i64 kx = 0; kx < K; ++kx) {
            const i64 dx = kx - pad;
            const i64 x0 = std::max<i64>(0, -dx), x1 = std::min<i64>(W, W - dx);
            // dL/dw[o,i,ky,kx]: dot of grad_out with the shifted input plane.
            S wacc = 0;
            {
              const S* src = xp + (y0 + dy) * W + dx;
              const S* go = gp + y0 * W;
              for (i64 y = y0; y < y1; ++y, src += W, go += W)
                for (i64 xi = x0; xi < x1; ++xi) wacc += go[xi] * src[xi];
            }
            gwp[ky * K + kx] += wacc;
            // dL/dx: the same clipped range, scattering the tap's weight back.
            const S wv = wp[ky * K + kx];
            S* dst = gxp + (y0 + dy) * W + dx;
            const S* go = gp + y0 * W;
            for (i64 y = y0; y < y1; ++y, dst += W, go += W)
              for (i64 xi = x0; xi < x1; ++xi) dst[xi] += wv * go[xi];
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pointwise ops.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  for (i64 i = 0; i < x.size(); ++i) out.ptr()[i] = x.ptr()[i] > S(0) ? x.ptr()[i] : S(0);
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  for (i64 i = 0; i < x.size(); ++i) out.ptr()[i] = S(1) / (S(1) + std::exp(-x.ptr()[i]));
  return out;
}

// ---------------------------------------------------------------------------
// 2x2 max pool, stride 2, no overlap.  Odd trailing rows/columns are dropped
// (floor semantics), matching how the encoder reaches 12x12 from 400x400.
// Ties keep the first maximum in scan order, so backward routes each grad to
// exactly one input.
// ---------------------------------------------------------------------------

template <typename S>
struct PoolResult {
  Tensor<S> out;
  std::vector<i64> argmax;  // flat input index per output element
};

template <typename S>
PoolResult<S> maxpool2x2_forward(const Tensor<S>& x) {
  const i64 N = x.shape().n, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  if (H < 2 || W < 2)
    throw std::invalid_argument("maxpool2x2: input " + x.shape().str() + " too small");
  const i64 HO = H / 2, WO = W / 2;
  PoolResult<S> r{Tensor<S>(Shape{N, C, HO, WO}),
                  std::vector<i64>(static_cast<std::size_t>(N * C * HO * WO))};
  for (i64 n = 0; n < N; ++n)
    for (i64 c = 0; c < C; ++c) {
      const S* xp = x.ptr() + (n * C + c) * H * W;
      S* op = r.out.ptr() + (n * C + c) * HO * WO;
      i64* ap = r.argmax.data() + (n * C + c) * HO * WO;
      for (i64 y = 0; y < HO; ++y)
        for (i64 xo = 0; xo < WO; ++xo) {
          i64 best = (2 * y) * W + 2 * xo;
          S bv = xp[best];
          const i64 cand[3] = {best + 1, best + W, best + W + 1};
          for (i64 k : cand)
            if (xp[k] > bv) {
              bv = xp[k];
              best = k;
            }
          op[y * WO + xo] = bv;
          ap[y * WO + xo] = (n * C + c) * H * W + best;
        }
    }
  return r;
}

template <typename S>
Tensor<S> maxpool2x2_backward(const Tensor<S>& grad_out, const std::vector<i64>& argmax,
                              const Shape& in_shape) {
  Tensor<S> gx(in_shape);
  if (static_cast<std::size_t>(grad_out.size()) != argmax.size())
    throw std::invalid_argument("maxpool2x2_backward: argmax size mismatch");
  for (i64 i = 0; i < grad_out.size(); ++i)
    gx.ptr()[argmax[static_cast<std::size_t>(i)]] += grad_out.ptr()[i];
  return gx;
}

// ---------------------------------------------------------------------------
// Bilinear interpolation to a larger grid, corner-aligned: output corners map
// exactly onto input corners, so a 1x2 row [0,1] stretched to 1x4 reads
// [0, 1/3, 2/3, 1].  The map is linear in the input, hence backward is the
// transpose scatter of the same weights.
// ---------------------------------------------------------------------------

struct BilinearTap {
  i64 lo, hi;
  double w_hi;  // weight of hi; lo gets 1 - w_hi
};

inline std::vector<BilinearTap> bilinear_taps(i64 in_dim, i64 out_dim) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(out_dim));
  const double scale = out_dim > 1 ? static_cast<double>(in_dim - 1) / static_cast<double>(out_dim - 1) : 0.0;
  for (i64 o = 0; o < out_dim; ++o) {
    const double pos = static_cast<double>(o) * scale;
    i64 lo = static_cast<i64>(std::floor(pos));
    if (lo > in_dim - 2) lo = in_dim >= 2 ? in_dim - 2 : 0;
    const i64 hi = std::min(lo + 1, in_dim - 1);
    double w = pos - static_cast<double>(lo);
    if (w >= 1.0) {  // exact hit past the edge clamp: keep the lerp exact
      lo = hi;
      w = 0.0;
    }
    taps[static_cast<std::size_t>(o)] = {lo, hi, w};
  }
  return taps;
}

namespace detail {
template <typename S>
void check_upsample(const Shape& in, i64 h_out, i64 w_out) {
  if (h_out < in.h || w_out < in.w)
    throw std::invalid_argument("bilinear_upsample: target " + std::to_string(h_out) +
                                "x" + std::to_string(w_out) + " smaller than input " +
                                in.str());
}
}  // namespace detail

template <typename S>
Tensor<S> bilinear_upsample(const Tensor<S>& x, i64 h_out, i64 w_out) {
  detail::check_upsample<S>(x.shape(), h_out, w_out);
  const i64 N = x.shape().n, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  const auto ty = bilinear_taps(H, h_out);
  const auto tx = bilinear_taps(W, w_out);
  Tensor<S> out(Shape{N, C, h_out, w_out});
  for (i64 n = 0; n < N; ++n)
    for (i64 c = 0; c < C; ++c) {
      const S* xp = x.ptr() + (n * C + c) * H * W;
      S* op = out.ptr() + (n * C + c) * h_out * w_out;
      for (i64 y = 0; y < h_out; ++y) {
        const auto& t = ty[static_cast<std::size_t>(y)];
        const S* r0 = xp + t.lo * W;
        const S* r1 = xp + t.hi * W;
        const S wy = static_cast<S>(t.w_hi);
        for (i64 xo = 0; xo < w_out; ++xo) {
          const auto& u = tx[static_cast<std::size_t>(xo)];
          const S wx = static_cast<S>(u.w_hi);
          const S top = r0[u.lo] + wx * (r0[u.hi] - r0[u.lo]);
          const S bot = r1[u.lo] + wx * (r1[u.hi] - r1[u.lo]);
          op[y * w_out + xo] = top + wy * (bot - top);
        }
      }
    }
  return out;
}

template <typename S>
Tensor<S> bilinear_upsample_backward(const Tensor<S>& grad_out, const Shape& in_shape) {
  detail::check_upsample<S>(in_shape, grad_out.shape().h, grad_out.shape().w);
  const i64 N = in_shape.n, C = in_shape.c, H = in_shape.h, W = in_shape.w;
  const i64 HO = grad_out.shape().h, WO = grad_out.shape().w;
  const auto ty = bilinear_taps(H, HO);
  const auto tx = bilinear_taps(W, WO);
  Tensor<S> gx(in_shape);
  for (i64 n = 0; n < N; ++n)
    for (i64 c = 0; c < C; ++c) {
      const S* gp = grad_out.ptr() + (n * C + c) * HO * WO;
      S* xp = gx.ptr() + (n * C + c) * H * W;
      for (i64 y = 0; y < HO; ++y) {
        const auto& t = ty[static_cast<std::size_t>(y)];
        const S wy = static_cast<S>(t.w_hi);
        for (i64 xo = 0; xo < WO; ++xo) {
          const auto& u = tx[static_cast<std::size_t>(xo)];
          const S wx = static_cast<S>(u.w_hi);
          const S g = gp[y * WO + xo];
          xp[t.lo * W + u.lo] += (S(1) - wy) * (S(1) - wx) * g;
          xp[t.lo * W + u.hi] += (S(1) - wy) * wx * g;
          xp[t.hi * W + u.lo] += wy * (S(1) - wx) * g;
          xp[t.hi * W + u.hi] += wy * wx * g;
        }
      }
    }
  return gx;
}

// ---------------------------------------------------------------------------
// Layer classes.  Each owns its parameters and caches whatever its backward
// pass needs; backward accumulates parameter gradients in place and returns
// the input gradient.
// ---------------------------------------------------------------------------

template <typename S>
class Conv2dLayer {
 public:
  Conv2dLayer(std::string name, i64 c_in, i64 c_out, i64 k)
      : name_(std::move(name)),
        weight_(Shape{c_out, c_in, k, k}),
        bias_(Shape{c_out, 1, 1, 1}) {}

  const std::string& name() const { return name_; }
  Tensor<S>& weight() { return weight_; }
  const Tensor<S>& weight() const { return weight_; }
  Tensor<S>& bias() { return bias_; }
  const Tensor<S>& bias() const { return bias_; }

  Tensor<S> forward(const Tensor<S>& x, bool cache_input) {
    if (cache_input) {
      cached_x_ = x;
      has_cache_ = true;
    } else {
      has_cache_ = false;
    }
    return conv2d_forward(x, weight_, bias_);
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!has_cache_) throw std::logic_error(name_ + ": backward without cached forward");
    Conv2dGrads<S> g = conv2d_backward(cached_x_, weight_, grad_out);
    weight_.add_grad(g.w);
    bias_.add_grad(g.b);
    return std::move(g.x);
  }

 private:
  std::string name_;
  Tensor<S> weight_, bias_;
  Tensor<S> cached_x_;
  bool has_cache_ = false;
};

// Batch norm over (n, h, w) per channel.  Normalisation and the running-stat
// update both use the biased batch variance.  Inference applies the running
// stats pointwise and never touches them.
template <typename S>
class BatchNormLayer {
 public:
  BatchNormLayer(std::string name, i64 channels, S eps = S(1e-5), S momentum = S(0.1))
      : name_(std::move(name)),
        gamma_(Shape{channels, 1, 1, 1}, S(1)),
        beta_(Shape{channels, 1, 1, 1}),
        running_mean_(Shape{channels, 1, 1, 1}),
        running_var_(Shape{channels, 1, 1, 1}, S(1)),
        eps_(eps),
        momentum_(momentum) {}

  const std::string& name() const { return name_; }
  Tensor<S>& gamma() { return gamma_; }
  Tensor<S>& beta() { return beta_; }
  Tensor<S>& running_mean() { return running_mean_; }
  Tensor<S>& running_var() { return running_var_; }

  Tensor<S> forward(const Tensor<S>& x, Mode mode, bool update_stats) {
    const i64 C = gamma_.shape().n;
    if (x.shape().c != C)
      throw std::invalid_argument(name_ + ": input " + x.shape().str() + " for " +
                                  std::to_string(C) + " channels");
    const i64 N = x.shape().n, H = x.shape().h, W = x.shape().w;
    const i64 plane = H * W, m = N * plane;
    Tensor<S> out(x.shape());
    if (mode == Mode::infer) {
      for (i64 c = 0; c < C; ++c) {
        const S inv = S(1) / std::sqrt(running_var_.ptr()[c] + eps_);
        const S g = gamma_.ptr()[c] * inv;
        const S b = beta_.ptr()[c] - running_mean_.ptr()[c] * g;
        for (i64 n = 0; n < N; ++n) {
          const S* xp = x.ptr() + (n * C + c) * plane;
          S* op = out.ptr() + (n * C + c) * plane;
          for (i64 p = 0; p < plane; ++p) op[p] = g * xp[p] + b;
        }
      }
      has_cache_ = false;
      return out;
    }
    if (m < 2)
      throw std::invalid_argument(name_ + ": batch of " + std::to_string(m) +
                                  " values per channel cannot be normalised");
    xhat_ = Tensor<S>(x.shape());
    invstd_.assign(static_cast<std::size_t>(C), S(0));
    count_ = m;
    for (i64 c = 0; c < C; ++c) {
      S mean = 0, var = 0;
      for (i64 n = 0; n < N; ++n) {
        const S* xp = x.ptr() + (n * C + c) * plane;
        for (i64 p = 0; p < plane; ++p) mean += xp[p];
      }
      mean /= static_cast<S>(m);
      for (i64 n = 0; n < N; ++n) {
        const S* xp = x.ptr() + (n * C + c) * plane;
        for (i64 p = 0; p < plane; ++p) {
          const S d = xp[p] - mean;
          var += d * d;
        }
      }
      var /= static_cast<S>(m);
      const S inv = S(1) / std::sqrt(var + eps_);
      invstd_[static_cast<std::size_t>(c)] = inv;
      const S g = gamma_.ptr()[c], b = beta_.ptr()[c];
      for (i64 n = 0; n < N; ++n) {
        const S* xp = x.ptr() + (n * C + c) * plane;
        S* hp = xhat_.ptr() + (n * C + c) * plane;
        S* op = out.ptr() + (n * C + c) * plane;
        for (i64 p = 0; p < plane; ++p) {
          const S h = (xp[p] - mean) * inv;
          hp[p] = h;
          op[p] = g * h + b;
        }
      }
      if (update_stats) {
        running_mean_.ptr()[c] = (S(1) - momentum_) * running_mean_.ptr()[c] + momentum_ * mean;
        running_var_.ptr()[c] = (S(1) - momentum_) * running_var_.ptr()[c] + momentum_ * var;
      }
    }
    has_cache_ = true;
    return out;
  }

  // Train-mode normalisation with fresh batch statistics but no cache or
  // running-stat writes, so it can interleave with an in-flight
  // forward/backward pair.  The arithmetic mirrors forward() exactly.
  Tensor<S> forward_frozen(const Tensor<S>& x) const {
    const i64 C = gamma_.shape().n;
    if (x.shape().c != C)
      throw std::invalid_argument(name_ + ": input " + x.shape().str() + " for " +
                                  std::to_string(C) + " channels");
    const i64 N = x.shape().n, H = x.shape().h, W = x.shape().w;
    const i64 plane = H * W, m = N * plane;
    if (m < 2)
      throw std::invalid_argument(name_ + ": batch of " + std::to_string(m) +
                                  " values per channel cannot be normalised");
    Tensor<S> out(x.shape());
    for (i64 c = 0; c < C; ++c) {
      S mean = 0, var = 0;
      for (i64 n = 0; n < N; ++n) {
        const S* xp = x.ptr() + (n * C + c) * plane;
        for (i64 p = 0; p < plane; ++p) mean += xp[p];
      }
      mean /= static_cast<S>(m);
      for (i64 n = 0; n < N; ++n) {
        const S* xp = x.ptr() + (n * C + c) * plane;
        for (i64 p = 0; p < plane; ++p) {
          const S d = xp[p] - mean;
          var += d * d;
        }
      }
      var /= static_cast<S>(m);
      const S inv = S(1) / std::sqrt(var + eps_);
      const S g = gamma_.ptr()[c], b = beta_.ptr()[c];
      for (i64 n = 0; n < N; ++n) {
        const S* xp = x.ptr() + (n * C + c) * plane;
        S* op = out.ptr() + (n * C + c) * plane;
        for (i64 p = 0; p < plane; ++p) {
          const S h = (xp[p] - mean) * inv;
          op[p] = g * h + b;
        }
      }
    }
    return out;
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!has_cache_) throw std::logic_error(name_ + ": backward without cached forward");
    const i64 C = gamma_.shape().n;
    const i64 N = grad_out.shape().n, plane = grad_out.shape().h * grad_out.shape().w;
    const S m = static_cast<S>(count_);
    Tensor<S> gx(grad_out.shape());
    gamma_.ensure_grad();
    beta_.ensure_grad();
    for (i64 c = 0; c < C; ++c) {
      S sum_g = 0, sum_gh = 0;
      for (i64 n = 0; n < N; ++n) {
        const S* gp = grad_out.ptr() + (n * C + c) * plane;
        const S* hp = xhat_.ptr() + (n * C + c) * plane;
        for (i64 p = 0; p < plane; ++p) {
          sum_g += gp[p];
          sum_gh += gp[p] * hp[p];
        }
      }
      gamma_.grad()[static_cast<std::size_t>(c)] += sum_gh;
      beta_.grad()[static_cast<std::size_t>(c)] += sum_g;
      // d/dx of (x - mean) * invstd with mean and invstd batch-dependent:
      // gx = gamma * invstd / m * (m*g - sum_g - xhat * sum_gh)
      const S k = gamma_.ptr()[c] * invstd_[static_cast<std::size_t>(c)] / m;
      for (i64 n = 0; n < N; ++n) {
        const S* gp = grad_out.ptr() + (n * C + c) * plane;
        const S* hp = xhat_.ptr() + (n * C + c) * plane;
        S* op = gx.ptr() + (n * C + c) * plane;
        for (i64 p = 0; p < plane; ++p)
          op[p] = k * (m * gp[p] - sum_g - hp[p] * sum_gh);
      }
    }
    return gx;
  }

 private:
  std::string name_;
  Tensor<S> gamma_, beta_, running_mean_, running_var_;
  S eps_, momentum_;
  Tensor<S> xhat_;
  std::vector<S> invstd_;
  i64 count_ = 0;
  bool has_cache_ = false;
};

template <typename S>
class ReluLayer {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool cache) {
    Tensor<S> out = relu(x);
    if (cache) {
      mask_.assign(static_cast<std::size_t>(x.size()), 0);
      for (i64 i = 0; i < x.size(); ++i)
        mask_[static_cast<std::size_t>(i)] = x.ptr()[i] > S(0);
      has_cache_ = true;
    } else {
      has_cache_ = false;
    }
    return out;
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!has_cache_) throw std::logic_error("relu: backward without cached forward");
    Tensor<S> gx(grad_out.shape());
    for (i64 i = 0; i < grad_out.size(); ++i)
      gx.ptr()[i] = mask_[static_cast<std::size_t>(i)] ? grad_out.ptr()[i] : S(0);
    return gx;
  }

  // Applies the cached mask to a fresh input instead of thresholding it.
  // This evaluates the linear branch backward() differentiates, which is what
  // finite-difference probes of a surrounding network must step along.
  Tensor<S> forward_frozen(const Tensor<S>& x) const {
    if (!has_cache_ || mask_.size() != static_cast<std::size_t>(x.size()))
      throw std::logic_error("relu: frozen forward without matching cached forward");
    Tensor<S> out(x.shape());
    for (i64 i = 0; i < x.size(); ++i)
      out.ptr()[i] = mask_[static_cast<std::size_t>(i)] ? x.ptr()[i] : S(0);
    return out;
  }

 private:
  std::vector<unsigned char> mask_;
  bool has_cache_ = false;
};

template <typename S>
class SigmoidLayer {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool cache) {
    Tensor<S> out = sigmoid(x);
    if (cache) {
      y_ = out;
      has_cache_ = true;
    } else {
      has_cache_ = false;
    }
    return out;
  }

  // dy/dz = y(1-y), but a low-precision sigmoid rounds to exactly 0 or 1 once
  // |z| exceeds ~17, zeroing the product while a clamped cross entropy still
  // penalises the pixel -- the gradient dies and the pixel can never recover.
  // Clamping y away from {0,1} by the same margin the loss clamps with keeps
  // the chain alive; combined with the loss gradient this yields
  // weight * (y_clamped - target), the standard fused logits form.
  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!has_cache_) throw std::logic_error("sigmoid: backward without cached forward");
    Tensor<S> gx(grad_out.shape());
    for (i64 i = 0; i < grad_out.size(); ++i) {
      const double y = std::min(std::max(static_cast<double>(y_.ptr()[i]), kDerivClamp),
                                1.0 - kDerivClamp);
      gx.ptr()[i] =
          static_cast<S>(static_cast<double>(grad_out.ptr()[i]) * y * (1.0 - y));
    }
    return gx;
  }

 private:
  static constexpr double kDerivClamp = 1e-12;

  Tensor<S> y_;
  bool has_cache_ = false;
};

template <typename S>
class MaxPoolLayer {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool cache) {
    PoolResult<S> r = maxpool2x2_forward(x);
    if (cache) {
      argmax_ = std::move(r.argmax);
      in_shape_ = x.shape();
      has_cache_ = true;
    } else {
      has_cache_ = false;
    }
    return std::move(r.out);
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!has_cache_) throw std::logic_error("maxpool: backward without cached forward");
    return maxpool2x2_backward(grad_out, argmax_, in_shape_);
  }

  // Gathers through the cached argmax instead of re-running the max, so a
  // perturbed input is routed exactly like the forward pass backward() saw.
  Tensor<S> forward_frozen(const Tensor<S>& x) const {
    if (!has_cache_ || x.shape() != in_shape_)
      throw std::logic_error("maxpool: frozen forward without matching cached forward");
    const Shape& s = in_shape_;
    Tensor<S> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
    for (i64 i = 0; i < out.size(); ++i)
      out.ptr()[i] = x.ptr()[argmax_[static_cast<std::size_t>(i)]];
    return out;
  }

 private:
  std::vector<i64> argmax_;
  Shape in_shape_;
  bool has_cache_ = false;
};

// Fixed (non-trainable) bilinear resize.  The interpolation taps are a pure
// function of the input and output dims; a checksum over them is exposed so
// callers can assert they never drift during training.
template <typename S>
class UpsampleLayer {
 public:
  Tensor<S> forward(const Tensor<S>& x, i64 h_out, i64 w_out, bool cache) {
    const auto ty = bilinear_taps(x.shape().h, h_out);
    const auto tx = bilinear_taps(x.shape().w, w_out);
    std::uint64_t h = fnv1a64_bytes(ty.data(), ty.size() * sizeof(BilinearTap));
    h ^= fnv1a64_bytes(tx.data(), tx.size() * sizeof(BilinearTap));
    tap_checksum_ = h;
    if (cache) {
      in_shape_ = x.shape();
      has_cache_ = true;
    } else {
      has_cache_ = false;
    }
    return bilinear_upsample(x, h_out, w_out);
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!has_cache_) throw std::logic_error("upsample: backward without cached forward");
    return bilinear_upsample_backward(grad_out, in_shape_);
  }

  std::uint64_t tap_checksum() const { return tap_checksum_; }

 private:
  Shape in_shape_;
  std::uint64_t tap_checksum_ = 0;
  bool has_cache_ = false;
};

// Inverted dropout.  The mask is a pure function of (seed, layer name,
// iteration): re-running an iteration reproduces it exactly, and inference is
// the bitwise identity.
template <typename S>
class DropoutLayer {
 public:
  DropoutLayer(std::string name, double rate) : name_(std::move(name)), rate_(rate) {
    if (rate < 0.0 || rate >= 1.0)
      throw std::invalid_argument(name_ + ": dropout rate " + std::to_string(rate));
  }

  const std::string& name() const { return name_; }

  Tensor<S> forward(const Tensor<S>& x, Mode mode, std::uint64_t seed,
                    std::uint64_t iteration, bool cache) {
    if (mode == Mode::infer || rate_ == 0.0) {
      mask_.clear();
      has_cache_ = cache;
      identity_ = true;
      return x;
    }
    Rng rng = Rng::stream(seed, "dropout:" + name_, iteration);
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate_));
    mask_.assign(static_cast<std::size_t>(x.size()), S(0));
    Tensor<S> out(x.shape());
    for (i64 i = 0; i < x.size(); ++i) {
      if (rng.next_uniform() >= rate_) {
        mask_[static_cast<std::size_t>(i)] = keep_scale;
        out.ptr()[i] = x.ptr()[i] * keep_scale;
      }
    }
    has_cache_ = cache;
    identity_ = false;
    return out;
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!has_cache_) throw std::logic_error(name_ + ": backward without cached forward");
    if (identity_) return grad_out;
    Tensor<S> gx(grad_out.shape());
    for (i64 i = 0; i < grad_out.size(); ++i)
      gx.ptr()[i] = grad_out.ptr()[i] * mask_[static_cast<std::size_t>(i)];
    return gx;
  }

  // Reapplies the cached mask; the mask is already deterministic per
  // iteration, this just skips the redraw for fresh inputs.
  Tensor<S> forward_frozen(const Tensor<S>& x) const {
    if (!has_cache_) throw std::logic_error(name_ + ": frozen forward without cached forward");
    if (identity_) return x;
    if (mask_.size() != static_cast<std::size_t>(x.size()))
      throw std::logic_error(name_ + ": frozen forward shape mismatch");
    Tensor<S> out(x.shape());
    for (i64 i = 0; i < x.size(); ++i)
      out.ptr()[i] = x.ptr()[i] * mask_[static_cast<std::size_t>(i)];
    return out;
  }

 private:
  std::string name_;
  double rate_;
  std::vector<S> mask_;
  bool identity_ = true;
  bool has_cache_ = false;
};

}  // namespace tdcedn
