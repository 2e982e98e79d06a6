#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "tdcedn/network.hpp"
#include "tdcedn/pnm.hpp"
#include "tdcedn/tensor.hpp"

namespace tdcedn {

// A single-channel probability map in [0,1], detached from tensor precision.
struct ProbMap {
  i64 h = 0, w = 0;
  std::vector<float> values;  // row-major

  float at(i64 y, i64 x) const { return values[static_cast<std::size_t>(y * w + x)]; }
  float& at(i64 y, i64 x) { return values[static_cast<std::size_t>(y * w + x)]; }
};

// Replicates the outermost ring of pixels outward, growing each side by
// `border`.  Used before prediction so that objects touching the frame still
// produce closed contours.
template <typename S>
Tensor<S> pad_replicate(const Tensor<S>& x, i64 border) {
  if (border < 0) throw std::invalid_argument("pad_replicate: negative border");
  if (border == 0) return x;
  const i64 N = x.shape().n, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  Tensor<S> out(Shape{N, C, H + 2 * border, W + 2 * border});
  const i64 HO = H + 2 * border, WO = W + 2 * border;
  for (i64 n = 0; n < N; ++n)
    for (i64 c = 0; c < C; ++c) {
      const S* xp = x.ptr() + (n * C + c) * H * W;
      S* op = out.ptr() + (n * C + c) * HO * WO;
      for (i64 y = 0; y < HO; ++y) {
        const i64 sy = std::clamp<i64>(y - border, 0, H - 1);
        for (i64 xo = 0; xo < WO; ++xo) {
          const i64 sx = std::clamp<i64>(xo - border, 0, W - 1);
          op[y * WO + xo] = xp[sy * W + sx];
        }
      }
    }
  return out;
}

// Inference-mode forward on a border-extended copy of the image; the border
// is cropped away again so the map matches the input size.
template <typename S>
ProbMap predict(TdcednNet<S>& net, const Tensor<S>& image, i64 border = 10) {
  if (net.mode() != Mode::infer)
    throw std::logic_error("predict: network must be in inference mode");
  if (image.shape().n != 1)
    throw std::invalid_argument("predict: expected a single image, got " +
                                image.shape().str());
  const Tensor<S> padded = pad_replicate(image, border);
  typename TdcednNet<S>::Output out = net.forward(padded, false);
  const i64 H = image.shape().h, W = image.shape().w;
  ProbMap map;
  map.h = H;
  map.w = W;
  map.values.resize(static_cast<std::size_t>(H * W));
  const i64 WP = out.pred.shape().w;
  for (i64 y = 0; y < H; ++y)
    for (i64 x = 0; x < W; ++x)
      map.values[static_cast<std::size_t>(y * W + x)] =
          static_cast<float>(out.pred.ptr()[(y + border) * WP + (x + border)]);
  return map;
}

struct FusionConfig {
  double gamma = 0.5;  // weight on the first (consensus-trained) map
};

// Convex blend of two prediction maps: gamma * a + (1 - gamma) * b.
// The blend is computed in double so that gamma = 1 returns a exactly,
// gamma = 0 returns b, fuse(a, a, g) == a, and every output stays inside
// [min(a,b), max(a,b)] pixelwise.
inline ProbMap fuse(const ProbMap& a, const ProbMap& b, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw std::invalid_argument("fuse: gamma " + std::to_string(gamma) +
                                " outside [0, 1]");
  if (a.h != b.h || a.w != b.w)
    throw std::invalid_argument("fuse: map sizes differ (" + std::to_string(a.h) + "x" +
                                std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                                std::to_string(b.w) + ")");
  ProbMap out;
  out.h = a.h;
  out.w = a.w;
  out.values.resize(a.values.size());
  for (std::size_t i = 0; i < a.values.size(); ++i)
    out.values[i] =
        static_cast<float>(gamma * a.values[i] + (1.0 - gamma) * b.values[i]);
  return out;
}

inline ProbMap fuse(const ProbMap& a, const ProbMap& b, const FusionConfig& cfg) {
  return fuse(a, b, cfg.gamma);
}

// Probability maps are stored as 16-bit PGM: value = round(p * 65535).
inline void write_probmap(const std::filesystem::path& path, const ProbMap& map) {
  PnmImage img;
  img.width = static_cast<int>(map.w);
  img.height = static_cast<int>(map.h);
  img.channels = 1;
  img.maxval = 65535;
  img.data.resize(map.values.size());
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const float p = map.values[i];
    if (!(p >= 0.0f && p <= 1.0f))
      throw std::invalid_argument(path.string() + ": probability " + std::to_string(p) +
                                  " outside [0, 1]");
    img.data[i] = static_cast<std::uint16_t>(std::lround(p * 65535.0));
  }
  write_pnm(path, img);
}

inline ProbMap read_probmap(const std::filesystem::path& path) {
  const PnmImage img = read_pnm(path);
  if (img.channels != 1)
    throw std::runtime_error(path.string() + ": probability map must be grayscale");
  ProbMap map;
  map.h = img.height;
  map.w = img.width;
  map.values.resize(img.data.size());
  const float inv = 1.0f / static_cast<float>(img.maxval);
  for (std::size_t i = 0; i < img.data.size(); ++i) map.values[i] = img.data[i] * inv;
  return map;
}

}  // namespace tdcedn
