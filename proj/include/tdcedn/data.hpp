#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tdcedn/layers.hpp"
#include "tdcedn/pnm.hpp"
#include "tdcedn/rng.hpp"
#include "tdcedn/tensor.hpp"

namespace tdcedn {

// ---------------------------------------------------------------------------
// Manifest: one line per sample,
//   <id> <image-path> <gt-path-1>[,<gt-path-2>,...]
// '#' starts a comment; blank lines are skipped.  Relative paths are resolved
// against the manifest's own directory.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  std::vector<std::filesystem::path> annotations;
};

inline std::vector<ManifestEntry> parse_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  const std::filesystem::path base = path.parent_path();
  auto resolve = [&base](const std::string& s) {
    std::filesystem::path p(s);
    return p.is_absolute() ? p : base / p;
  };
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    ManifestEntry e;
    std::string img, gts;
    if (!(ls >> e.id)) continue;  // blank or comment-only line
    if (!(ls >> img >> gts))
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected '<id> <image> <gt>[,<gt>...]'");
    std::string extra;
    if (ls >> extra)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": unexpected trailing field '" + extra + "'");
    e.image = resolve(img);
    std::stringstream gs(gts);
    std::string one;
    while (std::getline(gs, one, ','))
      if (!one.empty()) e.annotations.push_back(resolve(one));
    if (e.annotations.empty())
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": no annotation paths");
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw std::runtime_error(path.string() + ": empty manifest");
  return entries;
}

// ---------------------------------------------------------------------------
// Loading.  Images come out as (1,3,H,W) in [0,1]; grayscale inputs are
// replicated across the three channels.  Annotations come out as binary
// (1,1,H,W) maps, thresholded at half the file's maxval.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> load_image(const std::filesystem::path& path) {
  const PnmImage img = read_pnm(path);
  Tensor<S> t(Shape{1, 3, img.height, img.width});
  const i64 plane = static_cast<i64>(img.height) * img.width;
  const S inv = S(1) / static_cast<S>(img.maxval);
  for (i64 p = 0; p < plane; ++p)
    for (i64 c = 0; c < 3; ++c)
      t.ptr()[c * plane + p] =
          static_cast<S>(img.data[p * img.channels + (img.channels == 3 ? c : 0)]) * inv;
  return t;
}

template <typename S>
Tensor<S> load_annotation(const std::filesystem::path& path) {
  const PnmImage img = read_pnm(path);
  if (img.channels != 1)
    throw std::runtime_error(path.string() + ": annotation must be grayscale");
  Tensor<S> t(Shape{1, 1, img.height, img.width});
  const double thr = 0.5 * img.maxval;
  for (i64 i = 0; i < t.size(); ++i)
    t.ptr()[i] = img.data[static_cast<std::size_t>(i)] >= thr ? S(1) : S(0);
  return t;
}

template <typename S>
struct Sample {
  std::string id;
  Tensor<S> image;                       // (1,3,H,W)
  std::vector<Tensor<S>> annotations;    // each (1,1,H,W), binary
};

template <typename S>
std::vector<Sample<S>> load_dataset(const std::filesystem::path& manifest) {
  std::vector<Sample<S>> out;
  for (const ManifestEntry& e : parse_manifest(manifest)) {
    Sample<S> s;
    s.id = e.id;
    s.image = load_image<S>(e.image);
    for (const auto& a : e.annotations) {
      Tensor<S> g = load_annotation<S>(a);
      if (g.shape().h != s.image.shape().h || g.shape().w != s.image.shape().w)
        throw std::runtime_error(a.string() + ": annotation " + g.shape().str() +
                                 " does not match image " + s.image.shape().str());
      s.annotations.push_back(std::move(g));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Consensus across annotators.  over3 marks a pixel positive when at least
// `threshold` annotators agree (majority-style, the convention for training
// labels); union marks it when anyone does (the permissive variant).
// ---------------------------------------------------------------------------

struct ConsensusPolicy {
  enum class Mode { over3, any } mode = Mode::over3;
  int threshold = 3;
};

template <typename S>
Tensor<S> consensus_gt(const std::vector<Tensor<S>>& annotations,
                       const ConsensusPolicy& policy) {
  if (annotations.empty()) throw std::invalid_argument("consensus: no annotations");
  for (const Tensor<S>& a : annotations)
    if (!(a.shape() == annotations.front().shape()))
      throw std::invalid_argument("consensus: annotation shapes differ");
  const int need = policy.mode == ConsensusPolicy::Mode::any
                       ? 1
                       : std::min<int>(policy.threshold,
                                       static_cast<int>(annotations.size()));
  Tensor<S> out(annotations.front().shape());
  for (i64 i = 0; i < out.size(); ++i) {
    int votes = 0;
    for (const Tensor<S>& a : annotations) votes += a.ptr()[i] == S(1);
    out.ptr()[i] = votes >= need ? S(1) : S(0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resize.  Images are resampled with corner-aligned bilinear interpolation in
// both directions; ground truth uses nearest neighbour and stays binary.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& x, i64 h_out, i64 w_out) {
  if (h_out < 1 || w_out < 1) throw std::invalid_argument("resize: target dim < 1");
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
        for (i64 xo = 0; xo < w_out; ++xo) {
          const auto& u = tx[static_cast<std::size_t>(xo)];
          const S top = xp[t.lo * W + u.lo] +
                        static_cast<S>(u.w_hi) * (xp[t.lo * W + u.hi] - xp[t.lo * W + u.lo]);
          const S bot = xp[t.hi * W + u.lo] +
                        static_cast<S>(u.w_hi) * (xp[t.hi * W + u.hi] - xp[t.hi * W + u.lo]);
          op[y * w_out + xo] = top + static_cast<S>(t.w_hi) * (bot - top);
        }
      }
    }
  return out;
}

template <typename S>
Tensor<S> resize_nearest(const Tensor<S>& x, i64 h_out, i64 w_out) {
  if (h_out < 1 || w_out < 1) throw std::invalid_argument("resize: target dim < 1");
  const i64 N = x.shape().n, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  Tensor<S> out(Shape{N, C, h_out, w_out});
  for (i64 n = 0; n < N; ++n)
    for (i64 c = 0; c < C; ++c) {
      const S* xp = x.ptr() + (n * C + c) * H * W;
      S* op = out.ptr() + (n * C + c) * h_out * w_out;
      for (i64 y = 0; y < h_out; ++y) {
        const i64 sy = std::min<i64>(H - 1, (2 * y + 1) * H / (2 * h_out));
        for (i64 xo = 0; xo < w_out; ++xo) {
          const i64 sx = std::min<i64>(W - 1, (2 * xo + 1) * W / (2 * w_out));
          op[y * w_out + xo] = xp[sy * W + sx];
        }
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation: right-angle rotations and optional horizontal flip, chosen
// deterministically from (rng_seed, iteration).  The flip, when drawn, is
// applied after the rotation.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> rotate90(const Tensor<S>& x, int quarter_turns) {
  int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return x;
  const i64 N = x.shape().n, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  const bool swap = q % 2 == 1;
  Tensor<S> out(Shape{N, C, swap ? W : H, swap ? H : W});
  const i64 HO = out.shape().h, WO = out.shape().w;
  for (i64 n = 0; n < N; ++n)
    for (i64 c = 0; c < C; ++c) {
      const S* xp = x.ptr() + (n * C + c) * H * W;
      S* op = out.ptr() + (n * C + c) * HO * WO;
      for (i64 y = 0; y < H; ++y)
        for (i64 xi = 0; xi < W; ++xi) {
          i64 oy, ox;  // counter-clockwise by q quarter turns
          switch (q) {
            case 1: oy = W - 1 - xi; ox = y; break;
            case 2: oy = H - 1 - y; ox = W - 1 - xi; break;
            default: oy = xi; ox = H - 1 - y; break;
          }
          op[oy * WO + ox] = xp[y * W + xi];
        }
    }
  return out;
}

template <typename S>
Tensor<S> flip_horizontal(const Tensor<S>& x) {
  const i64 N = x.shape().n, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  Tensor<S> out(x.shape());
  for (i64 n = 0; n < N; ++n)
    for (i64 c = 0; c < C; ++c)
      for (i64 y = 0; y < H; ++y) {
        const S* row = x.ptr() + ((n * C + c) * H + y) * W;
        S* orow = out.ptr() + ((n * C + c) * H + y) * W;
        for (i64 xi = 0; xi < W; ++xi) orow[xi] = row[W - 1 - xi];
      }
  return out;
}

struct AugmentSpec {
  std::vector<int> rotations{0, 1, 2, 3};  // quarter turns
  bool horizontal_flip = true;
  std::uint64_t rng_seed = 0;
};

struct AugmentChoice {
  int rotation = 0;
  bool flip = false;
};

inline AugmentChoice draw_augment(const AugmentSpec& spec, std::uint64_t iteration) {
  if (spec.rotations.empty()) throw std::invalid_argument("augment: no rotations listed");
  Rng rng = Rng::stream(spec.rng_seed, "augment", iteration);
  AugmentChoice c;
  c.rotation = spec.rotations[rng.next_below(spec.rotations.size())];
  c.flip = spec.horizontal_flip && rng.next_below(2) == 1;
  return c;
}

template <typename S>
Tensor<S> apply_augment(const Tensor<S>& x, const AugmentChoice& c) {
  Tensor<S> out = rotate90(x, c.rotation);
  if (c.flip) out = flip_horizontal(out);
  return out;
}

// ---------------------------------------------------------------------------
// Epoch ordering: a fresh deterministic shuffle per epoch (Fisher-Yates on a
// stream keyed by epoch), shared by any run with the same seed.
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed,
                                            std::uint64_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, "epoch", epoch);
  for (std::size_t i = count; i > 1; --i)
    std::swap(order[i - 1], order[rng.next_below(i)]);
  return order;
}

}  // namespace tdcedn
