#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tdcedn/inference.hpp"

namespace tdcedn {

// ---------------------------------------------------------------------------
// Non-maximum suppression.  Orientation comes from central-difference
// gradients of a Gaussian-smoothed (sigma = 1) copy of the map; each pixel is
// compared against the two bilinearly interpolated neighbours one pixel away
// along the gradient and survives only if it is >= both (ties keep both
// sides, so plateaus survive).  Samples outside the map read as zero, and
// pixels with a vanishing gradient are kept as-is since they cannot be
// oriented.  Survivors keep their original value.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<float> gaussian_smooth(const ProbMap& m) {
  constexpr int R = 3;
  double k[2 * R + 1];
  double sum = 0.0;
  for (int i = -R; i <= R; ++i) {
    k[i + R] = std::exp(-0.5 * i * i);
    sum += k[i + R];
  }
  for (double& v : k) v /= sum;
  const i64 H = m.h, W = m.w;
  std::vector<float> tmp(m.values.size()), out(m.values.size());
  auto clampi = [](i64 v, i64 hi) { return std::clamp<i64>(v, 0, hi - 1); };
  for (i64 y = 0; y < H; ++y)
    for (i64 x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int i = -R; i <= R; ++i) acc += k[i + R] * m.at(y, clampi(x + i, W));
      tmp[static_cast<std::size_t>(y * W + x)] = static_cast<float>(acc);
    }
  for (i64 y = 0; y < H; ++y)
    for (i64 x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int i = -R; i <= R; ++i)
        acc += k[i + R] * tmp[static_cast<std::size_t>(clampi(y + i, H) * W + x)];
      out[static_cast<std::size_t>(y * W + x)] = static_cast<float>(acc);
    }
  return out;
}

inline double bilinear_at(const ProbMap& m, double y, double x) {
  // Zero outside the map.
  if (y <= -1.0 || x <= -1.0 || y >= static_cast<double>(m.h) ||
      x >= static_cast<double>(m.w))
    return 0.0;
  const auto y0 = static_cast<i64>(std::floor(y)), x0 = static_cast<i64>(std::floor(x));
  const double fy = y - y0, fx = x - x0;
  auto sample = [&](i64 yy, i64 xx) -> double {
    if (yy < 0 || xx < 0 || yy >= m.h || xx >= m.w) return 0.0;
    return m.at(yy, xx);
  };
  const double top = sample(y0, x0) * (1 - fx) + sample(y0, x0 + 1) * fx;
  const double bot = sample(y0 + 1, x0) * (1 - fx) + sample(y0 + 1, x0 + 1) * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace detail

inline ProbMap nms_thin(const ProbMap& m) {
  const std::vector<float> sm = detail::gaussian_smooth(m);
  const i64 H = m.h, W = m.w;
  ProbMap out;
  out.h = H;
  out.w = W;
  out.values.assign(m.values.size(), 0.0f);
  auto s = [&](i64 y, i64 x) {
    return sm[static_cast<std::size_t>(std::clamp<i64>(y, 0, H - 1) * W +
                                       std::clamp<i64>(x, 0, W - 1))];
  };
  for (i64 y = 0; y < H; ++y)
    for (i64 x = 0; x < W; ++x) {
      const double gx = (s(y, x + 1) - s(y, x - 1)) * 0.5;
      const double gy = (s(y + 1, x) - s(y - 1, x)) * 0.5;
      const double norm = std::hypot(gx, gy);
      const float v = m.at(y, x);
      if (norm < 1e-12) {
        out.at(y, x) = v;  // flat neighbourhood: no direction to suppress along
        continue;
      }
      const double ux = gx / norm, uy = gy / norm;
      const double n1 = detail::bilinear_at(m, y + uy, x + ux);
      const double n2 = detail::bilinear_at(m, y - uy, x - ux);
      if (v >= n1 && v >= n2) out.at(y, x) = v;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Boundary matching.  Predicted boundary pixels are matched one-to-one
// against ground-truth pixels by a greedy scan: processed in a fixed priority
// order, each prediction claims the nearest still-unclaimed ground-truth
// pixel within the tolerance radius (ties by row-major ground-truth order).
// Because a prefix of the priority order always produces a prefix of the
// same greedy matching, sweeping the binarisation threshold downward can only
// add matches -- recall is monotone by construction.
// ---------------------------------------------------------------------------

struct BinaryMap {
  i64 h = 0, w = 0;
  std::vector<std::uint8_t> v;

  bool at(i64 y, i64 x) const { return v[static_cast<std::size_t>(y * w + x)] != 0; }
};

inline BinaryMap binarize(const ProbMap& m, double threshold) {
  BinaryMap b;
  b.h = m.h;
  b.w = m.w;
  b.v.resize(m.values.size());
  for (std::size_t i = 0; i < m.values.size(); ++i)
    b.v[i] = m.values[i] > threshold ? 1 : 0;
  return b;
}

// Converts a binary-valued (1,1,H,W) tensor into a BinaryMap.
template <typename S>
BinaryMap binary_map_from_mask(const Tensor<S>& t) {
  if (t.shape().n != 1 || t.shape().c != 1)
    throw std::invalid_argument("binary_map_from_mask: need a (1,1,H,W) tensor, got " +
                                t.shape().str());
  BinaryMap b;
  b.h = t.shape().h;
  b.w = t.shape().w;
  b.v.resize(static_cast<std::size_t>(t.size()));
  for (i64 i = 0; i < t.size(); ++i) {
    const S v = t.ptr()[i];
    if (v != S(0) && v != S(1))
      throw std::invalid_argument("binary_map_from_mask: value " + std::to_string(v) +
                                  " is not 0 or 1");
    b.v[static_cast<std::size_t>(i)] = v == S(1) ? 1 : 0;
  }
  return b;
}

struct MatchCounts {
  i64 matched_pred = 0, total_pred = 0;
  i64 matched_gt = 0, total_gt = 0;
};

struct MatchConfig {
  double tolerance_frac = 0.0075;  // of the image diagonal
  int num_thresholds = 99;

  double tolerance(i64 h, i64 w) const {
    return tolerance_frac * std::hypot(static_cast<double>(h), static_cast<double>(w));
  }
};

// Evenly spaced interior thresholds: i/(n+1) for i = 1..n.
inline std::vector<double> threshold_values(int n) {
  if (n < 1) throw std::invalid_argument("eval: need at least one threshold");
  std::vector<double> t(static_cast<std::size_t>(n));
  for (int i = 1; i <= n; ++i)
    t[static_cast<std::size_t>(i - 1)] = static_cast<double>(i) / (n + 1);
  return t;
}

namespace detail {

struct PixelRef {
  i64 y, x;
};

// Greedy matcher over an explicit prediction ordering.  Returns, per
// prediction pixel, the index into `gt_pixels` it matched (-1 if none).
inline std::vector<i64> greedy_match(const std::vector<PixelRef>& pred_ordered,
                                     const std::vector<PixelRef>& gt_pixels, i64 h, i64 w,
                                     double tol) {
  std::vector<std::uint8_t> gt_taken(gt_pixels.size(), 0);
  // Bucket ground-truth pixels by row for radius-limited scans.
  std::vector<std::vector<i64>> by_row(static_cast<std::size_t>(h));
  for (i64 gi = 0; gi < static_cast<i64>(gt_pixels.size()); ++gi)
    by_row[static_cast<std::size_t>(gt_pixels[static_cast<std::size_t>(gi)].y)].push_back(gi);
  const auto r = static_cast<i64>(std::floor(tol));
  const double tol2 = tol * tol;
  std::vector<i64> match(pred_ordered.size(), -1);
  for (std::size_t pi = 0; pi < pred_ordered.size(); ++pi) {
    const PixelRef p = pred_ordered[pi];
    i64 best = -1;
    double best_d2 = tol2;
    for (i64 y = std::max<i64>(0, p.y - r); y <= std::min<i64>(h - 1, p.y + r); ++y)
      for (i64 gi : by_row[static_cast<std::size_t>(y)]) {
        if (gt_taken[static_cast<std::size_t>(gi)]) continue;
        const PixelRef g = gt_pixels[static_cast<std::size_t>(gi)];
        const double dy = static_cast<double>(g.y - p.y), dx = static_cast<double>(g.x - p.x);
        const double d2 = dy * dy + dx * dx;
        if (d2 < best_d2 || (d2 == best_d2 && best != -1 && gi < best)) {
          best = gi;
          best_d2 = d2;
        } else if (best == -1 && d2 <= tol2 && d2 == best_d2) {
          best = gi;
        }
      }
    if (best != -1) {
      gt_taken[static_cast<std::size_t>(best)] = 1;
      match[pi] = best;
    }
  }
  return match;
}

inline std::vector<PixelRef> mask_pixels(const BinaryMap& m) {
  std::vector<PixelRef> px;
  for (i64 y = 0; y < m.h; ++y)
    for (i64 x = 0; x < m.w; ++x)
      if (m.at(y, x)) px.push_back({y, x});
  return px;
}

}  // namespace detail

// One-shot matching of two binary maps (prediction order: row-major).
inline MatchCounts match_boundaries(const BinaryMap& pred, const BinaryMap& gt,
                                    double tolerance) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw std::invalid_argument("match_boundaries: map sizes differ");
  const auto pred_px = detail::mask_pixels(pred);
  const auto gt_px = detail::mask_pixels(gt);
  const auto match = detail::greedy_match(pred_px, gt_px, pred.h, pred.w, tolerance);
  MatchCounts c;
  c.total_pred = static_cast<i64>(pred_px.size());
  c.total_gt = static_cast<i64>(gt_px.size());
  for (i64 m : match) c.matched_pred += m != -1;
  c.matched_gt = c.matched_pred;  // one-to-one
  return c;
}

struct ImageEval {
  std::string id;
  std::vector<MatchCounts> per_threshold;  // ascending threshold order
};

// Sweeps all thresholds with a single greedy pass: predictions are ordered by
// descending map value (row-major within ties), matched once, and the state
// after each prefix yields the counts for the corresponding threshold.
inline ImageEval evaluate_image(const std::string& id, const ProbMap& thinned,
                                const BinaryMap& gt, const MatchConfig& cfg) {
  if (thinned.h != gt.h || thinned.w != gt.w)
    throw std::invalid_argument("evaluate_image: prediction and gt sizes differ");
  const auto thresholds = threshold_values(cfg.num_thresholds);
  const double tol = cfg.tolerance(gt.h, gt.w);

  std::vector<detail::PixelRef> pred_px;
  for (i64 y = 0; y < thinned.h; ++y)
    for (i64 x = 0; x < thinned.w; ++x)
      if (thinned.at(y, x) > thresholds.front()) pred_px.push_back({y, x});
  std::stable_sort(pred_px.begin(), pred_px.end(),
                   [&](const detail::PixelRef& a, const detail::PixelRef& b) {
                     return thinned.at(a.y, a.x) > thinned.at(b.y, b.x);
                   });
  const auto gt_px = detail::mask_pixels(gt);
  const auto match = detail::greedy_match(pred_px, gt_px, gt.h, gt.w, tol);

  ImageEval ev;
  ev.id = id;
  ev.per_threshold.assign(thresholds.size(), MatchCounts{});
  // A prediction with value v is present for every threshold t < v; since it
  // keeps the same partner in every such prefix, its contribution is a range
  // over threshold indices.
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    MatchCounts& c = ev.per_threshold[k];
    c.total_gt = static_cast<i64>(gt_px.size());
    for (std::size_t pi = 0; pi < pred_px.size(); ++pi) {
      const float v = thinned.at(pred_px[pi].y, pred_px[pi].x);
      if (v > thresholds[k]) {
        ++c.total_pred;
        if (match[pi] != -1) {
          ++c.matched_pred;
          ++c.matched_gt;
        }
      }
    }
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Metrics.  Conventions: an empty prediction has precision 1; an empty
// ground truth has recall 0; F is 0 whenever P + R is 0.
// ---------------------------------------------------------------------------

struct PrPoint {
  double threshold = 0, precision = 0, recall = 0, fmeasure = 0;
};

inline double fmeasure(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

inline PrPoint pr_from_counts(const MatchCounts& c, double threshold) {
  PrPoint pt;
  pt.threshold = threshold;
  pt.precision =
      c.total_pred > 0 ? static_cast<double>(c.matched_pred) / c.total_pred : 1.0;
  pt.recall = c.total_gt > 0 ? static_cast<double>(c.matched_gt) / c.total_gt : 0.0;
  pt.fmeasure = fmeasure(pt.precision, pt.recall);
  return pt;
}

inline MatchCounts accumulate_at(const std::vector<ImageEval>& images,
                                 const std::vector<std::size_t>& choice) {
  MatchCounts total;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const MatchCounts& c = images[i].per_threshold[choice[i]];
    total.matched_pred += c.matched_pred;
    total.total_pred += c.total_pred;
    total.matched_gt += c.matched_gt;
    total.total_gt += c.total_gt;
  }
  return total;
}

// F-measure of the count totals when image i is binarised at its chosen
// threshold index.  ODS uses the same index everywhere; OIS the per-image
// best.
inline double f_with_choices(const std::vector<ImageEval>& images,
                             const std::vector<std::size_t>& choice) {
  const PrPoint pt = pr_from_counts(accumulate_at(images, choice), 0.0);
  return pt.fmeasure;
}

struct EvalSummary {
  std::vector<PrPoint> curve;  // aggregate, ascending threshold
  double ods = 0, ods_threshold = 0, ois = 0, ap = 0;
  std::size_t ods_index = 0;
};

inline EvalSummary summarize(const std::vector<ImageEval>& images, const MatchConfig& cfg) {
  if (images.empty()) throw std::invalid_argument("summarize: no images");
  const auto thresholds = threshold_values(cfg.num_thresholds);
  for (const ImageEval& ev : images)
    if (ev.per_threshold.size() != thresholds.size())
      throw std::invalid_argument("summarize: threshold count mismatch for " + ev.id);
  EvalSummary s;
  s.curve.reserve(thresholds.size());
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    const std::vector<std::size_t> all_k(images.size(), k);
    s.curve.push_back(pr_from_counts(accumulate_at(images, all_k), thresholds[k]));
    if (s.curve.back().fmeasure > s.ods) {
      s.ods = s.curve.back().fmeasure;
      s.ods_threshold = thresholds[k];
      s.ods_index = k;
    }
  }
  std::vector<std::size_t> best(images.size(), 0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    double best_f = -1.0;
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
      const double f = pr_from_counts(images[i].per_threshold[k], thresholds[k]).fmeasure;
      if (f > best_f) {
        best_f = f;
        best[i] = k;
      }
    }
  }
  s.ois = f_with_choices(images, best);

  // Average precision: precision envelope (running max from high recall to
  // low) integrated over recall by trapezoids, extended to recall 0 with the
  // leftmost envelope value.
  std::vector<std::pair<double, double>> rp;  // (recall, precision)
  rp.reserve(s.curve.size());
  for (const PrPoint& pt : s.curve) rp.emplace_back(pt.recall, pt.precision);
  std::stable_sort(rp.begin(), rp.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = rp.size() - 1; i > 0; --i)
    rp[i - 1].second = std::max(rp[i - 1].second, rp[i].second);
  double ap = rp.front().first * rp.front().second;
  for (std::size_t i = 1; i < rp.size(); ++i)
    ap += (rp[i].first - rp[i - 1].first) * 0.5 * (rp[i].second + rp[i - 1].second);
  s.ap = ap;
  return s;
}

// threshold,precision,recall,fmeasure rows plus a comment footer with the
// summary metrics.
inline void write_pr_csv(const std::filesystem::path& path, const EvalSummary& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "threshold,precision,recall,fmeasure\n";
  char line[160];
  for (const PrPoint& pt : s.curve) {
    std::snprintf(line, sizeof(line), "%.6f,%.9f,%.9f,%.9f\n", pt.threshold, pt.precision,
                  pt.recall, pt.fmeasure);
    out << line;
  }
  std::snprintf(line, sizeof(line), "# ODS %.9f at threshold %.6f\n", s.ods,
                s.ods_threshold);
  out << line;
  std::snprintf(line, sizeof(line), "# OIS %.9f\n", s.ois);
  out << line;
  std::snprintf(line, sizeof(line),
                "# AP %.9f (precision envelope, trapezoidal over recall, extended to "
                "recall 0)\n",
                s.ap);
  out << line;
  if (!out) throw std::runtime_error("short write to " + path.string());
}

// Parses a file produced by write_pr_csv.  ods_index is not stored in the
// file and is left 0.
inline EvalSummary read_pr_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "threshold,precision,recall,fmeasure")
    throw std::runtime_error(path.string() + ": missing header row");
  EvalSummary s;
  bool have_ods = false, have_ois = false, have_ap = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      double f = 0, t = 0;
      if (std::sscanf(line.c_str(), "# ODS %lf at threshold %lf", &f, &t) == 2) {
        s.ods = f;
        s.ods_threshold = t;
        have_ods = true;
      } else if (std::sscanf(line.c_str(), "# OIS %lf", &f) == 1) {
        s.ois = f;
        have_ois = true;
      } else if (std::sscanf(line.c_str(), "# AP %lf", &f) == 1) {
        s.ap = f;
        have_ap = true;
      } else {
        throw std::runtime_error(path.string() + ": unrecognised footer line: " + line);
      }
      continue;
    }
    PrPoint pt;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &pt.threshold, &pt.precision,
                    &pt.recall, &pt.fmeasure) != 4)
      throw std::runtime_error(path.string() + ": malformed row: " + line);
    s.curve.push_back(pt);
  }
  if (!have_ods || !have_ois || !have_ap)
    throw std::runtime_error(path.string() + ": summary footer incomplete");
  return s;
}

}  // namespace tdcedn
