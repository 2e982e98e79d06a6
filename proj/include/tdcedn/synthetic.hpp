#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tdcedn/pnm.hpp"

namespace tdcedn {

// Tiny self-describing dataset for smoke tests and demos: three images whose
// true contours are known analytically, each with four annotators -- three
// marking the exact contour and one dissenting slightly, so both consensus
// policies are exercised.  Everything is written as netpbm plus a manifest.

namespace detail {

inline std::vector<std::uint16_t> circle_mask(int size, double cx, double cy, double r,
                                              double half_width) {
  std::vector<std::uint16_t> m(static_cast<std::size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      if (std::abs(d - r) <= half_width) m[static_cast<std::size_t>(y) * size + x] = 255;
    }
  return m;
}

inline std::vector<std::uint16_t> rect_outline(int size, int x0, int y0, int x1, int y1) {
  std::vector<std::uint16_t> m(static_cast<std::size_t>(size) * size, 0);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (y == y0 || y == y1 || x == x0 || x == x1)
        m[static_cast<std::size_t>(y) * size + x] = 255;
  return m;
}

inline std::vector<std::uint16_t> column_mask(int size, int col) {
  std::vector<std::uint16_t> m(static_cast<std::size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y) m[static_cast<std::size_t>(y) * size + col] = 255;
  return m;
}

inline void write_gray(const std::filesystem::path& p, int size,
                       const std::vector<std::uint16_t>& data) {
  PnmImage img;
  img.width = size;
  img.height = size;
  img.channels = 1;
  img.maxval = 255;
  img.data = data;
  write_pnm(p, img);
}

inline void write_rgb(const std::filesystem::path& p, int size,
                      const std::vector<std::uint16_t>& data) {
  PnmImage img;
  img.width = size;
  img.height = size;
  img.channels = 3;
  img.maxval = 255;
  img.data = data;
  write_pnm(p, img);
}

}  // namespace detail

inline void generate_synthetic_dataset(const std::filesystem::path& dir, int size = 64) {
  if (size < 32) throw std::invalid_argument("synthetic dataset size must be >= 32");
  std::filesystem::create_directories(dir);
  const double c = (size - 1) / 2.0;
  auto px = [size](std::vector<std::uint16_t>& img, int y, int x, std::uint16_t r,
                   std::uint16_t g, std::uint16_t b) {
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * size + x);
    img[i] = r;
    img[i + 1] = g;
    img[i + 2] = b;
  };

  // Small dark disk on a light ground; the annotators trace its outline as a
  // generous band (real annotators draw fat strokes).  Kept compact so even
  // the coarsest supervision stages can localise it.
  {
    const double r = 0.1 * size;
    std::vector<std::uint16_t> img(static_cast<std::size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        if (std::hypot(x - c, y - c) <= r)
          px(img, y, x, 38, 44, 82);
        else
          px(img, y, x, 214, 214, 206);
      }
    detail::write_rgb(dir / "disk.ppm", size, img);
    const auto exact = detail::circle_mask(size, c, c, r, 2.0);
    detail::write_gray(dir / "disk_gt_1.pgm", size, exact);
    detail::write_gray(dir / "disk_gt_2.pgm", size, exact);
    detail::write_gray(dir / "disk_gt_3.pgm", size, exact);
    detail::write_gray(dir / "disk_gt_4.pgm", size,
                       detail::circle_mask(size, c, c, r + 2.0, 2.0));
  }

  // Bright rectangle; annotator 4 is off by one pixel.
  {
    const int x0 = size / 5, y0 = size / 4;
    const int x1 = (7 * size) / 10, y1 = (4 * size) / 5;
    std::vector<std::uint16_t> img(static_cast<std::size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        if (x >= x0 && x <= x1 && y >= y0 && y <= y1)
          px(img, y, x, 222, 184, 68);
        else
          px(img, y, x, 64, 70, 66);
      }
    detail::write_rgb(dir / "square.ppm", size, img);
    const auto exact = detail::rect_outline(size, x0, y0, x1, y1);
    detail::write_gray(dir / "square_gt_1.pgm", size, exact);
    detail::write_gray(dir / "square_gt_2.pgm", size, exact);
    detail::write_gray(dir / "square_gt_3.pgm", size, exact);
    detail::write_gray(dir / "square_gt_4.pgm", size,
                       detail::rect_outline(size, x0 + 1, y0 + 1, x1 + 1, y1 + 1));
  }

  // Vertical Gaussian ridge; the contour is its crest column.
  {
    const int col = (3 * size) / 5;
    const double sigma = 1.5;
    std::vector<std::uint16_t> img(static_cast<std::size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double d = x - col;
        const double v = 0.15 + 0.75 * std::exp(-d * d / (2.0 * sigma * sigma));
        const auto g = static_cast<std::uint16_t>(std::lround(v * 255.0));
        px(img, y, x, g, g, g);
      }
    detail::write_rgb(dir / "ridge.ppm", size, img);
    const auto exact = detail::column_mask(size, col);
    detail::write_gray(dir / "ridge_gt_1.pgm", size, exact);
    detail::write_gray(dir / "ridge_gt_2.pgm", size, exact);
    detail::write_gray(dir / "ridge_gt_3.pgm", size, exact);
    detail::write_gray(dir / "ridge_gt_4.pgm", size, detail::column_mask(size, col + 1));
  }

  std::ofstream mf(dir / "manifest.txt");
  mf << "# synthetic contour dataset (" << size << "x" << size << ")\n"
     << "# <id> <image> <annotation>[,<annotation>...]\n";
  for (const char* id : {"disk", "square", "ridge"}) {
    mf << id << " " << id << (std::string(".ppm")) << " ";
    for (int a = 1; a <= 4; ++a) mf << id << "_gt_" << a << ".pgm" << (a < 4 ? "," : "\n");
  }
  if (!mf) throw std::runtime_error("cannot write manifest in " + dir.string());
}

}  // namespace tdcedn
