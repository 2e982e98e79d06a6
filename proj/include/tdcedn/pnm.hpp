#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdcedn {

// Minimal netpbm reader/writer: P2/P5 (grayscale) and P3/P6 (RGB), maxval up
// to 65535.  Binary samples above 255 are two bytes, most significant first,
// per the format.  Enough for camera images, annotation maps, and the 16-bit
// probability maps this tool emits; no external image dependency.

struct PnmImage {
  int width = 0, height = 0, channels = 1, maxval = 255;
  std::vector<std::uint16_t> data;  // row-major, interleaved channels
};

class PnmError : public std::runtime_error {
 public:
  explicit PnmError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline int pnm_token(std::istream& in, const std::string& path) {
  // Skips whitespace and '#' comments, then reads one non-negative integer.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) throw PnmError(path + ": malformed header");
  long v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1 << 30) throw PnmError(path + ": header value out of range");
    c = in.get();
  }
  if (c != EOF) in.unget();  // leave the delimiter for the caller
  return static_cast<int>(v);
}

}  // namespace detail

inline PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PnmError("cannot open " + path.string());
  const std::string p = path.string();
  char m0 = 0, m1 = 0;
  in.get(m0).get(m1);
  if (m0 != 'P' || (m1 != '2' && m1 != '3' && m1 != '5' && m1 != '6'))
    throw PnmError(p + ": not a P2/P3/P5/P6 file");
  const bool rgb = m1 == '3' || m1 == '6';
  const bool binary = m1 == '5' || m1 == '6';
  PnmImage img;
  img.channels = rgb ? 3 : 1;
  img.width = detail::pnm_token(in, p);
  img.height = detail::pnm_token(in, p);
  img.maxval = detail::pnm_token(in, p);
  if (img.width < 1 || img.height < 1 || img.maxval < 1 || img.maxval > 65535)
    throw PnmError(p + ": bad dimensions or maxval");
  const std::size_t count =
      static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.data.resize(count);
  if (binary) {
    const int c = in.get();  // exactly one whitespace byte after maxval
    if (c == EOF || !std::isspace(c)) throw PnmError(p + ": malformed header");
    if (img.maxval > 255) {
      std::vector<unsigned char> raw(count * 2);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
      if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw PnmError(p + ": truncated pixel data");
      for (std::size_t i = 0; i < count; ++i)
        img.data[i] = static_cast<std::uint16_t>(raw[2 * i] << 8 | raw[2 * i + 1]);
    } else {
      std::vector<unsigned char> raw(count);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
      if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw PnmError(p + ": truncated pixel data");
      for (std::size_t i = 0; i < count; ++i) img.data[i] = raw[i];
    }
  } else {
    for (std::size_t i = 0; i < count; ++i)
      img.data[i] = static_cast<std::uint16_t>(detail::pnm_token(in, p));
  }
  for (std::uint16_t v : img.data)
    if (v > img.maxval) throw PnmError(p + ": sample exceeds maxval");
  return img;
}

inline void write_pnm(const std::filesystem::path& path, const PnmImage& img) {
  if (img.channels != 1 && img.channels != 3)
    throw PnmError(path.string() + ": only 1 or 3 channels supported");
  if (img.data.size() !=
      static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw PnmError(path.string() + ": data size does not match dimensions");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PnmError("cannot open " + path.string() + " for writing");
  out << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n"
      << img.maxval << "\n";
  if (img.maxval > 255) {
    std::vector<unsigned char> raw(img.data.size() * 2);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      raw[2 * i] = static_cast<unsigned char>(img.data[i] >> 8);
      raw[2 * i + 1] = static_cast<unsigned char>(img.data[i] & 0xff);
    }
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size()));
  } else {
    std::vector<unsigned char> raw(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i)
      raw[i] = static_cast<unsigned char>(img.data[i]);
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size()));
  }
  if (!out) throw PnmError("short write to " + path.string());
}

}  // namespace tdcedn
