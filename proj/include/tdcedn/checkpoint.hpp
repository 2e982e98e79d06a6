#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdcedn/network.hpp"
#include "tdcedn/tensor.hpp"

namespace tdcedn {

// Checkpoint container: magic "TDCEDN01", u32 version, u8 precision tag
// (0 = f32, 1 = f64), u32 record count, then per record a u16 name length,
// the name bytes, u8 rank, u32 dims, and the raw little-endian IEEE-754
// payload; a u32 CRC-32 (zlib polynomial) over everything before it closes
// the file.  All integers little-endian.
inline constexpr char kCheckpointMagic[8] = {'T', 'D', 'C', 'E', 'D', 'N', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialisation assumes a little-endian host");

enum class CheckpointErrorKind {
  io,
  bad_magic,
  bad_version,
  bad_precision,
  bad_crc,
  malformed,
  missing_param,
  unexpected_param,
  shape_mismatch,
};

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : std::runtime_error("checkpoint: " + what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct CheckpointRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (std::uint32_t d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  put_bytes(out, &v, sizeof(T));
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

  template <typename T>
  T get() {
    T v;
    take(&v, sizeof(T));
    return v;
  }

  void take(void* dst, std::size_t n) {
    if (pos_ + n > n_)
      throw CheckpointError(CheckpointErrorKind::malformed, "record overruns file");
    std::memcpy(dst, p_ + pos_, n);
    pos_ += n;
  }

  std::size_t remaining() const { return n_ - pos_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_, pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(Precision precision,
                                                   const std::vector<CheckpointRecord>& records) {
  std::vector<std::uint8_t> buf;
  detail::put_bytes(buf, kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(buf, kCheckpointVersion);
  detail::put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(precision));
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(records.size()));
  for (const CheckpointRecord& r : records) {
    if (r.name.size() > 0xffff)
      throw CheckpointError(CheckpointErrorKind::malformed, "record name too long");
    detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(r.name.size()));
    detail::put_bytes(buf, r.name.data(), r.name.size());
    detail::put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(r.dims.size()));
    for (std::uint32_t d : r.dims) detail::put_le<std::uint32_t>(buf, d);
    detail::put_bytes(buf, r.payload.data(), r.payload.size());
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
  detail::put_le<std::uint32_t>(buf, crc);
  return buf;
}

inline std::pair<Precision, std::vector<CheckpointRecord>> decode_checkpoint(
    const std::vector<std::uint8_t>& buf) {
  constexpr std::size_t header = sizeof(kCheckpointMagic) + 4 + 1 + 4;
  if (buf.size() < header + 4)
    throw CheckpointError(CheckpointErrorKind::malformed, "file too short");
  // Integrity first: a truncated or bit-flipped file fails here before any
  // structural parsing is attempted.
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
  const auto computed = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4)));
  if (stored_crc != computed)
    throw CheckpointError(CheckpointErrorKind::bad_crc, "CRC mismatch (corrupt or truncated file)");
  if (std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw CheckpointError(CheckpointErrorKind::bad_magic, "bad magic");
  detail::ByteReader rd(buf.data() + sizeof(kCheckpointMagic),
                        buf.size() - sizeof(kCheckpointMagic) - 4);
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrorKind::bad_version,
                          "unsupported version " + std::to_string(version));
  const auto ptag = rd.get<std::uint8_t>();
  if (ptag > 1)
    throw CheckpointError(CheckpointErrorKind::bad_precision,
                          "unknown precision tag " + std::to_string(ptag));
  const Precision precision = static_cast<Precision>(ptag);
  const std::size_t elem = precision == Precision::f32 ? 4 : 8;
  const auto count = rd.get<std::uint32_t>();
  std::vector<CheckpointRecord> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    const auto name_len = rd.get<std::uint16_t>();
    r.name.resize(name_len);
    rd.take(r.name.data(), name_len);
    const auto rank = rd.get<std::uint8_t>();
    if (rank < 1 || rank > 4)
      throw CheckpointError(CheckpointErrorKind::malformed,
                            "record '" + r.name + "' has rank " + std::to_string(rank));
    r.dims.resize(rank);
    for (auto& d : r.dims) d = rd.get<std::uint32_t>();
    r.payload.resize(r.element_count() * elem);
    rd.take(r.payload.data(), r.payload.size());
    records.push_back(std::move(r));
  }
  if (rd.remaining() != 0)
    throw CheckpointError(CheckpointErrorKind::malformed, "trailing bytes after records");
  return {precision, std::move(records)};
}

inline void write_checkpoint_file(const std::filesystem::path& path, Precision precision,
                                  const std::vector<CheckpointRecord>& records) {
  const std::vector<std::uint8_t> buf = encode_checkpoint(precision, records);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw CheckpointError(CheckpointErrorKind::io, "short write to " + path.string());
}

inline std::pair<Precision, std::vector<CheckpointRecord>> read_checkpoint_file(
    const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

template <typename S>
CheckpointRecord make_record(const ParamRef<S>& p) {
  CheckpointRecord r;
  r.name = p.name;
  for (i64 d : p.wire_dims) r.dims.push_back(static_cast<std::uint32_t>(d));
  r.payload.resize(static_cast<std::size_t>(p.tensor->size()) * sizeof(S));
  std::memcpy(r.payload.data(), p.tensor->ptr(), r.payload.size());
  return r;
}

template <typename S>
void save_checkpoint(const TdcednNet<S>& net, const std::filesystem::path& path) {
  std::vector<CheckpointRecord> records;
  for (const ParamRef<S>& p : net.params()) records.push_back(make_record(p));
  for (const ParamRef<S>& p : net.buffers()) records.push_back(make_record(p));
  write_checkpoint_file(path, precision_of<S>::value, records);
}

// Loads every parameter and buffer by name, insisting on an exact match
// between the file contents and the network's registry.
template <typename S>
void load_checkpoint(TdcednNet<S>& net, const std::filesystem::path& path) {
  auto [precision, records] = read_checkpoint_file(path);
  if (precision != precision_of<S>::value)
    throw CheckpointError(CheckpointErrorKind::bad_precision,
                          "file precision does not match the requested network precision");
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const CheckpointRecord& r : records) {
    if (!by_name.emplace(r.name, &r).second)
      throw CheckpointError(CheckpointErrorKind::malformed, "duplicate record '" + r.name + "'");
  }
  auto restore = [&](const ParamRef<S>& p) {
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw CheckpointError(CheckpointErrorKind::missing_param, "missing '" + p.name + "'");
    const CheckpointRecord& r = *it->second;
    bool same = r.dims.size() == p.wire_dims.size();
    for (std::size_t i = 0; same && i < r.dims.size(); ++i)
      same = static_cast<i64>(r.dims[i]) == p.wire_dims[i];
    if (!same)
      throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                            "shape mismatch for '" + p.name + "'");
    std::memcpy(p.tensor->ptr(), r.payload.data(), r.payload.size());
    by_name.erase(it);
  };
  for (const ParamRef<S>& p : net.params()) restore(p);
  for (const ParamRef<S>& p : net.buffers()) restore(p);
  if (!by_name.empty())
    throw CheckpointError(CheckpointErrorKind::unexpected_param,
                          "file contains unknown record '" + by_name.begin()->first + "'");
}

}  // namespace tdcedn
