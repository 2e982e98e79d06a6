#include <catch2/catch_amalgamated.hpp>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "tdcedn/checkpoint.hpp"
#include "tdcedn/network.hpp"

using namespace tdcedn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("tdcedn_ckpt_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  REQUIRE(out);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

CheckpointRecord record(const std::string& name, std::vector<std::uint32_t> dims,
                        std::vector<float> values) {
  CheckpointRecord r;
  r.name = name;
  r.dims = std::move(dims);
  r.payload.resize(values.size() * sizeof(float));
  std::memcpy(r.payload.data(), values.data(), r.payload.size());
  return r;
}

}  // namespace

TEST_CASE("encode then decode returns the records") {
  std::vector<CheckpointRecord> records;
  records.push_back(record("a.weight", {2, 3}, {1, 2, 3, 4, 5, 6}));
  records.push_back(record("a.bias", {2}, {7, 8}));
  const auto bytes = encode_checkpoint(Precision::f32, records);
  const auto [precision, back] = decode_checkpoint(bytes);
  CHECK(precision == Precision::f32);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "a.weight");
  CHECK(back[0].dims == std::vector<std::uint32_t>{2, 3});
  CHECK(back[0].payload == records[0].payload);
  CHECK(back[1].name == "a.bias");
  CHECK(back[1].element_count() == 2);
}

TEST_CASE("decoder rejects tampering, CRC first") {
  std::vector<CheckpointRecord> records;
  records.push_back(record("w", {4}, {1, 2, 3, 4}));
  auto bytes = encode_checkpoint(Precision::f32, records);

  SECTION("bit flip in the payload") {
    bytes[bytes.size() / 2] ^= 0x10;
    try {
      decode_checkpoint(bytes);
      FAIL("tampered checkpoint accepted");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::bad_crc);
    }
  }
  SECTION("bit flip in the magic") {
    bytes[0] ^= 0x01;
    // corruption anywhere, including the magic, is a CRC failure first
    try {
      decode_checkpoint(bytes);
      FAIL("tampered checkpoint accepted");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::bad_crc);
    }
  }
  SECTION("truncation") {
    bytes.resize(bytes.size() - 3);
    try {
      decode_checkpoint(bytes);
      FAIL("truncated checkpoint accepted");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::bad_crc);
    }
  }
  SECTION("empty buffer") {
    CHECK_THROWS_AS(decode_checkpoint({}), CheckpointError);
  }
}

TEST_CASE("checkpoint file round trip preserves the forward pass bitwise") {
  TempDir tmp;
  TdcednNet<float> net;
  net.init_params(77);
  net.set_mode(Mode::train);
  Tensor<float> x(Shape{1, 3, 32, 32});
  Rng rng(5);
  for (i64 i = 0; i < x.size(); ++i) x.ptr()[i] = static_cast<float>(rng.next_uniform());
  net.forward(x);  // move the BN running stats off their defaults
  net.set_mode(Mode::infer);
  const Tensor<float> before = net.forward(x).pred;

  const fs::path file = tmp.path / "model.ckpt";
  save_checkpoint(net, file);

  TdcednNet<float> loaded;
  loaded.set_mode(Mode::infer);
  load_checkpoint(loaded, file);
  const Tensor<float> after = loaded.forward(x).pred;
  CHECK(before.data() == after.data());
}

TEST_CASE("loading validates precision, coverage and shapes") {
  TempDir tmp;
  TdcednNet<float> net;
  net.init_params(1);
  const fs::path file = tmp.path / "model.ckpt";
  save_checkpoint(net, file);

  SECTION("precision mismatch") {
    TdcednNet<double> wrong;
    try {
      load_checkpoint(wrong, file);
      FAIL("f32 checkpoint loaded into an f64 net");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::bad_precision);
    }
  }
  SECTION("missing parameter") {
    auto [precision, records] = read_checkpoint_file(file);
    records.pop_back();
    write_checkpoint_file(file, precision, records);
    TdcednNet<float> other;
    try {
      load_checkpoint(other, file);
      FAIL("incomplete checkpoint accepted");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::missing_param);
    }
  }
  SECTION("unexpected parameter") {
    auto [precision, records] = read_checkpoint_file(file);
    records.push_back(record("mystery", {1}, {0.0f}));
    write_checkpoint_file(file, precision, records);
    TdcednNet<float> other;
    try {
      load_checkpoint(other, file);
      FAIL("alien record accepted");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::unexpected_param);
    }
  }
  SECTION("shape mismatch") {
    auto [precision, records] = read_checkpoint_file(file);
    // same element count, permuted dims: framing stays valid, shape does not
    REQUIRE(records[0].name == "conv1_1.weight");
    std::swap(records[0].dims[0], records[0].dims[1]);
    write_checkpoint_file(file, precision, records);
    TdcednNet<float> other;
    try {
      load_checkpoint(other, file);
      FAIL("reshaped record accepted");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::shape_mismatch);
    }
  }
  SECTION("duplicate name") {
    auto [precision, records] = read_checkpoint_file(file);
    records.push_back(records[0]);
    write_checkpoint_file(file, precision, records);
    TdcednNet<float> other;
    try {
      load_checkpoint(other, file);
      FAIL("duplicate record accepted");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::malformed);
    }
  }
  SECTION("corrupt file via the file API") {
    auto bytes = slurp(file);
    bytes[bytes.size() / 3] ^= 0x80;
    spit(file, bytes);
    TdcednNet<float> other;
    try {
      load_checkpoint(other, file);
      FAIL("corrupt file accepted");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::bad_crc);
    }
  }
}

TEST_CASE("wire shapes trim trailing ones") {
  TdcednNet<float> net;
  net.init_params(9);
  TempDir tmp;
  const fs::path file = tmp.path / "m.ckpt";
  save_checkpoint(net, file);
  const auto [precision, records] = read_checkpoint_file(file);
  CHECK(precision == Precision::f32);
  bool saw_weight = false, saw_bias = false, saw_stat = false;
  for (const CheckpointRecord& r : records) {
    if (r.name == "conv1_1.weight") {
      CHECK(r.dims == std::vector<std::uint32_t>{64, 3, 3, 3});
      saw_weight = true;
    } else if (r.name == "conv1_1.bias") {
      CHECK(r.dims == std::vector<std::uint32_t>{64});
      saw_bias = true;
    } else if (r.name == "conv1_1.bn.running_var") {
      CHECK(r.dims == std::vector<std::uint32_t>{64});
      saw_stat = true;
    }
  }
  CHECK(saw_weight);
  CHECK(saw_bias);
  CHECK(saw_stat);
  // params plus buffers, one record each
  CHECK(records.size() == net.params().size() + net.buffers().size());
}
