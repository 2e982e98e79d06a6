#include <catch2/catch_amalgamated.hpp>
#include <set>

#include "tdcedn/loss.hpp"
#include "tdcedn/network.hpp"

using namespace tdcedn;

namespace {

// Independent bookkeeping of the architecture, written out stage by stage so
// a registry bug cannot cancel itself.
struct Expected {
  i64 encoder_conv = 0, decoder_conv = 0, head_conv = 0, bn_channels = 0;
};

Expected expected_counts() {
  Expected e;
  auto conv = [](i64 ci, i64 co, i64 k) { return co * ci * k * k + co; };
  // encoder: the 13-conv trunk, 3x3 throughout
  const i64 enc[13][2] = {{3, 64},    {64, 64},   {64, 128},  {128, 128}, {128, 256},
                          {256, 256}, {256, 256}, {256, 512}, {512, 512}, {512, 512},
                          {512, 512}, {512, 512}, {512, 512}};
  for (const auto& [ci, co] : enc) {
    e.encoder_conv += conv(ci, co, 3);
    e.bn_channels += co;
  }
  // decoder: refine blocks per stage, concat(dec, skip) feeding the first
  const i64 dec[13][2] = {{512 + 512, 512}, {512, 512}, {512, 512},   // stage 5
                          {512 + 512, 512}, {512, 512}, {512, 512},   // stage 4
                          {512 + 256, 256}, {256, 256}, {256, 256},   // stage 3
                          {256 + 128, 128}, {128, 128},               // stage 2
                          {128 + 64, 64},   {64, 64}};                // stage 1
  for (const auto& [ci, co] : dec) {
    e.decoder_conv += conv(ci, co, 3);
    e.bn_channels += co;
  }
  // heads: five 1x1 side convs off the stage outputs, plus the final 1x1
  for (i64 c : {512, 512, 256, 128, 64}) e.head_conv += conv(c, 1, 1);
  e.head_conv += conv(64, 1, 1);
  return e;
}

}  // namespace

TEST_CASE("parameter breakdown matches the stage-by-stage tally") {
  TdcednNet<float> net;
  const ParamBreakdown b = net.param_breakdown();
  const Expected e = expected_counts();
  CHECK(b.encoder_conv == e.encoder_conv);
  CHECK(b.encoder_conv == 14714688);
  CHECK(b.decoder_conv == e.decoder_conv);
  CHECK(b.head_conv == e.head_conv);
  CHECK(b.bn_affine == 2 * e.bn_channels);
  CHECK(b.total_trainable == b.encoder_conv + b.decoder_conv + b.head_conv + b.bn_affine);
  CHECK(b.buffer_count == 2 * e.bn_channels);
  CHECK(net.encoder_conv_param_count() == 14714688);
}

TEST_CASE("registry names, shapes and decay flags") {
  TdcednNet<float> net;
  auto& params = net.params();
  // 32 conv layers (13 encoder, 13 decoder, 5 side, 1 pred) and 26 BN layers
  CHECK(params.size() == 32 * 2 + 26 * 2);
  CHECK(net.buffers().size() == 26 * 2);

  std::set<std::string> names;
  i64 sum = 0;
  for (const ParamRef<float>& p : params) {
    CHECK(names.insert(p.name).second);  // unique
    i64 wire = 1;
    for (i64 d : p.wire_dims) wire *= d;
    CHECK(wire == p.tensor->size());
    const bool expect_decay = p.name.ends_with(".weight") || p.name.ends_with(".gamma");
    CHECK(p.weight_decay == expect_decay);
    sum += p.tensor->size();
  }
  CHECK(sum == net.param_breakdown().total_trainable);

  // spot-check the naming scheme at its corners
  for (const char* n :
       {"conv1_1.weight", "conv5_3.bn.beta", "deconv5_3.weight", "deconv3_3.bn.gamma",
        "deconv1_1.bias", "side5.weight", "side1.bias", "pred.weight"})
    CHECK(names.count(n) == 1);
  // decoder numbering counts down within a stage; stage 2 has two blocks
  CHECK(names.count("deconv2_2.weight") == 1);
  CHECK(names.count("deconv2_3.weight") == 0);
}

TEST_CASE("init is seed-deterministic and leaves biases zero") {
  TdcednNet<float> a, b;
  a.init_params(11);
  b.init_params(11);
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params()[i].tensor->data() == b.params()[i].tensor->data());

  TdcednNet<float> c;
  c.init_params(12);
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size() && !differs; ++i)
    differs = a.params()[i].tensor->data() != c.params()[i].tensor->data();
  CHECK(differs);

  for (const ParamRef<float>& p : a.params()) {
    if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
      for (float v : p.tensor->data()) CHECK(v == 0.0f);
    } else if (p.name.ends_with(".gamma")) {
      for (float v : p.tensor->data()) CHECK(v == 1.0f);
    }
  }
}

TEST_CASE("forward shapes and mode behaviour") {
  TdcednNet<float> net;
  net.init_params(1);
  Tensor<float> x(Shape{1, 3, 32, 32}, 0.5f);

  net.set_mode(Mode::train);
  auto out = net.forward(x);
  CHECK(out.pred.shape() == Shape{1, 1, 32, 32});
  REQUIRE(out.sides.size() == 5);
  for (const auto& s : out.sides) CHECK(s.shape() == Shape{1, 1, 32, 32});
  for (i64 i = 0; i < out.pred.size(); ++i) {
    CHECK(out.pred.ptr()[i] > 0.0f);
    CHECK(out.pred.ptr()[i] < 1.0f);
  }

  net.set_mode(Mode::infer);
  auto inf = net.forward(x);
  CHECK(inf.pred.shape() == Shape{1, 1, 32, 32});
  CHECK(inf.sides.empty());
}

TEST_CASE("forward validates input") {
  TdcednNet<float> net;
  net.init_params(1);
  CHECK_THROWS_AS(net.forward(Tensor<float>(Shape{1, 4, 32, 32})), std::invalid_argument);
  CHECK_THROWS_AS(net.forward(Tensor<float>(Shape{1, 3, 31, 32})), std::invalid_argument);
  CHECK_THROWS_AS(net.forward(Tensor<float>(Shape{1, 3, 32, 16})), std::invalid_argument);
}

TEST_CASE("backward demands a cached train forward and five side grads") {
  TdcednNet<float> net;
  net.init_params(2);
  Tensor<float> g(Shape{1, 1, 32, 32});
  std::vector<Tensor<float>> gs(5, g);
  CHECK_THROWS_AS(net.backward(g, gs), std::logic_error);  // no forward yet

  net.set_mode(Mode::infer);
  net.forward(Tensor<float>(Shape{1, 3, 32, 32}, 0.3f));
  CHECK_THROWS_AS(net.backward(g, gs), std::logic_error);  // infer does not cache

  net.set_mode(Mode::train);
  net.forward(Tensor<float>(Shape{1, 3, 32, 32}, 0.3f));
  CHECK_THROWS_AS(net.backward(g, std::vector<Tensor<float>>(4, g)),
                  std::invalid_argument);
}

TEST_CASE("a train step produces finite nonzero gradients everywhere") {
  TdcednNet<float> net;
  net.init_params(3);
  net.set_mode(Mode::train);
  Rng rng(33);
  Tensor<float> x(Shape{1, 3, 32, 32});
  for (i64 i = 0; i < x.size(); ++i) x.ptr()[i] = static_cast<float>(rng.next_uniform());
  Tensor<float> gt(Shape{1, 1, 32, 32});
  for (i64 i = 0; i < gt.size(); ++i)
    gt.ptr()[i] = rng.next_uniform() < 0.2 ? 1.0f : 0.0f;
  gt.ptr()[0] = 1.0f;
  gt.ptr()[1] = 0.0f;

  auto out = net.forward(x, false);
  TotalLoss<float> tl = total_loss(out.pred, out.sides, compute_beta(gt));
  CHECK(std::isfinite(tl.total));
  CHECK(tl.total > 0.0);

  net.zero_grads();
  net.backward(tl.grad_pred, tl.grad_sides);
  for (const ParamRef<float>& p : net.params()) {
    REQUIRE(p.tensor->has_grad());
    double norm = 0;
    for (float v : p.tensor->grad()) {
      REQUIRE(std::isfinite(v));
      norm += static_cast<double>(v) * v;
    }
    // every weight tensor should feel the loss (biases can legitimately see
    // cancellation, but weights must not be dead)
    if (p.name.ends_with(".weight")) CHECK(norm > 0.0);
  }
}

TEST_CASE("upsample tap checksum tracks the input geometry") {
  TdcednNet<float> net;
  net.init_params(4);
  net.set_mode(Mode::infer);
  net.forward(Tensor<float>(Shape{1, 3, 32, 32}, 0.5f));
  const std::uint64_t c32 = net.upsample_tap_checksum();
  net.forward(Tensor<float>(Shape{1, 3, 48, 32}, 0.5f));
  const std::uint64_t c48 = net.upsample_tap_checksum();
  CHECK(c32 != c48);
  net.forward(Tensor<float>(Shape{1, 3, 32, 32}, 0.5f));
  CHECK(net.upsample_tap_checksum() == c32);
}

TEST_CASE("frozen upsamplers stay fixed while params update") {
  // The bilinear resize has no registered parameters at all: nothing in the
  // registry mentions it, so no optimizer can touch it.
  TdcednNet<float> net;
  for (const ParamRef<float>& p : net.params()) {
    CHECK(p.name.find("up") == std::string::npos);
  }
  for (const ParamRef<float>& p : net.buffers()) {
    CHECK(p.name.find("up") == std::string::npos);
  }
}
