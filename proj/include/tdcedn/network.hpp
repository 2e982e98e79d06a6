#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "tdcedn/layers.hpp"
#include "tdcedn/rng.hpp"
#include "tdcedn/tensor.hpp"

namespace tdcedn {

// conv -> batch norm -> relu, the unit both halves of the network are made of.
template <typename S>
struct ConvBlock {
  ConvBlock(const std::string& name, i64 c_in, i64 c_out, i64 k)
      : conv(name, c_in, c_out, k), bn(name + ".bn", c_out) {}

  Tensor<S> forward(const Tensor<S>& x, Mode mode, bool update_stats, bool cache) {
    Tensor<S> y = conv.forward(x, cache);
    y = bn.forward(y, mode, update_stats);
    return relu_l.forward(y, cache);
  }

  Tensor<S> backward(const Tensor<S>& g) {
    return conv.backward(bn.backward(relu_l.backward(g)));
  }

  // Train-mode replay with the relu mask pinned to the last cached forward.
  // Batch-norm statistics are recomputed (backward differentiates through
  // them, so probes must see them move), but no caches are written.
  Tensor<S> forward_frozen(const Tensor<S>& x) const {
    return relu_l.forward_frozen(
        bn.forward_frozen(conv2d_forward(x, conv.weight(), conv.bias())));
  }

  Conv2dLayer<S> conv;
  BatchNormLayer<S> bn;
  ReluLayer<S> relu_l;
};

// One decoder stage: fixed bilinear upsample of the incoming decoder feature
// to the paired encoder map's size, channel concat (decoder part first),
// trainable convs, dropout, plus a supervision head (1x1 conv, fixed resize
// to network input size, sigmoid).
template <typename S>
struct DecoderStage {
  DecoderStage(int stage, i64 c_dec_in, i64 c_skip,
               const std::vector<std::pair<i64, i64>>& block_channels,
               double dropout_rate)
      : c_dec(c_dec_in),
        drop("drop" + std::to_string(stage), dropout_rate),
        side_conv("side" + std::to_string(stage), block_channels.back().second, 1, 1) {
    const std::string base = "deconv" + std::to_string(stage) + "_";
    int sub = static_cast<int>(block_channels.size());
    for (const auto& [ci, co] : block_channels) {
      blocks.emplace_back(base + std::to_string(sub), ci, co, 3);
      --sub;
    }
    (void)c_skip;
  }

  i64 c_dec;  // channels arriving from the previous (coarser) stage
  UpsampleLayer<S> up;
  std::vector<ConvBlock<S>> blocks;
  DropoutLayer<S> drop;
  Conv2dLayer<S> side_conv;
  UpsampleLayer<S> side_up;
  SigmoidLayer<S> side_sig;
};

// Reference to one tensor in the parameter registry.  wire_dims is the
// logical shape used for serialisation and reporting (trailing 1s trimmed).
template <typename S>
struct ParamRef {
  std::string name;
  Tensor<S>* tensor;
  bool weight_decay;
  std::vector<i64> wire_dims;
};

struct ParamBreakdown {
  i64 encoder_conv = 0;   // conv weights + biases in the 13 encoder blocks
  i64 decoder_conv = 0;   // conv weights + biases in the refined modules
  i64 head_conv = 0;      // side heads and the prediction head
  i64 bn_affine = 0;      // all gamma/beta
  i64 total_trainable = 0;
  i64 buffer_count = 0;   // batch-norm running stats
};

// Encoder-decoder contour network: VGG-16 convolutional trunk (classifier
// layers dropped) feeding a mirrored decoder whose stages upsample, merge the
// encoder feature map of matching resolution, and refine it.  Five side heads
// supervise the decoder during training; inference uses the final prediction
// head only.
template <typename S>
class TdcednNet {
 public:
  static constexpr i64 min_input_hw = 32;

  explicit TdcednNet(i64 input_channels = 3, double dropout_rate = 0.5)
      : input_channels_(input_channels), pred_head_("pred", 64, 1, 1) {
    build(dropout_rate);
    build_registry();
  }

  TdcednNet(const TdcednNet&) = delete;
  TdcednNet& operator=(const TdcednNet&) = delete;

  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  std::uint64_t rng_seed() const { return rng_seed_; }
  void set_rng_seed(std::uint64_t s) { rng_seed_ = s; }
  std::uint64_t iteration() const { return iteration_; }
  void set_iteration(std::uint64_t it) { iteration_ = it; }

  // He (fan-in) initialisation for conv weights; biases zero, BN affine at
  // identity.  Each tensor draws from its own named stream, so the result is
  // independent of initialisation order.
  void init_params(std::uint64_t seed) {
    rng_seed_ = seed;
    for (ParamRef<S>& p : params_) {
      Tensor<S>& t = *p.tensor;
      const bool is_conv_weight = p.wire_dims.size() == 4;
      if (is_conv_weight) {
        const i64 fan_in = p.wire_dims[1] * p.wire_dims[2] * p.wire_dims[3];
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        Rng rng = Rng::stream(seed, "init:" + p.name);
        for (i64 i = 0; i < t.size(); ++i)
          t.ptr()[i] = static_cast<S>(rng.next_gaussian() * stddev);
      } else if (p.name.ends_with(".gamma")) {
        std::fill(t.data().begin(), t.data().end(), S(1));
      } else {
        std::fill(t.data().begin(), t.data().end(), S(0));
      }
    }
  }

  struct Output {
    Tensor<S> pred;
    // sides[k] is side output k+1; side 1 is the full-resolution stage.
    // Empty in inference mode.
    std::vector<Tensor<S>> sides;
  };

  Output forward(const Tensor<S>& x, bool update_bn_stats = true) {
    if (x.shape().c != input_channels_)
      throw std::invalid_argument("forward: input " + x.shape().str() + " has " +
                                  std::to_string(x.shape().c) + " channels, expected " +
                                  std::to_string(input_channels_));
    if (x.shape().h < min_input_hw || x.shape().w < min_input_hw)
      throw std::invalid_argument("forward: input " + x.shape().str() +
                                  " below minimum " + std::to_string(min_input_hw) +
                                  "x" + std::to_string(min_input_hw));
    const bool train = mode_ == Mode::train;
    const bool stats = train && update_bn_stats;
    const i64 in_h = x.shape().h, in_w = x.shape().w;

    std::array<Tensor<S>, 5> skips;
    Tensor<S> cur = x;
    for (int s = 0; s < 5; ++s) {
      for (ConvBlock<S>& blk : enc_[s]) cur = blk.forward(cur, mode_, stats, train);
      skips[s] = cur;
      cur = pools_[s].forward(cur, train);
    }

    Output out;
    if (train) out.sides.resize(5);
    for (int s = 4; s >= 0; --s) {
      DecoderStage<S>& st = dec_[s];
      const Tensor<S>& skip = skips[s];
      Tensor<S> up = st.up.forward(cur, skip.shape().h, skip.shape().w, train);
      cur = concat_channels(up, skip);
      for (ConvBlock<S>& blk : st.blocks) cur = blk.forward(cur, mode_, stats, train);
      cur = st.drop.forward(cur, mode_, rng_seed_, iteration_, train);
      if (train) {
        Tensor<S> sv = st.side_conv.forward(cur, true);
        sv = st.side_up.forward(sv, in_h, in_w, true);
        out.sides[static_cast<std::size_t>(s)] = st.side_sig.forward(sv, true);
      }
    }
    Tensor<S> pv = pred_head_.forward(cur, train);
    out.pred = pred_sig_.forward(pv, train);
    forward_cached_ = train;
    return out;
  }

  // Re-evaluates the network as the smooth function backward() actually
  // differentiates: relu masks, pool argmaxes and dropout masks are replayed
  // from the last cached train-mode forward instead of being recomputed from
  // the current (possibly perturbed) input, while batch-norm statistics and
  // everything else stay live.  Finite-difference probes of the loss must use
  // this: differencing the raw forward steps across relu kinks and argmax
  // flips elsewhere in the net, and that difference quotient converges to no
  // derivative.  At the unperturbed point the replay reproduces forward()
  // exactly.  Nothing is mutated — no caches, flags or running stats — so the
  // replay can run any number of times, even between a forward and its
  // backward.
  Output forward_frozen(const Tensor<S>& x) const {
    if (mode_ != Mode::train)
      throw std::logic_error("forward_frozen: requires train mode");
    const i64 in_h = x.shape().h, in_w = x.shape().w;
    std::array<Tensor<S>, 5> skips;
    Tensor<S> cur = x;
    for (int s = 0; s < 5; ++s) {
      for (const ConvBlock<S>& blk : enc_[s]) cur = blk.forward_frozen(cur);
      skips[s] = cur;
      cur = pools_[s].forward_frozen(cur);
    }
    Output out;
    out.sides.resize(5);
    for (int s = 4; s >= 0; --s) {
      const DecoderStage<S>& st = dec_[s];
      const Tensor<S>& skip = skips[s];
      Tensor<S> up = bilinear_upsample(cur, skip.shape().h, skip.shape().w);
      cur = concat_channels(up, skip);
      for (const ConvBlock<S>& blk : st.blocks) cur = blk.forward_frozen(cur);
      cur = st.drop.forward_frozen(cur);
      Tensor<S> sv = conv2d_forward(cur, st.side_conv.weight(), st.side_conv.bias());
      out.sides[static_cast<std::size_t>(s)] = sigmoid(bilinear_upsample(sv, in_h, in_w));
    }
    out.pred = sigmoid(conv2d_forward(cur, pred_head_.weight(), pred_head_.bias()));
    return out;
  }

  // Backpropagates loss gradients (with respect to the output probabilities)
  // through the whole network, accumulating parameter gradients in place.
  void backward(const Tensor<S>& grad_pred, const std::vector<Tensor<S>>& grad_sides) {
    if (mode_ != Mode::train || !forward_cached_)
      throw std::logic_error("backward requires a train-mode forward pass");
    if (grad_sides.size() != 5)
      throw std::invalid_argument("backward: expected 5 side gradients, got " +
                                  std::to_string(grad_sides.size()));
    Tensor<S> g = pred_head_.backward(pred_sig_.backward(grad_pred));
    std::array<Tensor<S>, 5> skip_grads;
    for (int s = 0; s < 5; ++s) {
      DecoderStage<S>& st = dec_[s];
      Tensor<S> gs = st.side_conv.backward(
          st.side_up.backward(st.side_sig.backward(grad_sides[static_cast<std::size_t>(s)])));
      g = add(g, gs);
      g = st.drop.backward(g);
      for (auto it = st.blocks.rbegin(); it != st.blocks.rend(); ++it) g = it->backward(g);
      auto [g_up, g_skip] = split_channels(g, st.c_dec);
      skip_grads[s] = std::move(g_skip);
      g = st.up.backward(g_up);
    }
    for (int s = 4; s >= 0; --s) {
      g = pools_[s].backward(g);
      g = add(g, skip_grads[s]);
      for (auto it = enc_[s].rbegin(); it != enc_[s].rend(); ++it) g = it->backward(g);
    }
    forward_cached_ = false;
  }

  void zero_grads() {
    for (ParamRef<S>& p : params_) {
      p.tensor->ensure_grad();
      p.tensor->zero_grad();
    }
  }

  std::vector<ParamRef<S>>& params() { return params_; }
  const std::vector<ParamRef<S>>& params() const { return params_; }
  std::vector<ParamRef<S>>& buffers() { return buffers_; }
  const std::vector<ParamRef<S>>& buffers() const { return buffers_; }

  ParamBreakdown param_breakdown() const {
    ParamBreakdown b;
    for (const ParamRef<S>& p : params_) {
      const i64 n = p.tensor->size();
      b.total_trainable += n;
      if (p.name.find(".bn.") != std::string::npos)
        b.bn_affine += n;
      else if (p.name.starts_with("deconv"))
        b.decoder_conv += n;
      else if (p.name.starts_with("side") || p.name.starts_with("pred"))
        b.head_conv += n;
      else
        b.encoder_conv += n;
    }
    for (const ParamRef<S>& p : buffers_) b.buffer_count += p.tensor->size();
    return b;
  }

  i64 encoder_conv_param_count() const { return param_breakdown().encoder_conv; }

  // Combined checksum over every fixed upsampling layer's interpolation taps,
  // as of the most recent forward pass.
  std::uint64_t upsample_tap_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const DecoderStage<S>& st : dec_) {
      h = mix64(h ^ st.up.tap_checksum());
      h = mix64(h ^ st.side_up.tap_checksum());
    }
    return h;
  }

  i64 input_channels() const { return input_channels_; }

 private:
  void build(double dropout_rate) {
    const std::array<std::vector<std::pair<i64, i64>>, 5> enc_channels{{
        {{input_channels_, 64}, {64, 64}},
        {{64, 128}, {128, 128}},
        {{128, 256}, {256, 256}, {256, 256}},
        {{256, 512}, {512, 512}, {512, 512}},
        {{512, 512}, {512, 512}, {512, 512}},
    }};
    for (int s = 0; s < 5; ++s) {
      int sub = 1;
      for (const auto& [ci, co] : enc_channels[s]) {
        enc_[s].emplace_back("conv" + std::to_string(s + 1) + "_" + std::to_string(sub), ci,
                             co, 3);
        ++sub;
      }
    }
    // {incoming decoder channels, skip channels, refined-module conv rows}
    dec_.reserve(5);
    dec_.emplace_back(1, i64(128), i64(64),
                      std::vector<std::pair<i64, i64>>{{192, 64}, {64, 64}}, dropout_rate);
    dec_.emplace_back(2, i64(256), i64(128),
                      std::vector<std::pair<i64, i64>>{{384, 128}, {128, 128}}, dropout_rate);
    dec_.emplace_back(3, i64(512), i64(256),
                      std::vector<std::pair<i64, i64>>{{768, 256}, {256, 256}, {256, 256}},
                      dropout_rate);
    dec_.emplace_back(4, i64(512), i64(512),
                      std::vector<std::pair<i64, i64>>{{1024, 512}, {512, 512}, {512, 512}},
                      dropout_rate);
    dec_.emplace_back(5, i64(512), i64(512),
                      std::vector<std::pair<i64, i64>>{{1024, 512}, {512, 512}, {512, 512}},
                      dropout_rate);
  }

  void add_conv_entries(Conv2dLayer<S>& c) {
    const Shape& ws = c.weight().shape();
    params_.push_back({c.name() + ".weight", &c.weight(), true, {ws.n, ws.c, ws.h, ws.w}});
    params_.push_back({c.name() + ".bias", &c.bias(), false, {ws.n}});
  }

  void add_bn_entries(BatchNormLayer<S>& bn) {
    const i64 c = bn.gamma().shape().n;
    params_.push_back({bn.name() + ".gamma", &bn.gamma(), true, {c}});
    params_.push_back({bn.name() + ".beta", &bn.beta(), false, {c}});
    buffers_.push_back({bn.name() + ".running_mean", &bn.running_mean(), false, {c}});
    buffers_.push_back({bn.name() + ".running_var", &bn.running_var(), false, {c}});
  }

  void build_registry() {
    for (auto& stage : enc_)
      for (ConvBlock<S>& blk : stage) {
        add_conv_entries(blk.conv);
        add_bn_entries(blk.bn);
      }
    for (int s = 4; s >= 0; --s) {
      for (ConvBlock<S>& blk : dec_[s].blocks) {
        add_conv_entries(blk.conv);
        add_bn_entries(blk.bn);
      }
      add_conv_entries(dec_[s].side_conv);
    }
    add_conv_entries(pred_head_);
  }

  i64 input_channels_;
  Mode mode_ = Mode::train;
  std::uint64_t rng_seed_ = 0;
  std::uint64_t iteration_ = 0;
  bool forward_cached_ = false;

  std::array<std::vector<ConvBlock<S>>, 5> enc_;
  std::array<MaxPoolLayer<S>, 5> pools_;
  std::vector<DecoderStage<S>> dec_;  // index s = stage s+1
  Conv2dLayer<S> pred_head_;
  SigmoidLayer<S> pred_sig_;

  std::vector<ParamRef<S>> params_;
  std::vector<ParamRef<S>> buffers_;
};

}  // namespace tdcedn
