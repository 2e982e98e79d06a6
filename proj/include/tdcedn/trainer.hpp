#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "tdcedn/checkpoint.hpp"
#include "tdcedn/data.hpp"
#include "tdcedn/loss.hpp"
#include "tdcedn/network.hpp"

namespace tdcedn {

struct TrainConfig {
  double base_lr = 1e-6;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  i64 max_iter = 20000;
  double lr_power = 0.8;
  std::uint64_t seed = 1;
  i64 resize = 400;  // square training resolution; 0 keeps native sizes
  ConsensusPolicy consensus;
  bool augment = true;
  double dropout = 0.5;
  std::array<double, 5> alpha{1.0, 1.0, 1.0, 1.0, 1.0};
  double clamp_eps = 1e-12;
  i64 checkpoint_every = 1000;

  void validate() const {
    if (!(base_lr > 0)) throw std::invalid_argument("config: base_lr must be > 0");
    if (!(momentum >= 0) || momentum >= 1)
      throw std::invalid_argument("config: momentum outside [0, 1)");
    if (!(weight_decay >= 0)) throw std::invalid_argument("config: negative weight_decay");
    if (max_iter < 1) throw std::invalid_argument("config: max_iter must be >= 1");
    if (!(lr_power > 0)) throw std::invalid_argument("config: lr_power must be > 0");
    if (resize != 0 && resize < TdcednNet<float>::min_input_hw)
      throw std::invalid_argument("config: resize below the network minimum");
    if (dropout < 0 || dropout >= 1)
      throw std::invalid_argument("config: dropout outside [0, 1)");
    if (checkpoint_every < 1)
      throw std::invalid_argument("config: checkpoint_every must be >= 1");
    LossConfig lc;
    lc.alpha = alpha;
    lc.clamp_eps = clamp_eps;
    lc.validate();
  }
};

// Polynomial decay: base_lr * (1 - iter/max_iter)^power, hitting exactly 0 at
// the final iteration count.
inline double poly_lr(i64 iter, const TrainConfig& cfg) {
  if (iter < 0 || iter > cfg.max_iter)
    throw std::invalid_argument("poly_lr: iteration " + std::to_string(iter) +
                                " outside [0, " + std::to_string(cfg.max_iter) + "]");
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iter);
  return cfg.base_lr * std::pow(frac, cfg.lr_power);
}

// ---------------------------------------------------------------------------
// `key = value` config files.  Unknown keys are an error rather than a
// silent ignore; '#' comments and blank lines are fine.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad number '" + v + "' for " + key);
  }
}

inline i64 parse_int(const std::string& v, const std::string& key) {
  i64 out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw std::invalid_argument("config: bad integer '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: bad boolean '" + v + "' for " + key);
}

}  // namespace detail

// Applies one `key = value` assignment; `where` prefixes error messages
// (a file:line, or the flag the assignment came from).
inline void apply_config_kv(TrainConfig& cfg, const std::string& key, const std::string& val,
                            const std::string& where) {
  if (key == "base_lr")
    cfg.base_lr = detail::parse_double(val, key);
  else if (key == "momentum")
    cfg.momentum = detail::parse_double(val, key);
  else if (key == "weight_decay")
    cfg.weight_decay = detail::parse_double(val, key);
  else if (key == "max_iter")
    cfg.max_iter = detail::parse_int(val, key);
  else if (key == "lr_power")
    cfg.lr_power = detail::parse_double(val, key);
  else if (key == "seed")
    cfg.seed = static_cast<std::uint64_t>(detail::parse_int(val, key));
  else if (key == "resize")
    cfg.resize = detail::parse_int(val, key);
  else if (key == "consensus") {
    if (val == "over3")
      cfg.consensus.mode = ConsensusPolicy::Mode::over3;
    else if (val == "any")
      cfg.consensus.mode = ConsensusPolicy::Mode::any;
    else
      throw std::runtime_error(where + ": consensus must be 'over3' or 'any', got '" + val +
                               "'");
  } else if (key == "augment")
    cfg.augment = detail::parse_bool(val, key);
  else if (key == "dropout")
    cfg.dropout = detail::parse_double(val, key);
  else if (key == "alpha") {
    std::stringstream ss(val);
    std::string one;
    std::size_t i = 0;
    while (std::getline(ss, one, ',')) {
      if (i >= cfg.alpha.size())
        throw std::runtime_error(where + ": alpha needs exactly 5 values");
      cfg.alpha[i++] = detail::parse_double(detail::trim(one), key);
    }
    if (i != cfg.alpha.size())
      throw std::runtime_error(where + ": alpha needs exactly 5 values");
  } else if (key == "clamp_eps")
    cfg.clamp_eps = detail::parse_double(val, key);
  else if (key == "checkpoint_every")
    cfg.checkpoint_every = detail::parse_int(val, key);
  else
    throw std::runtime_error(where + ": unknown key '" + key + "'");
}

inline TrainConfig parse_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected 'key = value'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    apply_config_kv(cfg, key, val, path.string() + ":" + std::to_string(lineno));
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// SGD with momentum and decoupled-from-nothing classic weight decay folded
// into the gradient:  v <- m*v - lr*(g + wd*theta);  theta <- theta + v.
// Decay applies to conv weights and batch-norm gamma, not to biases or beta.
// ---------------------------------------------------------------------------

template <typename S>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(TdcednNet<S>& net) {
    velocity_.reserve(net.params().size());
    for (ParamRef<S>& p : net.params())
      velocity_.emplace_back(static_cast<std::size_t>(p.tensor->size()), S(0));
  }

  void step(TdcednNet<S>& net, double lr, double momentum, double weight_decay) {
    auto& params = net.params();
    if (params.size() != velocity_.size())
      throw std::logic_error("optimizer: parameter registry changed size");
    for (std::size_t k = 0; k < params.size(); ++k) {
      ParamRef<S>& p = params[k];
      if (!p.tensor->has_grad())
        throw std::logic_error("optimizer: no gradient for " + p.name);
      const std::vector<S>& g = p.tensor->grad();
      std::vector<S>& v = velocity_[k];
      S* th = p.tensor->ptr();
      const S m = static_cast<S>(momentum), l = static_cast<S>(lr);
      const S wd = p.weight_decay ? static_cast<S>(weight_decay) : S(0);
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = m * v[i] - l * (g[i] + wd * th[i]);
        th[i] += v[i];
      }
    }
  }

  std::vector<std::vector<S>>& velocity() { return velocity_; }

 private:
  std::vector<std::vector<S>> velocity_;
};

// ---------------------------------------------------------------------------
// Training driver.
// ---------------------------------------------------------------------------

template <typename S>
struct TrainHooks {
  // Runs after backward and before the NaN check / optimizer step; used by
  // tests to inject faults or inspect gradients.
  std::function<void(i64 iter, TdcednNet<S>& net)> after_backward;
};

struct TrainResult {
  i64 iterations_run = 0;
  bool aborted = false;
  std::string abort_reason;
  std::filesystem::path loss_log;
  std::filesystem::path checkpoint;
};

namespace detail {

template <typename S>
struct Prepared {
  std::string id;
  Tensor<S> image;
  Tensor<S> gt;
};

template <typename S>
std::vector<Prepared<S>> prepare_dataset(const std::vector<Sample<S>>& dataset,
                                         const TrainConfig& cfg) {
  std::vector<Prepared<S>> out;
  out.reserve(dataset.size());
  for (const Sample<S>& s : dataset) {
    Prepared<S> p;
    p.id = s.id;
    p.gt = consensus_gt(s.annotations, cfg.consensus);
    p.image = s.image;
    if (cfg.resize != 0) {
      p.image = resize_bilinear(p.image, cfg.resize, cfg.resize);
      p.gt = resize_nearest(p.gt, cfg.resize, cfg.resize);
    }
    out.push_back(std::move(p));
  }
  return out;
}

template <typename S>
bool all_finite(const TdcednNet<S>& net, std::string& offender) {
  for (const ParamRef<S>& p : net.params()) {
    if (!p.tensor->has_grad()) {
      offender = p.name + " (no gradient)";
      return false;
    }
    for (S v : p.tensor->grad())
      if (!std::isfinite(v)) {
        offender = p.name;
        return false;
      }
  }
  return true;
}

template <typename S>
void save_optimizer_state(const std::filesystem::path& path, TdcednNet<S>& net,
                          SgdOptimizer<S>& opt, i64 iteration) {
  std::vector<CheckpointRecord> records;
  CheckpointRecord it;
  it.name = "trainer.iteration";
  it.dims = {1};
  it.payload.resize(sizeof(S));
  const S itv = static_cast<S>(iteration);
  std::memcpy(it.payload.data(), &itv, sizeof(S));
  records.push_back(std::move(it));
  auto& params = net.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    CheckpointRecord r;
    r.name = "velocity." + params[k].name;
    for (i64 d : params[k].wire_dims) r.dims.push_back(static_cast<std::uint32_t>(d));
    r.payload.resize(opt.velocity()[k].size() * sizeof(S));
    std::memcpy(r.payload.data(), opt.velocity()[k].data(), r.payload.size());
    records.push_back(std::move(r));
  }
  write_checkpoint_file(path, precision_of<S>::value, records);
}

template <typename S>
i64 load_optimizer_state(const std::filesystem::path& path, TdcednNet<S>& net,
                         SgdOptimizer<S>& opt) {
  auto [precision, records] = read_checkpoint_file(path);
  if (precision != precision_of<S>::value)
    throw CheckpointError(CheckpointErrorKind::bad_precision,
                          "optimizer state precision mismatch");
  i64 iteration = -1;
  auto& params = net.params();
  for (const CheckpointRecord& r : records) {
    if (r.name == "trainer.iteration") {
      S v;
      std::memcpy(&v, r.payload.data(), sizeof(S));
      iteration = static_cast<i64>(v);
      continue;
    }
    bool found = false;
    for (std::size_t k = 0; k < params.size(); ++k)
      if ("velocity." + params[k].name == r.name) {
        if (r.payload.size() != opt.velocity()[k].size() * sizeof(S))
          throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                                "bad size for " + r.name);
        std::memcpy(opt.velocity()[k].data(), r.payload.data(), r.payload.size());
        found = true;
        break;
      }
    if (!found)
      throw CheckpointError(CheckpointErrorKind::unexpected_param,
                            "unknown optimizer record " + r.name);
  }
  if (iteration < 0)
    throw CheckpointError(CheckpointErrorKind::missing_param,
                          "optimizer state lacks trainer.iteration");
  return iteration;
}

}  // namespace detail

// Runs (or resumes) training, writing model.ckpt / model.opt and appending to
// loss_log.csv under out_dir.  The log line for step i (1-based) carries the
// learning rate used for that step, i.e. poly_lr(i-1).
template <typename S>
TrainResult train(TdcednNet<S>& net, const std::vector<Sample<S>>& dataset,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  bool resume = false, const TrainHooks<S>& hooks = {}) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  std::filesystem::create_directories(out_dir);
  const auto ckpt_path = out_dir / "model.ckpt";
  const auto opt_path = out_dir / "model.opt";
  const auto log_path = out_dir / "loss_log.csv";

  auto prepared = detail::prepare_dataset(dataset, cfg);
  net.set_mode(Mode::train);
  SgdOptimizer<S> opt(net);

  i64 start_iter = 0;
  if (resume) {
    load_checkpoint(net, ckpt_path);
    start_iter = detail::load_optimizer_state(opt_path, net, opt);
    net.set_rng_seed(cfg.seed);
  } else {
    net.init_params(cfg.seed);
    save_checkpoint(net, ckpt_path);
    detail::save_optimizer_state(opt_path, net, opt, 0);
  }

  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open " + log_path.string());
  if (!resume) log << "iter,lr,side_loss,pred_loss,total\n";

  LossConfig loss_cfg;
  loss_cfg.alpha = cfg.alpha;
  loss_cfg.clamp_eps = cfg.clamp_eps;
  AugmentSpec aug;
  aug.rng_seed = cfg.seed;

  TrainResult result;
  result.loss_log = log_path;
  result.checkpoint = ckpt_path;

  const std::size_t n = prepared.size();
  for (i64 iter = start_iter; iter < cfg.max_iter; ++iter) {
    const auto epoch = static_cast<std::uint64_t>(iter / static_cast<i64>(n));
    const auto pos = static_cast<std::size_t>(iter % static_cast<i64>(n));
    const auto order = epoch_order(n, cfg.seed, epoch);
    const detail::Prepared<S>& sample = prepared[order[pos]];

    Tensor<S> image = sample.image;
    Tensor<S> gt = sample.gt;
    if (cfg.augment) {
      const AugmentChoice choice = draw_augment(aug, static_cast<std::uint64_t>(iter));
      image = apply_augment(image, choice);
      gt = apply_augment(gt, choice);
    }
    const BalancedTarget<S> target = compute_beta(gt);

    net.set_iteration(static_cast<std::uint64_t>(iter));
    typename TdcednNet<S>::Output out = net.forward(image, true);
    TotalLoss<S> losses = total_loss(out.pred, out.sides, target, loss_cfg);
    net.zero_grads();
    net.backward(losses.grad_pred, losses.grad_sides);

    if (hooks.after_backward) hooks.after_backward(iter, net);

    std::string offender;
    if (!std::isfinite(losses.total) || !detail::all_finite(net, offender)) {
      result.aborted = true;
      result.abort_reason = std::isfinite(losses.total)
                                ? "non-finite gradient in " + offender
                                : "non-finite loss";
      result.iterations_run = iter - start_iter;
      std::ofstream abort_file(out_dir / "abort.txt");
      abort_file << "aborted at iteration " << (iter + 1) << ": " << result.abort_reason
                 << "\nlast good checkpoint: " << ckpt_path.string() << "\n";
      return result;
    }

    const double lr = poly_lr(iter, cfg);
    opt.step(net, lr, cfg.momentum, cfg.weight_decay);

    char line[256];
    std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(iter + 1), lr, losses.side, losses.pred,
                  losses.total);
    log << line;

    if ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.max_iter) {
      save_checkpoint(net, ckpt_path);
      detail::save_optimizer_state(opt_path, net, opt, iter + 1);
    }
    ++result.iterations_run;
  }
  log.flush();
  if (!log) throw std::runtime_error("failed writing " + log_path.string());
  return result;
}

}  // namespace tdcedn
