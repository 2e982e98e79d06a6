// Command-line front end: train / predict / fuse / eval / gradcheck / inspect.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.  Diagnostics go to
// stderr; data goes to files or stdout.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include "CLI11.hpp"
#include "tdcedn/tdcedn.hpp"

namespace fs = std::filesystem;
using namespace tdcedn;

namespace {

// Denormals stall scalar and vector units alike; flush them in the binary
// (not the library, whose tests exercise exact arithmetic).
void enable_flush_to_zero() {
#if defined(__SSE__)
  _mm_setcsr(_mm_getcsr() | 0x8040);  // FTZ | DAZ
#endif
}

ConsensusPolicy consensus_from_name(const std::string& name) {
  ConsensusPolicy p;
  if (name == "over3")
    p.mode = ConsensusPolicy::Mode::over3;
  else if (name == "any")
    p.mode = ConsensusPolicy::Mode::any;
  else
    throw CLI::ValidationError("--consensus", "must be 'over3' or 'any'");
  return p;
}

struct TrainOpts {
  std::string config, manifest, out_dir;
  std::vector<std::string> sets;
  bool resume = false;
};

void cmd_train(const TrainOpts& o) {
  TrainConfig cfg = o.config.empty() ? TrainConfig{} : parse_train_config(o.config);
  for (const std::string& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("--set expects key=value, got '" + kv + "'");
    apply_config_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1), "--set " + kv);
  }
  cfg.validate();
  const auto dataset = load_dataset<float>(o.manifest);
  std::cerr << "dataset: " << dataset.size() << " sample(s) from " << o.manifest << "\n";
  std::cerr << "training " << cfg.max_iter << " iteration(s), base_lr " << cfg.base_lr
            << ", seed " << cfg.seed << (o.resume ? ", resuming" : "") << "\n";

  TdcednNet<float> net(3, cfg.dropout);
  TrainHooks<float> hooks;
  hooks.after_backward = [&](i64 iter, TdcednNet<float>&) {
    if ((iter + 1) % 100 == 0) std::cerr << "  iter " << (iter + 1) << "\n";
  };
  const TrainResult r = train(net, dataset, cfg, o.out_dir, o.resume, hooks);
  if (r.aborted)
    throw std::runtime_error("training aborted at iteration " +
                             std::to_string(r.iterations_run) + ": " + r.abort_reason);
  std::cerr << "done: " << r.iterations_run << " iteration(s)\n";
  std::cerr << "checkpoint: " << r.checkpoint.string() << "\n";
  std::cerr << "loss log:   " << r.loss_log.string() << "\n";
}

struct PredictOpts {
  std::string checkpoint, manifest, out_dir;
  i64 border = 10;
};

void cmd_predict(const PredictOpts& o) {
  TdcednNet<float> net;
  net.set_mode(Mode::infer);
  load_checkpoint(net, o.checkpoint);
  fs::create_directories(o.out_dir);
  const auto entries = parse_manifest(o.manifest);
  for (const ManifestEntry& e : entries) {
    const Tensor<float> img = load_image<float>(e.image);
    const ProbMap pm = predict(net, img, o.border);
    const fs::path out = fs::path(o.out_dir) / (e.id + ".pgm");
    write_probmap(out, pm);
    std::cerr << e.id << ": " << pm.w << "x" << pm.h << " -> " << out.string() << "\n";
  }
  std::cerr << entries.size() << " map(s) written\n";
}

struct FuseOpts {
  std::string a_dir, b_dir, out_dir;
  double gamma = 0.5;
};

void cmd_fuse(const FuseOpts& o) {
  std::vector<fs::path> names;
  for (const auto& entry : fs::directory_iterator(o.a_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".pgm")
      names.push_back(entry.path().filename());
  if (names.empty()) throw std::runtime_error("no .pgm maps in " + o.a_dir);
  std::sort(names.begin(), names.end());
  fs::create_directories(o.out_dir);
  for (const fs::path& name : names) {
    const fs::path pb = fs::path(o.b_dir) / name;
    if (!fs::exists(pb))
      throw std::runtime_error("no counterpart for " + name.string() + " in " + o.b_dir);
    const ProbMap fused =
        fuse(read_probmap(fs::path(o.a_dir) / name), read_probmap(pb), o.gamma);
    write_probmap(fs::path(o.out_dir) / name, fused);
  }
  std::cerr << names.size() << " map(s) fused with gamma " << o.gamma << "\n";
}

struct EvalOpts {
  std::string pred_dir, manifest, out_csv;
  std::string consensus = "any";
  double tolerance_frac = 0.0075;
  int thresholds = 99;
};

void cmd_eval(const EvalOpts& o) {
  MatchConfig mcfg;
  mcfg.tolerance_frac = o.tolerance_frac;
  mcfg.num_thresholds = o.thresholds;
  const ConsensusPolicy policy = consensus_from_name(o.consensus);
  std::vector<ImageEval> evals;
  for (const ManifestEntry& e : parse_manifest(o.manifest)) {
    const ProbMap pm = read_probmap(fs::path(o.pred_dir) / (e.id + ".pgm"));
    std::vector<Tensor<float>> anns;
    anns.reserve(e.annotations.size());
    for (const fs::path& a : e.annotations) anns.push_back(load_annotation<float>(a));
    const Tensor<float> gt = consensus_gt(anns, policy);
    if (gt.shape().h != pm.h || gt.shape().w != pm.w)
      throw std::runtime_error(e.id + ": prediction " + std::to_string(pm.w) + "x" +
                               std::to_string(pm.h) + " does not match ground truth " +
                               std::to_string(gt.shape().w) + "x" +
                               std::to_string(gt.shape().h));
    evals.push_back(evaluate_image(e.id, nms_thin(pm), binary_map_from_mask(gt), mcfg));
  }
  const EvalSummary s = summarize(evals, mcfg);
  write_pr_csv(o.out_csv, s);
  std::printf("ODS %.9f at threshold %.6f\n", s.ods, s.ods_threshold);
  std::printf("OIS %.9f\n", s.ois);
  std::printf("AP  %.9f\n", s.ap);
  std::cerr << "pr curve: " << o.out_csv << "\n";
}

struct GradcheckOpts {
  std::uint64_t seed = 7;
  bool e2e = false;
  i64 probes = 20;
};

void cmd_gradcheck(const GradcheckOpts& o) {
  std::vector<CheckResult> results = layer_gradient_checks(o.seed);
  if (o.e2e) {
    NetCheckConfig cfg;
    cfg.probes_per_layer = o.probes;
    std::cerr << "running end-to-end spot checks (this takes a few minutes)...\n";
    const auto net_results = network_gradient_check(o.seed, cfg);
    results.insert(results.end(), net_results.begin(), net_results.end());
  }
  int failures = 0;
  for (const CheckResult& r : results) {
    std::printf("%-18s max_rel_err %.3e  tol %.0e  probes %4lld  %s\n", r.name.c_str(),
                r.max_rel_err, r.tol, static_cast<long long>(r.probes),
                r.pass ? "ok" : "FAIL");
    failures += !r.pass;
  }
  if (failures > 0)
    throw std::runtime_error(std::to_string(failures) + " gradient check(s) failed");
}

struct InspectOpts {
  std::string checkpoint, gen_synthetic;
  int size = 64;
};

std::string dims_str(const std::vector<i64>& dims) {
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s;
}

void cmd_inspect(const InspectOpts& o) {
  if (!o.gen_synthetic.empty()) {
    generate_synthetic_dataset(o.gen_synthetic, o.size);
    std::cerr << "synthetic dataset written to " << o.gen_synthetic << "\n";
    std::printf("%s\n", (fs::path(o.gen_synthetic) / "manifest.txt").string().c_str());
    return;
  }
  TdcednNet<float> net;
  if (!o.checkpoint.empty()) {
    const auto [precision, records] = read_checkpoint_file(o.checkpoint);
    if (precision == Precision::f32) {
      load_checkpoint(net, o.checkpoint);
    } else {
      TdcednNet<double> net64;
      load_checkpoint(net64, o.checkpoint);
    }
    std::printf("checkpoint: %s\n", o.checkpoint.c_str());
    std::printf("precision:  %s\n", precision == Precision::f32 ? "f32" : "f64");
    std::printf("records:    %zu (crc ok, shapes match the default architecture)\n\n",
                records.size());
  }
  std::printf("%-28s %-14s %12s\n", "parameter", "shape", "count");
  for (const ParamRef<float>& p : net.params()) {
    i64 count = 1;
    for (i64 d : p.wire_dims) count *= d;
    std::printf("%-28s %-14s %12lld\n", p.name.c_str(), dims_str(p.wire_dims).c_str(),
                static_cast<long long>(count));
  }
  const ParamBreakdown b = net.param_breakdown();
  std::printf("\n");
  std::printf("encoder conv parameters: %lld\n", static_cast<long long>(b.encoder_conv));
  std::printf("decoder conv parameters: %lld\n", static_cast<long long>(b.decoder_conv));
  std::printf("head conv parameters:    %lld\n", static_cast<long long>(b.head_conv));
  std::printf("batch-norm affine:       %lld\n", static_cast<long long>(b.bn_affine));
  std::printf("total trainable:         %lld\n",
              static_cast<long long>(b.total_trainable));
  std::printf("batch-norm buffers:      %lld\n", static_cast<long long>(b.buffer_count));
}

}  // namespace

int main(int argc, char** argv) {
  enable_flush_to_zero();
  CLI::App app{"Encoder-decoder contour detection: training, inference, fusion and "
               "boundary-metric evaluation in one binary."};
  app.name("tdcedn");  // keep help output independent of the invocation path
  app.require_subcommand(1);

  TrainOpts to;
  CLI::App* t = app.add_subcommand("train", "Train a model on a manifest dataset");
  t->add_option("--config", to.config, "Config file of 'key = value' lines");
  t->add_option("--manifest", to.manifest, "Dataset manifest")->required();
  t->add_option("--out", to.out_dir, "Output directory for checkpoint and loss log")
      ->required();
  t->add_option("--set", to.sets, "Override a config key, e.g. --set base_lr=1e-3");
  t->add_flag("--resume", to.resume, "Resume from the checkpoint in --out");
  t->callback([&] { cmd_train(to); });

  PredictOpts po;
  CLI::App* p = app.add_subcommand("predict", "Write probability maps for a manifest");
  p->add_option("--checkpoint", po.checkpoint, "Model checkpoint")->required();
  p->add_option("--manifest", po.manifest, "Dataset manifest")->required();
  p->add_option("--out-dir", po.out_dir, "Directory for <id>.pgm maps")->required();
  p->add_option("--border", po.border, "Replicated border width in pixels");
  p->callback([&] { cmd_predict(po); });

  FuseOpts fo;
  CLI::App* f = app.add_subcommand("fuse", "Blend two directories of probability maps");
  f->add_option("--a", fo.a_dir, "First map directory (weight gamma)")->required();
  f->add_option("--b", fo.b_dir, "Second map directory (weight 1-gamma)")->required();
  f->add_option("--gamma", fo.gamma, "Blend weight in [0,1]");
  f->add_option("--out-dir", fo.out_dir, "Directory for fused maps")->required();
  f->callback([&] { cmd_fuse(fo); });

  EvalOpts eo;
  CLI::App* e = app.add_subcommand("eval", "Boundary-detection metrics for predictions");
  e->add_option("--pred-dir", eo.pred_dir, "Directory of <id>.pgm probability maps")
      ->required();
  e->add_option("--manifest", eo.manifest, "Dataset manifest with ground truth")
      ->required();
  e->add_option("--out", eo.out_csv, "Output CSV for the PR curve")->required();
  e->add_option("--consensus", eo.consensus, "Ground-truth consensus: any | over3");
  e->add_option("--tolerance-frac", eo.tolerance_frac,
                "Match tolerance as a fraction of the image diagonal");
  e->add_option("--thresholds", eo.thresholds, "Number of binarisation thresholds");
  e->callback([&] { cmd_eval(eo); });

  GradcheckOpts go;
  CLI::App* g = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  g->add_option("--seed", go.seed, "Seed for the random probe inputs");
  g->add_flag("--e2e", go.e2e, "Also spot-check the full network end to end");
  g->add_option("--probes", go.probes, "End-to-end probes per layer");
  g->callback([&] { cmd_gradcheck(go); });

  InspectOpts io;
  CLI::App* i = app.add_subcommand("inspect", "Architecture and checkpoint details");
  i->add_option("--checkpoint", io.checkpoint, "Validate and describe a checkpoint");
  i->add_option("--gen-synthetic", io.gen_synthetic,
                "Write the bundled synthetic dataset to this directory and exit");
  i->add_option("--size", io.size, "Synthetic image edge length (min 32)");
  i->callback([&] { cmd_inspect(io); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}
