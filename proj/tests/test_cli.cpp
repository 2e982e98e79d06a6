#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "tdcedn/eval.hpp"

using namespace tdcedn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("tdcedn_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct CliResult {
  int exit_code = -1;
  std::string output;
};

// Runs the CLI with stderr folded into stdout unless the caller wants it
// dropped (golden help comparisons must see stdout alone).
CliResult run_cli(const std::string& args, bool merge_stderr = true) {
  const std::string cmd = std::string(TDCEDN_CLI_PATH) + " " + args +
                          (merge_stderr ? " 2>&1" : " 2>/dev/null");
  CliResult r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("help output matches the golden transcripts") {
  const fs::path golden(TDCEDN_GOLDEN_DIR);
  const struct {
    const char* args;
    const char* file;
  } cases[] = {
      {"--help", "help_main.txt"},          {"train --help", "help_train.txt"},
      {"predict --help", "help_predict.txt"}, {"fuse --help", "help_fuse.txt"},
      {"eval --help", "help_eval.txt"},     {"gradcheck --help", "help_gradcheck.txt"},
      {"inspect --help", "help_inspect.txt"},
  };
  for (const auto& c : cases) {
    INFO(c.args);
    const CliResult r = run_cli(c.args, /*merge_stderr=*/false);
    CHECK(r.exit_code == 0);
    CHECK(r.output == slurp(golden / c.file));
  }
}

TEST_CASE("usage errors exit with code 1") {
  CHECK(run_cli("").exit_code == 1);                   // a subcommand is required
  CHECK(run_cli("--no-such-flag").exit_code == 1);
  CHECK(run_cli("train").exit_code == 1);              // missing required options
  CHECK(run_cli("frobnicate").exit_code == 1);
}

TEST_CASE("runtime failures exit with code 2 and an error line") {
  TempDir tmp;
  const CliResult r = run_cli("predict --checkpoint " + q(tmp.path / "absent.ckpt") +
                              " --manifest " + q(tmp.path / "absent.txt") +
                              " --out-dir " + q(tmp.path / "maps"));
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("error: ") != std::string::npos);

  const CliResult s = run_cli("train --manifest " + q(tmp.path / "absent.txt") +
                              " --out " + q(tmp.path / "run") + " --set oops");
  CHECK(s.exit_code == 2);
  CHECK(s.output.find("error: ") != std::string::npos);
}

TEST_CASE("a bad consensus name is a usage error") {
  TempDir tmp;
  const CliResult r = run_cli("eval --pred-dir " + q(tmp.path) + " --manifest " +
                              q(tmp.path / "m.txt") + " --out " + q(tmp.path / "pr.csv") +
                              " --consensus sometimes");
  CHECK(r.exit_code == 1);
}

TEST_CASE("inspect reports the frozen architecture totals") {
  const CliResult r = run_cli("inspect");
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("encoder conv parameters: 14714688") != std::string::npos);
  CHECK(r.output.find("total trainable:         37298118") != std::string::npos);
  CHECK(r.output.find("conv1_1.weight") != std::string::npos);
}

TEST_CASE("gradcheck runs the layer suite clean") {
  const CliResult r = run_cli("gradcheck --seed 3");
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("balanced_bce") != std::string::npos);
  CHECK(r.output.find("FAIL") == std::string::npos);
}

TEST_CASE("the full pipeline runs end to end on synthetic data") {
  TempDir tmp;
  const fs::path data = tmp.path / "data";
  const fs::path run = tmp.path / "run";
  const fs::path preds = tmp.path / "preds";
  const fs::path fused = tmp.path / "fused";
  const fs::path manifest = data / "manifest.txt";

  CliResult r = run_cli("inspect --gen-synthetic " + q(data) + " --size 48");
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("manifest.txt") != std::string::npos);
  REQUIRE(fs::exists(manifest));

  r = run_cli("train --manifest " + q(manifest) + " --out " + q(run) +
              " --set max_iter=2 --set resize=32 --set checkpoint_every=1" +
              " --set base_lr=1e-4 --set seed=5");
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(run / "model.ckpt"));
  REQUIRE(fs::exists(run / "loss_log.csv"));

  r = run_cli("predict --checkpoint " + q(run / "model.ckpt") + " --manifest " +
              q(manifest) + " --out-dir " + q(preds) + " --border 4");
  REQUIRE(r.exit_code == 0);
  for (const char* id : {"disk", "square", "ridge"}) {
    INFO(id);
    REQUIRE(fs::exists(preds / (std::string(id) + ".pgm")));
  }

  // fusing a directory with itself must reproduce it byte for byte
  r = run_cli("fuse --a " + q(preds) + " --b " + q(preds) + " --out-dir " + q(fused) +
              " --gamma 0.25");
  REQUIRE(r.exit_code == 0);
  for (const char* id : {"disk", "square", "ridge"}) {
    const std::string name = std::string(id) + ".pgm";
    CHECK(slurp(fused / name) == slurp(preds / name));
  }

  const fs::path csv = tmp.path / "pr.csv";
  r = run_cli("eval --pred-dir " + q(fused) + " --manifest " + q(manifest) + " --out " +
              q(csv));
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("ODS ") != std::string::npos);
  CHECK(r.output.find("OIS ") != std::string::npos);
  CHECK(r.output.find("AP  ") != std::string::npos);
  const EvalSummary s = read_pr_csv(csv);
  CHECK(s.curve.size() == 99);
  for (const PrPoint& pt : s.curve) {
    REQUIRE(pt.precision >= 0.0);
    REQUIRE(pt.precision <= 1.0);
    REQUIRE(pt.recall >= 0.0);
    REQUIRE(pt.recall <= 1.0);
  }

  // the trained checkpoint is inspectable
  r = run_cli("inspect --checkpoint " + q(run / "model.ckpt"));
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("precision:  f32") != std::string::npos);
  CHECK(r.output.find("crc ok") != std::string::npos);
}
