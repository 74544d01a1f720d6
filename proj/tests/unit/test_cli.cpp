#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dynfuse/cli.hpp"

using namespace dynfuse;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "dynfuse");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dynfuse_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path small_config(const fs::path& dir) {
  const auto p = dir / "small.json";
  std::ofstream(p) << R"({
  "seed": 3,
  "threads": 2,
  "network": {"profile": "miniature", "variant": "dfnet", "input_size": 48},
  "train": {"sequences": 1, "frames_per_sequence": 8, "frame_stride": 4, "epochs": 2},
  "track": {"frames": 8, "ir_switch_frame": 4, "n_candidates": 32, "init_iterations": 5, "update_iterations": 3}
})";
  return p;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with code 2") {
  CHECK(invoke({}).code == kExitUsage);
  const auto unknown = invoke({"frobnicate"});
  CHECK(unknown.code == kExitUsage);
  CHECK(unknown.err.find("Usage") != std::string::npos);
  CHECK(invoke({"cost", "--bogus"}).code == kExitUsage);
  CHECK(invoke({"--variant", "concat", "convcount"}).code == kExitUsage);
  CHECK(invoke({"train"}).code == kExitUsage);
  CHECK(invoke({"track", "--out", fresh_dir("usage").string()}).code == kExitUsage);
  CHECK(invoke({"eval"}).code == kExitUsage);
  CHECK(invoke({"--config", "/nonexistent.json", "cost"}).code == kExitUsage);
  const auto help = invoke({"--help"});
  CHECK(help.code == kExitOk);
  CHECK(help.out.find("gradcheck") != std::string::npos);
}

TEST_CASE("cost reproduces the published totals") {
  const auto dir = fresh_dir("cost");
  const auto r = invoke({"cost", "--spec", std::string(DYNFUSE_SOURCE_DIR) + "/configs/reference_cost.json", "--out",
                      dir.string()});
  REQUIRE(r.code == kExitOk);
  for (const char* s : {"1376.61M", "1498.40M", "1376.91M", "108.85%", "100.02%"})
    CHECK(r.out.find(s) != std::string::npos);
  const std::string csv = slurp(dir / "cost.csv");
  CHECK(csv.rfind("layer,variant,multadds,percent\n", 0) == 0);
  // Tables go to stdout only, CSV only to the file.
  CHECK(r.out.find("layer,variant") == std::string::npos);
  CHECK(invoke({"cost"}).out == r.out);
  const auto strict = invoke({"--strict-ivfuse-cost", "cost"});
  CHECK(strict.out != r.out);
}

TEST_CASE("verification subcommands") {
  const auto a = invoke({"gradcheck", "--seed", "7"});
  const auto b = invoke({"gradcheck", "--seed", "7"});
  CHECK(a.code == kExitOk);
  CHECK(a.out == b.out);
  CHECK(a.out.find("PASS") != std::string::npos);
  CHECK(a.out.find("layer3.att_t.fc2_b") != std::string::npos);
  CHECK(a.out.find("w_share split") != std::string::npos);
  CHECK(invoke({"gradcheck", "--seed", "7", "--profile", "tiny", "--variant", "manet"}).code == kExitOk);

  const auto dir = fresh_dir("checks");
  const auto eq = invoke({"equivalence", "--trials", "50", "--witness-trials", "20", "--out", dir.string()});
  CHECK(eq.code == kExitOk);
  CHECK(fs::exists(dir / "equivalence.json"));
  const auto cc = invoke({"convcount", "--out", dir.string()});
  CHECK(cc.code == kExitOk);
  CHECK(slurp(dir / "convcount.csv") == "variant,layer1,layer2,layer3\nbaseline,2,2,2\nmanet,4,4,4\nivfuse,2,2,2\ndfnet,2,2,2\n");
}

TEST_CASE("train, track, eval and trace export") {
  const auto dir = fresh_dir("flow");
  const auto cfg = small_config(dir).string();
  const auto ck = (dir / "ck").string();
  const auto tr = invoke({"--config", cfg, "train", "--out", ck});
  REQUIRE(tr.code == kExitOk);
  CHECK(fs::exists(fs::path(ck) / "manifest.json"));
  CHECK(fs::exists(fs::path(ck) / "loss_curve.csv"));

  const auto tk_dir = (dir / "track").string();
  const auto tk = invoke({"--config", cfg, "track", "--checkpoint", ck, "--out", tk_dir, "--save-sequence"});
  REQUIRE(tk.code == kExitOk);
  const std::string results = slurp(fs::path(tk_dir) / "results.csv");
  CHECK(std::count(results.begin(), results.end(), '\n') == 9);
  CHECK(slurp(fs::path(tk_dir) / "metrics.json").find("\"pr\"") != std::string::npos);

  const auto ev_dir = (dir / "eval").string();
  const auto ev = invoke({"eval", "--results", (fs::path(tk_dir) / "results.csv").string(), "--sequence",
                       (fs::path(tk_dir) / "sequence").string(), "--out", ev_dir});
  REQUIRE(ev.code == kExitOk);
  CHECK(ev.out.rfind("PR@5.0 ", 0) == 0);
  // Re-evaluating the saved results against the saved sequence matches the tracker's own metrics.
  CHECK(slurp(fs::path(ev_dir) / "metrics.json") == slurp(fs::path(tk_dir) / "metrics.json"));

  const auto again = invoke({"--config", cfg, "track", "--checkpoint", ck, "--out", (dir / "track2").string()});
  CHECK(slurp(fs::path(tk_dir) / "results.csv") == slurp(dir / "track2" / "results.csv"));
  CHECK(slurp(fs::path(tk_dir) / "trace.csv") == slurp(dir / "track2" / "trace.csv"));

  const auto te = invoke({"--config", cfg, "trace-export", "--checkpoint", ck, "--seeds", "2", "--out",
                       (dir / "traces").string()});
  REQUIRE(te.code == kExitOk);
  CHECK(fs::exists(dir / "traces" / "trace_seed3.csv"));
  CHECK(fs::exists(dir / "traces" / "trace_seed4.csv"));
  CHECK(slurp(dir / "traces" / "delta_d.csv").rfind("seed,layer,d_before,d_after,delta_d\n", 0) == 0);

  CHECK(invoke({"track", "--checkpoint", (dir / "missing").string(), "--out", tk_dir}).code == kExitUsage);
}

}  // TEST_SUITE
