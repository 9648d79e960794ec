#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

// Subprocess checks of the experiment CLI: subcommands, exit codes, and the
// files each run leaves behind. STSEP_BIN is injected by the build.

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(STSEP_BIN) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult res;
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe)) res.output += buf;
  const int status = pclose(pipe);
  res.exit_code = WEXITSTATUS(status);
  return res;
}

fs::path workdir() {
  fs::path dir = fs::temp_directory_path() / "stsep_cli_test";
  fs::create_directories(dir);
  return dir;
}

std::string tiny_config(const std::string& outdir, int64_t epochs, const std::string& task) {
  nlohmann::json j;
  j["seed"] = 3;
  j["output_dir"] = outdir;
  j["model"]["num_classes"] = task == "playback2" ? 2 : 4;
  j["model"]["T"] = 4;
  j["model"]["resolution"] = 32;
  j["model"]["width_multiplier"] = 0.125;
  j["model"]["policy"] = {{"mode", "ns"}, {"k", 5}, {"stsep_stages", {1, 2, 5}}};
  j["train"] = {{"epochs", epochs}, {"batch_size", 4}, {"lr", 6e-3}};
  j["data"]["task"] = {{"kind", task}, {"T", 4}, {"resolution", 32}, {"seed", 5}};
  j["data"]["train_count"] = 8;
  j["data"]["eval_count"] = 4;
  const std::string path = (workdir() / ("cfg_" + task + ".json")).string();
  std::ofstream os(path);
  os << j.dump(2);
  return path;
}

}  // namespace

TEST_CASE("count reports paper-scale figures for the vanilla config") {
  const std::string cfg = tiny_config((workdir() / "count").string(), 0, "direction4");
  auto res = run_cli("count --config " + cfg + " --set model.policy.stsep_stages=[]");
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("params 11.266M") != std::string::npos);
  CHECK(res.output.find("flops 9.540G") != std::string::npos);
}

TEST_CASE("train with epochs=0 succeeds and emits a manifest with zero epochs") {
  const std::string out = (workdir() / "train0").string();
  fs::remove_all(out);
  const std::string cfg = tiny_config(out, 0, "direction4");
  auto res = run_cli("train --config " + cfg);
  CHECK(res.exit_code == 0);
  std::ifstream is(out + "/manifest.json");
  REQUIRE(is.good());
  nlohmann::json manifest;
  is >> manifest;
  CHECK(manifest["epochs"].size() == 0);
  CHECK(fs::exists(out + "/final.stck"));
  CHECK(fs::exists(out + "/metrics.csv"));
}

TEST_CASE("train then eval and retrieve run end to end") {
  const std::string out = (workdir() / "train1").string();
  fs::remove_all(out);
  const std::string cfg = tiny_config(out, 1, "direction4");
  auto res = run_cli("train --config " + cfg);
  CHECK(res.exit_code == 0);
  CHECK(fs::exists(out + "/final.stck"));

  auto eval = run_cli("eval --config " + cfg + " --checkpoint " + out +
                      "/final.stck --clips 2 --activations 2");
  CHECK(eval.exit_code == 0);
  CHECK(eval.output.find("top1") != std::string::npos);
  CHECK(fs::exists(out + "/eval.json"));
  CHECK(fs::exists(out + "/activation_stage2_t0.pgm"));

  auto ret = run_cli("retrieve --config " + cfg + " --checkpoint " + out + "/final.stck");
  CHECK(ret.exit_code == 0);
  CHECK(ret.output.find("R@1") != std::string::npos);
  CHECK(fs::exists(out + "/retrieval.csv"));
}

TEST_CASE("ablate ns 0..2 creates exactly 3 run directories and a summary") {
  const std::string out = (workdir() / "sweep").string();
  fs::remove_all(out);
  const std::string cfg = tiny_config(out, 0, "direction4");
  auto res = run_cli("ablate --config " + cfg + " --mode ns --range 0..2");
  CHECK(res.exit_code == 0);
  int dirs = 0;
  for (const auto& e : fs::directory_iterator(out))
    if (e.is_directory()) ++dirs;
  CHECK(dirs == 3);
  CHECK(fs::exists(out + "/ns0/manifest.json"));
  CHECK(fs::exists(out + "/ns2/manifest.json"));
  std::ifstream is(out + "/ablation.csv");
  std::string line;
  int rows = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);  // header + 3 sweep rows
}

TEST_CASE("bad config exits with code 2 and names the offending key") {
  const std::string cfg = tiny_config((workdir() / "bad").string(), 0, "direction4");
  auto res = run_cli("count --config " + cfg + " --set model.bogus_knob=1");
  CHECK(res.exit_code == 2);
  CHECK(res.output.find("bogus_knob") != std::string::npos);
}

TEST_CASE("gendata writes an STV1 container plus manifest") {
  const std::string out = (workdir() / "gen.stv").string();
  auto res = run_cli("gendata --task playback2 --count 6 --out " + out +
                     " --resolution 32 --frames 4 --seed 9");
  CHECK(res.exit_code == 0);
  REQUIRE(fs::exists(out));
  std::ifstream is(out + ".manifest.json");
  REQUIRE(is.good());
  nlohmann::json manifest;
  is >> manifest;
  CHECK(manifest["task"] == "playback2");
  CHECK(manifest["count"] == 6);

  // a configuration can train straight from the container
  const std::string outdir = (workdir() / "fromstv").string();
  fs::remove_all(outdir);
  const std::string cfg = tiny_config(outdir, 0, "playback2");
  auto train = run_cli("train --config " + cfg + " --set data.train_container=\"" + out +
                       "\" --set data.eval_container=\"" + out + "\"");
  CHECK(train.exit_code == 0);
}
