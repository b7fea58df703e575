// End-to-end checks of the masklab binary: exit codes, output files, and
// run-to-run determinism. The binary path comes in via MASKLAB_BIN.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "masklab/run_config.hpp"

using namespace masklab;
namespace fs = std::filesystem;

namespace {

struct RunOutput {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

RunOutput run_cli(const std::string& args) {
  static int counter = 0;
  fs::path dir = fs::path("cli_tmp");
  fs::create_directories(dir);
  fs::path out = dir / ("stdout." + std::to_string(counter));
  fs::path err = dir / ("stderr." + std::to_string(counter));
  ++counter;
  std::string cmd = std::string(MASKLAB_BIN) + " " + args + " > " +
                    out.string() + " 2> " + err.string();
  int status = std::system(cmd.c_str());
  RunOutput r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  out << text;
}

const char* kSmallConfig =
    "[model]\n"
    "model_dim = 8\n"
    "n_layers = 1\n"
    "n_heads = 2\n"
    "ffn_mult = 2\n"
    "max_len = 8\n"
    "\n"
    "[train]\n"
    "total_steps = 12\n"
    "warmup_steps = 3\n"
    "batch_size = 2\n"
    "seq_len = 8\n"
    "\n"
    "[task]\n"
    "kind = pos-mapping\n"
    "min_len = 4\n"
    "max_len = 6\n"
    "n_max = 6\n"
    "\n"
    "[run]\n"
    "seed = 11\n";

// Metrics lines with the wall-clock field dropped; everything left must be
// byte-identical across same-seed runs.
std::vector<std::string> detimed_metrics(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    j.erase("wall_ms");
    out.push_back(j.dump());
  }
  return out;
}

}  // namespace

TEST_CASE("defaults prints a loadable config") {
  RunOutput r = run_cli("defaults");
  REQUIRE(r.exit_code == 0);
  RunConfig cfg = run_config_from_text(r.out);
  CHECK(run_config_to_text(cfg) == r.out);
  CHECK(cfg.model.gamma == RunConfig{}.model.gamma);
}

TEST_CASE("verify passes on a fresh build") {
  RunOutput r = run_cli("verify --json");
  REQUIRE(r.exit_code == 0);
  nlohmann::json j = nlohmann::json::parse(r.out);
  CHECK(j.at("ok").get<bool>());
  CHECK(j.at("checks").size() >= 6);
  for (const auto& c : j.at("checks")) CHECK(c.at("ok").get<bool>());
}

TEST_CASE("train writes metrics, config, checkpoint") {
  fs::remove_all("cli_tmp/run_a");
  write_file("cli_tmp/small.cfg", kSmallConfig);
  RunOutput r =
      run_cli("train --config cli_tmp/small.cfg --out cli_tmp/run_a --json");
  REQUIRE(r.exit_code == 0);

  nlohmann::json j = nlohmann::json::parse(r.out);
  CHECK(j.at("steps").get<int>() == 12);
  CHECK(j.at("final_loss").get<double>() > 0.0);

  CHECK(fs::exists("cli_tmp/run_a/run.cfg"));
  CHECK(fs::exists("cli_tmp/run_a/checkpoint.json"));
  std::vector<std::string> lines = detimed_metrics("cli_tmp/run_a/metrics.jsonl");
  REQUIRE(lines.size() == 12);
  nlohmann::json first = nlohmann::json::parse(lines[0]);
  CHECK(first.at("step").get<int>() == 0);
  CHECK(first.contains("loss"));
  CHECK(first.contains("lr"));
  CHECK(first.contains("grad_norm"));

  RunConfig saved = load_run_config("cli_tmp/run_a/run.cfg");
  CHECK(saved.model.vocab_size == 8);  // resolved from the task
  CHECK(saved.seed == 11);
}

TEST_CASE("same seed reproduces the run byte for byte") {
  write_file("cli_tmp/small.cfg", kSmallConfig);
  fs::remove_all("cli_tmp/run_b");
  fs::remove_all("cli_tmp/run_c");
  fs::remove_all("cli_tmp/run_d");
  REQUIRE(run_cli("train --config cli_tmp/small.cfg --out cli_tmp/run_b")
              .exit_code == 0);
  REQUIRE(run_cli("train --config cli_tmp/small.cfg --out cli_tmp/run_c")
              .exit_code == 0);
  CHECK(detimed_metrics("cli_tmp/run_b/metrics.jsonl") ==
        detimed_metrics("cli_tmp/run_c/metrics.jsonl"));
  CHECK(slurp("cli_tmp/run_b/checkpoint.json") ==
        slurp("cli_tmp/run_c/checkpoint.json"));

  REQUIRE(run_cli("train --config cli_tmp/small.cfg --out cli_tmp/run_d "
                  "--seed 12")
              .exit_code == 0);
  CHECK(detimed_metrics("cli_tmp/run_b/metrics.jsonl") !=
        detimed_metrics("cli_tmp/run_d/metrics.jsonl"));
}

TEST_CASE("eval, probe, generate run against a checkpoint") {
  write_file("cli_tmp/small.cfg", kSmallConfig);
  if (!fs::exists("cli_tmp/run_a/checkpoint.json")) {
    REQUIRE(run_cli("train --config cli_tmp/small.cfg --out cli_tmp/run_a")
                .exit_code == 0);
  }
  const std::string ckpt = "--ckpt cli_tmp/run_a/checkpoint.json";

  RunOutput ev = run_cli("eval " + ckpt +
                         " --config cli_tmp/small.cfg --samples 32 --json");
  REQUIRE(ev.exit_code == 0);
  nlohmann::json j = nlohmann::json::parse(ev.out);
  CHECK(j.at("task").get<std::string>() == "pos-mapping");
  CHECK(j.at("samples").get<int>() == 32);
  double loss = j.at("loss").get<double>();
  CHECK(j.at("ppl").get<double>() == doctest::Approx(std::exp(loss)));
  CHECK(j.at("accuracy").get<double>() >= 0.0);

  RunOutput pr = run_cli("probe " + ckpt +
                         " --config cli_tmp/small.cfg --probe da --samples 8 "
                         "--out cli_tmp/da.json --json");
  REQUIRE(pr.exit_code == 0);
  nlohmann::json da = nlohmann::json::parse(slurp("cli_tmp/da.json"));
  CHECK(da.at("samples").get<int>() == 8);

  RunOutput cv = run_cli("probe " + ckpt +
                         " --config cli_tmp/small.cfg --probe ratio-curve "
                         "--out cli_tmp/curve.csv");
  REQUIRE(cv.exit_code == 0);
  std::string curve = slurp("cli_tmp/curve.csv");
  CHECK(curve.rfind("position,ratio\n", 0) == 0);

  RunOutput g1 = run_cli("generate " + ckpt + " --prompt \"0 0 0\" --max-new 4");
  RunOutput g2 = run_cli("generate " + ckpt + " --prompt \"0 0 0\" --max-new 4");
  REQUIRE(g1.exit_code == 0);
  CHECK(g1.out == g2.out);

  RunOutput gj = run_cli("generate " + ckpt +
                         " --prompt \"0 0 0\" --max-new 4 --json");
  REQUIRE(gj.exit_code == 0);
  nlohmann::json gen = nlohmann::json::parse(gj.out);
  CHECK(gen.at("tokens").size() == 7);
  CHECK(gen.at("prompt_len").get<int>() == 3);
}

TEST_CASE("exit codes separate validation from runtime failures") {
  write_file("cli_tmp/bad.cfg", "[model]\ngamma = -1\n");
  CHECK(run_cli("train --config cli_tmp/bad.cfg").exit_code == 1);
  CHECK(run_cli("eval --ckpt cli_tmp/no_such.json").exit_code == 2);
  CHECK(run_cli("train --config cli_tmp/does_not_exist.cfg").exit_code == 2);
  write_file("cli_tmp/small.cfg", kSmallConfig);
  CHECK(run_cli("train --config cli_tmp/small.cfg --set run.mode=infer "
                "--out cli_tmp/run_x")
            .exit_code == 1);
  CHECK(run_cli("train --config cli_tmp/small.cfg --set model.typo=1 "
                "--out cli_tmp/run_x")
            .exit_code == 1);
  CHECK(run_cli("").exit_code == 1);
}

TEST_CASE("MASKLAB_OUT_DIR supplies the default output directory") {
  write_file("cli_tmp/small.cfg", kSmallConfig);
  fs::remove_all("cli_tmp/env_dir");
  std::string cmd = "MASKLAB_OUT_DIR=cli_tmp/env_dir " + std::string(MASKLAB_BIN) +
                    " train --config cli_tmp/small.cfg > /dev/null 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists("cli_tmp/env_dir/checkpoint.json"));
}
