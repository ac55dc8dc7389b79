#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "test_util.hpp"

#ifndef EEMKIT_CLI_PATH
#error "EEMKIT_CLI_PATH must point at the built CLI binary"
#endif

namespace {

using eemkit::testutil::TempDir;

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

CommandResult run_cli(const std::string& args, const std::filesystem::path& scratch) {
  const auto out_file = scratch / "cli_output.txt";
  const std::string cmd = std::string(EEMKIT_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  CommandResult result;
  result.exit_code = WEXITSTATUS(raw);
  std::ifstream in(out_file);
  std::stringstream ss;
  ss << in.rdbuf();
  result.output = ss.str();
  return result;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("cli: synth generate + ingest round trip") {
  TempDir dir("cli_synth");
  const auto data = dir.path() / "data";
  auto gen = run_cli("synth generate --preset paper-like --out " + data.string() + " --seed 7 --oils 3 --stages 2",
                     dir.path());
  INFO(gen.output);
  REQUIRE(gen.exit_code == 0);
  CHECK(std::filesystem::exists(data / "A_stage0.csv"));
  CHECK(std::filesystem::exists(data / "targets.csv"));
  CHECK(std::filesystem::exists(data / "manifest.txt"));

  auto ingest = run_cli("ingest --eems " + data.string() + " --targets " + (data / "targets.csv").string(), dir.path());
  INFO(ingest.output);
  REQUIRE(ingest.exit_code == 0);
  CHECK(ingest.output.find("3 oils x 2 stages") != std::string::npos);
}

TEST_CASE("cli: same seed gives identical synthetic trees") {
  TempDir dir("cli_seed");
  const auto a = dir.path() / "a";
  const auto b = dir.path() / "b";
  REQUIRE(run_cli("synth generate --out " + a.string() + " --seed 9 --oils 2 --stages 2", dir.path()).exit_code == 0);
  REQUIRE(run_cli("synth generate --out " + b.string() + " --seed 9 --oils 2 --stages 2", dir.path()).exit_code == 0);
  CHECK(slurp(a / "targets.csv") == slurp(b / "targets.csv"));
  CHECK(slurp(a / "A_stage1.csv") == slurp(b / "A_stage1.csv"));
}

TEST_CASE("cli: ingest failures exit nonzero with a message") {
  TempDir dir("cli_empty");
  const auto empty = dir.path() / "empty";
  std::filesystem::create_directories(empty);
  {
    std::ofstream targets(dir.path() / "targets.csv");
    targets << "oil_id,stage_index,day,k232,k264,k268,k272\n";
  }
  auto result = run_cli("ingest --eems " + empty.string() + " --targets " + (dir.path() / "targets.csv").string(),
                        dir.path());
  CHECK(result.exit_code == 1);
  CHECK(result.output.find("error") != std::string::npos);
}

TEST_CASE("cli: usage errors exit 2") {
  TempDir dir("cli_usage");
  auto bad_target = run_cli("train --target k9000 --fold all", dir.path());
  CHECK(bad_target.exit_code == 2);
  auto bad_flag = run_cli("train --no-such-flag", dir.path());
  CHECK(bad_flag.exit_code == 2);
  auto bad_key = run_cli("ingest --set no.such.key=1", dir.path());
  CHECK(bad_key.exit_code == 2);
}

TEST_CASE("cli: train, predict, iea and report on a tiny synthetic run") {
  TempDir dir("cli_e2e");
  const auto data = dir.path() / "data";
  REQUIRE(run_cli("synth generate --out " + data.string() + " --seed 3 --oils 2 --stages 2", dir.path()).exit_code == 0);
  const std::string data_flags = " --eems " + data.string() + " --targets " + (data / "targets.csv").string();

  const auto runs = dir.path() / "runs";
  auto train = run_cli("train --target k232 --fold all --run-id tiny --output " + runs.string() + data_flags +
                           " --seed 5 --set phase1.epochs=2 --set phase2.epochs=1 --set phase1.learning_rate=0.003",
                       dir.path());
  INFO(train.output);
  REQUIRE(train.exit_code == 0);
  const auto run_dir = runs / "tiny";
  CHECK(std::filesystem::exists(run_dir / "config.resolved.txt"));
  CHECK(std::filesystem::exists(run_dir / "k232" / "A" / "checkpoint.bin"));
  CHECK(std::filesystem::exists(run_dir / "k232" / "B" / "manifest.txt"));
  CHECK(std::filesystem::exists(run_dir / "k232" / "report.csv"));

  auto single = run_cli("train --target k232 --fold B --run-id single --output " + runs.string() + data_flags +
                            " --seed 5 --set phase1.epochs=1 --set phase2.epochs=1",
                        dir.path());
  INFO(single.output);
  CHECK(single.exit_code == 0);
  CHECK(std::filesystem::exists(runs / "single" / "k232" / "B" / "checkpoint.bin"));

  const std::string checkpoint_a = (run_dir / "k232" / "A").string();
  auto predict = run_cli("predict --checkpoint " + checkpoint_a + " --eem " + (data / "A_stage0.csv").string(),
                         dir.path());
  INFO(predict.output);
  CHECK(predict.exit_code == 0);
  CHECK(predict.output.find("A_stage0.csv,") != std::string::npos);

  // Leakage guard: oil B is a training oil for fold-A's checkpoint.
  auto guarded = run_cli("iea --checkpoint " + checkpoint_a + data_flags + " --sample B_stage1 --out " +
                             (dir.path() / "iea_b").string(),
                         dir.path());
  CHECK(guarded.exit_code == 1);
  CHECK(guarded.output.find("training oil") != std::string::npos);

  auto iea = run_cli("iea --checkpoint " + checkpoint_a + data_flags + " --sample A_stage1 --out " +
                         (dir.path() / "iea_a").string(),
                     dir.path());
  INFO(iea.output);
  REQUIRE(iea.exit_code == 0);
  CHECK(std::filesystem::exists(dir.path() / "iea_a" / "occlusion_A_stage1.csv"));
  CHECK(std::filesystem::exists(dir.path() / "iea_a" / "bands_A_stage1.csv"));
  CHECK(std::filesystem::exists(dir.path() / "iea_a" / "overlay_A_stage1_heatmap.csv"));

  auto allowed = run_cli("iea --checkpoint " + checkpoint_a + data_flags + " --sample B_stage1 --allow-train-oil" +
                             " --out " + (dir.path() / "iea_b2").string(),
                         dir.path());
  CHECK(allowed.exit_code == 0);

  auto average = run_cli("iea --average-last-stage --run " + run_dir.string() + " --target k232" + data_flags +
                             " --out " + (dir.path() / "iea_avg").string(),
                         dir.path());
  INFO(average.output);
  CHECK(average.exit_code == 0);
  CHECK(std::filesystem::exists(dir.path() / "iea_avg" / "occlusion_average_last_stage.csv"));

  auto report = run_cli("report --run " + run_dir.string() + " --target k232 --map " +
                            (dir.path() / "iea_a" / "occlusion_A_stage1.csv").string() + data_flags,
                        dir.path());
  INFO(report.output);
  REQUIRE(report.exit_code == 0);
  CHECK(std::filesystem::exists(run_dir / "figures" / "k232" / "fig2_curves.csv"));
  CHECK(std::filesystem::exists(run_dir / "figures" / "k232" / "fig4_heatmap.csv"));
  CHECK(std::filesystem::exists(run_dir / "figures" / "k232" / "fig5_overlay_A_stage1_heatmap.csv"));
}
