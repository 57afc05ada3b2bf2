/*
 * Copyright 2026 The peftleak Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "peftleak/cli.hpp"

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace peftleak {
namespace {

namespace fs = std::filesystem;

const fs::path kCli = PEFTLEAK_CLI_PATH;
const fs::path kConfigs = PEFTLEAK_CONFIG_DIR;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("peftleak_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = kCli.string() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// Small model for fast end-to-end calls.
const char* kTinyIni = R"([model]
D = 16
L = 2
num_encoders = 4
P = 2
C = 1
H = 4
W = 4
r = 2
num_classes = 3
[fl]
batch_size = 4
[data]
public_count = 32
)";

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("codes");
  write(dir / "bad_key.ini", "[model]\nDD = 1\n");
  write(dir / "tiny.ini", kTinyIni);
  EXPECT_EQ(run_cli("run --config " + (dir / "bad_key.ini").string() + " --out " + (dir / "x").string()), 2);
  EXPECT_EQ(run_cli("run --out"), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("run --config " + (dir / "missing.ini").string() + " --out " + (dir / "x").string()), 2);
  EXPECT_EQ(run_cli("attack --grads " + (dir / "none.pltb").string() + " --plan " + (dir / "none.json").string() +
                    " --backbone " + (dir / "none.pltb").string() + " --out " + (dir / "y").string()),
            3);
  EXPECT_EQ(run_cli("gradcheck --config " + (dir / "tiny.ini").string()), 0);
  EXPECT_EQ(run_cli("gradcheck --config " + (dir / "tiny.ini").string() + " --tolerance 1e-300"), 1);
  EXPECT_EQ(run_cli("run --config " + (dir / "tiny.ini").string() + " --out " + (dir / "run").string()), 0);
}

TEST(Cli, RunWritesTheArtifactSet) {
  const fs::path dir = scratch("run");
  ASSERT_EQ(run_cli("run --config " + (kConfigs / "desk.ini").string() + " --out " + (dir / "run").string()), 0);
  for (const char* f : {"config.ini", "rounds.csv", "summary.json", "report.json", "backbone.pltb",
                        "plan.json", "grads_round0.pltb", "images/truth_000.ppm", "images/recovered_015.ppm"}) {
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  }
  // The echoed config parses back to the same configuration.
  const auto echoed = parse_config_file(dir / "run" / "config.ini");
  EXPECT_EQ(to_ini(echoed), to_ini(parse_config_file(kConfigs / "desk.ini")));
  const auto summary = read_json(dir / "run" / "summary.json");
  EXPECT_EQ(summary.at("config_hash").get<std::string>(), config_hash(echoed));
  EXPECT_GT(summary.at("coverage").get<double>(), 0.2);
  EXPECT_TRUE(summary.at("runtime_s").is_null());
  EXPECT_EQ(slurp(dir / "run" / "rounds.csv").substr(0, 6), "round,");

  ASSERT_EQ(run_cli("report --in " + (dir / "run").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "run_report" / "mosaic.ppm"));
  EXPECT_FALSE(fs::exists(dir / "run" / "mosaic.ppm"));
}

TEST(Cli, StandaloneAttackMatchesTheRun) {
  const fs::path dir = scratch("attack");
  const fs::path run = dir / "run";
  ASSERT_EQ(run_cli("run --config " + (kConfigs / "desk.ini").string() + " --out " + run.string()), 0);
  ASSERT_EQ(run_cli("attack --grads " + (run / "grads_round0.pltb").string() + " --plan " +
                    (run / "plan.json").string() + " --backbone " + (run / "backbone.pltb").string() +
                    " --out " + (dir / "att").string()),
            0);
  const auto rep = read_json(dir / "att" / "attack_report.json");
  const auto summary = read_json(run / "summary.json");
  std::size_t valid = 0;
  for (const auto& v : rep.at("valid_per_position")) valid += v.get<std::size_t>();
  EXPECT_EQ(valid, summary.at("rounds").at(0).at("patches_valid").get<std::size_t>());
  EXPECT_DOUBLE_EQ(rep.at("coverage").get<double>(), summary.at("coverage").get<double>());

  // A plan crafted with another seed does not fit these gradients: the call
  // succeeds but recovers little.
  auto other = parse_config_file(kConfigs / "desk.ini");
  other.craft.seed = 99;
  write(dir / "other.ini", to_ini(other));
  ASSERT_EQ(run_cli("craft --config " + (dir / "other.ini").string() + " --out " + (dir / "crafted").string()), 0);
  ASSERT_EQ(run_cli("attack --grads " + (run / "grads_round0.pltb").string() + " --plan " +
                    (dir / "crafted" / "plan.json").string() + " --backbone " +
                    (dir / "crafted" / "backbone.pltb").string() + " --out " + (dir / "bad").string()),
            0);
  const auto bad = read_json(dir / "bad" / "attack_report.json");
  EXPECT_LT(bad.at("coverage").get<double>(), 0.5 * rep.at("coverage").get<double>());
}

TEST(Cli, SweepWritesOneRowPerValue) {
  const fs::path dir = scratch("sweep");
  write(dir / "tiny.ini", kTinyIni);
  ASSERT_EQ(run_cli("sweep --config " + (dir / "tiny.ini").string() + " --vary batch --values 2,4 --seeds 2 --out " +
                    (dir / "s").string()),
            0);
  std::istringstream csv(slurp(dir / "s" / "sweep.csv"));
  std::string header, row1, row2, extra;
  std::getline(csv, header);
  std::getline(csv, row1);
  std::getline(csv, row2);
  EXPECT_EQ(header, "sweep_name,x_value,recovery_rate,mean_mse,mean_ssim");
  EXPECT_EQ(row1.substr(0, 8), "batch,2,");
  EXPECT_EQ(row2.substr(0, 8), "batch,4,");
  EXPECT_FALSE(std::getline(csv, extra) && !extra.empty());
  EXPECT_EQ(run_cli("sweep --config " + (dir / "tiny.ini").string() + " --vary colour --values 1 --out " +
                    (dir / "t").string()),
            2);
}

TEST(AttackSetup, JsonRoundTrip) {
  ExperimentConfig cfg;
  cfg.craft.fingerprint_enabled = true;
  Server server(cfg.model, cfg.craft);
  server.prepare(synth_batch(64, cfg.model, 3, SynthKind::smooth).images, cfg.plan, 2);
  const AttackSetup s{cfg.model, cfg.craft, server.plan(), cfg.plan.attack, server.delta()};
  const AttackSetup back = attack_setup_from_json(json::parse(to_json(s).dump()));
  EXPECT_TRUE(back.model == s.model);
  EXPECT_EQ(back.plan.thresholds, s.plan.thresholds);
  EXPECT_EQ(back.plan.assignments, s.plan.assignments);
  EXPECT_EQ(back.plan.gains, s.plan.gains);
  EXPECT_EQ(back.delta, s.delta);
  EXPECT_EQ(back.craft.fingerprint_enabled, true);
  EXPECT_EQ(to_json(back).dump(), to_json(s).dump());
}

}  // namespace
}  // namespace peftleak
