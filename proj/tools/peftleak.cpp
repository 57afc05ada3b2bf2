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

// peftleak: craft | run | attack | sweep | gradcheck | report

#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "peftleak/cli.hpp"

namespace {

using peftleak::ExperimentConfig;

ExperimentConfig load(const std::string& path) {
  return path.empty() ? [] {
    ExperimentConfig c;
    c.validate();
    return c;
  }()
                      : peftleak::parse_config_file(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated-learning simulator and adapter-gradient leakage lab"};
  app.require_subcommand(1);

  std::string config, out, in, grads, plan, backbone, vary, values;
  std::size_t seeds = 5, round = 0, batch_size = 16;
  bool record_runtime = false;
  peftleak::GradcheckSetup gs;

  auto* craft = app.add_subcommand("craft", "craft backbone, adapters and plan");
  craft->add_option("--config", config, "experiment config (INI)");
  craft->add_option("--out", out, "output directory")->required();

  auto* run = app.add_subcommand("run", "full federated pipeline with attack and scoring");
  run->add_option("--config", config, "experiment config (INI)");
  run->add_option("--out", out, "output directory")->required();
  run->add_flag("--record-runtime", record_runtime, "store wall time in summary.json");

  auto* attack = app.add_subcommand("attack", "reconstruct from serialized gradients");
  attack->add_option("--grads", grads, "gradient bundle (.pltb)")->required();
  attack->add_option("--plan", plan, "plan.json")->required();
  attack->add_option("--backbone", backbone, "backbone bundle (.pltb)")->required();
  attack->add_option("--out", out, "output directory")->required();
  attack->add_option("--round", round, "round the gradients belong to");
  attack->add_option("--batch-size", batch_size, "victim batch size, for coverage");

  auto* sweep = app.add_subcommand("sweep", "parameter sweep over seeds");
  sweep->add_option("--config", config, "experiment config (INI)");
  sweep->add_option("--vary", vary, "batch|r|layers|rounds|noise|topk")->required();
  sweep->add_option("--values", values, "comma-separated values")->required();
  sweep->add_option("--seeds", seeds, "seeds per value");
  sweep->add_option("--out", out, "output directory")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of adapter gradients");
  gradcheck->add_option("--config", config, "experiment config (INI)");
  gradcheck->add_option("--batch-size", gs.batch_size, "images in the check batch");
  gradcheck->add_option("--step", gs.h, "central-difference step");
  gradcheck->add_option("--tolerance", gs.tolerance, "max relative error");

  auto* report = app.add_subcommand("report", "summary and mosaic of a run directory");
  report->add_option("--in", in, "run directory")->required();
  report->add_option("--out", out, "mosaic directory (default: <in>/../<name>_report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : peftleak::kExitConfig;
  }

  try {
    if (*craft) return peftleak::cmd_craft(load(config), out);
    if (*run) return peftleak::cmd_run(load(config), out, record_runtime);
    if (*attack) return peftleak::cmd_attack(grads, plan, backbone, out, round, batch_size);
    if (*sweep) return peftleak::cmd_sweep(load(config), vary, values, seeds, out);
    if (*gradcheck) return peftleak::cmd_gradcheck(load(config), gs);
    if (*report) {
      std::filesystem::path dir(in);
      if (out.empty()) {
        const auto name = dir.has_filename() ? dir.filename() : dir.parent_path().filename();
        out = (dir.lexically_normal().parent_path() / (name.string() + "_report")).string();
      }
      return peftleak::cmd_report(dir, out);
    }
  } catch (const peftleak::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return peftleak::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return peftleak::kExitRuntime;
  }
  return peftleak::kExitRuntime;
}
