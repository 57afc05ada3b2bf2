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
#ifndef PEFTLEAK_CLI_HPP
#define PEFTLEAK_CLI_HPP

// Command implementations behind tools/peftleak. Each command writes only
// below its output directory and returns a process exit code.
//
// Exit codes: 0 success, 1 check failed (gradcheck), 2 configuration error,
// 3 runtime error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "peftleak/config.hpp"
#include "peftleak/dataio.hpp"
#include "peftleak/flsim.hpp"
#include "peftleak/grad.hpp"
#include "peftleak/metrics.hpp"

namespace peftleak {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitConfig = 2, kExitRuntime = 3 };

// --- plan files ---------------------------------------------------------------

// Everything the attack needs besides the backbone: model and craft settings,
// the plan, and the attack options.
struct AttackSetup {
  ModelConfig model;
  CraftConfig craft;
  AttackPlan plan;
  AttackOptions options;
  double delta = 0.0;
};

inline json to_json(const AttackSetup& s) {
  const auto& p = s.plan;
  json j;
  j["format"] = "peftleak-plan";
  j["version"] = 1;
  j["model"] = {{"D", s.model.D},
                {"L", s.model.L},
                {"num_encoders", s.model.num_encoders},
                {"P", s.model.P},
                {"C", s.model.C},
                {"H", s.model.H},
                {"W", s.model.W},
                {"r", s.model.r},
                {"num_classes", s.model.num_classes},
                {"activation", to_string(s.model.adapter_activation)},
                {"head", to_string(s.model.head_mode)},
                {"ln_eps", s.model.ln_eps}};
  j["craft"] = {{"sigma_pos", s.craft.sigma_pos},
                {"pos_dist", to_string(s.craft.pos_dist)},
                {"gamma", s.craft.gamma},
                {"epsilon_up", s.craft.epsilon_up},
                {"margin", s.craft.margin},
                {"fingerprint", s.craft.fingerprint_enabled},
                {"embed_mode", to_string(s.craft.embed_mode)},
                {"row_design", to_string(s.craft.row_design)},
                {"head_scale", s.craft.head_scale},
                {"seed", s.craft.seed}};
  json as = json::array();
  for (const auto& a : p.assignments) {
    as.push_back({{"adapter", a.adapter}, {"position", a.position}, {"slot", a.slot}});
  }
  j["plan"] = {{"r", p.r},
               {"rounds", p.rounds},
               {"positions", p.positions},
               {"slots", p.slots},
               {"assignments", as},
               {"thresholds", p.thresholds},
               {"quantiles", p.quantiles},
               {"gains", p.gains},
               {"row_design", to_string(p.row_design)},
               {"stats", {{"mu", p.stats.mu}, {"sigma", p.stats.sigma}, {"count", p.stats.count}}}};
  j["attack"] = {{"pixel_tau", s.options.pixel_tau},
                 {"residual_tol", s.options.residual_tol},
                 {"consistency_check", s.options.consistency_check},
                 {"bin_tol_rel", s.options.bin_tol_rel},
                 {"delta", s.delta}};
  return j;
}

inline AttackSetup attack_setup_from_json(const json& j) {
  try {
    if (j.at("format") != "peftleak-plan" || j.at("version") != 1) {
      throw FormatError("plan file: unsupported format or version");
    }
    AttackSetup s;
    ExperimentConfig tmp;
    for (const auto& [k, v] : j.at("model").items()) {
      set_config_value(tmp, "model", k, v.is_string() ? v.get<std::string>() : v.dump());
    }
    for (const auto& [k, v] : j.at("craft").items()) {
      set_config_value(tmp, "craft", k, v.is_string() ? v.get<std::string>() : v.dump());
    }
    s.model = tmp.model;
    s.craft = tmp.craft;
    const auto& p = j.at("plan");
    s.plan.r = p.at("r");
    s.plan.rounds = p.at("rounds");
    s.plan.positions = p.at("positions").get<std::vector<std::size_t>>();
    s.plan.slots = p.at("slots").get<std::vector<std::size_t>>();
    for (const auto& a : p.at("assignments")) {
      s.plan.assignments.push_back({a.at("adapter"), a.at("position"), a.at("slot")});
    }
    s.plan.thresholds = p.at("thresholds").get<decltype(s.plan.thresholds)>();
    s.plan.quantiles = p.at("quantiles").get<decltype(s.plan.quantiles)>();
    s.plan.gains = p.at("gains").get<std::vector<double>>();
    s.plan.row_design = p.at("row_design") == "position_encoding" ? RowDesign::position_encoding
                                                                   : RowDesign::ln_invariant;
    s.plan.stats.mu = p.at("stats").at("mu").get<std::vector<double>>();
    s.plan.stats.sigma = p.at("stats").at("sigma").get<std::vector<double>>();
    s.plan.stats.count = p.at("stats").at("count");
    const auto& a = j.at("attack");
    s.options.pixel_tau = a.at("pixel_tau");
    s.options.residual_tol = a.at("residual_tol");
    s.options.consistency_check = a.at("consistency_check");
    s.options.bin_tol_rel = a.at("bin_tol_rel");
    s.delta = a.at("delta");
    s.model.validate();
    s.plan.validate(s.model);
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("plan file: ") + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  detail::write_file(path, text);
}

inline json read_json(const fs::path& path) {
  const std::string text = detail::read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline TensorBundle gradients_bundle(const AdapterGradients& g, const ModelConfig& mc) {
  return adapters_bundle(g, mc);
}

// --- outputs --------------------------------------------------------------------

inline std::string rounds_csv(const std::vector<RoundRow>& rows) {
  std::ostringstream os;
  os << "round,position,bins_active,patches_valid,coverage,mean_mse\n";
  for (const auto& r : rows) {
    os << r.round << ',' << r.position << ',' << r.bins_active << ',' << r.patches_valid << ','
       << detail::fmt_double(r.coverage) << ',' << detail::fmt_double(r.mean_mse) << '\n';
  }
  return os.str();
}

inline json patches_json(const ReconstructionReport& rep) {
  json arr = json::array();
  for (const auto& p : rep.patches) {
    json e = {{"position", p.position}, {"bin", p.bin},           {"round", p.round},
              {"adapter", p.adapter},   {"valid", p.valid},       {"stat_check", p.stat_check},
              {"lower", p.lower},       {"residual", p.residual}, {"pixels", p.pixels}};
    e["upper"] = std::isfinite(p.upper) ? json(p.upper) : json(nullptr);
    e["group"] = p.group ? json(*p.group) : json(nullptr);
    if (!p.fingerprint.empty()) e["fingerprint"] = p.fingerprint;
    arr.push_back(std::move(e));
  }
  return arr;
}

inline void write_group_images(const ReconstructionReport& rep, const ModelConfig& mc, const fs::path& dir) {
  char name[64];
  for (const auto& img : assemble_images(rep, mc)) {
    std::snprintf(name, sizeof name, "group_%03zu.ppm", img.group);
    save_ppm(denormalize(to_rgb(img.image)), dir / name);
  }
}

// --- craft ------------------------------------------------------------------------

inline int cmd_craft(const ExperimentConfig& cfg, const fs::path& out) {
  Server server(cfg.model, cfg.craft);
  server.prepare(public_images(cfg.data, cfg.model, cfg.fl.seed), cfg.plan, cfg.fl.rounds);
  fs::create_directories(out);
  write_text(out / "config.ini", to_ini(cfg));
  write_bundle(backbone_bundle(server.backbone(), cfg.model), out / "backbone.pltb");
  for (std::size_t r = 0; r < cfg.fl.rounds; ++r) {
    write_bundle(adapters_bundle(server.adapters_for(r), cfg.model),
                 out / ("adapters_round" + std::to_string(r) + ".pltb"));
  }
  const AttackSetup setup{cfg.model, cfg.craft, server.plan(), cfg.plan.attack, server.delta()};
  write_text(out / "plan.json", to_json(setup).dump(2) + "\n");
  std::cout << "crafted " << cfg.model.num_adapters() << " adapters for " << cfg.fl.rounds
            << " round(s) into " << out.string() << "\n";
  return kExitOk;
}

// --- run ----------------------------------------------------------------------------

inline json summary_json(const ExperimentConfig& cfg, const ExperimentResult& res,
                         std::optional<double> runtime_s) {
  json rounds = json::array();
  for (const auto& r : res.rounds) {
    rounds.push_back({{"round", r.round},
                      {"coverage", r.coverage},
                      {"mean_mse", r.mean_mse},
                      {"mean_ssim", r.mean_ssim},
                      {"recovery_rate", r.recovery_rate},
                      {"bins_active", r.bins_active},
                      {"patches_valid", r.patches_valid},
                      {"oracle_isolated", r.oracle_isolated}});
  }
  json j = {{"config_hash", config_hash(cfg)},
            {"rounds", rounds},
            {"coverage", res.merged.coverage},
            {"mean_mse", res.score.mean_mse},
            {"mean_ssim", res.score.mean_ssim},
            {"recovery_rate", res.score.recovery_rate},
            {"psnr", reportable_psnr(res.score.psnr)},
            {"delta", res.delta}};
  j["runtime_s"] = runtime_s ? json(*runtime_s) : json(nullptr);
  return j;
}

inline int cmd_run(const ExperimentConfig& cfg, const fs::path& out, bool record_runtime = false) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentResult res = run_experiment(cfg.model, cfg.craft, cfg.fl, cfg.plan, cfg.data);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(out / "images");
  write_text(out / "config.ini", to_ini(cfg));
  write_text(out / "rounds.csv", rounds_csv(res.rows));
  write_text(out / "summary.json",
             summary_json(cfg, res, record_runtime ? std::optional<double>(elapsed) : std::nullopt).dump(2) +
                 "\n");
  json report = {{"coverage", res.merged.coverage},
                 {"valid_per_position", res.merged.valid_per_position},
                 {"group_mode", res.merged.group_mode == GroupMode::oracle ? "oracle" : "fingerprint"},
                 {"patches", patches_json(res.merged)}};
  write_text(out / "report.json", report.dump(2) + "\n");

  // Ground truth, per-image best matches, and the attack's own groups.
  const auto& mc = cfg.model;
  const auto matches = match_patches(res.merged, res.victim, mc);
  char name[64];
  for (std::size_t m = 0; m < res.victim.images.size(); ++m) {
    std::snprintf(name, sizeof name, "truth_%03zu.ppm", m);
    save_ppm(denormalize(to_rgb(res.victim.images[m])), out / "images" / name);
    Tensor rec({mc.num_patches(), mc.patch_dim()}, 0.0);
    for (std::size_t t = 0; t < mc.num_patches(); ++t) {
      if (!matches[m][t].index) continue;
      const auto& px = res.merged.patches[*matches[m][t].index].pixels;
      for (std::size_t i = 0; i < px.size(); ++i) rec(t, i) = std::clamp(px[i], -1.0, 1.0);
    }
    std::snprintf(name, sizeof name, "recovered_%03zu.ppm", m);
    save_ppm(denormalize(to_rgb(unpatchify(rec, mc.C, mc.H, mc.W, mc.P))), out / "images" / name);
  }
  write_group_images(res.merged, mc, out / "images");

  // Artifacts for a standalone attack.
  write_bundle(backbone_bundle(res.backbone, mc), out / "backbone.pltb");
  const AttackSetup setup{mc, cfg.craft, res.plan, cfg.plan.attack, res.delta};
  write_text(out / "plan.json", to_json(setup).dump(2) + "\n");
  for (std::size_t r = 0; r < res.victim_uploads.size(); ++r) {
    write_bundle(gradients_bundle(res.victim_uploads[r], mc), out / ("grads_round" + std::to_string(r) + ".pltb"));
  }

  std::printf("coverage %.4f  recovery_rate %.4f  mean_mse %.6f  mean_ssim %.4f\n", res.merged.coverage,
              res.score.recovery_rate, res.score.mean_mse, res.score.mean_ssim);
  return kExitOk;
}

// --- attack ---------------------------------------------------------------------------

inline int cmd_attack(const fs::path& grads_path, const fs::path& plan_path, const fs::path& backbone_path,
                      const fs::path& out, std::size_t round, std::size_t batch_size) {
  const AttackSetup setup = attack_setup_from_json(read_json(plan_path));
  auto [bb, mc] = backbone_from_bundle(read_bundle(backbone_path));
  if (!(mc == setup.model)) throw FormatError("backbone and plan describe different models");
  const auto grads = adapters_from_bundle<AdapterGradients>(read_bundle(grads_path), mc);
  if (round >= setup.plan.rounds) throw ConfigError("attack: --round outside the plan");
  const AttackContext ctx{bb, mc, setup.craft, setup.plan};
  const auto rep = reconstruct(grads, ctx, round, batch_size, setup.options, setup.delta);
  fs::create_directories(out / "images");
  json j = {{"round", round},
            {"batch_size", batch_size},
            {"coverage", rep.coverage},
            {"active_per_position", rep.active_per_position},
            {"valid_per_position", rep.valid_per_position},
            {"groups", rep.groups.size()},
            {"patches", patches_json(rep)}};
  write_text(out / "attack_report.json", j.dump(2) + "\n");
  write_group_images(rep, mc, out / "images");
  std::size_t active = 0, valid = 0;
  for (auto v : rep.active_per_position) active += v;
  for (auto v : rep.valid_per_position) valid += v;
  std::printf("active bins %zu  valid patches %zu  groups %zu  coverage %.4f\n", active, valid,
              rep.groups.size(), rep.coverage);
  return kExitOk;
}

// --- sweep ------------------------------------------------------------------------------

struct SweepCell {
  std::string value;
  std::size_t seed_index = 0;
  double recovery_rate = 0.0, mean_mse = 0.0, mean_ssim = 0.0, coverage = 0.0;
};

// Applies one sweep coordinate to a configuration.
inline ExperimentConfig apply_sweep_value(ExperimentConfig cfg, const std::string& vary, const std::string& value) {
  if (vary == "batch") {
    set_config_value(cfg, "fl", "batch_size", value);
  } else if (vary == "r") {
    set_config_value(cfg, "model", "r", value);
  } else if (vary == "layers") {
    // Adapters per position; the model grows when the plan needs more adapters.
    set_config_value(cfg, "plan", "slots", value);
    const auto [pos, slots] = resolve_plan_layout(cfg.plan, cfg.model);
    std::size_t need = 0;
    for (auto s : slots) need += s;
    cfg.model.num_encoders = std::max(cfg.model.num_encoders, (need + 1) / 2);
  } else if (vary == "rounds") {
    set_config_value(cfg, "fl", "rounds", value);
  } else if (vary == "noise") {
    set_config_value(cfg, "defense", "kind", "gaussian_noise");
    set_config_value(cfg, "defense", "noise_rel_sigma", value);
  } else if (vary == "topk") {
    set_config_value(cfg, "defense", "kind", "topk_prune");
    set_config_value(cfg, "defense", "k_fraction", value);
  } else {
    throw ConfigError("sweep: --vary must be batch|r|layers|rounds|noise|topk");
  }
  cfg.validate();
  return cfg;
}

inline std::vector<SweepCell> run_sweep(const ExperimentConfig& base, const std::string& vary,
                                        const std::vector<std::string>& values, std::size_t seeds) {
  if (values.empty()) throw ConfigError("sweep: no values");
  if (seeds < 1) throw ConfigError("sweep: --seeds must be >= 1");
  std::vector<ExperimentConfig> cfgs;
  std::vector<SweepCell> cells;
  for (const auto& v : values) {
    for (std::size_t s = 0; s < seeds; ++s) {
      ExperimentConfig c = apply_sweep_value(base, vary, v);
      c.fl.seed = base.fl.seed + s;
      c.craft.seed = base.craft.seed + s;
      cfgs.push_back(c);
      cells.push_back({v, s});
    }
  }
  parallel_for(cells.size(), [&](std::size_t k) {
    const auto& c = cfgs[k];
    const auto res = run_experiment(c.model, c.craft, c.fl, c.plan, c.data);
    cells[k].recovery_rate = res.score.recovery_rate;
    cells[k].mean_mse = res.score.mean_mse;
    cells[k].mean_ssim = res.score.mean_ssim;
    cells[k].coverage = res.merged.coverage;
  });
  return cells;
}

struct SweepRow {
  std::string x_value;
  double recovery_rate = 0.0, mean_mse = 0.0, mean_ssim = 0.0, coverage = 0.0;
};

// Seed means per value, in the order the values were given.
inline std::vector<SweepRow> summarize_sweep(const std::vector<SweepCell>& cells) {
  std::vector<SweepRow> rows;
  std::vector<std::size_t> counts;
  for (const auto& c : cells) {
    std::size_t k = 0;
    while (k < rows.size() && rows[k].x_value != c.value) ++k;
    if (k == rows.size()) {
      rows.push_back({c.value});
      counts.push_back(0);
    }
    rows[k].recovery_rate += c.recovery_rate;
    rows[k].mean_mse += c.mean_mse;
    rows[k].mean_ssim += c.mean_ssim;
    rows[k].coverage += c.coverage;
    ++counts[k];
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const double n = static_cast<double>(counts[k]);
    rows[k].recovery_rate /= n;
    rows[k].mean_mse /= n;
    rows[k].mean_ssim /= n;
    rows[k].coverage /= n;
  }
  return rows;
}

inline std::vector<std::string> split_values(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError("sweep: empty entry in --values");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

inline int cmd_sweep(const ExperimentConfig& cfg, const std::string& vary, const std::string& values,
                     std::size_t seeds, const fs::path& out) {
  const auto cells = run_sweep(cfg, vary, split_values(values), seeds);
  const auto rows = summarize_sweep(cells);
  fs::create_directories(out);
  write_text(out / "config.ini", to_ini(cfg));
  std::ostringstream os;
  os << "sweep_name,x_value,recovery_rate,mean_mse,mean_ssim\n";
  for (const auto& r : rows) {
    os << vary << ',' << r.x_value << ',' << detail::fmt_double(r.recovery_rate) << ','
       << detail::fmt_double(r.mean_mse) << ',' << detail::fmt_double(r.mean_ssim) << '\n';
  }
  write_text(out / "sweep.csv", os.str());
  std::ostringstream cs;
  cs << "sweep_name,x_value,seed_index,recovery_rate,mean_mse,mean_ssim,coverage\n";
  for (const auto& c : cells) {
    cs << vary << ',' << c.value << ',' << c.seed_index << ',' << detail::fmt_double(c.recovery_rate) << ','
       << detail::fmt_double(c.mean_mse) << ',' << detail::fmt_double(c.mean_ssim) << ','
       << detail::fmt_double(c.coverage) << '\n';
  }
  write_text(out / "sweep_cells.csv", cs.str());
  std::cout << os.str();
  return kExitOk;
}

// --- gradcheck ----------------------------------------------------------------------------

struct GradcheckSetup {
  std::size_t batch_size = 2;
  double h = 1e-5;
  double tolerance = 1e-6;
  double adapter_scale = 0.1;
};

// Crafted backbone, random adapters (so every parameter carries gradient),
// central differences against the analytic backward pass.
inline GradCheckReport run_gradcheck(const ExperimentConfig& cfg, const GradcheckSetup& gs = {}) {
  const Network net(craft_backbone(cfg.craft, cfg.model), cfg.model);
  Rng rng = Rng(cfg.fl.seed).derive(0x4752414443484B);
  const AdapterSet adapters = random_adapters(cfg.model, rng, gs.adapter_scale);
  const Batch batch = synth_batch(gs.batch_size, cfg.model, rng.next_u64(), cfg.data.kind);
  return finite_diff_check(net, adapters, batch, gs.h, gs.tolerance);
}

inline int cmd_gradcheck(const ExperimentConfig& cfg, const GradcheckSetup& gs = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = run_gradcheck(cfg, gs);
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("gradcheck %s  max_rel_error %.3e  max_abs_error %.3e  checked %zu  skipped_kinks %zu  %.1fs\n",
              rep.passed ? "PASS" : "FAIL", rep.max_rel_error, rep.max_abs_error, rep.checked,
              rep.skipped_kinks, dt);
  return rep.passed ? kExitOk : kExitCheckFailed;
}

// --- report ---------------------------------------------------------------------------------

// Mosaic: one row per image, ground truth left, recovery right, 1 px white gutters.
inline Tensor build_mosaic(const std::vector<std::pair<Tensor, Tensor>>& pairs) {
  if (pairs.empty()) throw FormatError("report: no images to tile");
  const std::size_t H = pairs[0].first.dim(1), W = pairs[0].first.dim(2);
  const std::size_t rows = pairs.size();
  Tensor m({3, rows * (H + 1) + 1, 2 * (W + 1) + 1}, 255.0);
  const std::size_t MH = m.dim(1), MW = m.dim(2);
  for (std::size_t k = 0; k < rows; ++k) {
    for (int side = 0; side < 2; ++side) {
      const Tensor& img = side == 0 ? pairs[k].first : pairs[k].second;
      if (img.dim(1) != H || img.dim(2) != W) throw FormatError("report: image sizes differ");
      const std::size_t y0 = 1 + k * (H + 1), x0 = 1 + static_cast<std::size_t>(side) * (W + 1);
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
          for (std::size_t x = 0; x < W; ++x) m[(c * MH + y0 + y) * MW + x0 + x] = img[(c * H + y) * W + x];
        }
      }
    }
  }
  return m;
}

inline int cmd_report(const fs::path& in, const fs::path& out) {
  const json summary = read_json(in / "summary.json");
  std::cout << "run directory: " << in.string() << "\n";
  std::cout << "config hash:   " << summary.at("config_hash").get<std::string>() << "\n";
  std::printf("coverage %.4f  recovery_rate %.4f  mean_mse %.6f  mean_ssim %.4f  psnr %.2f dB\n",
              summary.at("coverage").get<double>(), summary.at("recovery_rate").get<double>(),
              summary.at("mean_mse").get<double>(), summary.at("mean_ssim").get<double>(),
              summary.at("psnr").get<double>());
  std::printf("%-6s %-9s %-13s %-10s %-9s %s\n", "round", "coverage", "recovery_rate", "mean_mse", "valid",
              "oracle_isolated");
  for (const auto& r : summary.at("rounds")) {
    std::printf("%-6zu %-9.4f %-13.4f %-10.6f %-9zu %zu\n", r.at("round").get<std::size_t>(),
                r.at("coverage").get<double>(), r.at("recovery_rate").get<double>(),
                r.at("mean_mse").get<double>(), r.at("patches_valid").get<std::size_t>(),
                r.at("oracle_isolated").get<std::size_t>());
  }
  std::vector<std::pair<Tensor, Tensor>> pairs;
  char name[64];
  for (std::size_t m = 0;; ++m) {
    std::snprintf(name, sizeof name, "truth_%03zu.ppm", m);
    const fs::path truth = in / "images" / name;
    if (!fs::exists(truth)) break;
    std::snprintf(name, sizeof name, "recovered_%03zu.ppm", m);
    pairs.emplace_back(load_ppm(truth), load_ppm(in / "images" / name));
  }
  fs::create_directories(out);
  save_ppm(build_mosaic(pairs), out / "mosaic.ppm");
  std::cout << "mosaic: " << (out / "mosaic.ppm").string() << " (" << pairs.size()
            << " rows, truth | recovered, gray = not recovered)\n";
  return kExitOk;
}

}  // namespace peftleak

#endif  // PEFTLEAK_CLI_HPP
