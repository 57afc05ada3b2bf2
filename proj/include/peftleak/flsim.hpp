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
#ifndef PEFTLEAK_FLSIM_HPP
#define PEFTLEAK_FLSIM_HPP

// Federated rounds with one malicious server. Users own their batches; the
// server owns the crafted parameters and sees only what users upload.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "peftleak/attack.hpp"
#include "peftleak/craft.hpp"
#include "peftleak/dataio.hpp"
#include "peftleak/grad.hpp"
#include "peftleak/metrics.hpp"
#include "peftleak/parallel.hpp"
#include "peftleak/stats.hpp"

namespace peftleak {

enum class DefenseKind { none, gaussian_noise, topk_prune, stochastic_quantize };

inline std::string to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::none: return "none";
    case DefenseKind::gaussian_noise: return "gaussian_noise";
    case DefenseKind::topk_prune: return "topk_prune";
    case DefenseKind::stochastic_quantize: return "stochastic_quantize";
  }
  return "none";
}

struct DefenseConfig {
  DefenseKind kind = DefenseKind::none;
  double noise_rel_sigma = 0.0;  // per-coordinate sd = rel * ||g|| / sqrt(d)
  double k_fraction = 1.0;       // kept fraction for top-K
  std::size_t quant_levels = 16;

  void validate() const {
    if (!(noise_rel_sigma >= 0.0) || !std::isfinite(noise_rel_sigma)) {
      throw ConfigError("defense: noise_rel_sigma must be >= 0");
    }
    if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw ConfigError("defense: k_fraction must be in (0, 1]");
    if (quant_levels < 2) throw ConfigError("defense: quant_levels must be >= 2");
  }
};

struct FLConfig {
  std::size_t users = 1;  // U
  std::size_t batch_size = 16;  // M
  std::size_t rounds = 1;  // R
  std::size_t local_epochs = 1;  // 1 = single gradient step
  double learning_rate = 1e-4;
  std::size_t victim_index = 0;
  DefenseConfig defense;
  std::uint64_t seed = 1;

  void validate() const {
    if (users < 1) throw ConfigError("fl: users must be >= 1");
    if (victim_index >= users) throw ConfigError("fl: victim_index must be < users");
    if (batch_size < 1) throw ConfigError("fl: batch_size must be >= 1");
    if (rounds < 1) throw ConfigError("fl: rounds must be >= 1");
    if (local_epochs < 1) throw ConfigError("fl: local_epochs must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("fl: learning_rate must be positive");
    }
    defense.validate();
  }
};

// --- user side ------------------------------------------------------------------

inline AdapterGradients local_step(const Network& net, const Batch& batch, const AdapterSet& adapters,
                                   double* loss = nullptr) {
  return adapter_gradients(net, batch, adapters, loss);
}

// Full-batch gradient descent for `epochs` steps; returns the mean of the step
// gradients, which equals (w_initial - w_final) / (lr * epochs).
inline AdapterGradients local_fedavg(const Network& net, const Batch& batch, const AdapterSet& adapters,
                                     std::size_t epochs, double lr) {
  if (epochs < 1) throw ConfigError("fedavg: epochs must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("fedavg: learning rate must be positive");
  AdapterSet w = adapters;
  std::vector<double> acc(adapters.parameter_count(), 0.0);
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto g = adapter_gradients(net, batch, w).flatten();
    std::vector<double> flat = w.flatten();
    for (std::size_t k = 0; k < acc.size(); ++k) {
      acc[k] += g[k];
      flat[k] -= lr * g[k];
    }
    w.assign(flat);
  }
  if (epochs > 1) {
    for (auto& v : acc) v /= static_cast<double>(epochs);
  }
  AdapterGradients out = AdapterGradients::zeros(net.config());
  out.assign(acc);
  return out;
}

inline AdapterGradients apply_defense(const AdapterGradients& g, const DefenseConfig& d, Rng& rng) {
  d.validate();
  std::vector<double> v = g.flatten();
  const std::size_t n = v.size();
  switch (d.kind) {
    case DefenseKind::none:
      return g;
    case DefenseKind::gaussian_noise: {
      if (d.noise_rel_sigma == 0.0 || n == 0) return g;
      double ss = 0.0;
      for (double x : v) ss += x * x;
      const double sd = d.noise_rel_sigma * std::sqrt(ss) / std::sqrt(static_cast<double>(n));
      for (auto& x : v) x += sd * rng.normal();
      break;
    }
    case DefenseKind::topk_prune: {
      if (d.k_fraction >= 1.0) return g;
      const auto keep = static_cast<std::size_t>(std::ceil(d.k_fraction * static_cast<double>(n)));
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return std::abs(v[a]) > std::abs(v[b]); });
      for (std::size_t k = keep; k < n; ++k) v[order[k]] = 0.0;
      break;
    }
    case DefenseKind::stochastic_quantize: {
      if (n == 0) return g;
      const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
      const double lo = *lo_it, hi = *hi_it;
      if (!(hi > lo)) return g;
      const double step = (hi - lo) / static_cast<double>(d.quant_levels - 1);
      for (auto& x : v) {
        const double pos = (x - lo) / step;
        double l = std::floor(pos);
        l = std::clamp(l, 0.0, static_cast<double>(d.quant_levels - 1));
        const double frac = pos - l;
        const double level = rng.uniform() < frac ? l + 1.0 : l;
        x = level >= static_cast<double>(d.quant_levels - 1) ? hi : lo + level * step;
      }
      break;
    }
  }
  AdapterGradients out = g;
  out.assign(v);
  return out;
}

inline AdapterGradients aggregate(const std::vector<AdapterGradients>& grads) {
  if (grads.empty()) throw ConfigError("aggregate: no gradients");
  for (const auto& g : grads) {
    if (!g.same_layout(grads[0])) detail::throw_shape("aggregate: gradient layouts differ");
  }
  std::vector<double> acc(grads[0].parameter_count(), 0.0);
  for (const auto& g : grads) {
    const auto f = g.flatten();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += f[k];
  }
  for (auto& v : acc) v /= static_cast<double>(grads.size());
  AdapterGradients out = grads[0];
  out.assign(acc);
  return out;
}

// --- experiment -------------------------------------------------------------------

struct PlanSpec {
  std::vector<std::size_t> positions;  // empty = every position
  std::vector<std::size_t> slots;      // one per position; empty = split adapters evenly
  AttackOptions attack;
  double delta = 0.0;  // fingerprint threshold; 0 = measured on public data
};

struct DataSpec {
  SynthKind kind = SynthKind::smooth;
  SynthKind public_kind = SynthKind::smooth;
  std::size_t public_count = 256;
  std::string public_dir;  // optional directory of .ppm images
  std::string victim_dir;  // optional; first M images become the victim batch
};

// Positions and slot counts after defaults are applied.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> resolve_plan_layout(
    const PlanSpec& ps, const ModelConfig& mc) {
  std::vector<std::size_t> pos = ps.positions;
  if (pos.empty()) {
    pos.resize(mc.num_patches());
    std::iota(pos.begin(), pos.end(), 0);
  }
  std::vector<std::size_t> slots = ps.slots;
  if (slots.empty()) {
    if (pos.size() > mc.num_adapters()) {
      throw ConfigError("plan: more positions than adapters; list slots explicitly");
    }
    slots.assign(pos.size(), mc.num_adapters() / pos.size());
  } else if (slots.size() == 1 && pos.size() > 1) {
    slots.assign(pos.size(), slots[0]);
  }
  return {pos, slots};
}

// Malicious server. attack() is the single observation channel.
class Server {
 public:
  Server(const ModelConfig& mc, const CraftConfig& cc) : mc_(mc), cc_(cc), net_(craft_backbone(cc, mc), mc) {}

  void prepare(const std::vector<Tensor>& public_images, const PlanSpec& ps, std::size_t rounds) {
    const auto stats = estimate_patch_stats(public_images, backbone().E, backbone().E_pos, mc_);
    const auto [pos, slots] = resolve_plan_layout(ps, mc_);
    plan_ = build_attack_plan(stats, mc_, pos, slots, rounds, cc_.row_design);
    calibrate_gains(plan_, net_, cc_, public_images);
    options_ = ps.attack;
    delta_ = ps.delta;
    if (plan_layout(cc_, mc_).fingerprint() && !(delta_ > 0.0)) {
      delta_ = measure_fingerprint_gap(net_, cc_, plan_, public_images).delta();
    }
  }

  AdapterSet adapters_for(std::size_t round) const {
    return craft_adapters(plan_, backbone().E_pos, cc_, mc_, round);
  }

  ReconstructionReport attack(const AdapterGradients& observed, std::size_t round, std::size_t batch_size) const {
    const AttackContext ctx{backbone(), mc_, cc_, plan_};
    return reconstruct(observed, ctx, round, batch_size, options_, delta_);
  }

  const Network& network() const { return net_; }
  const FrozenBackbone& backbone() const { return net_.backbone(); }
  const AttackPlan& plan() const { return plan_; }
  double delta() const { return delta_; }

 private:
  ModelConfig mc_;
  CraftConfig cc_;
  Network net_;
  AttackPlan plan_;
  AttackOptions options_;
  double delta_ = 0.0;
};

struct RoundRow {
  std::size_t round = 0;
  std::size_t position = 0;
  std::size_t bins_active = 0;
  std::size_t patches_valid = 0;
  double coverage = 0.0;  // valid merged patches at this position / M
  double mean_mse = 0.0;  // over ground-truth patches at this position
};

struct RoundSummary {
  std::size_t round = 0;
  double coverage = 0.0;
  double mean_mse = 0.0;
  double mean_ssim = 0.0;
  double recovery_rate = 0.0;
  std::size_t bins_active = 0;
  std::size_t patches_valid = 0;
  std::size_t oracle_isolated = 0;  // union over rounds so far
};

struct ExperimentResult {
  FrozenBackbone backbone;
  AttackPlan plan;
  Batch victim;
  double delta = 0.0;
  std::vector<ReconstructionReport> round_reports;  // raw per-round attack output
  ReconstructionReport merged;                      // after evaluation grouping
  std::vector<RoundRow> rows;
  std::vector<RoundSummary> rounds;
  ScoreReport score;
  std::vector<double> aggregate_norm;  // per round, L2 norm of the averaged upload
  std::vector<AdapterGradients> victim_uploads;  // what the server observed, per round
};

inline std::vector<Tensor> public_images(const DataSpec& ds, const ModelConfig& mc, std::uint64_t seed) {
  if (!ds.public_dir.empty()) return load_image_dir(ds.public_dir, mc);
  return synth_batch(ds.public_count, mc, Rng(seed).derive(0x5055424C4943).next_u64(), ds.public_kind).images;
}

inline Batch user_batch(const DataSpec& ds, const ModelConfig& mc, const FLConfig& fl, std::size_t user) {
  const std::uint64_t s = Rng(fl.seed).derive(0x55534552).derive(user).next_u64();
  if (user == fl.victim_index && !ds.victim_dir.empty()) {
    auto imgs = load_image_dir(ds.victim_dir, mc);
    if (imgs.size() < fl.batch_size) throw ConfigError("victim_dir holds fewer than M images");
    imgs.resize(fl.batch_size);
    Batch b;
    Rng rng(s);
    for (auto& img : imgs) {
      b.images.push_back(std::move(img));
      b.labels.push_back(static_cast<std::size_t>(rng.below(mc.num_classes)));
    }
    return b;
  }
  return synth_batch(fl.batch_size, mc, s, ds.kind);
}

inline ExperimentResult run_experiment(const ModelConfig& mc, const CraftConfig& cc, const FLConfig& fl,
                                       const PlanSpec& ps, const DataSpec& ds) {
  mc.validate();
  fl.validate();
  Server server(mc, cc);
  server.prepare(public_images(ds, mc, fl.seed), ps, fl.rounds);

  std::vector<Batch> batches(fl.users);
  for (std::size_t u = 0; u < fl.users; ++u) batches[u] = user_batch(ds, mc, fl, u);

  ExperimentResult res;
  res.victim = batches[fl.victim_index];
  res.delta = server.delta();
  const Rng defense_root = Rng(fl.seed).derive(0x444546);
  std::vector<std::size_t> rounds_so_far;
  for (std::size_t round = 0; round < fl.rounds; ++round) {
    const AdapterSet adapters = server.adapters_for(round);
    std::vector<AdapterGradients> uploads(fl.users);
    parallel_for(fl.users, [&](std::size_t u) {
      AdapterGradients g = fl.local_epochs == 1
                               ? local_step(server.network(), batches[u], adapters)
                               : local_fedavg(server.network(), batches[u], adapters, fl.local_epochs,
                                              fl.learning_rate);
      Rng rng = defense_root.derive(round).derive(u);
      uploads[u] = apply_defense(g, fl.defense, rng);
    });
    const auto avg = aggregate(uploads);
    double ss = 0.0;
    for (double v : avg.flatten()) ss += v * v;
    res.aggregate_norm.push_back(std::sqrt(ss));

    res.victim_uploads.push_back(uploads[fl.victim_index]);
    res.round_reports.push_back(server.attack(res.victim_uploads.back(), round, fl.batch_size));
    rounds_so_far.push_back(round);

    // Evaluation only from here on.
    ReconstructionReport merged = merge_rounds(res.round_reports);
    if (merged.group_mode == GroupMode::oracle) apply_oracle_labels(merged, res.victim, mc);
    const auto matches = match_patches(merged, res.victim, mc);
    const auto sr = score(merged, res.victim, mc);
    const auto oracle = isolated_bin_oracle(res.victim, server.backbone(), server.plan(), mc, rounds_so_far);
    RoundSummary sum;
    sum.round = round;
    sum.coverage = merged.coverage;
    sum.mean_mse = sr.mean_mse;
    sum.mean_ssim = sr.mean_ssim;
    sum.recovery_rate = sr.recovery_rate;
    sum.oracle_isolated = oracle.count();
    for (std::size_t t = 0; t < mc.num_patches(); ++t) {
      RoundRow row;
      row.round = round;
      row.position = t;
      row.bins_active = res.round_reports.back().active_per_position[t];
      row.patches_valid = merged.valid_per_position[t];
      row.coverage = static_cast<double>(row.patches_valid) / static_cast<double>(fl.batch_size);
      double acc = 0.0;
      for (std::size_t m = 0; m < res.victim.images.size(); ++m) acc += matches[m][t].mse;
      row.mean_mse = acc / static_cast<double>(res.victim.images.size());
      sum.bins_active += row.bins_active;
      sum.patches_valid += row.patches_valid;
      res.rows.push_back(row);
    }
    res.rounds.push_back(sum);
    if (round + 1 == fl.rounds) {
      res.merged = std::move(merged);
      res.score = sr;
    }
  }
  res.backbone = server.backbone();
  res.plan = server.plan();
  return res;
}

}  // namespace peftleak

#endif  // PEFTLEAK_FLSIM_HPP
