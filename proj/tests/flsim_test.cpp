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

#include "peftleak/flsim.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "desk.hpp"

namespace peftleak {
namespace {

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.D = 16;
  mc.L = 2;
  mc.num_encoders = 2;
  mc.P = 2;
  mc.C = 1;
  mc.H = 4;
  mc.W = 4;
  mc.r = 4;
  mc.num_classes = 3;
  return mc;
}

struct TinyWorld {
  ModelConfig mc = tiny_config();
  Rng rng{17};
  Network net{random_backbone(mc, rng), mc};
  AdapterSet adapters = random_adapters(mc, rng, 0.2);
  Batch batch = synth_batch(4, mc, 3, SynthKind::uniform);
};

double rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

AdapterGradients filled(const ModelConfig& mc, const std::vector<double>& v) {
  AdapterGradients g = AdapterGradients::zeros(mc);
  g.assign(v);
  return g;
}

TEST(LocalTraining, SingleEpochEqualsLocalStep) {
  TinyWorld w;
  const auto step = local_step(w.net, w.batch, w.adapters).flatten();
  const auto avg = local_fedavg(w.net, w.batch, w.adapters, 1, 1e-4).flatten();
  EXPECT_EQ(step, avg);
  EXPECT_EQ(step, backward_adapters(w.net.forward(w.batch, w.adapters).cache, w.net, w.adapters).flatten());
}

TEST(LocalTraining, FiveEpochProxyStaysNearTheGradient) {
  TinyWorld w;
  const auto step = local_step(w.net, w.batch, w.adapters).flatten();
  const auto proxy = local_fedavg(w.net, w.batch, w.adapters, 5, 1e-4).flatten();
  EXPECT_LT(rel_l2(proxy, step), 0.10);
  EXPECT_GT(rel_l2(proxy, step), 0.0);
  // The proxy equals the parameter displacement over lr * epochs.
  AdapterSet cur = w.adapters;
  for (int e = 0; e < 5; ++e) {
    auto f = cur.flatten();
    const auto g = local_step(w.net, w.batch, cur).flatten();
    for (std::size_t k = 0; k < f.size(); ++k) f[k] -= 1e-4 * g[k];
    cur.assign(f);
  }
  const auto w0 = w.adapters.flatten(), wf = cur.flatten();
  std::vector<double> disp(w0.size());
  for (std::size_t k = 0; k < w0.size(); ++k) disp[k] = (w0[k] - wf[k]) / (1e-4 * 5);
  EXPECT_LT(rel_l2(proxy, disp), 1e-6);
}

TEST(LocalTraining, RejectsBadLearningRates) {
  TinyWorld w;
  EXPECT_THROW(local_fedavg(w.net, w.batch, w.adapters, 5, 0.0), ConfigError);
  EXPECT_THROW(local_fedavg(w.net, w.batch, w.adapters, 5, -1.0), ConfigError);
  EXPECT_THROW(local_fedavg(w.net, w.batch, w.adapters, 0, 1e-4), ConfigError);
  FLConfig fl;
  fl.learning_rate = 0.0;
  EXPECT_THROW(fl.validate(), ConfigError);
}

TEST(LocalTraining, IdenticalDataGivesIdenticalUploads) {
  TinyWorld w;
  EXPECT_EQ(local_step(w.net, w.batch, w.adapters).flatten(),
            local_step(w.net, w.batch, w.adapters).flatten());
}

TEST(Defenses, NeutralSettingsAreIdentity) {
  TinyWorld w;
  const auto g = local_step(w.net, w.batch, w.adapters);
  Rng rng(1);
  DefenseConfig none;
  EXPECT_EQ(apply_defense(g, none, rng).flatten(), g.flatten());
  DefenseConfig noise;
  noise.kind = DefenseKind::gaussian_noise;
  noise.noise_rel_sigma = 0.0;
  EXPECT_EQ(apply_defense(g, noise, rng).flatten(), g.flatten());
  DefenseConfig topk;
  topk.kind = DefenseKind::topk_prune;
  topk.k_fraction = 1.0;
  EXPECT_EQ(apply_defense(g, topk, rng).flatten(), g.flatten());
}

TEST(Defenses, GaussianNoiseScale) {
  const ModelConfig mc = tiny_config();
  const std::size_t n = AdapterGradients::zeros(mc).parameter_count();
  std::vector<double> v(n);
  Rng src(2);
  for (auto& x : v) x = src.uniform(-1.0, 1.0);
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const auto g = filled(mc, v);
  DefenseConfig d;
  d.kind = DefenseKind::gaussian_noise;
  d.noise_rel_sigma = 0.5;
  Rng rng(3);
  double sq = 0.0;
  std::size_t count = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto out = apply_defense(g, d, rng).flatten();
    for (std::size_t k = 0; k < n; ++k) {
      sq += (out[k] - v[k]) * (out[k] - v[k]);
      ++count;
    }
  }
  const double expected_sd = 0.5 * std::sqrt(ss / static_cast<double>(n));
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(count)), expected_sd, 0.03 * expected_sd);
}

TEST(Defenses, TopKKeepsLargestWithIndexTies) {
  const ModelConfig mc = tiny_config();
  const std::size_t n = AdapterGradients::zeros(mc).parameter_count();
  std::vector<double> v(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) v[k] = static_cast<double>(k % 7) * (k % 2 ? -1.0 : 1.0);
  DefenseConfig d;
  d.kind = DefenseKind::topk_prune;
  d.k_fraction = 0.1;
  Rng rng(4);
  const auto out = apply_defense(filled(mc, v), d, rng).flatten();
  const std::size_t keep = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n; ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(v[a]) > std::abs(v[b]);
  });
  std::vector<double> expected(n, 0.0);
  for (std::size_t k = 0; k < keep; ++k) expected[order[k]] = v[order[k]];
  EXPECT_EQ(out, expected);
  const auto kept = std::count_if(out.begin(), out.end(), [](double x) { return x != 0.0; });
  EXPECT_EQ(static_cast<std::size_t>(kept), keep);
}

TEST(Defenses, StochasticQuantizationIsUnbiased) {
  const ModelConfig mc = tiny_config();
  const std::size_t n = AdapterGradients::zeros(mc).parameter_count();
  std::vector<double> v(n);
  Rng src(5);
  for (auto& x : v) x = src.uniform(1.0, 2.0);
  const auto g = filled(mc, v);
  DefenseConfig d;
  d.kind = DefenseKind::stochastic_quantize;
  d.quant_levels = 16;
  Rng rng(6);
  std::vector<double> mean(n, 0.0);
  const int trials = 10000;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double step = (*hi - *lo) / 15.0;
  for (int t = 0; t < trials; ++t) {
    const auto q = apply_defense(g, d, rng).flatten();
    for (std::size_t k = 0; k < n; ++k) {
      const double level = (q[k] - *lo) / step;
      ASSERT_NEAR(level, std::round(level), 1e-9);
      mean[k] += q[k] / trials;
    }
  }
  for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(mean[k], v[k], 0.01 * std::abs(v[k]));
}

TEST(Aggregate, MeanOfUsersEqualsPooledGradient) {
  TinyWorld w;
  const Batch b1 = synth_batch(3, w.mc, 10, SynthKind::uniform);
  const Batch b2 = synth_batch(3, w.mc, 11, SynthKind::smooth);
  Batch pooled = b1;
  pooled.images.insert(pooled.images.end(), b2.images.begin(), b2.images.end());
  pooled.labels.insert(pooled.labels.end(), b2.labels.begin(), b2.labels.end());
  const auto avg = aggregate({local_step(w.net, b1, w.adapters), local_step(w.net, b2, w.adapters)}).flatten();
  const auto ref = local_step(w.net, pooled, w.adapters).flatten();
  for (std::size_t k = 0; k < avg.size(); ++k) EXPECT_NEAR(avg[k], ref[k], 1e-12);
}

TEST(Aggregate, IdentitiesAndErrors) {
  TinyWorld w;
  const auto g = local_step(w.net, w.batch, w.adapters);
  EXPECT_EQ(aggregate({g}).flatten(), g.flatten());
  EXPECT_EQ(aggregate({g, g}).flatten(), g.flatten());
  EXPECT_THROW(aggregate({}), ConfigError);
  ModelConfig other = w.mc;
  other.r = 2;
  EXPECT_THROW(aggregate({g, AdapterGradients::zeros(other)}), ShapeError);
}

TEST(FLConfig, VictimMustExist) {
  FLConfig fl;
  fl.users = 3;
  fl.victim_index = 3;
  EXPECT_THROW(fl.validate(), ConfigError);
  fl.victim_index = 2;
  EXPECT_NO_THROW(fl.validate());
  fl.users = 0;
  EXPECT_THROW(fl.validate(), ConfigError);
}

TEST(Experiment, CoverageMatchesTheIsolatedBinOracle) {
  FLConfig fl;
  fl.users = 3;
  fl.victim_index = 1;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    fl.seed = seed;
    const auto res = run_experiment(testing::desk_model(), testing::desk_craft(), fl,
                                    testing::all_positions(3), DataSpec{});
    ASSERT_EQ(res.rounds.size(), 1u);
    const auto valid = static_cast<long>(res.rounds[0].patches_valid);
    EXPECT_LE(std::abs(valid - static_cast<long>(res.rounds[0].oracle_isolated)), 1);
    EXPECT_GT(valid, 10);
    EXPECT_EQ(res.victim_uploads.size(), 1u);
    EXPECT_EQ(res.rows.size(), 4u);
  }
}

TEST(Experiment, VictimIsAttackedBeforeAggregation) {
  FLConfig fl;
  fl.users = 4;
  const auto res = run_experiment(testing::desk_model(), testing::desk_craft(), fl,
                                  testing::all_positions(3), DataSpec{});
  const Network net(res.backbone, testing::desk_model());
  const AdapterSet ad = craft_adapters(res.plan, res.backbone.E_pos, testing::desk_craft(),
                                       testing::desk_model(), 0);
  EXPECT_EQ(res.victim_uploads[0].flatten(), local_step(net, res.victim, ad).flatten());
}

TEST(Experiment, SameSeedSameResult) {
  FLConfig fl;
  fl.users = 2;
  fl.rounds = 2;
  fl.defense.kind = DefenseKind::gaussian_noise;
  fl.defense.noise_rel_sigma = 0.01;
  const auto a = run_experiment(testing::desk_model(), testing::desk_craft(), fl,
                                testing::all_positions(3), DataSpec{});
  const auto b = run_experiment(testing::desk_model(), testing::desk_craft(), fl,
                                testing::all_positions(3), DataSpec{});
  ASSERT_EQ(a.merged.patches.size(), b.merged.patches.size());
  for (std::size_t k = 0; k < a.merged.patches.size(); ++k) {
    EXPECT_EQ(a.merged.patches[k].pixels, b.merged.patches[k].pixels);
  }
  for (std::size_t r = 0; r < 2; ++r) EXPECT_EQ(a.victim_uploads[r].flatten(), b.victim_uploads[r].flatten());
  EXPECT_EQ(a.score.patch_mse, b.score.patch_mse);
}

}  // namespace
}  // namespace peftleak
