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

#include "peftleak/attack.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "desk.hpp"
#include "peftleak/metrics.hpp"

namespace peftleak {
namespace {

using testing::DeskServer;

std::vector<double> random_vec(std::size_t n, Rng& rng, double amp = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-amp, amp);
  return v;
}

TEST(ActiveBins, ZeroGradientsAndInfiniteToleranceGiveNothing) {
  DeskServer ds(testing::desk_model(), testing::desk_craft(), testing::all_positions(3));
  const auto zero = AdapterGradients::zeros(ds.mc);
  EXPECT_TRUE(detect_active_bins(zero, ds.plan(), 0, 0.0).empty());
  const auto batch = synth_batch(16, ds.mc, 1, SynthKind::smooth);
  const auto g = adapter_gradients(ds.net(), batch, ds.server.adapters_for(0));
  EXPECT_FALSE(detect_active_bins(g, ds.plan(), 0, 0.0).empty());
  EXPECT_TRUE(detect_active_bins(g, ds.plan(), 0, std::numeric_limits<double>::infinity()).empty());
}

TEST(ActiveBins, SinglePatchFlagsItsOwnBin) {
  DeskServer ds(testing::desk_model(), testing::desk_craft(), testing::all_positions(3));
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto design = testing::exact_bin_batch(ds, 1, 40 + seed);
    ASSERT_TRUE(design.feasible);
    const auto g = adapter_gradients(ds.net(), design.batch, ds.server.adapters_for(0));
    const double tol = default_bin_tolerance(g, ds.plan(), 1e-9);
    const auto bins = detect_active_bins(g, ds.plan(), 0, tol);
    ASSERT_EQ(bins.size(), ds.plan().positions.size());
    for (const auto& b : bins) {
      EXPECT_EQ(b.j, design.bins[0][ds.plan().index_of_position(b.position)]);
      EXPECT_FALSE(b.top);
    }
  }
}

TEST(RecoverEmbedding, InvertsScaledGradients) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto y = random_vec(96, rng, 30.0);
    const double g = std::ldexp(1.0, -20 - trial);
    std::vector<double> dW(96);
    for (std::size_t i = 0; i < 96; ++i) dW[i] = g * y[i];
    const std::vector<double> zero(96, 0.0);
    const Tensor exact = recover_embedding(dW, g, zero, 0.0);
    for (std::size_t i = 0; i < 96; ++i) EXPECT_EQ(exact[i], y[i]);

    const double g1 = rng.uniform(1e-9, 1e-6), g2 = rng.uniform(1e-9, 1e-6);
    std::vector<double> a(96), b(96);
    for (std::size_t i = 0; i < 96; ++i) {
      a[i] = (g1 + g2) * y[i];
      b[i] = g2 * y[i];
    }
    const Tensor pair = recover_embedding(a, g1 + g2, b, g2);
    for (std::size_t i = 0; i < 96; ++i) EXPECT_NEAR(pair[i], y[i], 1e-9 * std::abs(y[i]) + 1e-12);
  }
  const std::vector<double> v(4, 1.0);
  EXPECT_THROW(recover_embedding(v, 0.5, v, 0.5), EmptyBinError);
}

TEST(RecoverEmbedding, PairOrderDoesNotMatter) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_vec(32, rng), b = random_vec(32, rng);
    const double da = rng.uniform(-1, 1), db = rng.uniform(-1, 1);
    const Tensor y1 = recover_embedding(a, da, b, db);
    const Tensor y2 = recover_embedding(b, db, a, da);
    EXPECT_EQ(y1, y2);
  }
}

TEST(RecoverPatch, PositionEncodingOnlyGivesZero) {
  const auto mc = testing::desk_model();
  const auto cc = testing::desk_craft();
  const auto emb = craft_embedding_matrix(cc, mc);
  const Tensor E_pos = craft_position_encodings(cc, mc);
  const auto x = recover_patch(E_pos.row(2), emb.E_pinv, E_pos.row(2));
  for (double v : x) EXPECT_EQ(v, 0.0);
}

TEST(RecoverPatch, ExactEmbeddingGivesExactPixels) {
  const auto mc = testing::desk_model();
  const auto cc = testing::desk_craft();
  const auto emb = craft_embedding_matrix(cc, mc);
  const Tensor E_pos = craft_position_encodings(cc, mc);
  Rng rng(12);
  const auto x = random_vec(mc.patch_dim(), rng);
  std::vector<double> y(mc.D);
  for (std::size_t i = 0; i < mc.D; ++i) {
    double acc = E_pos(3, i);
    for (std::size_t k = 0; k < x.size(); ++k) acc += emb.E(i, k) * x[k];
    y[i] = acc;
  }
  const auto rec = recover_patch(y, emb.E_pinv, E_pos.row(3));
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(rec[k], x[k], 1e-12);
}

RecoveredPatch in_bin_patch() {
  RecoveredPatch p;
  p.pixels.assign(48, 0.2);
  p.lower = -1.0;
  p.upper = 1.0;
  p.stat_check = 0.0;
  p.residual = 0.0;
  return p;
}

TEST(Validate, PixelRangeRule) {
  RecoveredPatch p = in_bin_patch();
  EXPECT_TRUE(validate(p));
  p.pixels[7] = 1.05;
  EXPECT_TRUE(validate(p));  // inside [-1.1, 1.1]
  AttackOptions strict;
  strict.pixel_tau = 0.01;
  EXPECT_FALSE(validate(p, strict));
  p.pixels[7] = 1.15;
  EXPECT_FALSE(validate(p));
  p.pixels[7] = -1.1000001;
  EXPECT_FALSE(validate(p));
  p.pixels[7] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(validate(p));
}

TEST(Validate, StatisticAndResidualRules) {
  RecoveredPatch p = in_bin_patch();
  p.stat_check = 1.0;
  EXPECT_FALSE(validate(p));
  p.stat_check = -1.0;
  EXPECT_FALSE(validate(p));
  p.stat_check = 0.5;
  p.residual = 1e-3;
  EXPECT_FALSE(validate(p));
  AttackOptions no_residual;
  no_residual.consistency_check = false;
  EXPECT_TRUE(validate(p, no_residual));
}

TEST(Reconstruct, ExactBinsRecoverEveryPatch) {
  DeskServer ds(testing::desk_model(), testing::desk_craft(), testing::all_positions(3));
  const auto design = testing::exact_bin_batch(ds, 16, 9);
  ASSERT_TRUE(design.feasible);
  auto rep = ds.attack(design.batch);
  apply_oracle_labels(rep, design.batch, ds.mc);
  EXPECT_DOUBLE_EQ(rep.coverage, 1.0);
  const auto matches = match_patches(rep, design.batch, ds.mc);
  for (std::size_t m = 0; m < 16; ++m) {
    const Tensor gt = patchify(design.batch.images[m], ds.mc.P);
    for (std::size_t t = 0; t < ds.mc.num_patches(); ++t) {
      ASSERT_TRUE(matches[m][t].index.has_value());
      const auto& px = rep.patches[*matches[m][t].index].pixels;
      double mae = 0.0;
      for (std::size_t k = 0; k < px.size(); ++k) mae += std::abs(px[k] - gt(t, k));
      EXPECT_LT(mae / static_cast<double>(px.size()), 0.02);
    }
  }
}

TEST(Reconstruct, CollisionsAreRejected) {
  DeskServer ds(testing::desk_model(), testing::desk_craft(), testing::all_positions(3));
  std::size_t collisions = 0, rejected = 0, isolated = 0, accepted = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto batch = synth_batch(16, ds.mc, 500 + seed, SynthKind::smooth);
    const auto s = batch_statistics(batch.images, ds.bb().E, ds.bb().E_pos, ds.mc);
    const auto rep = ds.attack(batch);
    for (const auto& p : rep.patches) {
      const auto& c = ds.plan().thresholds[0][ds.plan().index_of_position(p.position)];
      std::size_t members = 0;
      for (std::size_t m = 0; m < batch.size(); ++m) {
        const double v = s[m][p.position];
        if (v > c[p.bin] && (p.bin + 1 == c.size() || v < c[p.bin + 1])) ++members;
      }
      if (members >= 2) {
        ++collisions;
        rejected += p.valid ? 0 : 1;
      } else if (members == 1) {
        ++isolated;
        accepted += p.valid ? 1 : 0;
      }
    }
  }
  ASSERT_GT(collisions, 20u);
  EXPECT_GE(static_cast<double>(rejected) / static_cast<double>(collisions), 0.9);
  EXPECT_GE(static_cast<double>(accepted) / static_cast<double>(isolated), 0.95);
}

TEST(Reconstruct, ValidPatchesNeverExceedIsolatedBins) {
  DeskServer ds(testing::desk_model(), testing::desk_craft(), testing::all_positions(3));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto batch = synth_batch(16, ds.mc, 900 + seed, SynthKind::smooth);
    auto rep = ds.attack(batch);
    apply_oracle_labels(rep, batch, ds.mc);
    const auto oracle = isolated_bin_oracle(batch, ds.bb(), ds.plan(), ds.mc, {0});
    for (std::size_t t = 0; t < ds.mc.num_patches(); ++t) {
      EXPECT_LE(rep.valid_per_position[t], oracle.per_position[t] + 1);
      EXPECT_GE(rep.valid_per_position[t] + 1, oracle.per_position[t]);
    }
    EXPECT_DOUBLE_EQ(rep.coverage,
                     static_cast<double>(std::count_if(rep.patches.begin(), rep.patches.end(),
                                                       [](const auto& p) { return p.valid; })) /
                         64.0);
  }
}

// Canonical content of a report for order-insensitive comparison.
std::multiset<std::tuple<std::size_t, std::size_t, std::size_t, std::vector<double>, bool>> content(
    const ReconstructionReport& rep) {
  std::multiset<std::tuple<std::size_t, std::size_t, std::size_t, std::vector<double>, bool>> out;
  for (const auto& p : rep.patches) out.insert({p.round, p.position, p.bin, p.pixels, p.valid});
  return out;
}

struct RoundReports {
  DeskServer ds{testing::desk_model(), testing::desk_craft(), testing::all_positions(3), 3};
  Batch batch = synth_batch(16, testing::desk_model(), 77, SynthKind::smooth);
  std::vector<ReconstructionReport> reps;
  RoundReports() {
    for (std::size_t r = 0; r < 3; ++r) reps.push_back(ds.attack(batch, r));
  }
};

TEST(MergeRounds, IdempotentCommutativeAssociative) {
  const RoundReports rr;
  const auto& [a, b, c] = std::tie(rr.reps[0], rr.reps[1], rr.reps[2]);
  const auto self = merge_rounds({a, a});
  EXPECT_EQ(content(self), content(merge_rounds({a})));
  EXPECT_DOUBLE_EQ(self.coverage, a.coverage);

  const auto ab = merge_rounds({a, b});
  const auto ba = merge_rounds({b, a});
  EXPECT_EQ(content(ab), content(ba));
  EXPECT_DOUBLE_EQ(ab.coverage, ba.coverage);

  const auto left = merge_rounds({merge_rounds({a, b}), c});
  const auto right = merge_rounds({a, merge_rounds({b, c})});
  EXPECT_EQ(content(left), content(right));
  EXPECT_DOUBLE_EQ(left.coverage, right.coverage);

  // With evaluation labels duplicates collapse; order still does not matter.
  auto abl = merge_rounds({a, b, c});
  auto cbl = merge_rounds({c, b, a});
  apply_oracle_labels(abl, rr.batch, rr.ds.mc);
  apply_oracle_labels(cbl, rr.batch, rr.ds.mc);
  EXPECT_EQ(content(abl), content(cbl));
  EXPECT_GE(abl.coverage, a.coverage - 1e-12);
}

RecoveredPatch labelled(std::size_t image, std::size_t position, double edge) {
  RecoveredPatch p = in_bin_patch();
  p.position = position;
  p.valid = true;
  p.oracle_image = image;
  p.stat_check = edge - 1.0;
  p.pixels[0] = static_cast<double>(image) * 0.1 + static_cast<double>(position) * 0.01 + edge;
  return p;
}

ReconstructionReport labelled_report(std::vector<RecoveredPatch> patches, std::size_t round) {
  ReconstructionReport rep;
  rep.num_positions = 4;
  rep.batch_size = 2;
  rep.rounds = {round};
  for (auto& p : patches) p.round = round;
  rep.patches = std::move(patches);
  finalize_report(rep);
  return rep;
}

TEST(MergeRounds, DisjointCoverageAdds) {
  const auto a = labelled_report({labelled(0, 0, 0.1), labelled(0, 1, 0.1)}, 0);
  const auto b = labelled_report({labelled(0, 2, 0.1), labelled(1, 3, 0.1)}, 1);
  EXPECT_DOUBLE_EQ(a.coverage, 2.0 / 8.0);
  EXPECT_DOUBLE_EQ(b.coverage, 2.0 / 8.0);
  EXPECT_DOUBLE_EQ(merge_rounds({a, b}).coverage, 4.0 / 8.0);
}

TEST(MergeRounds, DuplicatesKeepTheMostCentralStatistic) {
  const auto a = labelled_report({labelled(0, 0, 0.1)}, 0);
  const auto b = labelled_report({labelled(0, 0, 0.9)}, 1);
  for (const auto& merged : {merge_rounds({a, b}), merge_rounds({b, a})}) {
    EXPECT_DOUBLE_EQ(merged.coverage, 1.0 / 8.0);
    ASSERT_EQ(merged.patches.size(), 1u);
    EXPECT_EQ(merged.patches[0].round, 1u);  // stat -0.1 sits farther inside (-1, 1)
  }
}

TEST(Grouping, OneImageOneGroup) {
  std::vector<RecoveredPatch> ps = {labelled(0, 0, 0.1), labelled(0, 1, 0.2), labelled(0, 3, 0.3)};
  EXPECT_EQ(group_patches(ps, GroupMode::oracle, 0.0).size(), 1u);
  for (auto& p : ps) p.fingerprint = {1.0, 2.0};
  EXPECT_EQ(group_patches(ps, GroupMode::fingerprint, 0.5).size(), 1u);
}

TEST(Grouping, FingerprintsRecoverTheImages) {
  auto cc = testing::desk_craft();
  cc.fingerprint_enabled = true;
  DeskServer ds(testing::desk_model(), cc, testing::all_positions(3));
  EXPECT_GT(ds.server.delta(), 0.0);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto design = testing::exact_bin_batch(ds, 8, 30 + seed);
    ASSERT_TRUE(design.feasible);
    const auto rep = ds.attack(design.batch);
    EXPECT_EQ(rep.group_mode, GroupMode::fingerprint);
    EXPECT_EQ(rep.groups.size(), 8u);
    EXPECT_DOUBLE_EQ(rep.coverage, 1.0);
    // Every group holds the four patches of one image.
    auto labelled_copy = rep;
    apply_oracle_labels(labelled_copy, design.batch, ds.mc);
    for (const auto& g : rep.groups) {
      EXPECT_EQ(g.size(), 4u);
      std::set<std::size_t> sources;
      for (std::size_t k : g) {
        const auto& p = rep.patches[k];
        double best = std::numeric_limits<double>::infinity();
        std::size_t src = 0;
        for (std::size_t m = 0; m < 8; ++m) {
          const double e = patch_mse(patchify(design.batch.images[m], ds.mc.P).row(p.position), p.pixels);
          if (e < best) {
            best = e;
            src = m;
          }
        }
        sources.insert(src);
      }
      EXPECT_EQ(sources.size(), 1u);
    }
  }
}

TEST(AssembleImages, GrayWhereMissing) {
  const auto mc = testing::desk_model();
  auto rep = labelled_report({labelled(0, 1, 0.1)}, 0);
  rep.patches[0].pixels.assign(mc.patch_dim(), 2.0);
  const auto imgs = assemble_images(rep, mc);
  ASSERT_EQ(imgs.size(), 1u);
  const Tensor patches = patchify(imgs[0].image, mc.P);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(imgs[0].recovered[t], t == 1);
    for (double v : patches.row(t)) EXPECT_EQ(v, t == 1 ? 1.0 : 0.0);
  }
}

}  // namespace
}  // namespace peftleak
