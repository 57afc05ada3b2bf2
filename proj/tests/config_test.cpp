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

#include "peftleak/config.hpp"

#include <gtest/gtest.h>

namespace peftleak {
namespace {

const char* kDesk = R"(
; comment line
[model]
D = 96
L = 4
activation = relu
[craft]
gamma = 1e4
fingerprint = true
[fl]
users = 4
seed = 9
[plan]
positions = 0, 2
slots = 6, 6
[defense]
kind = topk_prune
k_fraction = 0.5
[data]
kind = uniform
)";

TEST(Config, ParsesSectionsAndKeepsDefaults) {
  const auto cfg = parse_config_string(kDesk);
  EXPECT_EQ(cfg.model.D, 96u);
  EXPECT_EQ(cfg.model.num_encoders, 6u);
  EXPECT_EQ(cfg.craft.gamma, 1e4);
  EXPECT_TRUE(cfg.craft.fingerprint_enabled);
  EXPECT_EQ(cfg.fl.users, 4u);
  EXPECT_EQ(cfg.fl.seed, 9u);
  EXPECT_EQ(cfg.plan.positions, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(cfg.plan.slots, (std::vector<std::size_t>{6, 6}));
  EXPECT_EQ(cfg.fl.defense.kind, DefenseKind::topk_prune);
  EXPECT_EQ(cfg.fl.defense.k_fraction, 0.5);
  EXPECT_EQ(cfg.data.kind, SynthKind::uniform);
  EXPECT_EQ(cfg.data.public_count, 256u);
}

TEST(Config, RoundTripsThroughIni) {
  auto cfg = parse_config_string(kDesk);
  cfg.craft.epsilon_up = 1.0 / 3.0 * 1e-6;
  cfg.plan.delta = 0.123456789012345678;
  const std::string ini = to_ini(cfg);
  const auto back = parse_config_string(ini);
  EXPECT_EQ(to_ini(back), ini);
  EXPECT_EQ(back.craft.epsilon_up, cfg.craft.epsilon_up);
  EXPECT_EQ(back.plan.delta, cfg.plan.delta);
  EXPECT_EQ(config_hash(back), config_hash(cfg));
  EXPECT_EQ(config_hash(cfg).size(), 16u);
  auto other = cfg;
  other.fl.seed += 1;
  EXPECT_NE(config_hash(other), config_hash(cfg));
  // "all" and "auto" survive the round trip as empty lists.
  const auto defaults = parse_config_string(to_ini(ExperimentConfig{}));
  EXPECT_TRUE(defaults.plan.positions.empty());
  EXPECT_TRUE(defaults.plan.slots.empty());
}

TEST(Config, RejectsUnknownOrMalformedInput) {
  EXPECT_THROW(parse_config_string("[model]\nDD = 3\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[modle]\nD = 3\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[model]\nD = -3\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[model]\nD = 9x\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[craft]\nfingerprint = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[model]\nactivation = tanh\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[plan]\npositions = 0,,1\n"), ConfigError);
  EXPECT_THROW(parse_config_string("D = 96\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[model\nD = 96\n"), ConfigError);
  EXPECT_THROW(parse_config_file("/nonexistent/peftleak.ini"), ConfigError);
}

TEST(Config, ValidatesBeforeUse) {
  EXPECT_THROW(parse_config_string("[model]\nD = 90\nL = 4\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[fl]\nusers = 2\nvictim_index = 2\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[plan]\npositions = 7\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[craft]\nsigma_pos = 0\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[defense]\nkind = topk_prune\nk_fraction = 0\n"), ConfigError);
  EXPECT_THROW(parse_config_string("[model]\nr = 1\n"), ConfigError);
}

}  // namespace
}  // namespace peftleak
