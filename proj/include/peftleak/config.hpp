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
#ifndef PEFTLEAK_CONFIG_HPP
#define PEFTLEAK_CONFIG_HPP

// Experiment configuration files: INI sections [model] [craft] [fl] [plan]
// [defense] [data]. Every key is optional; missing keys keep their defaults,
// unknown sections or keys are errors. to_ini() writes the fully resolved
// configuration in a form parse_config() reads back unchanged.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "peftleak/flsim.hpp"

namespace peftleak {

struct ExperimentConfig {
  ModelConfig model;
  CraftConfig craft;
  FLConfig fl;
  PlanSpec plan;
  DataSpec data;

  void validate() const {
    model.validate();
    craft.validate();
    fl.validate();
    if (!(plan.attack.pixel_tau >= 0.0)) throw ConfigError("plan: pixel_tau must be >= 0");
    if (!(plan.attack.residual_tol > 0.0)) throw ConfigError("plan: residual_tol must be positive");
    if (!(plan.attack.bin_tol_rel >= 0.0)) throw ConfigError("plan: bin_tol_rel must be >= 0");
    if (!(plan.delta >= 0.0)) throw ConfigError("plan: delta must be >= 0");
    if (data.public_dir.empty() && data.public_count < 2) {
      throw ConfigError("data: public_count must be >= 2");
    }
    for (std::size_t p : plan.positions) {
      if (p >= model.num_patches()) throw ConfigError("plan: position out of range");
    }
    if (!plan.slots.empty() && plan.slots.size() != 1 && !plan.positions.empty() &&
        plan.slots.size() != plan.positions.size()) {
      throw ConfigError("plan: slots must list one count or one per position");
    }
    plan_layout(craft, model);
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end || !std::isfinite(v)) {
    throw ConfigError("config: " + key + " expects a number, got '" + s + "'");
  }
  return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) {
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + s + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("config: " + key + " expects a boolean, got '" + s + "'");
}

// `empty_word` ("all" or "auto") selects the default, an empty list.
inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& s,
                                           const char* empty_word) {
  std::vector<std::size_t> out;
  if (s.empty() || s == empty_word) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError("config: empty entry in " + key);
    out.push_back(static_cast<std::size_t>(parse_uint(key, item.substr(b, e - b + 1))));
  }
  return out;
}

inline std::string join_list(const std::vector<std::size_t>& v, const char* empty) {
  if (v.empty()) return empty;
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <typename Enum>
Enum parse_enum(const std::string& key, const std::string& s,
                std::initializer_list<std::pair<const char*, Enum>> options) {
  std::string names;
  for (const auto& [name, value] : options) {
    if (s == name) return value;
    names += names.empty() ? name : std::string("|") + name;
  }
  throw ConfigError("config: " + key + " must be one of " + names + ", got '" + s + "'");
}

// Setter/getter pair per addressable key.
struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

using FieldTable = std::vector<std::pair<std::string, std::map<std::string, Field>>>;

inline const FieldTable& field_table() {
  static const FieldTable table = [] {
    FieldTable t;
#define PL_UINT(path, name)                                                                         \
  {name, Field{[](ExperimentConfig& c, const std::string& v) {                                     \
                 c.path = static_cast<std::decay_t<decltype(c.path)>>(parse_uint(name, v));        \
               },                                                                                   \
               [](const ExperimentConfig& c) { return std::to_string(c.path); }}}
#define PL_DOUBLE(path, name)                                                                       \
  {name, Field{[](ExperimentConfig& c, const std::string& v) { c.path = parse_double(name, v); },   \
               [](const ExperimentConfig& c) { return fmt_double(c.path); }}}
#define PL_BOOL(path, name)                                                                         \
  {name, Field{[](ExperimentConfig& c, const std::string& v) { c.path = parse_bool(name, v); },     \
               [](const ExperimentConfig& c) { return std::string(c.path ? "true" : "false"); }}}
#define PL_STRING(path, name)                                                                       \
  {name, Field{[](ExperimentConfig& c, const std::string& v) { c.path = v; },                       \
               [](const ExperimentConfig& c) { return c.path; }}}
    t.push_back({"model",
                 {
                     PL_UINT(model.D, "D"),
                     PL_UINT(model.L, "L"),
                     PL_UINT(model.num_encoders, "num_encoders"),
                     PL_UINT(model.P, "P"),
                     PL_UINT(model.C, "C"),
                     PL_UINT(model.H, "H"),
                     PL_UINT(model.W, "W"),
                     PL_UINT(model.r, "r"),
                     PL_UINT(model.num_classes, "num_classes"),
                     PL_DOUBLE(model.ln_eps, "ln_eps"),
                     {"activation",
                      Field{[](ExperimentConfig& c, const std::string& v) {
                              c.model.adapter_activation = parse_enum<Activation>(
                                  "activation", v, {{"relu", Activation::relu}, {"gelu", Activation::gelu}});
                            },
                            [](const ExperimentConfig& c) { return to_string(c.model.adapter_activation); }}},
                     {"head",
                      Field{[](ExperimentConfig& c, const std::string& v) {
                              c.model.head_mode = parse_enum<HeadMode>(
                                  "head", v,
                                  {{"mean_pool", HeadMode::mean_pool}, {"class_token", HeadMode::class_token}});
                            },
                            [](const ExperimentConfig& c) { return to_string(c.model.head_mode); }}},
                 }});
    t.push_back({"craft",
                 {
                     PL_DOUBLE(craft.sigma_pos, "sigma_pos"),
                     PL_DOUBLE(craft.gamma, "gamma"),
                     PL_DOUBLE(craft.epsilon_up, "epsilon_up"),
                     PL_DOUBLE(craft.margin, "margin"),
                     PL_DOUBLE(craft.head_scale, "head_scale"),
                     PL_BOOL(craft.fingerprint_enabled, "fingerprint"),
                     PL_UINT(craft.seed, "seed"),
                     {"pos_dist",
                      Field{[](ExperimentConfig& c, const std::string& v) {
                              c.craft.pos_dist = parse_enum<Distribution>(
                                  "pos_dist", v,
                                  {{"gaussian", Distribution::gaussian}, {"laplacian", Distribution::laplacian}});
                            },
                            [](const ExperimentConfig& c) { return to_string(c.craft.pos_dist); }}},
                     {"embed_mode",
                      Field{[](ExperimentConfig& c, const std::string& v) {
                              c.craft.embed_mode = parse_enum<EmbedMode>(
                                  "embed_mode", v,
                                  {{"identity_pad", EmbedMode::identity_pad},
                                   {"average_pool", EmbedMode::average_pool}});
                            },
                            [](const ExperimentConfig& c) { return to_string(c.craft.embed_mode); }}},
                     {"row_design",
                      Field{[](ExperimentConfig& c, const std::string& v) {
                              c.craft.row_design = parse_enum<RowDesign>(
                                  "row_design", v,
                                  {{"ln_invariant", RowDesign::ln_invariant},
                                   {"position_encoding", RowDesign::position_encoding}});
                            },
                            [](const ExperimentConfig& c) { return to_string(c.craft.row_design); }}},
                 }});
    t.push_back({"fl",
                 {
                     PL_UINT(fl.users, "users"),
                     PL_UINT(fl.batch_size, "batch_size"),
                     PL_UINT(fl.rounds, "rounds"),
                     PL_UINT(fl.local_epochs, "local_epochs"),
                     PL_DOUBLE(fl.learning_rate, "learning_rate"),
                     PL_UINT(fl.victim_index, "victim_index"),
                     PL_UINT(fl.seed, "seed"),
                 }});
    t.push_back({"plan",
                 {
                     {"positions",
                      Field{[](ExperimentConfig& c, const std::string& v) {
                              c.plan.positions = parse_list("positions", v, "all");
                            },
                            [](const ExperimentConfig& c) { return join_list(c.plan.positions, "all"); }}},
                     {"slots",
                      Field{[](ExperimentConfig& c, const std::string& v) { c.plan.slots = parse_list("slots", v, "auto"); },
                            [](const ExperimentConfig& c) { return join_list(c.plan.slots, "auto"); }}},
                     PL_DOUBLE(plan.attack.pixel_tau, "pixel_tau"),
                     PL_DOUBLE(plan.attack.residual_tol, "residual_tol"),
                     PL_BOOL(plan.attack.consistency_check, "consistency_check"),
                     PL_DOUBLE(plan.attack.bin_tol_rel, "bin_tol_rel"),
                     PL_DOUBLE(plan.delta, "delta"),
                 }});
    t.push_back({"defense",
                 {
                     {"kind",
                      Field{[](ExperimentConfig& c, const std::string& v) {
                              c.fl.defense.kind = parse_enum<DefenseKind>(
                                  "kind", v,
                                  {{"none", DefenseKind::none},
                                   {"gaussian_noise", DefenseKind::gaussian_noise},
                                   {"topk_prune", DefenseKind::topk_prune},
                                   {"stochastic_quantize", DefenseKind::stochastic_quantize}});
                            },
                            [](const ExperimentConfig& c) { return to_string(c.fl.defense.kind); }}},
                     PL_DOUBLE(fl.defense.noise_rel_sigma, "noise_rel_sigma"),
                     PL_DOUBLE(fl.defense.k_fraction, "k_fraction"),
                     PL_UINT(fl.defense.quant_levels, "quant_levels"),
                 }});
    t.push_back({"data",
                 {
                     {"kind",
                      Field{[](ExperimentConfig& c, const std::string& v) {
                              c.data.kind = parse_enum<SynthKind>(
                                  "kind", v, {{"uniform", SynthKind::uniform}, {"smooth", SynthKind::smooth}});
                            },
                            [](const ExperimentConfig& c) { return to_string(c.data.kind); }}},
                     {"public_kind",
                      Field{[](ExperimentConfig& c, const std::string& v) {
                              c.data.public_kind = parse_enum<SynthKind>(
                                  "public_kind", v,
                                  {{"uniform", SynthKind::uniform}, {"smooth", SynthKind::smooth}});
                            },
                            [](const ExperimentConfig& c) { return to_string(c.data.public_kind); }}},
                     PL_UINT(data.public_count, "public_count"),
                     PL_STRING(data.public_dir, "public_dir"),
                     PL_STRING(data.victim_dir, "victim_dir"),
                 }});
#undef PL_UINT
#undef PL_DOUBLE
#undef PL_BOOL
#undef PL_STRING
    return t;
  }();
  return table;
}

}  // namespace detail

// Sets one "section.key" field; used by the parser and by sweeps.
inline void set_config_value(ExperimentConfig& cfg, const std::string& section, const std::string& key,
                             const std::string& value) {
  for (const auto& [name, fields] : detail::field_table()) {
    if (name != section) continue;
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("config: unknown key [" + section + "] " + key);
    it->second.set(cfg, value);
    return;
  }
  throw ConfigError("config: unknown section [" + section + "]");
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.message() + " at line " + std::to_string(e.line()));
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : pt) {
    if (body.empty()) {
      throw ConfigError("config: key '" + section + "' outside of any section");
    }
    for (const auto& [key, value] : body) set_config_value(cfg, section, key, value.data());
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_string(ss.str());
}

inline std::string to_ini(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [name, fields] : detail::field_table()) {
    out += "[" + name + "]\n";
    for (const auto& [key, f] : fields) out += key + " = " + f.get(cfg) + "\n";
    out += "\n";
  }
  return out;
}

// FNV-1a 64 of the resolved configuration text, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_ini(cfg)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace peftleak

#endif  // PEFTLEAK_CONFIG_HPP
