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
#ifndef PEFTLEAK_CRAFT_HPP
#define PEFTLEAK_CRAFT_HPP

// Server-side parameter factory.
//
// Embedding coordinates are split into three ranges:
//
//   [0, content)            patch content, E x lives here
//   [calib_begin, calib_end) position-encoding-only coordinates; they carry
//                           the gate that blocks non-target tokens and let the
//                           attacker read back the LayerNorm scale
//   [fp_begin, D)           fingerprint slot (last D_h coords), only when
//                           fingerprinting is enabled
//
// Every adapter input of the crafted network is a LayerNorm output of the
// embedded tokens. LayerNorm renormalizes a token to the norm of its position
// encoding, which cancels the first-order dependence of E_pos[t] . z on the
// patch statistic. The default neuron row therefore uses a direction u with
// u . E_pos[t] = 0, u . 1 = 0 and u . (E x) = E_pos[t] . (E x), which makes the
// pre-activation independent of the LayerNorm scale and shift.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "peftleak/errors.hpp"
#include "peftleak/model.hpp"
#include "peftleak/numerics.hpp"
#include "peftleak/stats.hpp"

namespace peftleak {

enum class EmbedMode { identity_pad, average_pool };
enum class RowDesign { ln_invariant, position_encoding };

inline std::string to_string(EmbedMode m) {
  return m == EmbedMode::identity_pad ? "identity_pad" : "average_pool";
}
inline std::string to_string(RowDesign r) {
  return r == RowDesign::ln_invariant ? "ln_invariant" : "position_encoding";
}

struct CraftConfig {
  double sigma_pos = 10.0;
  Distribution pos_dist = Distribution::gaussian;
  double gamma = 1e4;
  double epsilon_up = 1e-6;
  double margin = 50.0;
  bool fingerprint_enabled = false;
  EmbedMode embed_mode = EmbedMode::identity_pad;
  RowDesign row_design = RowDesign::ln_invariant;
  double head_scale = 1e-2;  // std of the frozen classifier weights
  std::uint64_t seed = 1;

  void validate() const {
    if (!(sigma_pos > 0.0)) throw ConfigError("craft: sigma_pos must be positive");
    if (!(gamma > 0.0)) throw ConfigError("craft: gamma must be positive");
    if (!(epsilon_up >= 0.0 && epsilon_up < 1.0)) {
      throw ConfigError("craft: epsilon_up must lie in [0, 1)");
    }
    if (!(margin > 0.0)) throw ConfigError("craft: margin must be positive");
    if (!(head_scale > 0.0)) throw ConfigError("craft: head_scale must be positive");
  }
};

struct CoordinateLayout {
  std::size_t D = 0;
  std::size_t content = 0;
  std::size_t calib_begin = 0, calib_end = 0;
  std::size_t fp_begin = 0;  // == D when fingerprinting is off
  std::size_t block = 1;     // average_pool block side in pixels
  EmbedMode mode = EmbedMode::identity_pad;

  std::size_t calib_size() const { return calib_end - calib_begin; }
  bool fingerprint() const { return fp_begin < D; }
};

inline CoordinateLayout plan_layout(const CraftConfig& cc, const ModelConfig& mc) {
  mc.validate();
  CoordinateLayout lay;
  lay.D = mc.D;
  lay.mode = cc.embed_mode;
  const std::size_t fp = cc.fingerprint_enabled ? mc.head_dim() : 0;
  const std::size_t calib_min = cc.row_design == RowDesign::ln_invariant ? mc.num_patches() + 2 : 0;
  if (mc.D < fp + calib_min + 1) {
    throw ConfigError("craft: D too small for fingerprint and calibration coordinates");
  }
  const std::size_t usable = mc.D - fp - calib_min;
  if (cc.embed_mode == EmbedMode::identity_pad) {
    if (usable < mc.patch_dim()) {
      throw ConfigError("craft: identity_pad needs D >= P^2 C + reserved coordinates (" +
                        std::to_string(mc.patch_dim() + fp + calib_min) +
                        "); use embed_mode = average_pool");
    }
    lay.content = mc.patch_dim();
  } else {
    std::size_t b = 1;
    for (; b <= mc.P; ++b) {
      if (mc.P % b == 0 && mc.C * (mc.P / b) * (mc.P / b) <= usable) break;
    }
    if (b > mc.P) throw ConfigError("craft: no average_pool block size fits in D");
    lay.block = b;
    lay.content = mc.C * (mc.P / b) * (mc.P / b);
  }
  lay.fp_begin = mc.D - fp;
  if (fp > 0 && lay.fp_begin % mc.head_dim() != 0) {
    throw ConfigError("craft: fingerprint slot must align with the last head");
  }
  lay.calib_begin = lay.content;
  lay.calib_end = lay.fp_begin;
  return lay;
}

struct EmbeddingPair {
  Tensor E;       // D x P^2 C
  Tensor E_pinv;  // P^2 C x D
  CoordinateLayout layout;
};

// identity_pad: E = 0.5 [I; 0], E_pinv = 2 [I 0]. average_pool: content coordinate
// k holds 0.5 * mean of block k (per channel, b x b pixels); E_pinv writes twice
// that value back to every pixel of the block.
inline EmbeddingPair craft_embedding_matrix(const CraftConfig& cc, const ModelConfig& mc) {
  EmbeddingPair out;
  out.layout = plan_layout(cc, mc);
  const std::size_t D = mc.D, K = mc.patch_dim(), P = mc.P, b = out.layout.block;
  out.E = Tensor({D, K}, 0.0);
  out.E_pinv = Tensor({K, D}, 0.0);
  const std::size_t gs = P / b;
  const double inv_g = 1.0 / static_cast<double>(b * b);
  for (std::size_t c = 0; c < mc.C; ++c) {
    for (std::size_t py = 0; py < P; ++py) {
      for (std::size_t px = 0; px < P; ++px) {
        const std::size_t pix = c * P * P + py * P + px;
        const std::size_t k = c * gs * gs + (py / b) * gs + px / b;
        out.E(k, pix) = 0.5 * inv_g;
        out.E_pinv(pix, k) = 2.0;
      }
    }
  }
  return out;
}

// Smallest per-head separation ((E_t . E_t - E_t . E_n) / sqrt(D_h)) over all
// ordered pairs t != n and heads.
inline double min_head_margin(const Tensor& E_pos, std::size_t L) {
  const std::size_t T = E_pos.rows(), D = E_pos.cols(), Dh = D / L;
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t h = 0; h < L; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      const double* a = E_pos.row(t).data() + h * Dh;
      double self = 0.0;
      for (std::size_t i = 0; i < Dh; ++i) self += a[i] * a[i];
      for (std::size_t n = 0; n < T; ++n) {
        if (n == t) continue;
        const double* c = E_pos.row(n).data() + h * Dh;
        double cross = 0.0;
        for (std::size_t i = 0; i < Dh; ++i) cross += a[i] * c[i];
        best = std::min(best, (self - cross) * scale);
      }
    }
  }
  return best;
}

// Gate direction for one target token. Both vectors are full length D.
struct GateRow {
  std::vector<double> u;  // stat direction: u . E x = E_pos[t] . E x, u . E_pos[t] = 0, u . 1 = 0
  std::vector<double> g;  // block direction: g . E_pos[n] = -1 (n != t), g . E_pos[t] = 0, g . 1 = 0
  double cross_max = 0.0;  // max_n |u . E_pos[n]|
};

inline std::optional<GateRow> try_gate_row(const Tensor& E_pos, const CoordinateLayout& lay,
                                          std::size_t t) {
  const std::size_t D = lay.D, T = E_pos.rows();
  const std::size_t r0 = lay.calib_begin, nr = lay.calib_size();
  if (nr < (T - 1) + 2) return std::nullopt;
  const auto Et = E_pos.row(t);
  GateRow gr;
  gr.u.assign(D, 0.0);
  gr.g.assign(D, 0.0);
  double c_sq = 0.0, c_sum = 0.0;
  for (std::size_t i = 0; i < lay.content; ++i) {
    gr.u[i] = Et[i];
    c_sq += Et[i] * Et[i];
    c_sum += Et[i];
  }
  Eigen::MatrixXd B(nr, 2);
  for (std::size_t i = 0; i < nr; ++i) {
    B(i, 0) = Et[r0 + i];
    B(i, 1) = 1.0;
  }
  // Minimum-norm u_R with B^T u_R = (-|E_C|^2, -sum E_C).
  const Eigen::Matrix2d BtB = B.transpose() * B;
  Eigen::Vector2d rhs(-c_sq, -c_sum);
  Eigen::FullPivLU<Eigen::Matrix2d> lu2(BtB);
  if (lu2.rank() < 2) return std::nullopt;
  const Eigen::VectorXd uR = B * lu2.solve(rhs);
  for (std::size_t i = 0; i < nr; ++i) gr.u[r0 + i] = uR(i);

  // Project the other encodings off span(B); solve the Gram system for g.
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(B);
  const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(nr, 2);
  Eigen::MatrixXd Pm(nr, T - 1);
  std::size_t col = 0;
  for (std::size_t n = 0; n < T; ++n) {
    if (n == t) continue;
    Eigen::VectorXd v(nr);
    for (std::size_t i = 0; i < nr; ++i) v(i) = E_pos(n, r0 + i);
    Pm.col(col++) = v - Q * (Q.transpose() * v);
  }
  const Eigen::MatrixXd Gram = Pm.transpose() * Pm;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(Gram);
  if (lu.rank() < static_cast<Eigen::Index>(T - 1)) return std::nullopt;
  const Eigen::VectorXd alpha = lu.solve(Eigen::VectorXd::Constant(T - 1, -1.0));
  const Eigen::VectorXd gR = Pm * alpha;
  // Solution quality: g . E_n must hit -1.
  for (std::size_t n = 0; n < T; ++n) {
    double dotv = 0.0;
    for (std::size_t i = 0; i < nr; ++i) dotv += gR(i) * E_pos(n, r0 + i);
    const double target = n == t ? 0.0 : -1.0;
    if (!(std::abs(dotv - target) < 1e-8)) return std::nullopt;
  }
  for (std::size_t i = 0; i < nr; ++i) gr.g[r0 + i] = gR(i);
  for (std::size_t n = 0; n < T; ++n) {
    if (n == t) continue;
    gr.cross_max = std::max(gr.cross_max, std::abs(dot(gr.u, E_pos.row(n))));
  }
  return gr;
}

inline GateRow gate_row(const Tensor& E_pos, const CoordinateLayout& lay, std::size_t t) {
  auto gr = try_gate_row(E_pos, lay, t);
  if (!gr) throw ConfigError("craft: gate system for token " + std::to_string(t) + " is singular");
  return *gr;
}

// N+1 encodings, each standardized to mean 0 and population std sigma_pos,
// redrawn from fresh streams until every head separates every pair of tokens
// by the margin (and, for the default row design, the gate system is solvable).
inline Tensor craft_position_encodings(const CraftConfig& cc, const ModelConfig& mc) {
  cc.validate();
  mc.validate();
  const std::size_t T = mc.tokens(), D = mc.D;
  const bool need_gate = cc.row_design == RowDesign::ln_invariant;
  const CoordinateLayout lay = plan_layout(cc, mc);
  const Rng base = Rng(cc.seed).derive(0x504F53);  // "POS"
  double best = -std::numeric_limits<double>::infinity();
  for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
    Rng rng = base.derive(attempt);
    Tensor E_pos({T, D}, 0.0);
    for (std::size_t n = 0; n < T; ++n) {
      const Tensor v = sample(cc.pos_dist, 0.0, cc.sigma_pos, D, rng);
      double mean = 0.0;
      for (double x : v.values()) mean += x;
      mean /= static_cast<double>(D);
      double var = 0.0;
      for (double x : v.values()) var += (x - mean) * (x - mean);
      const double sd = std::sqrt(var / static_cast<double>(D));
      for (std::size_t i = 0; i < D; ++i) E_pos(n, i) = (v[i] - mean) / sd * cc.sigma_pos;
    }
    const double m = min_head_margin(E_pos, mc.L);
    best = std::max(best, m);
    if (m < cc.margin) continue;
    bool ok = true;
    if (need_gate) {
      for (std::size_t t = 1; t < T && ok; ++t) ok = try_gate_row(E_pos, lay, t).has_value();
    }
    if (ok) return E_pos;
  }
  throw ConfigError("craft: position-encoding margin " + std::to_string(cc.margin) +
                    " unreachable after 1000 draws (best " + std::to_string(best) +
                    "); increase D_h or sigma_pos");
}

namespace detail {
inline Tensor selector(std::size_t rows, std::size_t cols, std::size_t offset) {
  Tensor s({rows, cols}, 0.0);
  for (std::size_t i = 0; i < rows; ++i) s(i, offset + i) = 1.0;
  return s;
}
}  // namespace detail

// First encoder, last head: constant query b_Q = E_pos[1] on the head slice,
// identity keys, so every token attends to token 1; the value reads
// coordinates [0, D_h) and lands in the fingerprint slot.
inline void craft_fingerprint_head(FrozenBackbone& bb, const CraftConfig& cc,
                                   const ModelConfig& mc) {
  const auto lay = plan_layout(cc, mc);
  if (!lay.fingerprint()) throw ConfigError("craft: fingerprint slot unavailable");
  const std::size_t Dh = mc.head_dim(), D = mc.D, f0 = lay.fp_begin;
  if (f0 != D - Dh) throw ConfigError("craft: fingerprint slot must be the last D_h coordinates");
  auto& head = bb.encoders.at(0).heads.back();
  head.W_Q = Tensor({Dh, Dh}, 0.0);
  head.b_Q = Tensor({Dh}, 0.0);
  for (std::size_t i = 0; i < Dh; ++i) head.b_Q[i] = bb.E_pos(1, f0 + i);
  head.W_K = Tensor::identity(Dh);
  head.b_K = Tensor({Dh}, 0.0);
  head.W_V = detail::selector(Dh, D, 0);
  head.b_V = Tensor({Dh}, 0.0);
}

inline FrozenBackbone craft_backbone(const CraftConfig& cc, const ModelConfig& mc) {
  cc.validate();
  const auto emb = craft_embedding_matrix(cc, mc);
  const std::size_t D = mc.D, Dh = mc.head_dim();
  FrozenBackbone bb;
  bb.E = emb.E;
  bb.class_token = Tensor({D}, 0.0);
  bb.E_pos = craft_position_encodings(cc, mc);
  for (std::size_t e = 0; e < mc.num_encoders; ++e) {
    EncoderParams p;
    p.ln1_w = Tensor({D}, cc.sigma_pos);
    p.ln1_b = Tensor({D}, 0.0);
    for (std::size_t h = 0; h < mc.L; ++h) {
      p.heads.push_back({Tensor::identity(Dh), Tensor({Dh}, 0.0), Tensor::identity(Dh),
                         Tensor({Dh}, 0.0), detail::selector(Dh, D, h * Dh), Tensor({Dh}, 0.0)});
    }
    p.W_MSA = Tensor::identity(D);
    p.ln2_w = Tensor({D}, cc.sigma_pos);
    p.ln2_b = Tensor({D}, 0.0);
    p.W1 = Tensor({4 * D, D}, 0.0);
    for (std::size_t i = 0; i < D; ++i) p.W1(i, i) = 1.0;
    p.b1 = Tensor({4 * D}, cc.gamma);
    p.W2 = Tensor({D, 4 * D}, 0.0);
    for (std::size_t i = 0; i < D; ++i) p.W2(i, i) = 1.0;
    p.b2 = Tensor({D}, -cc.gamma);
    bb.encoders.push_back(std::move(p));
  }
  bb.lnf_w = Tensor({D}, cc.sigma_pos);
  bb.lnf_b = Tensor({D}, 0.0);
  Rng head_rng = Rng(cc.seed).derive(0x48454144);  // "HEAD"
  bb.W_cls = Tensor({mc.num_classes, D}, 0.0);
  for (auto& v : bb.W_cls.values()) v = cc.head_scale * head_rng.normal();
  bb.b_cls = Tensor({mc.num_classes}, 0.0);
  if (cc.fingerprint_enabled) craft_fingerprint_head(bb, cc, mc);
  bb.validate(mc);
  return bb;
}

// ---------------------------------------------------------------------------
// Attack plan.

struct Assignment {
  std::size_t adapter = 0;
  std::size_t position = 0;  // 0-based patch index
  std::size_t slot = 0;      // 0-based within the position

  friend bool operator==(const Assignment&, const Assignment&) = default;
};

struct AttackPlan {
  std::size_t r = 0;
  std::size_t rounds = 1;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> slots;  // S_t, parallel to positions
  std::vector<Assignment> assignments;
  // thresholds[round][i] holds the k_t = S_t r sorted thresholds of positions[i].
  std::vector<std::vector<std::vector<double>>> thresholds;
  // quantiles[round][i]: probabilities the thresholds were placed at.
  std::vector<std::vector<std::vector<double>>> quantiles;
  std::vector<double> gains;  // per adapter; 1 when unassigned
  RowDesign row_design = RowDesign::ln_invariant;
  PatchStats stats;

  std::size_t k(std::size_t i) const { return slots.at(i) * r; }

  std::size_t index_of_position(std::size_t position) const {
    for (std::size_t i = 0; i < positions.size(); ++i) {
      if (positions[i] == position) return i;
    }
    throw DomainError("plan: position not targeted");
  }

  std::optional<Assignment> assignment_of(std::size_t adapter) const {
    for (const auto& a : assignments) {
      if (a.adapter == adapter) return a;
    }
    return std::nullopt;
  }

  void validate(const ModelConfig& mc) const {
    if (positions.empty()) throw ConfigError("plan: no target positions");
    if (r != mc.r) throw ConfigError("plan: bottleneck r does not match the model");
    if (gains.size() != mc.num_adapters()) throw ConfigError("plan: gain count mismatch");
    if (thresholds.size() != rounds) throw ConfigError("plan: threshold rounds mismatch");
    for (const auto& a : assignments) {
      if (a.adapter >= mc.num_adapters() || a.position >= mc.num_patches()) {
        throw ConfigError("plan: assignment out of range");
      }
    }
    for (const auto& round : thresholds) {
      if (round.size() != positions.size()) throw ConfigError("plan: threshold grid mismatch");
      for (std::size_t i = 0; i < round.size(); ++i) {
        if (round[i].size() != k(i)) throw ConfigError("plan: threshold count mismatch");
        for (std::size_t j = 1; j < round[i].size(); ++j) {
          if (!(round[i][j - 1] < round[i][j])) throw ConfigError("plan: thresholds not increasing");
        }
      }
    }
  }
};

// Round rho in [0, R) places threshold j in [1, k] at probability
// (j R - rho) / (k R + 1); with R = 1 this is j / (k + 1).
inline double threshold_quantile(std::size_t j, std::size_t k, std::size_t R, std::size_t rho) {
  return (static_cast<double>(j * R) - static_cast<double>(rho)) / static_cast<double>(k * R + 1);
}

inline AttackPlan build_attack_plan(const PatchStats& stats, const ModelConfig& mc,
                                    const std::vector<std::size_t>& positions,
                                    const std::vector<std::size_t>& slots_per_position,
                                    std::size_t rounds,
                                    RowDesign design = RowDesign::ln_invariant) {
  mc.validate();
  if (positions.empty()) throw ConfigError("plan: empty position list");
  if (slots_per_position.size() != positions.size()) {
    throw ConfigError("plan: one slot count per position required");
  }
  if (rounds < 1) throw ConfigError("plan: rounds must be >= 1");
  std::size_t total = 0;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= mc.num_patches()) throw ConfigError("plan: position out of range");
    if (slots_per_position[i] < 1) throw ConfigError("plan: each position needs >= 1 adapter");
    for (std::size_t k = 0; k < i; ++k) {
      if (positions[k] == positions[i]) throw ConfigError("plan: duplicate position");
    }
    if (positions[i] >= stats.positions()) throw ConfigError("plan: no stats for position");
    if (!(stats.sigma[positions[i]] > 0.0)) {
      throw DegenerateStatsError("plan: degenerate stats at position " +
                                 std::to_string(positions[i]));
    }
    total += slots_per_position[i];
  }
  if (total > mc.num_adapters()) {
    throw ConfigError("plan: " + std::to_string(total) + " adapters requested, model has " +
                      std::to_string(mc.num_adapters()));
  }
  AttackPlan plan;
  plan.r = mc.r;
  plan.rounds = rounds;
  plan.positions = positions;
  plan.slots = slots_per_position;
  plan.row_design = design;
  plan.stats = stats;
  plan.gains.assign(mc.num_adapters(), 1.0);
  std::size_t a = 0;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t s = 0; s < slots_per_position[i]; ++s) {
      plan.assignments.push_back({a++, positions[i], s});
    }
  }
  plan.thresholds.resize(rounds);
  plan.quantiles.resize(rounds);
  for (std::size_t rho = 0; rho < rounds; ++rho) {
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const std::size_t k = plan.k(i), t = positions[i];
      std::vector<double> c(k), q(k);
      for (std::size_t j = 1; j <= k; ++j) {
        q[j - 1] = threshold_quantile(j, k, rounds, rho);
        c[j - 1] = inverse_normal_cdf(q[j - 1], stats.mu[t], stats.sigma[t]);
      }
      plan.thresholds[rho].push_back(std::move(c));
      plan.quantiles[rho].push_back(std::move(q));
    }
  }
  plan.validate(mc);
  return plan;
}

inline AttackPlan build_attack_plan(const PatchStats& stats, const ModelConfig& mc,
                                    const std::vector<std::size_t>& positions,
                                    std::size_t slots_each, std::size_t rounds,
                                    RowDesign design = RowDesign::ln_invariant) {
  return build_attack_plan(stats, mc, positions,
                           std::vector<std::size_t>(positions.size(), slots_each), rounds, design);
}

// Neuron direction shared by all neurons of adapters targeting `position`,
// before division by the adapter gain. Uses the largest threshold magnitude
// over all rounds so the direction is the same in every round.
inline std::vector<double> neuron_direction(const AttackPlan& plan, const Tensor& E_pos,
                                            const CoordinateLayout& lay, std::size_t position) {
  const std::size_t t = position + 1;
  if (plan.row_design == RowDesign::position_encoding) {
    return {E_pos.row(t).begin(), E_pos.row(t).end()};
  }
  const std::size_t i = plan.index_of_position(position);
  double cmax = 0.0;
  for (const auto& round : plan.thresholds) {
    for (double c : round[i]) cmax = std::max(cmax, std::abs(c));
  }
  const GateRow gr = gate_row(E_pos, lay, t);
  double l1 = 0.0;
  for (std::size_t k = 0; k < lay.content; ++k) l1 += std::abs(E_pos(t, k));
  const double G = 2.0 * (gr.cross_max + 0.5 * l1 + cmax) + 100.0;
  std::vector<double> w(lay.D);
  for (std::size_t k = 0; k < lay.D; ++k) w[k] = gr.u[k] + G * gr.g[k];
  return w;
}

// Adapters for one round. Assigned neuron j of slot s: row w / gain,
// bias -c_{s r + j} (minus |E_pos[t]|^2 for the position-encoding rows). Every
// adapter, assigned or not, has W_up row 0 equal to epsilon_up.
inline AdapterSet craft_adapters(const AttackPlan& plan, const Tensor& E_pos, const CraftConfig& cc,
                                 const ModelConfig& mc, std::size_t round) {
  if (round >= plan.rounds) throw ConfigError("craft: round outside plan");
  plan.validate(mc);
  const auto lay = plan_layout(cc, mc);
  AdapterSet out = AdapterSet::zeros(mc);
  for (auto& ad : out.adapters) {
    for (std::size_t j = 0; j < mc.r; ++j) ad.W_up(0, j) = cc.epsilon_up;
  }
  std::vector<std::vector<double>> dir_cache(mc.num_patches());
  for (const auto& as : plan.assignments) {
    auto& dir = dir_cache[as.position];
    if (dir.empty()) dir = neuron_direction(plan, E_pos, lay, as.position);
    const std::size_t i = plan.index_of_position(as.position);
    const auto& c = plan.thresholds[round][i];
    const double gain = plan.gains[as.adapter];
    double offset = 0.0;
    if (plan.row_design == RowDesign::position_encoding) {
      const auto e = E_pos.row(as.position + 1);
      offset = dot(e, e);
    }
    auto& ad = out.adapters[as.adapter];
    for (std::size_t j = 0; j < mc.r; ++j) {
      for (std::size_t k = 0; k < mc.D; ++k) ad.W_down(j, k) = dir[k] / gain;
      ad.b_down[j] = -offset - c[as.slot * mc.r + j];
    }
  }
  return out;
}

// Fit of a token's calibration coordinates against its own position encoding:
// z_R ~ alpha E_pos[t]_R + beta. Returns (alpha, beta).
inline std::pair<double, double> calibration_fit(std::span<const double> z, const Tensor& E_pos,
                                                 const CoordinateLayout& lay, std::size_t t) {
  const std::size_t n = lay.calib_size();
  if (n < 2) return {1.0, 0.0};
  double mx = 0.0, my = 0.0;
  for (std::size_t i = lay.calib_begin; i < lay.calib_end; ++i) {
    mx += E_pos(t, i);
    my += z[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = lay.calib_begin; i < lay.calib_end; ++i) {
    sxy += (E_pos(t, i) - mx) * (z[i] - my);
    sxx += (E_pos(t, i) - mx) * (E_pos(t, i) - mx);
  }
  const double alpha = sxy / sxx;
  return {alpha, my - alpha * mx};
}

// Sets plan.gains[a] to the mean LayerNorm gain seen at adapter a's target
// token over the public images, so that pre-activations track the statistic
// at unit slope.
inline void calibrate_gains(AttackPlan& plan, const Network& net, const CraftConfig& cc,
                            const std::vector<Tensor>& public_images) {
  const auto& mc = net.config();
  if (plan.row_design != RowDesign::ln_invariant || public_images.empty()) return;
  const auto lay = plan_layout(cc, mc);
  std::fill(plan.gains.begin(), plan.gains.end(), 1.0);
  const AdapterSet probe = craft_adapters(plan, net.backbone().E_pos, cc, mc, 0);
  std::vector<double> sum(mc.num_adapters(), 0.0);
  for (const auto& img : public_images) {
    const auto tr = net.run_image(img, 0, probe);
    for (const auto& as : plan.assignments) {
      const std::size_t t = as.position + 1;
      sum[as.adapter] +=
          calibration_fit(tr.adapter_input(as.adapter).row(t), net.backbone().E_pos, lay, t).first;
    }
  }
  for (const auto& as : plan.assignments) {
    plan.gains[as.adapter] = sum[as.adapter] / static_cast<double>(public_images.size());
  }
}

}  // namespace peftleak

#endif  // PEFTLEAK_CRAFT_HPP
