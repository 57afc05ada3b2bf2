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
#ifndef PEFTLEAK_ATTACK_HPP
#define PEFTLEAK_ATTACK_HPP

// Reconstruction from observed adapter gradients. Inputs are the gradients,
// the plan and the backbone the server crafted; nothing here can see the
// victim's batch.
//
// Bins: neuron j of a position grid fires for every target token whose
// statistic exceeds c_j. Bin j is the interval (c_j, c_{j+1}); the pair
// difference of neurons j and j+1 isolates it. Only pairs held by the same
// adapter are usable because the two neurons must see the same token
// embedding; the top bin pairs the last neuron with an implicit zero.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <tuple>
#include <vector>

#include "peftleak/craft.hpp"
#include "peftleak/model.hpp"

namespace peftleak {

struct AttackOptions {
  double pixel_tau = 0.1;           // valid pixels lie in [-1 - tau, 1 + tau]
  double residual_tol = 1e-6;       // LayerNorm-consistency residual, units of the LN weight
  bool consistency_check = true;
  double bin_tol_rel = 1e-9;        // active-bin threshold relative to max |db_down|
};

struct ActiveBin {
  std::size_t position = 0;
  std::size_t j = 0;        // lower neuron, 0-based in the position grid
  std::size_t adapter = 0;
  std::size_t neuron = 0;   // lower neuron inside the adapter
  bool top = false;         // upper neighbour is the implicit zero
};

struct RecoveredPatch {
  std::size_t position = 0;
  std::size_t bin = 0;
  std::size_t round = 0;
  std::size_t adapter = 0;
  std::vector<double> pixels;       // raw, unclamped
  std::vector<double> fingerprint;  // empty when fingerprinting is off
  bool valid = false;
  double stat_check = 0.0;
  double lower = 0.0, upper = 0.0;  // bin edges
  double residual = 0.0;
  std::optional<std::size_t> group;
  std::optional<std::size_t> oracle_image;  // set by evaluation code only

  double edge_distance() const { return std::min(stat_check - lower, upper - stat_check); }
};

enum class GroupMode { oracle, fingerprint };

struct ReconstructionReport {
  std::size_t num_positions = 0;  // N
  std::size_t batch_size = 0;     // M
  std::vector<RecoveredPatch> patches;
  std::vector<std::size_t> valid_per_position;
  std::vector<std::size_t> active_per_position;
  std::vector<std::vector<std::size_t>> groups;  // indices into patches
  GroupMode group_mode = GroupMode::oracle;
  double delta = 0.0;
  double coverage = 0.0;
  std::vector<std::size_t> rounds;  // rounds merged into this report
};

// Threshold used to call a bin active: rel * max |db_down| over assigned adapters.
inline double default_bin_tolerance(const AdapterGradients& g, const AttackPlan& plan, double rel) {
  double mx = 0.0;
  for (const auto& as : plan.assignments) {
    for (double v : g.adapters.at(as.adapter).b_down.values()) mx = std::max(mx, std::abs(v));
  }
  return rel * mx;
}

inline std::vector<ActiveBin> detect_active_bins(const AdapterGradients& g, const AttackPlan& plan,
                                                 std::size_t round, double tol) {
  if (round >= plan.rounds) throw ConfigError("attack: round outside plan");
  std::vector<ActiveBin> out;
  if (!(tol < std::numeric_limits<double>::infinity())) return out;
  const std::size_t r = plan.r;
  for (const std::size_t p : plan.positions) {
    const std::size_t i = plan.index_of_position(p);
    for (const auto& as : plan.assignments) {
      if (as.position != p) continue;
      const auto& db = g.adapters.at(as.adapter).b_down;
      for (std::size_t n = 0; n < r; ++n) {
        const bool last_in_adapter = n + 1 == r;
        const bool top = last_in_adapter && as.slot + 1 == plan.slots[i];
        if (last_in_adapter && !top) continue;  // neighbour lives in another adapter
        const double diff = top ? db[n] : db[n] - db[n + 1];
        if (std::abs(diff) > tol) {
          out.push_back({p, as.slot * r + n, as.adapter, n, top});
        }
      }
    }
  }
  return out;
}

// Pair-difference ratio (dW_j - dW_j1) / (db_j - db_j1).
inline Tensor recover_embedding(std::span<const double> dW_j, double db_j,
                                std::span<const double> dW_j1, double db_j1) {
  if (dW_j.size() != dW_j1.size()) detail::throw_shape("recover_embedding lengths");
  const double den = db_j - db_j1;
  if (den == 0.0) throw EmptyBinError("recover_embedding: zero bias-gradient difference");
  Tensor y({dW_j.size()}, 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = (dW_j[i] - dW_j1[i]) / den;
  return y;
}

// x = E_pinv (y - E_pos[t]).
inline std::vector<double> recover_patch(std::span<const double> y, const Tensor& E_pinv,
                                         std::span<const double> pos) {
  if (y.size() != pos.size() || E_pinv.cols() != y.size()) detail::throw_shape("recover_patch");
  std::vector<double> x(E_pinv.rows(), 0.0);
  for (std::size_t k = 0; k < E_pinv.rows(); ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double w = E_pinv(k, i);
      if (w != 0.0) acc += w * (y[i] - pos[i]);
    }
    x[k] = acc;
  }
  return x;
}

namespace detail {

inline std::vector<double> ln_vec(std::span<const double> x, const Tensor& w, const Tensor& b,
                                  double eps) {
  std::vector<double> out(x.size());
  layer_norm_into(x, w.data(), b.data(), eps, out);
  return out;
}

}  // namespace detail

// Undoes the crafted network's LayerNorm on a recovered adapter input.
struct Unnormalized {
  std::vector<double> y;            // estimated embedded token
  std::vector<double> fingerprint;  // empty without fingerprinting
  double residual = 0.0;            // max |z - LN-model(z)| / LN weight, coordinate 0 excluded
};

inline Unnormalized unnormalize(std::span<const double> z, const FrozenBackbone& bb,
                                const ModelConfig& mc, const CoordinateLayout& lay,
                                std::size_t adapter, std::size_t t) {
  const std::size_t D = mc.D;
  const auto& enc = bb.encoders.at(adapter / 2);
  const Tensor& w = adapter % 2 == 0 ? enc.ln1_w : enc.ln2_w;
  const Tensor& b = adapter % 2 == 0 ? enc.ln1_b : enc.ln2_b;
  const double wscale = std::abs(w[0]) > 0.0 ? std::abs(w[0]) : 1.0;
  Unnormalized out;
  auto [alpha, beta] = calibration_fit(z, bb.E_pos, lay, t);
  if (!(std::abs(alpha) > 0.0)) alpha = 1.0;
  out.y.assign(D, 0.0);
  for (std::size_t i = 0; i < D; ++i) out.y[i] = bb.E_pos(t, i);
  for (std::size_t i = 0; i < lay.content; ++i) out.y[i] = (z[i] - beta) / alpha;

  std::vector<double> pred;
  std::size_t skip_from = D;  // coordinates >= skip_from are not scored
  if (!lay.fingerprint()) {
    pred = detail::ln_vec(out.y, w, b, mc.ln_eps);
  } else {
    const std::size_t f0 = lay.fp_begin;
    // Scale and mean of the first LayerNorm applied to y itself.
    const auto& w0 = bb.encoders[0].ln1_w;
    double mean = 0.0;
    for (double v : out.y) mean += v;
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (double v : out.y) var += (v - mean) * (v - mean);
    var /= static_cast<double>(D);
    const double a = w0[0] / std::sqrt(var + mc.ln_eps);
    out.fingerprint.assign(D - f0, 0.0);
    if (adapter == 0) {
      for (std::size_t i = f0; i < D; ++i) out.fingerprint[i - f0] = z[i];
      pred = detail::ln_vec(out.y, w, b, mc.ln_eps);
      skip_from = f0;
    } else {
      std::vector<double> e(D);
      for (std::size_t i = 0; i < f0; ++i) e[i] = (1.0 + a) * out.y[i] - a * mean;
      for (std::size_t i = f0; i < D; ++i) {
        const double yf = (z[i] - beta) / alpha;
        out.fingerprint[i - f0] = (1.0 + a) * yf - bb.E_pos(t, i) - a * mean;
        e[i] = out.fingerprint[i - f0] + bb.E_pos(t, i);
      }
      pred = detail::ln_vec(e, w, b, mc.ln_eps);
    }
  }
  for (std::size_t i = 1; i < skip_from; ++i) {
    out.residual = std::max(out.residual, std::abs(z[i] - pred[i]) / wscale);
  }
  return out;
}

// Validity rule: pixels in range, realized statistic inside the bin and, when
// enabled, a LayerNorm-consistent embedding.
inline bool validate(const RecoveredPatch& p, const AttackOptions& opt = {}) {
  const double lim = 1.0 + opt.pixel_tau;
  for (double v : p.pixels) {
    if (!(v >= -lim && v <= lim)) return false;
  }
  if (!(p.stat_check > p.lower && p.stat_check < p.upper)) return false;
  if (opt.consistency_check && !(p.residual < opt.residual_tol)) return false;
  return true;
}

// Single-linkage clustering on fingerprint distance (fingerprint mode) or on
// evaluation-provided image labels (oracle mode). Only valid patches are
// grouped. Group ids follow the first member in patch order.
inline std::vector<std::vector<std::size_t>> group_patches(std::vector<RecoveredPatch>& patches,
                                                           GroupMode mode, double delta) {
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < patches.size(); ++k) {
    patches[k].group.reset();
    if (patches[k].valid) idx.push_back(k);
  }
  std::vector<std::size_t> parent(idx.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t a = 0; a < idx.size(); ++a) {
    for (std::size_t b = a + 1; b < idx.size(); ++b) {
      const auto& pa = patches[idx[a]];
      const auto& pb = patches[idx[b]];
      bool link = false;
      if (mode == GroupMode::oracle) {
        link = pa.oracle_image && pb.oracle_image && *pa.oracle_image == *pb.oracle_image;
      } else {
        if (pa.fingerprint.size() != pb.fingerprint.size() || pa.fingerprint.empty()) {
          throw ConfigError("attack: fingerprint grouping requires fingerprinted patches");
        }
        double d2 = 0.0;
        for (std::size_t i = 0; i < pa.fingerprint.size(); ++i) {
          const double d = pa.fingerprint[i] - pb.fingerprint[i];
          d2 += d * d;
        }
        link = std::sqrt(d2) < delta;
      }
      if (link) {
        const std::size_t ra = find(a), rb = find(b);
        if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
      }
    }
  }
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> gid(idx.size(), std::numeric_limits<std::size_t>::max());
  for (std::size_t a = 0; a < idx.size(); ++a) {
    const std::size_t root = find(a);
    if (gid[root] == std::numeric_limits<std::size_t>::max()) {
      gid[root] = groups.size();
      groups.emplace_back();
    }
    groups[gid[root]].push_back(idx[a]);
    patches[idx[a]].group = gid[root];
  }
  return groups;
}

namespace detail {

// Strict total order used to make merging independent of input order.
inline bool canonical_less(const RecoveredPatch& a, const RecoveredPatch& b) {
  return std::tie(a.round, a.position, a.bin, a.adapter, a.stat_check, a.pixels) <
         std::tie(b.round, b.position, b.bin, b.adapter, b.stat_check, b.pixels);
}

// Duplicate preference: larger distance to the bin edges, then canonical order.
inline bool preferred(const RecoveredPatch& a, const RecoveredPatch& b) {
  if (a.edge_distance() != b.edge_distance()) return a.edge_distance() > b.edge_distance();
  return canonical_less(a, b);
}

}  // namespace detail

// Groups valid patches, keeps one patch per (group, position) and recomputes
// counts and coverage. Invalid patches are kept for diagnostics.
inline void finalize_report(ReconstructionReport& rep) {
  std::stable_sort(rep.patches.begin(), rep.patches.end(), detail::canonical_less);
  group_patches(rep.patches, rep.group_mode, rep.delta);
  std::vector<RecoveredPatch> kept;
  std::vector<RecoveredPatch> valid;
  for (auto& p : rep.patches) (p.valid ? valid : kept).push_back(p);
  std::stable_sort(valid.begin(), valid.end(), [](const auto& a, const auto& b) {
    if (a.group != b.group) return a.group < b.group;
    if (a.position != b.position) return a.position < b.position;
    return detail::preferred(a, b);
  });
  std::vector<RecoveredPatch> dedup;
  for (std::size_t k = 0; k < valid.size(); ++k) {
    if (k > 0 && valid[k].group == valid[k - 1].group && valid[k].position == valid[k - 1].position) {
      continue;
    }
    dedup.push_back(valid[k]);
  }
  rep.patches = std::move(dedup);
  const std::size_t n_valid = rep.patches.size();
  rep.patches.insert(rep.patches.end(), kept.begin(), kept.end());
  std::stable_sort(rep.patches.begin(), rep.patches.end(), detail::canonical_less);
  rep.groups = group_patches(rep.patches, rep.group_mode, rep.delta);
  rep.valid_per_position.assign(rep.num_positions, 0);
  for (const auto& p : rep.patches) {
    if (p.valid) ++rep.valid_per_position.at(p.position);
  }
  const double denom = static_cast<double>(rep.num_positions * rep.batch_size);
  rep.coverage = denom > 0.0 ? static_cast<double>(n_valid) / denom : 0.0;
}

struct AttackContext {
  const FrozenBackbone& backbone;
  const ModelConfig& model;
  const CraftConfig& craft;
  const AttackPlan& plan;
};

// Full reconstruction for one round.
inline ReconstructionReport reconstruct(const AdapterGradients& grads, const AttackContext& ctx,
                                        std::size_t round, std::size_t batch_size,
                                        const AttackOptions& opt = {}, double delta = 0.0) {
  const auto& mc = ctx.model;
  const auto& plan = ctx.plan;
  plan.validate(mc);
  if (!grads.same_layout(AdapterGradients::zeros(mc))) detail::throw_shape("attack: gradient layout");
  const auto lay = plan_layout(ctx.craft, mc);
  const AdapterSet adapters = craft_adapters(plan, ctx.backbone.E_pos, ctx.craft, mc, round);
  const Tensor E_pinv = craft_embedding_matrix(ctx.craft, mc).E_pinv;
  const double tol = default_bin_tolerance(grads, plan, opt.bin_tol_rel);
  const auto bins = detect_active_bins(grads, plan, round, tol);

  ReconstructionReport rep;
  rep.num_positions = mc.num_patches();
  rep.batch_size = batch_size;
  rep.group_mode = lay.fingerprint() ? GroupMode::fingerprint : GroupMode::oracle;
  rep.delta = delta;
  rep.rounds = {round};
  rep.active_per_position.assign(mc.num_patches(), 0);
  for (const auto& bin : bins) {
    ++rep.active_per_position[bin.position];
    const std::size_t t = bin.position + 1;
    const std::size_t i = plan.index_of_position(bin.position);
    const auto& c = plan.thresholds[round][i];
    const auto& ga = grads.adapters[bin.adapter];
    const std::vector<double> zero(mc.D, 0.0);
    Tensor z;
    try {
      z = bin.top ? recover_embedding(ga.W_down.row(bin.neuron), ga.b_down[bin.neuron], zero, 0.0)
                  : recover_embedding(ga.W_down.row(bin.neuron), ga.b_down[bin.neuron],
                                      ga.W_down.row(bin.neuron + 1), ga.b_down[bin.neuron + 1]);
    } catch (const EmptyBinError&) {
      continue;
    }
    RecoveredPatch p;
    p.position = bin.position;
    p.bin = bin.j;
    p.round = round;
    p.adapter = bin.adapter;
    p.lower = c[bin.j];
    p.upper = bin.top ? std::numeric_limits<double>::infinity() : c[bin.j + 1];
    const auto& ad = adapters.adapters[bin.adapter];
    p.stat_check = dot(ad.W_down.row(bin.neuron), z.data()) + ad.b_down[bin.neuron] + c[bin.j];
    const auto un = unnormalize(z.data(), ctx.backbone, mc, lay, bin.adapter, t);
    p.residual = un.residual;
    p.fingerprint = un.fingerprint;
    p.pixels = recover_patch(un.y, E_pinv, ctx.backbone.E_pos.row(t));
    p.valid = validate(p, opt);
    rep.patches.push_back(std::move(p));
  }
  finalize_report(rep);
  return rep;
}

// Union of several rounds (or runs over the same batch): one valid patch per
// (group, position), preferring statistics far from the bin edges.
inline ReconstructionReport merge_rounds(const std::vector<ReconstructionReport>& reports) {
  if (reports.empty()) throw ConfigError("merge_rounds: nothing to merge");
  ReconstructionReport out;
  out.num_positions = reports[0].num_positions;
  out.batch_size = reports[0].batch_size;
  out.group_mode = reports[0].group_mode;
  out.delta = reports[0].delta;
  out.active_per_position.assign(out.num_positions, 0);
  for (const auto& r : reports) {
    if (r.num_positions != out.num_positions || r.batch_size != out.batch_size) {
      throw ConfigError("merge_rounds: reports describe different batches");
    }
    out.patches.insert(out.patches.end(), r.patches.begin(), r.patches.end());
    out.rounds.insert(out.rounds.end(), r.rounds.begin(), r.rounds.end());
    for (std::size_t t = 0; t < out.num_positions && t < r.active_per_position.size(); ++t) {
      out.active_per_position[t] += r.active_per_position[t];
    }
  }
  std::sort(out.rounds.begin(), out.rounds.end());
  out.rounds.erase(std::unique(out.rounds.begin(), out.rounds.end()), out.rounds.end());
  // Drop exact repeats so merging a report with itself is idempotent.
  std::stable_sort(out.patches.begin(), out.patches.end(), detail::canonical_less);
  out.patches.erase(std::unique(out.patches.begin(), out.patches.end(),
                                [](const RecoveredPatch& a, const RecoveredPatch& b) {
                                  return !detail::canonical_less(a, b) &&
                                         !detail::canonical_less(b, a);
                                }),
                    out.patches.end());
  finalize_report(out);
  return out;
}

struct FingerprintGap {
  double intra_max = 0.0;  // largest distance between two tags of one image
  double inter_min = 0.0;  // smallest distance between tags of different images
  double delta() const { return 0.5 * (intra_max + inter_min); }
  bool separated() const { return intra_max < inter_min; }
};

// Tags the attack would read off isolated patches of the public images, at
// every assigned adapter and target position.
inline FingerprintGap measure_fingerprint_gap(const Network& net, const CraftConfig& cc,
                                              const AttackPlan& plan,
                                              const std::vector<Tensor>& public_images) {
  const auto& mc = net.config();
  const auto lay = plan_layout(cc, mc);
  if (!lay.fingerprint()) throw ConfigError("fingerprint gap requires fingerprint crafting");
  if (public_images.size() < 2) throw ConfigError("fingerprint gap needs two public images");
  const AdapterSet probe = craft_adapters(plan, net.backbone().E_pos, cc, mc, 0);
  std::vector<std::vector<std::vector<double>>> tags(public_images.size());
  for (std::size_t m = 0; m < public_images.size(); ++m) {
    const auto tr = net.run_image(public_images[m], 0, probe);
    for (const auto& as : plan.assignments) {
      const std::size_t t = as.position + 1;
      tags[m].push_back(unnormalize(tr.adapter_input(as.adapter).row(t), net.backbone(), mc, lay,
                                    as.adapter, t)
                            .fingerprint);
    }
  }
  auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(d2);
  };
  FingerprintGap gap;
  gap.inter_min = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < tags.size(); ++m) {
    for (std::size_t a = 0; a < tags[m].size(); ++a) {
      for (std::size_t b = a + 1; b < tags[m].size(); ++b) {
        gap.intra_max = std::max(gap.intra_max, dist(tags[m][a], tags[m][b]));
      }
      for (std::size_t n = m + 1; n < tags.size(); ++n) {
        for (const auto& other : tags[n]) gap.inter_min = std::min(gap.inter_min, dist(tags[m][a], other));
      }
    }
  }
  return gap;
}

struct AssembledImage {
  std::size_t group = 0;
  Tensor image;                // C x H x W, clamped, gray (0) where missing
  std::vector<bool> recovered;  // per position
};

// One image per group of valid patches; unrecovered positions are gray.
inline std::vector<AssembledImage> assemble_images(const ReconstructionReport& rep,
                                                   const ModelConfig& mc) {
  std::vector<AssembledImage> out;
  for (std::size_t g = 0; g < rep.groups.size(); ++g) {
    Tensor patches({mc.num_patches(), mc.patch_dim()}, 0.0);
    AssembledImage img;
    img.group = g;
    img.recovered.assign(mc.num_patches(), false);
    for (const std::size_t k : rep.groups[g]) {
      const auto& p = rep.patches[k];
      if (img.recovered[p.position]) continue;
      img.recovered[p.position] = true;
      for (std::size_t i = 0; i < mc.patch_dim(); ++i) {
        patches(p.position, i) = std::clamp(p.pixels[i], -1.0, 1.0);
      }
    }
    img.image = unpatchify(patches, mc.C, mc.H, mc.W, mc.P);
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace peftleak

#endif  // PEFTLEAK_ATTACK_HPP
