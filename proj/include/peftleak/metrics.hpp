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
#ifndef PEFTLEAK_METRICS_HPP
#define PEFTLEAK_METRICS_HPP

// Scoring of reconstructions against the ground-truth batch. Pixel values
// use the [-1, 1] convention, so the peak for PSNR is 2.

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "peftleak/attack.hpp"
#include "peftleak/model.hpp"
#include "peftleak/stats.hpp"

namespace peftleak {

inline double patch_mse(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) detail::throw_shape("patch_mse lengths");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double patch_mse(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) detail::throw_shape("patch_mse shapes");
  return patch_mse(a.data(), b.data());
}

// +inf for identical inputs; JSON/CSV writers report kPsnrSentinel instead.
inline double psnr(const Tensor& a, const Tensor& b, double peak = 2.0) {
  const double m = patch_mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / m);
}

inline constexpr double kPsnrSentinel = 999.0;

inline double reportable_psnr(double v) { return std::isinf(v) && v > 0 ? kPsnrSentinel : v; }

// Mean SSIM over all window positions (stride 1) and channels, with uniform
// windows and population moments. Rank-2 inputs are single-channel images;
// the window shrinks to the image when the image is smaller.
inline double ssim(const Tensor& a, const Tensor& b, std::size_t window = 8,
                   double data_range = 2.0) {
  if (!a.same_shape(b)) detail::throw_shape("ssim shapes");
  if (a.rank() != 2 && a.rank() != 3) detail::throw_shape("ssim expects H x W or C x H x W");
  if (window == 0) throw DomainError("ssim window must be positive");
  const std::size_t C = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t H = a.dim(a.rank() - 2), W = a.dim(a.rank() - 1);
  const std::size_t wy = std::min(window, H), wx = std::min(window, W);
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  const double n = static_cast<double>(wy * wx);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double* pa = a.data().data() + c * H * W;
    const double* pb = b.data().data() + c * H * W;
    for (std::size_t y0 = 0; y0 + wy <= H; ++y0) {
      for (std::size_t x0 = 0; x0 + wx <= W; ++x0) {
        double ma = 0.0, mb = 0.0;
        for (std::size_t y = y0; y < y0 + wy; ++y) {
          for (std::size_t x = x0; x < x0 + wx; ++x) {
            ma += pa[y * W + x];
            mb += pb[y * W + x];
          }
        }
        ma /= n;
        mb /= n;
        double va = 0.0, vb = 0.0, cov = 0.0;
        for (std::size_t y = y0; y < y0 + wy; ++y) {
          for (std::size_t x = x0; x < x0 + wx; ++x) {
            const double da = pa[y * W + x] - ma, db = pb[y * W + x] - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
          }
        }
        va /= n;
        vb /= n;
        cov /= n;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

// --- matching against ground truth ------------------------------------------

// For ground-truth patch (m, t): the valid recovered patch at t with the
// lowest MSE, or nullopt.
struct PatchMatch {
  std::optional<std::size_t> index;  // into report.patches
  double mse = 0.0;                  // vs best match, or vs gray when unmatched
};

inline std::vector<std::vector<PatchMatch>> match_patches(const ReconstructionReport& rep,
                                                          const Batch& truth,
                                                          const ModelConfig& mc) {
  const std::size_t N = mc.num_patches();
  std::vector<std::vector<PatchMatch>> out(truth.images.size(), std::vector<PatchMatch>(N));
  const std::vector<double> gray(mc.patch_dim(), 0.0);
  for (std::size_t m = 0; m < truth.images.size(); ++m) {
    const Tensor gt = patchify(truth.images[m], mc.P);
    for (std::size_t t = 0; t < N; ++t) {
      auto& pm = out[m][t];
      pm.mse = patch_mse(gt.row(t), gray);
      bool any = false;
      for (std::size_t k = 0; k < rep.patches.size(); ++k) {
        const auto& p = rep.patches[k];
        if (!p.valid || p.position != t) continue;
        std::vector<double> clamped(p.pixels);
        for (auto& v : clamped) v = std::clamp(v, -1.0, 1.0);
        const double e = patch_mse(gt.row(t), clamped);
        if (!any || e < pm.mse) {
          pm.mse = e;
          pm.index = k;
          any = true;
        }
      }
    }
  }
  return out;
}

// Fraction of the N*M ground-truth patches whose best valid match has
// MSE below the threshold.
inline double recovery_rate(const ReconstructionReport& rep, const Batch& truth,
                            const ModelConfig& mc, double threshold_mse = 0.05) {
  const auto matches = match_patches(rep, truth, mc);
  std::size_t hit = 0, total = 0;
  for (const auto& row : matches) {
    for (const auto& pm : row) {
      ++total;
      if (pm.index && pm.mse < threshold_mse) ++hit;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

// Evaluation-side grouping: tags every valid patch with the ground-truth
// image it matches best, then regroups and dedupes the report.
inline void apply_oracle_labels(ReconstructionReport& rep, const Batch& truth,
                                const ModelConfig& mc) {
  std::vector<Tensor> gts;
  for (const auto& img : truth.images) gts.push_back(patchify(img, mc.P));
  for (auto& p : rep.patches) {
    p.oracle_image.reset();
    if (!p.valid) continue;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < gts.size(); ++m) {
      const double e = patch_mse(gts[m].row(p.position), p.pixels);
      if (e < best) {
        best = e;
        p.oracle_image = m;
      }
    }
  }
  rep.group_mode = GroupMode::oracle;
  finalize_report(rep);
}

// --- isolated-bin oracle ------------------------------------------------------

// Patches (m, t) that sit alone in a usable bin of the given round, judged
// from the ground-truth statistic s = E_pos[t] . (E x).
struct IsolatedBins {
  std::set<std::pair<std::size_t, std::size_t>> patches;  // (image, position)
  std::vector<std::size_t> per_position;
  std::size_t count() const { return patches.size(); }
};

inline bool usable_bin(const AttackPlan& plan, std::size_t i, std::size_t j) {
  const std::size_t k = plan.k(i);
  if (j + 1 == k) return true;  // top bin
  return (j + 1) % plan.r != 0;  // both neurons inside one adapter
}

inline IsolatedBins isolated_bin_oracle(const Batch& truth, const FrozenBackbone& bb,
                                        const AttackPlan& plan, const ModelConfig& mc,
                                        const std::vector<std::size_t>& rounds) {
  IsolatedBins out;
  out.per_position.assign(mc.num_patches(), 0);
  const auto s = batch_statistics(truth.images, bb.E, bb.E_pos, mc);
  for (const std::size_t round : rounds) {
    if (round >= plan.rounds) throw ConfigError("oracle: round outside plan");
    for (const std::size_t t : plan.positions) {
      const std::size_t i = plan.index_of_position(t);
      const auto& c = plan.thresholds[round][i];
      // bin index j means (c_j, c_{j+1}); below c_0 is not a bin.
      std::vector<std::vector<std::size_t>> members(c.size());
      for (std::size_t m = 0; m < s.size(); ++m) {
        const auto it = std::upper_bound(c.begin(), c.end(), s[m][t]);
        if (it == c.begin()) continue;
        members[static_cast<std::size_t>(it - c.begin()) - 1].push_back(m);
      }
      for (std::size_t j = 0; j < c.size(); ++j) {
        if (members[j].size() == 1 && usable_bin(plan, i, j)) out.patches.insert({members[j][0], t});
      }
    }
  }
  for (const auto& [m, t] : out.patches) ++out.per_position[t];
  return out;
}

// --- score report ---------------------------------------------------------------

struct ScoreReport {
  std::vector<double> patch_mse;  // per ground-truth patch, image-major
  double mean_mse = 0.0, std_mse = 0.0;
  double mean_ssim = 0.0, std_ssim = 0.0;
  double psnr = 0.0;  // from mean_mse
  double recovery_rate = 0.0;
  double coverage = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size()))};
}

}  // namespace detail

// Per-image SSIM compares each ground-truth image with the image assembled
// from its best matches (gray where unmatched).
inline ScoreReport score(const ReconstructionReport& rep, const Batch& truth,
                         const ModelConfig& mc, double threshold_mse = 0.05) {
  ScoreReport sr;
  const auto matches = match_patches(rep, truth, mc);
  std::vector<double> ssims;
  std::size_t hit = 0;
  for (std::size_t m = 0; m < truth.images.size(); ++m) {
    Tensor rec({mc.num_patches(), mc.patch_dim()}, 0.0);
    for (std::size_t t = 0; t < mc.num_patches(); ++t) {
      const auto& pm = matches[m][t];
      sr.patch_mse.push_back(pm.mse);
      if (!pm.index) continue;
      if (pm.mse < threshold_mse) ++hit;
      const auto& px = rep.patches[*pm.index].pixels;
      for (std::size_t i = 0; i < px.size(); ++i) rec(t, i) = std::clamp(px[i], -1.0, 1.0);
    }
    ssims.push_back(ssim(unpatchify(rec, mc.C, mc.H, mc.W, mc.P), truth.images[m]));
  }
  std::tie(sr.mean_mse, sr.std_mse) = detail::mean_std(sr.patch_mse);
  std::tie(sr.mean_ssim, sr.std_ssim) = detail::mean_std(ssims);
  sr.psnr = sr.mean_mse == 0.0 ? std::numeric_limits<double>::infinity()
                               : 10.0 * std::log10(4.0 / sr.mean_mse);
  sr.recovery_rate =
      sr.patch_mse.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(sr.patch_mse.size());
  sr.coverage = rep.coverage;
  return sr;
}

}  // namespace peftleak

#endif  // PEFTLEAK_METRICS_HPP
