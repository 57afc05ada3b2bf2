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
#ifndef PEFTLEAK_STATS_HPP
#define PEFTLEAK_STATS_HPP

// Moment fit of the per-position patch statistic s = E_pos[t] . (E x), from a
// public image set. Positions are 0-based patch indices; the matching position
// encoding row is t + 1 (row 0 belongs to the class token).

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "peftleak/model.hpp"

namespace peftleak {

struct PatchStats {
  std::vector<double> mu;
  std::vector<double> sigma;
  std::size_t count = 0;

  std::size_t positions() const { return mu.size(); }
};

inline double patch_statistic(std::span<const double> patch, const Tensor& E,
                              std::span<const double> pos) {
  const std::size_t D = E.rows(), K = E.cols();
  if (patch.size() != K || pos.size() != D) detail::throw_shape("patch_statistic dims");
  double s = 0.0;
  for (std::size_t i = 0; i < D; ++i) {
    double xm = 0.0;
    for (std::size_t k = 0; k < K; ++k) xm += E(i, k) * patch[k];
    s += pos[i] * xm;
  }
  return s;
}

// Statistic of every patch of every image: result[m][t].
inline std::vector<std::vector<double>> batch_statistics(const std::vector<Tensor>& images,
                                                         const Tensor& E, const Tensor& E_pos,
                                                         const ModelConfig& mc) {
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    const Tensor patches = patchify(img, mc.P);
    std::vector<double> row(patches.rows());
    for (std::size_t t = 0; t < patches.rows(); ++t) {
      row[t] = patch_statistic(patches.row(t), E, E_pos.row(t + 1));
    }
    out.push_back(std::move(row));
  }
  return out;
}

inline PatchStats estimate_patch_stats(const std::vector<Tensor>& public_images, const Tensor& E,
                                       const Tensor& E_pos, const ModelConfig& mc) {
  if (public_images.size() < 2) throw ConfigError("patch stats need at least two public images");
  if (E_pos.rows() != mc.tokens()) detail::throw_shape("patch stats: E_pos rows");
  const auto s = batch_statistics(public_images, E, E_pos, mc);
  const std::size_t N = mc.num_patches(), M = s.size();
  PatchStats st;
  st.count = M;
  st.mu.assign(N, 0.0);
  st.sigma.assign(N, 0.0);
  for (std::size_t t = 0; t < N; ++t) {
    double mean = 0.0;
    for (std::size_t m = 0; m < M; ++m) mean += s[m][t];
    mean /= static_cast<double>(M);
    double ss = 0.0;
    for (std::size_t m = 0; m < M; ++m) ss += (s[m][t] - mean) * (s[m][t] - mean);
    st.mu[t] = mean;
    st.sigma[t] = std::sqrt(ss / static_cast<double>(M - 1));
    if (!(st.sigma[t] > 0.0)) {
      throw DegenerateStatsError("patch statistic at position " + std::to_string(t) +
                                 " is constant over the public images");
    }
  }
  return st;
}

}  // namespace peftleak

#endif  // PEFTLEAK_STATS_HPP
