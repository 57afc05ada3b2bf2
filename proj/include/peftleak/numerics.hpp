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
#ifndef PEFTLEAK_NUMERICS_HPP
#define PEFTLEAK_NUMERICS_HPP

// Double-precision primitives shared by every module. Summation order is part
// of the contract: all reductions run left to right over the contracted index,
// so results are bit-reproducible for a fixed build.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "peftleak/errors.hpp"

namespace peftleak {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kSqrt2 = 1.41421356237309504880;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// Dense row-major tensor of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : dims_(std::move(dims)), data_(count(dims_), fill) {}

  Tensor(std::vector<std::size_t> dims, std::vector<double> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != count(dims_)) {
      detail::throw_shape("tensor data length " + std::to_string(data_.size()) +
                          " does not match dims product " +
                          std::to_string(count(dims_)));
    }
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor({rows, cols}, 0.0);
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t rows() const { return dims_.at(0); }
  std::size_t cols() const { return dims_.at(1); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * dims_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * dims_[1] + j];
  }

  std::span<double> row(std::size_t i) {
    return std::span<double>(data_).subspan(i * dims_[1], dims_[1]);
  }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(data_).subspan(i * dims_[1], dims_[1]);
  }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static std::size_t count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           std::multiplies<>());
  }

  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Random numbers. xoshiro256** seeded through splitmix64; both recurrences are
// fully specified integer arithmetic, so a seed produces the same stream on
// every platform. Gaussian variates use the Marsaglia polar method.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  std::uint64_t seed() const { return seed_; }

  // Independent stream keyed by (seed, tag).
  Rng derive(std::uint64_t tag) const {
    std::uint64_t sm = seed_ ^ (tag * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL);
    return Rng(splitmix64(sm));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw DomainError("Rng::below requires n > 0");
    const unsigned __int128 m =
        static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
    return static_cast<std::uint64_t>(m >> 64);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 0.0, v = 0.0, s = 0.0;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  // Laplace(0, 1) by inversion.
  double laplace() {
    double u = 0.0;
    do {
      u = uniform();
    } while (u == 0.0);
    u -= 0.5;
    return u < 0.0 ? std::log1p(2.0 * u) : -std::log1p(-2.0 * u);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::uint64_t s_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

enum class Distribution { gaussian, laplacian };

inline std::string to_string(Distribution d) {
  return d == Distribution::gaussian ? "gaussian" : "laplacian";
}

// i.i.d. samples; `scale` is the standard deviation for the Gaussian and the
// diversity b for the Laplacian (variance 2 b^2).
inline Tensor sample(Distribution dist, double mu, double scale, std::size_t n,
                     Rng& rng) {
  if (!(scale > 0.0)) throw DomainError("sample: scale must be positive");
  std::vector<double> out(n);
  for (auto& v : out) {
    v = mu + scale * (dist == Distribution::gaussian ? rng.normal() : rng.laplace());
  }
  return Tensor::vector(std::move(out));
}

// ---------------------------------------------------------------------------
// Dense linear algebra.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) detail::throw_shape("matmul expects matrices");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    detail::throw_shape("matmul inner dims " + std::to_string(k) + " vs " +
                        std::to_string(b.rows()));
  }
  Tensor out({m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) detail::throw_shape("dot length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Row-wise softmax with max subtraction.
inline void softmax_inplace(std::span<double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) {
    if (std::isnan(v)) throw DomainError("softmax: NaN input");
    mx = std::max(mx, v);
  }
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

inline Tensor softmax_rows(const Tensor& m) {
  if (m.rank() != 2) detail::throw_shape("softmax_rows expects a matrix");
  Tensor out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

// LayerNorm over a single vector with population variance.
struct LayerNormStats {
  double mean = 0.0;
  double rstd = 0.0;  // 1 / sqrt(var + eps)
};

inline LayerNormStats layer_norm_into(std::span<const double> x,
                                      std::span<const double> w,
                                      std::span<const double> b, double eps,
                                      std::span<double> out,
                                      std::span<double> xhat = {}) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  const double rstd = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < d; ++i) {
    const double h = (x[i] - mean) * rstd;
    if (!xhat.empty()) xhat[i] = h;
    out[i] = h * w[i] + b[i];
  }
  return {mean, rstd};
}

inline Tensor layer_norm(const Tensor& x, const Tensor& w, const Tensor& b,
                         double eps) {
  if (x.size() < 2) detail::throw_shape("layer_norm requires D >= 2");
  if (w.size() != x.size() || b.size() != x.size()) {
    detail::throw_shape("layer_norm parameter length mismatch");
  }
  Tensor out(x.dims(), 0.0);
  layer_norm_into(x.data(), w.data(), b.data(), eps, out.data());
  return out;
}

// ---------------------------------------------------------------------------
// Scalar activations and the standard normal law.

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / kSqrt2); }

inline double normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

// Exact GELU x * Phi(x).
inline double gelu(double x) { return x * normal_cdf(x); }

inline double gelu_grad(double x) { return normal_cdf(x) + x * normal_pdf(x); }

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

inline double relu_grad(double x) { return x > 0.0 ? 1.0 : 0.0; }

// Standard normal quantile: Acklam's rational approximation followed by one
// Halley step against erfc. Absolute error well below 1e-9 on [1e-12, 1-1e-12].
inline double standard_normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("quantile: p must lie in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00, 2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;

  // Work in the lower half and reflect; avoids cancellation in 1 - p.
  const bool upper = p > 0.5;
  const double q = upper ? 1.0 - p : p;
  double x = 0.0;
  if (q < p_low) {
    const double t = std::sqrt(-2.0 * std::log(q));
    x = (((((c[0] * t + c[1]) * t + c[2]) * t + c[3]) * t + c[4]) * t + c[5]) /
        ((((d[0] * t + d[1]) * t + d[2]) * t + d[3]) * t + 1.0);
  } else {
    const double t = q - 0.5;
    const double r = t * t;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * t /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / kSqrt2) - q;
  const double u = e * std::sqrt(2.0 * kPi) * std::exp(0.5 * x * x);
  x = x - u / (1.0 + 0.5 * x * u);
  return upper ? -x : x;
}

inline double inverse_normal_cdf(double p, double mu, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("inverse_normal_cdf: sigma must be positive");
  return mu + sigma * standard_normal_quantile(p);
}

}  // namespace peftleak

#endif  // PEFTLEAK_NUMERICS_HPP
