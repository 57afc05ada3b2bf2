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
#ifndef PEFTLEAK_MODEL_HPP
#define PEFTLEAK_MODEL_HPP

// Vision transformer with Houlsby adapters. Encoder topology:
//
//   u -> LN1 -> MSA -> adapter(2e) -> (+u) = e -> LN2 -> MLP -> adapter(2e+1) -> (+e)
//
// Only adapters are trainable. The forward pass records everything the
// hand-written reverse pass in grad.hpp needs.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "peftleak/errors.hpp"
#include "peftleak/numerics.hpp"

namespace peftleak {

enum class Activation { relu, gelu };
enum class HeadMode { class_token, mean_pool };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }
inline std::string to_string(HeadMode h) {
  return h == HeadMode::mean_pool ? "mean_pool" : "class_token";
}

struct ModelConfig {
  std::size_t D = 96;  // embedding dim
  std::size_t L = 4;   // attention heads
  std::size_t num_encoders = 6;
  std::size_t P = 4;  // patch side
  std::size_t C = 3;
  std::size_t H = 8;
  std::size_t W = 8;
  std::size_t r = 8;  // adapter bottleneck
  std::size_t num_classes = 10;
  Activation adapter_activation = Activation::relu;
  HeadMode head_mode = HeadMode::mean_pool;
  double ln_eps = 1e-6;

  std::size_t head_dim() const { return D / L; }
  std::size_t num_patches() const { return (H / P) * (W / P); }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return P * P * C; }
  std::size_t num_adapters() const { return 2 * num_encoders; }

  void validate() const {
    if (L == 0 || D % L != 0) throw ConfigError("model: D must be divisible by L");
    if (P == 0 || H % P != 0 || W % P != 0) {
      throw ConfigError("model: H and W must be divisible by P");
    }
    if (r < 2) throw ConfigError("model: adapter bottleneck r must be >= 2");
    if (num_patches() < 1) throw ConfigError("model: need at least one patch");
    if (D < 2) throw ConfigError("model: D must be >= 2");
    if (num_encoders < 1) throw ConfigError("model: need at least one encoder");
    if (num_classes < 2) throw ConfigError("model: need at least two classes");
    if (C < 1) throw ConfigError("model: need at least one channel");
    if (!(ln_eps >= 0.0)) throw ConfigError("model: ln_eps must be non-negative");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AttentionHead {
  Tensor W_Q, b_Q;  // D_h x D_h, D_h   (acts on the head's own slice)
  Tensor W_K, b_K;  // D_h x D_h, D_h
  Tensor W_V, b_V;  // D_h x D, D_h     (acts on the full token)
};

struct EncoderParams {
  Tensor ln1_w, ln1_b;
  std::vector<AttentionHead> heads;
  Tensor W_MSA;  // D x D
  Tensor ln2_w, ln2_b;
  Tensor W1, b1;  // 4D x D, 4D
  Tensor W2, b2;  // D x 4D, D
};

struct FrozenBackbone {
  Tensor E;            // D x P^2 C
  Tensor class_token;  // D
  Tensor E_pos;        // (N+1) x D
  std::vector<EncoderParams> encoders;
  Tensor lnf_w, lnf_b;
  Tensor W_cls, b_cls;  // K x D, K

  void validate(const ModelConfig& mc) const {
    auto expect = [](const Tensor& t, std::vector<std::size_t> dims, const char* name) {
      if (t.dims() != dims) detail::throw_shape(std::string("backbone field ") + name);
    };
    const std::size_t D = mc.D, Dh = mc.head_dim();
    expect(E, {D, mc.patch_dim()}, "E");
    expect(class_token, {D}, "class_token");
    expect(E_pos, {mc.tokens(), D}, "E_pos");
    if (encoders.size() != mc.num_encoders) detail::throw_shape("backbone encoder count");
    for (const auto& enc : encoders) {
      expect(enc.ln1_w, {D}, "ln1_w");
      expect(enc.ln1_b, {D}, "ln1_b");
      expect(enc.ln2_w, {D}, "ln2_w");
      expect(enc.ln2_b, {D}, "ln2_b");
      if (enc.heads.size() != mc.L) detail::throw_shape("backbone head count");
      for (const auto& h : enc.heads) {
        expect(h.W_Q, {Dh, Dh}, "W_Q");
        expect(h.W_K, {Dh, Dh}, "W_K");
        expect(h.W_V, {Dh, D}, "W_V");
        expect(h.b_Q, {Dh}, "b_Q");
        expect(h.b_K, {Dh}, "b_K");
        expect(h.b_V, {Dh}, "b_V");
      }
      expect(enc.W_MSA, {D, D}, "W_MSA");
      expect(enc.W1, {4 * D, D}, "W1");
      expect(enc.b1, {4 * D}, "b1");
      expect(enc.W2, {D, 4 * D}, "W2");
      expect(enc.b2, {D}, "b2");
    }
    expect(lnf_w, {D}, "lnf_w");
    expect(lnf_b, {D}, "lnf_b");
    expect(W_cls, {mc.num_classes, D}, "W_cls");
    expect(b_cls, {mc.num_classes}, "b_cls");
  }
};

struct AdapterParams {
  Tensor W_down, b_down;  // r x D, r
  Tensor W_up, b_up;      // D x r, D

  static AdapterParams zeros(std::size_t D, std::size_t r) {
    return {Tensor({r, D}, 0.0), Tensor({r}, 0.0), Tensor({D, r}, 0.0), Tensor({D}, 0.0)};
  }
  std::size_t parameter_count() const {
    return W_down.size() + b_down.size() + W_up.size() + b_up.size();
  }
  friend bool operator==(const AdapterParams&, const AdapterParams&) = default;
};

// Flattening order used by every consumer (defenses, finite differences,
// serialization): per adapter W_down, b_down, W_up, b_up, adapters in order.
template <typename Derived>
struct AdapterCollection {
  std::vector<AdapterParams> adapters;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& a : adapters) n += a.parameter_count();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& a : adapters) {
      for (const Tensor* t : {&a.W_down, &a.b_down, &a.W_up, &a.b_up}) {
        out.insert(out.end(), t->values().begin(), t->values().end());
      }
    }
    return out;
  }

  void assign(std::span<const double> flat) {
    if (flat.size() != parameter_count()) detail::throw_shape("adapter flat length");
    std::size_t off = 0;
    for (auto& a : adapters) {
      for (Tensor* t : {&a.W_down, &a.b_down, &a.W_up, &a.b_up}) {
        std::copy(flat.begin() + off, flat.begin() + off + t->size(), t->values().begin());
        off += t->size();
      }
    }
  }

  // Pointer to the k-th flattened scalar.
  double& flat_ref(std::size_t k) {
    for (auto& a : adapters) {
      for (Tensor* t : {&a.W_down, &a.b_down, &a.W_up, &a.b_up}) {
        if (k < t->size()) return (*t)[k];
        k -= t->size();
      }
    }
    throw DomainError("adapter flat index out of range");
  }

  bool same_layout(const AdapterCollection& other) const {
    if (adapters.size() != other.adapters.size()) return false;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      const auto& x = adapters[i];
      const auto& y = other.adapters[i];
      if (!x.W_down.same_shape(y.W_down) || !x.b_down.same_shape(y.b_down) ||
          !x.W_up.same_shape(y.W_up) || !x.b_up.same_shape(y.b_up)) {
        return false;
      }
    }
    return true;
  }

  static Derived zeros(const ModelConfig& mc) {
    Derived out;
    out.adapters.assign(mc.num_adapters(), AdapterParams::zeros(mc.D, mc.r));
    return out;
  }

  friend bool operator==(const AdapterCollection&, const AdapterCollection&) = default;
};

struct AdapterSet : AdapterCollection<AdapterSet> {
  void validate(const ModelConfig& mc) const {
    if (adapters.size() != mc.num_adapters()) detail::throw_shape("adapter count");
    for (const auto& a : adapters) {
      if (a.W_down.dims() != std::vector<std::size_t>{mc.r, mc.D} ||
          a.b_down.dims() != std::vector<std::size_t>{mc.r} ||
          a.W_up.dims() != std::vector<std::size_t>{mc.D, mc.r} ||
          a.b_up.dims() != std::vector<std::size_t>{mc.D}) {
        detail::throw_shape("adapter parameter shapes");
      }
    }
  }
};

// Same layout as AdapterSet, holding d(loss)/d(parameter).
struct AdapterGradients : AdapterCollection<AdapterGradients> {};

struct Batch {
  std::vector<Tensor> images;  // each C x H x W, pixels in [-1, 1]
  std::vector<std::size_t> labels;

  std::size_t size() const { return images.size(); }

  void validate(const ModelConfig& mc) const {
    if (images.empty()) throw ConfigError("batch must contain at least one image");
    if (labels.size() != images.size()) detail::throw_shape("batch labels vs images");
    for (std::size_t m = 0; m < images.size(); ++m) {
      if (images[m].dims() != std::vector<std::size_t>{mc.C, mc.H, mc.W}) {
        detail::throw_shape("batch image dims");
      }
      if (labels[m] >= mc.num_classes) throw ConfigError("batch label out of range");
      for (double v : images[m].values()) {
        if (!(v >= -1.0 && v <= 1.0)) throw DomainError("batch pixel outside [-1, 1]");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Patches. Patch order is row-major over the patch grid, pixels within a patch
// are flattened channel-major: index = c * P^2 + py * P + px.

inline Tensor patchify(const Tensor& image, std::size_t P) {
  if (image.rank() != 3) detail::throw_shape("patchify expects C x H x W");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (P == 0 || H % P != 0 || W % P != 0) detail::throw_shape("patchify: H, W not divisible by P");
  const std::size_t gw = W / P, n = (H / P) * gw, pd = P * P * C;
  Tensor out({n, pd}, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t y0 = (k / gw) * P, x0 = (k % gw) * P;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t py = 0; py < P; ++py) {
        for (std::size_t px = 0; px < P; ++px) {
          out(k, c * P * P + py * P + px) = image[(c * H + y0 + py) * W + x0 + px];
        }
      }
    }
  }
  return out;
}

inline Tensor unpatchify(const Tensor& patches, std::size_t C, std::size_t H,
                         std::size_t W, std::size_t P) {
  if (P == 0 || H % P != 0 || W % P != 0) detail::throw_shape("unpatchify: dims");
  const std::size_t gw = W / P, n = (H / P) * gw;
  if (patches.dims() != std::vector<std::size_t>{n, P * P * C}) {
    detail::throw_shape("unpatchify: patch tensor dims");
  }
  Tensor image({C, H, W}, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t y0 = (k / gw) * P, x0 = (k % gw) * P;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t py = 0; py < P; ++py) {
        for (std::size_t px = 0; px < P; ++px) {
          image[(c * H + y0 + py) * W + x0 + px] = patches(k, c * P * P + py * P + px);
        }
      }
    }
  }
  return image;
}

// y = E x + E_pos_n
inline Tensor embed(std::span<const double> patch, const Tensor& E,
                    std::span<const double> pos) {
  if (E.rank() != 2 || E.cols() != patch.size() || E.rows() != pos.size()) {
    detail::throw_shape("embed: E / patch / position dims");
  }
  Tensor y({E.rows()}, 0.0);
  for (std::size_t i = 0; i < E.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < E.cols(); ++k) acc += E(i, k) * patch[k];
    y[i] = acc + pos[i];
  }
  return y;
}

// ---------------------------------------------------------------------------
// Compressed rows of a frozen weight matrix. Skipping exact zeros leaves the
// left-to-right partial sums unchanged, so results equal the dense product.

struct SparseRows {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint32_t> ptr, idx;
  std::vector<double> val;

  static SparseRows from_dense(const Tensor& w) {
    SparseRows s;
    s.rows = w.rows();
    s.cols = w.cols();
    s.ptr.reserve(s.rows + 1);
    s.ptr.push_back(0);
    for (std::size_t i = 0; i < s.rows; ++i) {
      for (std::size_t k = 0; k < s.cols; ++k) {
        const double v = w(i, k);
        if (v != 0.0) {
          s.idx.push_back(static_cast<std::uint32_t>(k));
          s.val.push_back(v);
        }
      }
      s.ptr.push_back(static_cast<std::uint32_t>(s.idx.size()));
    }
    return s;
  }

  // y = W x + bias
  void apply(const double* x, const double* bias, double* y) const {
    for (std::size_t i = 0; i < rows; ++i) {
      double acc = 0.0;
      for (std::uint32_t p = ptr[i]; p < ptr[i + 1]; ++p) acc += val[p] * x[idx[p]];
      y[i] = bias ? acc + bias[i] : acc;
    }
  }

  // dx += W^T dy
  void apply_transpose_add(const double* dy, double* dx) const {
    for (std::size_t i = 0; i < rows; ++i) {
      const double g = dy[i];
      if (g == 0.0) continue;
      for (std::uint32_t p = ptr[i]; p < ptr[i + 1]; ++p) dx[idx[p]] += val[p] * g;
    }
  }
};

// ---------------------------------------------------------------------------
// Forward traces.

struct LnTrace {
  Tensor xhat;               // T x D
  std::vector<double> rstd;  // T
};

struct HeadTrace {
  Tensor q, k, v;  // T x D_h
  Tensor attn;     // T x T, rows are queries
};

struct AdapterTrace {
  Tensor preact;  // T x r
  Tensor act;     // T x r
};

struct EncoderTrace {
  Tensor input;  // u
  LnTrace ln1;
  std::vector<HeadTrace> heads;
  Tensor msa_out;  // input of adapter 2e
  AdapterTrace ad1;
  Tensor e;  // after first residual
  LnTrace ln2;
  Tensor h1;  // MLP pre-activation, T x 4D
  Tensor f;   // MLP output, input of adapter 2e+1
  AdapterTrace ad2;
  Tensor output;
};

struct ImageTrace {
  std::size_t label = 0;
  Tensor tokens0;  // y: embedded tokens entering encoder 0
  std::vector<EncoderTrace> encoders;
  LnTrace lnf;
  Tensor final_tokens;
  std::vector<double> pooled;
  std::vector<double> logits;
  std::vector<double> probs;
  double loss = 0.0;

  const Tensor& adapter_input(std::size_t a) const {
    const auto& enc = encoders.at(a / 2);
    return a % 2 == 0 ? enc.msa_out : enc.f;
  }
  const AdapterTrace& adapter(std::size_t a) const {
    const auto& enc = encoders.at(a / 2);
    return a % 2 == 0 ? enc.ad1 : enc.ad2;
  }
};

struct ForwardCache {
  std::vector<ImageTrace> images;
  double loss = 0.0;
  std::uint64_t parameter_fingerprint = 0;  // ties the cache to its adapters
};

struct ForwardResult {
  Tensor logits;  // M x K
  double loss = 0.0;
  ForwardCache cache;
};

inline std::uint64_t fingerprint_adapters(const AdapterSet& adapters) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : adapters.flatten()) {
    std::uint64_t bits = 0;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(v));
    h ^= bits;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline double activate(Activation a, double x) { return a == Activation::relu ? relu(x) : gelu(x); }

inline double activate_grad(Activation a, double x) {
  return a == Activation::relu ? relu_grad(x) : gelu_grad(x);
}

// GELU with a saturation shortcut: for x > 9, Phi(x) rounds to exactly 1 in
// double precision, so the shortcut is bit-identical to x * Phi(x).
inline double gelu_fast(double x) { return x > 9.0 ? x : gelu(x); }
inline double gelu_grad_fast(double x) { return x > 9.0 ? 1.0 : gelu_grad(x); }

// Adapter applied token-wise: out = in + W_up act(W_down in + b_down) + b_up.
inline void adapter_token(const AdapterParams& ad, Activation act_kind, const double* in,
                          double* preact, double* act, double* out) {
  const std::size_t r = ad.W_down.rows(), D = ad.W_down.cols();
  const double* wd = ad.W_down.values().data();
  for (std::size_t j = 0; j < r; ++j) {
    double acc = 0.0;
    const double* row = wd + j * D;
    for (std::size_t i = 0; i < D; ++i) acc += row[i] * in[i];
    preact[j] = acc + ad.b_down[j];
    act[j] = activate(act_kind, preact[j]);
  }
  const double* wu = ad.W_up.values().data();
  for (std::size_t i = 0; i < D; ++i) {
    double acc = 0.0;
    const double* row = wu + i * r;
    for (std::size_t j = 0; j < r; ++j) acc += row[j] * act[j];
    out[i] = in[i] + (acc + ad.b_up[i]);
  }
}

inline Tensor adapter_forward(const Tensor& tokens, const AdapterParams& ad, Activation act) {
  if (tokens.rank() != 2 || tokens.cols() != ad.W_down.cols()) {
    detail::throw_shape("adapter_forward: token width");
  }
  const std::size_t r = ad.W_down.rows();
  Tensor out(tokens.dims(), 0.0);
  std::vector<double> pre(r), a(r);
  for (std::size_t t = 0; t < tokens.rows(); ++t) {
    adapter_token(ad, act, tokens.row(t).data(), pre.data(), a.data(), out.row(t).data());
  }
  return out;
}

// Frozen encoder with its weights compressed for repeated evaluation.
struct CompiledEncoder {
  struct Head {
    SparseRows W_Q, W_K, W_V;
  };
  std::vector<Head> heads;
  SparseRows W_MSA, W1, W2;

  static CompiledEncoder compile(const EncoderParams& p) {
    CompiledEncoder c;
    for (const auto& h : p.heads) {
      c.heads.push_back({SparseRows::from_dense(h.W_Q), SparseRows::from_dense(h.W_K),
                         SparseRows::from_dense(h.W_V)});
    }
    c.W_MSA = SparseRows::from_dense(p.W_MSA);
    c.W1 = SparseRows::from_dense(p.W1);
    c.W2 = SparseRows::from_dense(p.W2);
    return c;
  }
};

namespace detail {

// Multi-head self-attention over T tokens (rows of z). Head h reads its own
// D_h slice for queries and keys and the full token for values.
inline void msa_apply(const EncoderParams& p, const CompiledEncoder& c, const Tensor& z,
                      Tensor& out, std::vector<HeadTrace>* trace) {
  const std::size_t T = z.rows(), D = z.cols(), L = p.heads.size(), Dh = D / L;
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
  Tensor concat({T, D}, 0.0);
  if (trace) trace->assign(L, HeadTrace{});
  Tensor q({T, Dh}), k({T, Dh}), v({T, Dh}), attn({T, T});
  for (std::size_t h = 0; h < L; ++h) {
    const auto& hp = p.heads[h];
    const auto& hc = c.heads[h];
    for (std::size_t t = 0; t < T; ++t) {
      const double* slice = z.row(t).data() + h * Dh;
      hc.W_Q.apply(slice, hp.b_Q.values().data(), q.row(t).data());
      hc.W_K.apply(slice, hp.b_K.values().data(), k.row(t).data());
      hc.W_V.apply(z.row(t).data(), hp.b_V.values().data(), v.row(t).data());
    }
    for (std::size_t t = 0; t < T; ++t) {
      auto row = attn.row(t);
      for (std::size_t n = 0; n < T; ++n) {
        double acc = 0.0;
        for (std::size_t i = 0; i < Dh; ++i) acc += q(t, i) * k(n, i);
        row[n] = acc * scale;
      }
      softmax_inplace(row);
      double* o = concat.row(t).data() + h * Dh;
      for (std::size_t i = 0; i < Dh; ++i) {
        double acc = 0.0;
        for (std::size_t n = 0; n < T; ++n) acc += row[n] * v(n, i);
        o[i] = acc;
      }
    }
    if (trace) (*trace)[h] = HeadTrace{q, k, v, attn};
  }
  out = Tensor({T, D}, 0.0);
  for (std::size_t t = 0; t < T; ++t) c.W_MSA.apply(concat.row(t).data(), nullptr, out.row(t).data());
}

inline void ln_rows(const Tensor& x, const Tensor& w, const Tensor& b, double eps, Tensor& out,
                    LnTrace* trace) {
  const std::size_t T = x.rows(), D = x.cols();
  out = Tensor({T, D}, 0.0);
  if (trace) {
    trace->xhat = Tensor({T, D}, 0.0);
    trace->rstd.assign(T, 0.0);
  }
  for (std::size_t t = 0; t < T; ++t) {
    auto st = layer_norm_into(x.row(t), w.data(), b.data(), eps, out.row(t),
                              trace ? trace->xhat.row(t) : std::span<double>{});
    if (trace) trace->rstd[t] = st.rstd;
  }
}

}  // namespace detail

inline Tensor msa_forward(const Tensor& tokens, const EncoderParams& params) {
  if (tokens.rank() != 2 || params.heads.empty() || tokens.cols() % params.heads.size() != 0) {
    detail::throw_shape("msa_forward: token width vs heads");
  }
  const auto compiled = CompiledEncoder::compile(params);
  Tensor out;
  detail::msa_apply(params, compiled, tokens, out, nullptr);
  return out;
}

// Attention matrices of one head for a token matrix, for inspection.
inline std::vector<Tensor> attention_maps(const Tensor& tokens, const EncoderParams& params) {
  const auto compiled = CompiledEncoder::compile(params);
  std::vector<HeadTrace> trace;
  Tensor out;
  detail::msa_apply(params, compiled, tokens, out, &trace);
  std::vector<Tensor> maps;
  for (auto& h : trace) maps.push_back(std::move(h.attn));
  return maps;
}

class Network {
 public:
  Network(FrozenBackbone backbone, ModelConfig config)
      : backbone_(std::move(backbone)), config_(config) {
    config_.validate();
    backbone_.validate(config_);
    embed_ = SparseRows::from_dense(backbone_.E);
    for (const auto& enc : backbone_.encoders) encoders_.push_back(CompiledEncoder::compile(enc));
  }

  const FrozenBackbone& backbone() const { return backbone_; }
  const ModelConfig& config() const { return config_; }
  const CompiledEncoder& compiled(std::size_t e) const { return encoders_.at(e); }

  // Tokens entering encoder 0: class token plus embedded patches.
  Tensor embed_image(const Tensor& image) const {
    const auto& mc = config_;
    const Tensor patches = patchify(image, mc.P);
    const std::size_t T = mc.tokens(), D = mc.D;
    Tensor y({T, D}, 0.0);
    for (std::size_t i = 0; i < D; ++i) y(0, i) = backbone_.class_token[i] + backbone_.E_pos(0, i);
    for (std::size_t n = 1; n < T; ++n) {
      embed_.apply(patches.row(n - 1).data(), backbone_.E_pos.row(n).data(), y.row(n).data());
    }
    return y;
  }

  // Full forward pass of one image. With keep_trace=false only the loss and
  // logits are filled in.
  ImageTrace run_image(const Tensor& image, std::size_t label, const AdapterSet& adapters,
                       bool keep_trace = true) const {
    ImageTrace tr;
    tr.label = label;
    Tensor tokens = embed_image(image);
    if (keep_trace) tr.tokens0 = tokens;
    tr.encoders.resize(keep_trace ? config_.num_encoders : 0);
    run_from(tokens, 0, adapters, tr, keep_trace);
    return tr;
  }

  // Resume a recorded forward pass at adapter `a` with different adapters.
  // Everything upstream of adapter `a` is taken from `base`, which must have
  // been recorded with adapters identical to `adapters` before index `a`.
  // When `sign_flip` is given it is set if any adapter pre-activation from
  // index `a` on changed sign relative to `base` (a relu kink was crossed).
  double loss_from_adapter(const ImageTrace& base, std::size_t a, const AdapterSet& adapters,
                           bool* sign_flip = nullptr) const {
    const std::size_t e = a / 2;
    const auto& enc = base.encoders.at(e);
    Probe probe{sign_flip ? &base : nullptr, false};
    Probe* pp = sign_flip ? &probe : nullptr;
    ImageTrace scratch;
    scratch.label = base.label;
    Tensor tokens;
    if (a % 2 == 0) {
      Tensor b = adapter_rows(enc.msa_out, adapters, a, nullptr, pp);
      Tensor ev = add(b, enc.input);
      tokens = second_half(e, ev, adapters, nullptr, pp);
    } else {
      Tensor g = adapter_rows(enc.f, adapters, a, nullptr, pp);
      tokens = add(g, enc.e);
    }
    run_from(tokens, e + 1, adapters, scratch, false, pp);
    if (sign_flip) *sign_flip = probe.flipped;
    return scratch.loss;
  }

  ForwardResult forward(const Batch& batch, const AdapterSet& adapters) const {
    batch.validate(config_);
    adapters.validate(config_);
    ForwardResult res;
    const std::size_t M = batch.size(), K = config_.num_classes;
    res.logits = Tensor({M, K}, 0.0);
    res.cache.images.reserve(M);
    double total = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      res.cache.images.push_back(run_image(batch.images[m], batch.labels[m], adapters));
      const auto& tr = res.cache.images.back();
      for (std::size_t k = 0; k < K; ++k) res.logits(m, k) = tr.logits[k];
      total += tr.loss;
    }
    res.loss = total / static_cast<double>(M);
    res.cache.loss = res.loss;
    res.cache.parameter_fingerprint = fingerprint_adapters(adapters);
    return res;
  }

  double loss(const Batch& batch, const AdapterSet& adapters) const {
    double total = 0.0;
    for (std::size_t m = 0; m < batch.size(); ++m) {
      total += run_image(batch.images[m], batch.labels[m], adapters, false).loss;
    }
    return total / static_cast<double>(batch.size());
  }

 private:
  static Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
  }

  struct Probe {
    const ImageTrace* ref;
    bool flipped;
  };

  Tensor adapter_rows(const Tensor& in, const AdapterSet& adapters, std::size_t a,
                      AdapterTrace* trace, Probe* probe) const {
    const AdapterParams& ad = adapters.adapters[a];
    const std::size_t T = in.rows(), r = ad.W_down.rows();
    Tensor out(in.dims(), 0.0);
    Tensor pre({T, r}, 0.0), act({T, r}, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      adapter_token(ad, config_.adapter_activation, in.row(t).data(), pre.row(t).data(),
                    act.row(t).data(), out.row(t).data());
    }
    if (probe && !probe->flipped) {
      const Tensor& ref = probe->ref->adapter(a).preact;
      for (std::size_t i = 0; i < pre.size(); ++i) {
        if ((pre[i] > 0.0) != (ref[i] > 0.0)) {
          probe->flipped = true;
          break;
        }
      }
    }
    if (trace) {
      trace->preact = std::move(pre);
      trace->act = std::move(act);
    }
    return out;
  }

  // LN2 -> MLP -> adapter(2e+1) -> + e
  Tensor second_half(std::size_t e, const Tensor& ev, const AdapterSet& adapters,
                     EncoderTrace* tr, Probe* probe) const {
    const auto& p = backbone_.encoders[e];
    const auto& c = encoders_[e];
    const std::size_t T = ev.rows(), D = config_.D;
    Tensor z2;
    detail::ln_rows(ev, p.ln2_w, p.ln2_b, config_.ln_eps, z2, tr ? &tr->ln2 : nullptr);
    Tensor h1({T, 4 * D}, 0.0), f({T, D}, 0.0);
    std::vector<double> a1(4 * D);
    for (std::size_t t = 0; t < T; ++t) {
      c.W1.apply(z2.row(t).data(), p.b1.values().data(), h1.row(t).data());
      for (std::size_t i = 0; i < 4 * D; ++i) a1[i] = gelu_fast(h1(t, i));
      c.W2.apply(a1.data(), p.b2.values().data(), f.row(t).data());
    }
    Tensor g = adapter_rows(f, adapters, 2 * e + 1, tr ? &tr->ad2 : nullptr, probe);
    Tensor out = add(g, ev);
    if (tr) {
      tr->h1 = std::move(h1);
      tr->f = std::move(f);
    }
    return out;
  }

  void run_from(Tensor tokens, std::size_t first_encoder, const AdapterSet& adapters,
                ImageTrace& tr, bool keep, Probe* probe = nullptr) const {
    for (std::size_t e = first_encoder; e < config_.num_encoders; ++e) {
      const auto& p = backbone_.encoders[e];
      EncoderTrace* et = keep ? &tr.encoders[e] : nullptr;
      Tensor z1, msa;
      detail::ln_rows(tokens, p.ln1_w, p.ln1_b, config_.ln_eps, z1, et ? &et->ln1 : nullptr);
      detail::msa_apply(p, encoders_[e], z1, msa, et ? &et->heads : nullptr);
      Tensor b = adapter_rows(msa, adapters, 2 * e, et ? &et->ad1 : nullptr, probe);
      Tensor ev = add(b, tokens);
      Tensor out = second_half(e, ev, adapters, et, probe);
      if (et) {
        et->input = std::move(tokens);
        et->msa_out = std::move(msa);
        et->e = std::move(ev);
        et->output = out;
      }
      tokens = std::move(out);
    }
    head(tokens, tr, keep);
  }

  void head(const Tensor& tokens, ImageTrace& tr, bool keep) const {
    const auto& mc = config_;
    const std::size_t T = tokens.rows(), D = mc.D, K = mc.num_classes;
    Tensor fin;
    detail::ln_rows(tokens, backbone_.lnf_w, backbone_.lnf_b, mc.ln_eps, fin,
                    keep ? &tr.lnf : nullptr);
    std::vector<double> pooled(D, 0.0);
    if (mc.head_mode == HeadMode::mean_pool) {
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < D; ++i) pooled[i] += fin(t, i);
      }
      for (auto& v : pooled) v /= static_cast<double>(T);
    } else {
      for (std::size_t i = 0; i < D; ++i) pooled[i] = fin(0, i);
    }
    std::vector<double> logits(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < D; ++i) acc += backbone_.W_cls(k, i) * pooled[i];
      logits[k] = acc + backbone_.b_cls[k];
    }
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    std::vector<double> probs(K);
    for (std::size_t k = 0; k < K; ++k) {
      probs[k] = std::exp(logits[k] - mx);
      sum += probs[k];
    }
    for (auto& p : probs) p /= sum;
    tr.loss = mx + std::log(sum) - logits[tr.label];
    tr.logits = std::move(logits);
    if (keep) {
      tr.final_tokens = std::move(fin);
      tr.pooled = std::move(pooled);
      tr.probs = std::move(probs);
    }
  }

  FrozenBackbone backbone_;
  ModelConfig config_;
  SparseRows embed_;
  std::vector<CompiledEncoder> encoders_;
};

inline ForwardResult forward(const Batch& batch, const FrozenBackbone& backbone,
                             const AdapterSet& adapters, const ModelConfig& config) {
  return Network(backbone, config).forward(batch, adapters);
}

// Generic small random backbone for tests and gradient checks.
inline FrozenBackbone random_backbone(const ModelConfig& mc, Rng& rng, double scale = 0.3) {
  mc.validate();
  const std::size_t D = mc.D, Dh = mc.head_dim();
  auto rnd = [&](std::vector<std::size_t> dims, double s) {
    Tensor t(std::move(dims), 0.0);
    for (auto& v : t.values()) v = s * rng.normal();
    return t;
  };
  auto ones_jitter = [&](std::size_t n) {
    Tensor t({n}, 0.0);
    for (auto& v : t.values()) v = 1.0 + 0.1 * rng.normal();
    return t;
  };
  FrozenBackbone b;
  b.E = rnd({D, mc.patch_dim()}, scale);
  b.class_token = rnd({D}, scale);
  b.E_pos = rnd({mc.tokens(), D}, 1.0);
  const double sd = 1.0 / std::sqrt(static_cast<double>(D));
  for (std::size_t e = 0; e < mc.num_encoders; ++e) {
    EncoderParams p;
    p.ln1_w = ones_jitter(D);
    p.ln1_b = rnd({D}, 0.1);
    for (std::size_t h = 0; h < mc.L; ++h) {
      p.heads.push_back({rnd({Dh, Dh}, 1.0 / std::sqrt(static_cast<double>(Dh))), rnd({Dh}, 0.1),
                         rnd({Dh, Dh}, 1.0 / std::sqrt(static_cast<double>(Dh))), rnd({Dh}, 0.1),
                         rnd({Dh, D}, sd), rnd({Dh}, 0.1)});
    }
    p.W_MSA = rnd({D, D}, sd);
    p.ln2_w = ones_jitter(D);
    p.ln2_b = rnd({D}, 0.1);
    p.W1 = rnd({4 * D, D}, sd);
    p.b1 = rnd({4 * D}, 0.1);
    p.W2 = rnd({D, 4 * D}, 0.5 * sd);
    p.b2 = rnd({D}, 0.1);
    b.encoders.push_back(std::move(p));
  }
  b.lnf_w = ones_jitter(D);
  b.lnf_b = rnd({D}, 0.1);
  b.W_cls = rnd({mc.num_classes, D}, sd);
  b.b_cls = rnd({mc.num_classes}, 0.1);
  return b;
}

inline AdapterSet random_adapters(const ModelConfig& mc, Rng& rng, double scale = 0.1) {
  AdapterSet s = AdapterSet::zeros(mc);
  for (auto& a : s.adapters) {
    for (Tensor* t : {&a.W_down, &a.b_down, &a.W_up, &a.b_up}) {
      for (auto& v : t->values()) v = scale * rng.normal();
    }
  }
  return s;
}

}  // namespace peftleak

#endif  // PEFTLEAK_MODEL_HPP
