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
#ifndef PEFTLEAK_GRAD_HPP
#define PEFTLEAK_GRAD_HPP

// Reverse pass for adapter parameters. Activation gradients flow through the
// frozen layers; only adapter parameter gradients are accumulated.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "peftleak/model.hpp"
#include "peftleak/parallel.hpp"

namespace peftleak {

namespace detail {

// dx = LN'(x)^T dy, given the recorded normalized input and 1/std.
inline void ln_backward(const Tensor& dy, const Tensor& w, const LnTrace& tr, Tensor& dx) {
  const std::size_t T = dy.rows(), D = dy.cols();
  dx = Tensor({T, D}, 0.0);
  std::vector<double> g(D);
  for (std::size_t t = 0; t < T; ++t) {
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      g[i] = dy(t, i) * w[i];
      mean_g += g[i];
      mean_gx += g[i] * tr.xhat(t, i);
    }
    mean_g /= static_cast<double>(D);
    mean_gx /= static_cast<double>(D);
    for (std::size_t i = 0; i < D; ++i) {
      dx(t, i) = tr.rstd[t] * (g[i] - mean_g - tr.xhat(t, i) * mean_gx);
    }
  }
}

// Accumulates parameter gradients of one adapter and returns d(input).
inline Tensor adapter_backward(const Tensor& in, const AdapterTrace& tr, const AdapterParams& ad,
                               Activation act_kind, const Tensor& dout, AdapterParams& g) {
  const std::size_t T = in.rows(), D = in.cols(), r = ad.W_down.rows();
  Tensor din = dout;  // internal skip
  std::vector<double> dv(r);
  for (std::size_t t = 0; t < T; ++t) {
    const double* dy = dout.row(t).data();
    const double* a = tr.act.row(t).data();
    for (std::size_t i = 0; i < D; ++i) {
      g.b_up[i] += dy[i];
      double* gw = g.W_up.values().data() + i * r;
      for (std::size_t j = 0; j < r; ++j) gw[j] += dy[i] * a[j];
    }
    for (std::size_t j = 0; j < r; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < D; ++i) acc += ad.W_up(i, j) * dy[i];
      dv[j] = acc * activate_grad(act_kind, tr.preact(t, j));
    }
    const double* x = in.row(t).data();
    double* dx = din.row(t).data();
    for (std::size_t j = 0; j < r; ++j) {
      if (dv[j] == 0.0) continue;
      g.b_down[j] += dv[j];
      double* gw = g.W_down.values().data() + j * D;
      const double* wd = ad.W_down.values().data() + j * D;
      for (std::size_t i = 0; i < D; ++i) {
        gw[i] += dv[j] * x[i];
        dx[i] += wd[i] * dv[j];
      }
    }
  }
  return din;
}

inline Tensor msa_backward(const EncoderParams& p, const CompiledEncoder& c,
                           const std::vector<HeadTrace>& heads, const Tensor& dout) {
  const std::size_t T = dout.rows(), D = dout.cols(), L = p.heads.size(), Dh = D / L;
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
  Tensor dconcat({T, D}, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    c.W_MSA.apply_transpose_add(dout.row(t).data(), dconcat.row(t).data());
  }
  Tensor dz({T, D}, 0.0);
  Tensor dq({T, Dh}), dk({T, Dh}), dv({T, Dh});
  std::vector<double> dA(T);
  for (std::size_t h = 0; h < L; ++h) {
    const auto& tr = heads[h];
    std::fill(dq.values().begin(), dq.values().end(), 0.0);
    std::fill(dk.values().begin(), dk.values().end(), 0.0);
    std::fill(dv.values().begin(), dv.values().end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double* dO = dconcat.row(t).data() + h * Dh;
      double weighted = 0.0;
      for (std::size_t n = 0; n < T; ++n) {
        double acc = 0.0;
        for (std::size_t i = 0; i < Dh; ++i) acc += dO[i] * tr.v(n, i);
        dA[n] = acc;
        weighted += tr.attn(t, n) * acc;
        for (std::size_t i = 0; i < Dh; ++i) dv(n, i) += tr.attn(t, n) * dO[i];
      }
      for (std::size_t n = 0; n < T; ++n) {
        const double ds = tr.attn(t, n) * (dA[n] - weighted) * scale;
        if (ds == 0.0) continue;
        for (std::size_t i = 0; i < Dh; ++i) {
          dq(t, i) += ds * tr.k(n, i);
          dk(n, i) += ds * tr.q(t, i);
        }
      }
    }
    const auto& hc = c.heads[h];
    for (std::size_t t = 0; t < T; ++t) {
      double* slice = dz.row(t).data() + h * Dh;
      hc.W_Q.apply_transpose_add(dq.row(t).data(), slice);
      hc.W_K.apply_transpose_add(dk.row(t).data(), slice);
      hc.W_V.apply_transpose_add(dv.row(t).data(), dz.row(t).data());
    }
  }
  return dz;
}

// Unscaled gradient of one image's cross-entropy loss, accumulated into g.
inline void backward_image(const Network& net, const ImageTrace& tr, const AdapterSet& adapters,
                           AdapterGradients& g) {
  const auto& mc = net.config();
  const auto& bb = net.backbone();
  const std::size_t T = mc.tokens(), D = mc.D, K = mc.num_classes;
  std::vector<double> dlogit(K);
  for (std::size_t k = 0; k < K; ++k) dlogit[k] = tr.probs[k] - (k == tr.label ? 1.0 : 0.0);
  std::vector<double> dpooled(D, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < D; ++i) dpooled[i] += bb.W_cls(k, i) * dlogit[k];
  }
  Tensor dfin({T, D}, 0.0);
  if (mc.head_mode == HeadMode::mean_pool) {
    const double inv = 1.0 / static_cast<double>(T);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < D; ++i) dfin(t, i) = dpooled[i] * inv;
    }
  } else {
    for (std::size_t i = 0; i < D; ++i) dfin(0, i) = dpooled[i];
  }
  Tensor dtok;
  ln_backward(dfin, bb.lnf_w, tr.lnf, dtok);

  for (std::size_t e = mc.num_encoders; e-- > 0;) {
    const auto& p = bb.encoders[e];
    const auto& c = net.compiled(e);
    const auto& et = tr.encoders[e];
    // out = adapter(f) + e
    Tensor df = adapter_backward(et.f, et.ad2, adapters.adapters[2 * e + 1], mc.adapter_activation,
                                 dtok, g.adapters[2 * e + 1]);
    // MLP
    Tensor dz2({T, D}, 0.0);
    std::vector<double> dh(4 * D);
    for (std::size_t t = 0; t < T; ++t) {
      std::fill(dh.begin(), dh.end(), 0.0);
      c.W2.apply_transpose_add(df.row(t).data(), dh.data());
      for (std::size_t i = 0; i < 4 * D; ++i) dh[i] *= gelu_grad_fast(et.h1(t, i));
      c.W1.apply_transpose_add(dh.data(), dz2.row(t).data());
    }
    Tensor de;
    ln_backward(dz2, p.ln2_w, et.ln2, de);
    for (std::size_t i = 0; i < de.size(); ++i) de[i] += dtok[i];
    // e = adapter(msa) + u
    Tensor dmsa = adapter_backward(et.msa_out, et.ad1, adapters.adapters[2 * e],
                                   mc.adapter_activation, de, g.adapters[2 * e]);
    if (e == 0) break;  // nothing trainable upstream
    Tensor dz1 = msa_backward(p, c, et.heads, dmsa);
    Tensor du;
    ln_backward(dz1, p.ln1_w, et.ln1, du);
    for (std::size_t i = 0; i < du.size(); ++i) du[i] += de[i];
    dtok = std::move(du);
  }
}

}  // namespace detail

inline AdapterGradients backward_adapters(const ForwardCache& cache, const Network& net,
                                          const AdapterSet& adapters) {
  const auto& mc = net.config();
  adapters.validate(mc);
  if (cache.images.empty()) throw ConfigError("backward: empty forward cache");
  if (cache.parameter_fingerprint != fingerprint_adapters(adapters)) {
    throw ConfigError("backward: cache was recorded with different adapter parameters");
  }
  const std::size_t M = cache.images.size();
  std::vector<AdapterGradients> per(M);
  parallel_for(M, [&](std::size_t m) {
    per[m] = AdapterGradients::zeros(mc);
    detail::backward_image(net, cache.images[m], adapters, per[m]);
  });
  AdapterGradients out = AdapterGradients::zeros(mc);
  std::vector<double> acc(out.parameter_count(), 0.0);
  for (const auto& g : per) {
    const auto flat = g.flatten();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += flat[k];
  }
  const double Md = static_cast<double>(M);
  for (auto& v : acc) v /= Md;
  out.assign(acc);
  return out;
}

inline AdapterGradients backward_adapters(const ForwardCache& cache, const FrozenBackbone& backbone,
                                          const AdapterSet& adapters, const ModelConfig& config) {
  return backward_adapters(cache, Network(backbone, config), adapters);
}

// forward + backward in one call.
inline AdapterGradients adapter_gradients(const Network& net, const Batch& batch,
                                          const AdapterSet& adapters, double* loss = nullptr) {
  const auto res = net.forward(batch, adapters);
  if (loss) *loss = res.loss;
  return backward_adapters(res.cache, net, adapters);
}

namespace detail {

// Independent forward pass in long double, used as the finite-difference
// oracle. Crafted backbones carry large offsets (x + gamma - gamma) whose
// double roundoff would otherwise dominate a central difference.
class ExtendedReference {
 public:
  using R = long double;

  ExtendedReference(const Network& net, const AdapterSet& adapters, const Batch& batch)
      : mc_(net.config()), act_(net.config().adapter_activation) {
    const auto& bb = net.backbone();
    const std::size_t D = mc_.D;
    E_ = Mat(bb.E);
    for (const auto& p : bb.encoders) {
      Enc e;
      e.ln1_w = vec(p.ln1_w);
      e.ln1_b = vec(p.ln1_b);
      for (const auto& h : p.heads) {
        e.heads.push_back({Mat(h.W_Q), vec(h.b_Q), Mat(h.W_K), vec(h.b_K), Mat(h.W_V), vec(h.b_V)});
      }
      e.W_MSA = Mat(p.W_MSA);
      e.ln2_w = vec(p.ln2_w);
      e.ln2_b = vec(p.ln2_b);
      e.W1 = Mat(p.W1);
      e.b1 = vec(p.b1);
      e.W2 = Mat(p.W2);
      e.b2 = vec(p.b2);
      enc_.push_back(std::move(e));
    }
    lnf_w_ = vec(bb.lnf_w);
    lnf_b_ = vec(bb.lnf_b);
    W_cls_ = Mat(bb.W_cls);
    b_cls_ = vec(bb.b_cls);
    const std::size_t T = mc_.tokens();
    for (std::size_t m = 0; m < batch.size(); ++m) {
      Image img;
      img.label = batch.labels[m];
      const Tensor patches = patchify(batch.images[m], mc_.P);
      Tokens y(T, Row(D, 0.0L));
      for (std::size_t i = 0; i < D; ++i) {
        y[0][i] = static_cast<R>(bb.class_token[i]) + static_cast<R>(bb.E_pos(0, i));
      }
      for (std::size_t n = 1; n < T; ++n) {
        const Row x = vec(patches.row(n - 1));
        y[n] = E_.apply(x);
        for (std::size_t i = 0; i < D; ++i) y[n][i] += static_cast<R>(bb.E_pos(n, i));
      }
      img.in.resize(mc_.num_adapters());
      img.skip.resize(mc_.num_adapters());
      img.signs.resize(mc_.num_adapters());
      run(img, std::move(y), adapters);
      images_.push_back(std::move(img));
    }
  }

  // Batch-mean loss with adapter `a` onward recomputed from `adapters`.
  // Adapters before `a` must equal the ones the reference was built with.
  R loss_from(std::size_t a, const AdapterSet& adapters, bool* sign_flip) const {
    R total = 0.0L;
    bool flipped = false;
    for (const auto& img : images_) {
      Probe probe{&img, false};
      total += resume(img, a, adapters, sign_flip ? &probe : nullptr);
      flipped = flipped || probe.flipped;
    }
    if (sign_flip) *sign_flip = flipped;
    return total / static_cast<R>(images_.size());
  }

 private:
  using Row = std::vector<R>;
  using Tokens = std::vector<Row>;

  struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<std::vector<std::pair<std::size_t, R>>> nz;
    Mat() = default;
    explicit Mat(const Tensor& t) : rows(t.rows()), cols(t.cols()), nz(t.rows()) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          if (t(i, j) != 0.0) nz[i].push_back({j, static_cast<R>(t(i, j))});
        }
      }
    }
    Row apply(const R* x) const {
      Row y(rows, 0.0L);
      for (std::size_t i = 0; i < rows; ++i) {
        R acc = 0.0L;
        for (const auto& [j, w] : nz[i]) acc += w * x[j];
        y[i] = acc;
      }
      return y;
    }
    Row apply(const Row& x) const { return apply(x.data()); }
  };

  struct Head {
    Mat W_Q;
    Row b_Q;
    Mat W_K;
    Row b_K;
    Mat W_V;
    Row b_V;
  };
  struct Enc {
    Row ln1_w, ln1_b;
    std::vector<Head> heads;
    Mat W_MSA;
    Row ln2_w, ln2_b;
    Mat W1;
    Row b1;
    Mat W2;
    Row b2;
  };
  struct Image {
    std::size_t label = 0;
    std::vector<Tokens> in, skip;               // per adapter, recorded at base
    std::vector<std::vector<char>> signs;       // per adapter pre-activation > 0
  };
  struct Probe {
    const Image* ref;
    bool flipped;
  };

  template <typename Span>
  static Row vec(const Span& s) {
    Row r(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) r[i] = static_cast<R>(s[i]);
    return r;
  }
  static Row vec(const Tensor& t) { return vec(t.values()); }

  static R gelu(R x) { return x * 0.5L * std::erfc(-x / std::sqrt(2.0L)); }

  R activate(R x) const { return act_ == Activation::relu ? (x > 0.0L ? x : 0.0L) : gelu(x); }

  Tokens ln(const Tokens& x, const Row& w, const Row& b) const {
    Tokens out = x;
    const R eps = static_cast<R>(mc_.ln_eps);
    for (auto& row : out) {
      const R d = static_cast<R>(row.size());
      R mean = 0.0L, var = 0.0L;
      for (R v : row) mean += v;
      mean /= d;
      for (R v : row) var += (v - mean) * (v - mean);
      var /= d;
      const R rstd = 1.0L / std::sqrt(var + eps);
      for (std::size_t i = 0; i < row.size(); ++i) row[i] = (row[i] - mean) * rstd * w[i] + b[i];
    }
    return out;
  }

  Tokens msa(const Enc& e, const Tokens& z) const {
    const std::size_t T = z.size(), D = mc_.D, L = e.heads.size(), Dh = D / L;
    const R scale = 1.0L / std::sqrt(static_cast<R>(Dh));
    Tokens concat(T, Row(D, 0.0L));
    for (std::size_t h = 0; h < L; ++h) {
      const auto& hp = e.heads[h];
      Tokens q(T), k(T), v(T);
      for (std::size_t t = 0; t < T; ++t) {
        q[t] = hp.W_Q.apply(z[t].data() + h * Dh);
        k[t] = hp.W_K.apply(z[t].data() + h * Dh);
        v[t] = hp.W_V.apply(z[t]);
        for (std::size_t i = 0; i < Dh; ++i) {
          q[t][i] += hp.b_Q[i];
          k[t][i] += hp.b_K[i];
          v[t][i] += hp.b_V[i];
        }
      }
      for (std::size_t t = 0; t < T; ++t) {
        Row s(T);
        R mx = -std::numeric_limits<R>::infinity();
        for (std::size_t n = 0; n < T; ++n) {
          R acc = 0.0L;
          for (std::size_t i = 0; i < Dh; ++i) acc += q[t][i] * k[n][i];
          s[n] = acc * scale;
          mx = std::max(mx, s[n]);
        }
        R sum = 0.0L;
        for (auto& x : s) {
          x = std::exp(x - mx);
          sum += x;
        }
        for (std::size_t i = 0; i < Dh; ++i) {
          R acc = 0.0L;
          for (std::size_t n = 0; n < T; ++n) acc += s[n] * v[n][i];
          concat[t][h * Dh + i] = acc / sum;
        }
      }
    }
    Tokens out(T);
    for (std::size_t t = 0; t < T; ++t) out[t] = e.W_MSA.apply(concat[t]);
    return out;
  }

  // adapter(in) + skip; records or compares pre-activation signs.
  Tokens adapter(std::size_t a, const Tokens& in, const Tokens& skip, const AdapterSet& adapters,
                 std::vector<char>* record, Probe* probe) const {
    const AdapterParams& ad = adapters.adapters[a];
    const std::size_t r = ad.W_down.rows(), D = ad.W_down.cols();
    Tokens out = in;
    if (record) record->clear();
    std::size_t idx = 0;
    Row act(r);
    for (std::size_t t = 0; t < in.size(); ++t) {
      for (std::size_t j = 0; j < r; ++j) {
        R acc = 0.0L;
        for (std::size_t i = 0; i < D; ++i) acc += static_cast<R>(ad.W_down(j, i)) * in[t][i];
        const R pre = acc + static_cast<R>(ad.b_down[j]);
        const char sign = pre > 0.0L ? 1 : 0;
        if (record) record->push_back(sign);
        if (probe && !probe->flipped && probe->ref->signs[a][idx] != sign) probe->flipped = true;
        ++idx;
        act[j] = activate(pre);
      }
      for (std::size_t i = 0; i < D; ++i) {
        R acc = 0.0L;
        for (std::size_t j = 0; j < r; ++j) acc += static_cast<R>(ad.W_up(i, j)) * act[j];
        out[t][i] = in[t][i] + (acc + static_cast<R>(ad.b_up[i])) + skip[t][i];
      }
    }
    return out;
  }

  Tokens mlp(const Enc& e, const Tokens& ev) const {
    const Tokens z2 = ln(ev, e.ln2_w, e.ln2_b);
    Tokens f(ev.size());
    for (std::size_t t = 0; t < ev.size(); ++t) {
      Row h1 = e.W1.apply(z2[t]);
      for (std::size_t i = 0; i < h1.size(); ++i) h1[i] = gelu(h1[i] + e.b1[i]);
      f[t] = e.W2.apply(h1);
      for (std::size_t i = 0; i < f[t].size(); ++i) f[t][i] += e.b2[i];
    }
    return f;
  }

  R head(const Tokens& tokens, std::size_t label) const {
    const Tokens fin = ln(tokens, lnf_w_, lnf_b_);
    const std::size_t D = mc_.D, K = mc_.num_classes;
    Row pooled(D, 0.0L);
    if (mc_.head_mode == HeadMode::mean_pool) {
      for (const auto& row : fin) {
        for (std::size_t i = 0; i < D; ++i) pooled[i] += row[i];
      }
      for (auto& v : pooled) v /= static_cast<R>(fin.size());
    } else {
      pooled = fin[0];
    }
    Row logits = W_cls_.apply(pooled);
    R mx = -std::numeric_limits<R>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      logits[k] += b_cls_[k];
      mx = std::max(mx, logits[k]);
    }
    R sum = 0.0L;
    for (R v : logits) sum += std::exp(v - mx);
    return mx + std::log(sum) - logits[label];
  }

  void run(Image& img, Tokens u, const AdapterSet& adapters) const {
    for (std::size_t e = 0; e < enc_.size(); ++e) {
      const Enc& p = enc_[e];
      img.in[2 * e] = msa(p, ln(u, p.ln1_w, p.ln1_b));
      img.skip[2 * e] = u;
      const Tokens ev = adapter(2 * e, img.in[2 * e], u, adapters, &img.signs[2 * e], nullptr);
      img.in[2 * e + 1] = mlp(p, ev);
      img.skip[2 * e + 1] = ev;
      u = adapter(2 * e + 1, img.in[2 * e + 1], ev, adapters, &img.signs[2 * e + 1], nullptr);
    }
  }

  R resume(const Image& img, std::size_t a, const AdapterSet& adapters, Probe* probe) const {
    Tokens u = adapter(a, img.in[a], img.skip[a], adapters, nullptr, probe);
    if (a % 2 == 0) {
      const Tokens f = mlp(enc_[a / 2], u);
      u = adapter(a + 1, f, u, adapters, nullptr, probe);
    }
    for (std::size_t e = a / 2 + 1; e < enc_.size(); ++e) {
      const Enc& p = enc_[e];
      const Tokens ev = adapter(2 * e, msa(p, ln(u, p.ln1_w, p.ln1_b)), u, adapters, nullptr, probe);
      u = adapter(2 * e + 1, mlp(p, ev), ev, adapters, nullptr, probe);
    }
    return head(u, img.label);
  }

  ModelConfig mc_;
  Activation act_;
  Mat E_;
  std::vector<Enc> enc_;
  Row lnf_w_, lnf_b_;
  Mat W_cls_;
  Row b_cls_;
  std::vector<Image> images_;
};

}  // namespace detail

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // perturbation crossed a relu kink
  double floor = 0.0;             // denominator floor used for relative errors
  bool passed = false;
};

// Central differences of the extended-precision reference loss against the
// analytic gradient. The relative error of
// coordinate k is |a_k - f_k| / max(|a_k|, |f_k|, floor) with
// floor = floor_fraction * max_k |a_k|, so coordinates whose gradient is at the
// roundoff level of the loss do not dominate. Coordinates whose +-h step flips
// any relu gate are skipped and counted.
inline GradCheckReport finite_diff_check(const Network& net, const AdapterSet& adapters,
                                         const Batch& batch, double h, double tolerance,
                                         double floor_fraction = 1e-3) {
  if (!(h > 0.0)) throw DomainError("finite_diff_check: h must be positive");
  const auto& mc = net.config();
  const auto res = net.forward(batch, adapters);
  const auto analytic = backward_adapters(res.cache, net, adapters).flatten();
  double amax = 0.0;
  for (double v : analytic) amax = std::max(amax, std::abs(v));

  // Flat index range of every adapter.
  std::vector<std::size_t> start(mc.num_adapters() + 1, 0);
  for (std::size_t a = 0; a < mc.num_adapters(); ++a) {
    start[a + 1] = start[a] + adapters.adapters[a].parameter_count();
  }
  const std::size_t total = start.back();
  std::vector<double> numeric(total, 0.0);
  std::vector<char> kink(total, 0);
  const bool relu_mode = mc.adapter_activation == Activation::relu;

  const detail::ExtendedReference ref(net, adapters, batch);
  parallel_for(mc.num_adapters(), [&](std::size_t a) {
    AdapterSet work = adapters;
    for (std::size_t k = start[a]; k < start[a + 1]; ++k) {
      double& slot = work.flat_ref(k);
      const double orig = slot;
      bool fp = false, fm = false;
      slot = orig + h;
      const long double lp = ref.loss_from(a, work, relu_mode ? &fp : nullptr);
      slot = orig - h;
      const long double lm = ref.loss_from(a, work, relu_mode ? &fm : nullptr);
      slot = orig;
      numeric[k] = static_cast<double>((lp - lm) / (2.0L * static_cast<long double>(h)));
      kink[k] = fp || fm ? 1 : 0;
    }
  });

  GradCheckReport rep;
  rep.floor = floor_fraction * amax;
  for (std::size_t k = 0; k < total; ++k) {
    if (kink[k]) {
      ++rep.skipped_kinks;
      continue;
    }
    ++rep.checked;
    const double diff = std::abs(analytic[k] - numeric[k]);
    const double denom = std::max({std::abs(analytic[k]), std::abs(numeric[k]), rep.floor});
    const double rel = denom > 0.0 ? diff / denom : (diff > 0.0 ? 1.0 : 0.0);
    rep.max_abs_error = std::max(rep.max_abs_error, diff);
    if (rel > rep.max_rel_error || (k == 0 && rel == 0.0)) {
      if (rel > rep.max_rel_error) rep.worst_index = k;
      rep.max_rel_error = rel;
    }
  }
  rep.passed = rep.checked > 0 && (tolerance > 0.0 ? rep.max_rel_error < tolerance
                                                   : rep.max_abs_error == 0.0);
  return rep;
}

}  // namespace peftleak

#endif  // PEFTLEAK_GRAD_HPP
