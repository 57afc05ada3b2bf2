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
#ifndef PEFTLEAK_DATAIO_HPP
#define PEFTLEAK_DATAIO_HPP

// Persistence and data sources.
//
// TensorFile layout (all integers little-endian):
//   "PLTF" | u16 version = 1 | u8 dtype = 0 (float64) | u8 rank |
//   rank x u64 dims | prod(dims) x f64 payload
// A bundle is "PLTB" | u16 version = 1 | u32 count | count x
//   (u16 name length | name bytes | TensorFile record).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "peftleak/errors.hpp"
#include "peftleak/model.hpp"
#include "peftleak/numerics.hpp"

namespace peftleak {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t pos = 0) : bytes_(bytes), pos_(pos) {}

  template <typename T>
  T get(const char* what) {
    if (bytes_.size() - pos_ < sizeof(T)) throw FormatError(std::string("truncated ") + what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated ") + what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace detail

inline constexpr std::uint16_t kTensorFileVersion = 1;

inline void encode_tensor(const Tensor& t, std::string& out) {
  if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
  out.append("PLTF", 4);
  detail::put<std::uint16_t>(out, kTensorFileVersion);
  detail::put<std::uint8_t>(out, 0);
  detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.dims()) detail::put<std::uint64_t>(out, d);
  for (double v : t.values()) detail::put<double>(out, v);
}

inline Tensor decode_tensor(detail::Reader& rd) {
  if (rd.take(4, "magic") != "PLTF") throw FormatError("bad tensor magic");
  const auto version = rd.get<std::uint16_t>("version");
  if (version != kTensorFileVersion) throw FormatError("unsupported tensor version");
  const auto dtype = rd.get<std::uint8_t>("dtype");
  if (dtype != 0) throw FormatError("unsupported tensor dtype");
  const auto rank = rd.get<std::uint8_t>("rank");
  std::vector<std::size_t> dims(rank);
  unsigned __int128 count = 1;
  for (auto& d : dims) {
    d = static_cast<std::size_t>(rd.get<std::uint64_t>("dims"));
    count *= d;
    if (count > (std::uint64_t{1} << 40)) throw FormatError("tensor too large");
  }
  std::vector<double> data(static_cast<std::size_t>(count));
  for (auto& v : data) v = rd.get<double>("payload");
  return Tensor(std::move(dims), std::move(data));
}

inline std::string tensor_bytes(const Tensor& t) {
  std::string s;
  encode_tensor(t, s);
  return s;
}

inline Tensor tensor_from_bytes(const std::string& bytes) {
  detail::Reader rd(bytes);
  Tensor t = decode_tensor(rd);
  if (!rd.at_end()) throw FormatError("trailing bytes after tensor");
  return t;
}

inline void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  detail::write_file(path, tensor_bytes(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  return tensor_from_bytes(detail::read_file(path));
}

using TensorBundle = std::map<std::string, Tensor>;

inline std::string bundle_bytes(const TensorBundle& b) {
  std::string s("PLTB", 4);
  detail::put<std::uint16_t>(s, kTensorFileVersion);
  detail::put<std::uint32_t>(s, static_cast<std::uint32_t>(b.size()));
  for (const auto& [name, t] : b) {
    if (name.size() > 0xFFFF) throw FormatError("bundle entry name too long");
    detail::put<std::uint16_t>(s, static_cast<std::uint16_t>(name.size()));
    s += name;
    encode_tensor(t, s);
  }
  return s;
}

inline TensorBundle bundle_from_bytes(const std::string& bytes) {
  detail::Reader rd(bytes);
  if (rd.take(4, "magic") != "PLTB") throw FormatError("bad bundle magic");
  if (rd.get<std::uint16_t>("version") != kTensorFileVersion) {
    throw FormatError("unsupported bundle version");
  }
  const auto n = rd.get<std::uint32_t>("count");
  TensorBundle b;
  for (std::uint32_t k = 0; k < n; ++k) {
    const auto len = rd.get<std::uint16_t>("name length");
    std::string name = rd.take(len, "name");
    if (b.count(name)) throw FormatError("duplicate bundle entry " + name);
    b.emplace(std::move(name), decode_tensor(rd));
  }
  if (!rd.at_end()) throw FormatError("trailing bytes after bundle");
  return b;
}

inline void write_bundle(const TensorBundle& b, const std::filesystem::path& path) {
  detail::write_file(path, bundle_bytes(b));
}

inline TensorBundle read_bundle(const std::filesystem::path& path) {
  return bundle_from_bytes(detail::read_file(path));
}

inline const Tensor& bundle_get(const TensorBundle& b, const std::string& name) {
  auto it = b.find(name);
  if (it == b.end()) throw FormatError("bundle entry missing: " + name);
  return it->second;
}

// --- model objects as bundles ----------------------------------------------

inline Tensor encode_model_config(const ModelConfig& mc) {
  return Tensor::vector({static_cast<double>(mc.D), static_cast<double>(mc.L),
                         static_cast<double>(mc.num_encoders), static_cast<double>(mc.P),
                         static_cast<double>(mc.C), static_cast<double>(mc.H),
                         static_cast<double>(mc.W), static_cast<double>(mc.r),
                         static_cast<double>(mc.num_classes),
                         mc.adapter_activation == Activation::relu ? 0.0 : 1.0,
                         mc.head_mode == HeadMode::mean_pool ? 0.0 : 1.0, mc.ln_eps});
}

inline ModelConfig decode_model_config(const Tensor& t) {
  if (t.dims() != std::vector<std::size_t>{12}) throw FormatError("bad model config record");
  auto u = [&](std::size_t i) {
    const double v = t[i];
    if (!(v >= 0 && v < 1e9) || v != std::floor(v)) throw FormatError("bad model config field");
    return static_cast<std::size_t>(v);
  };
  ModelConfig mc;
  mc.D = u(0);
  mc.L = u(1);
  mc.num_encoders = u(2);
  mc.P = u(3);
  mc.C = u(4);
  mc.H = u(5);
  mc.W = u(6);
  mc.r = u(7);
  mc.num_classes = u(8);
  mc.adapter_activation = t[9] == 0.0 ? Activation::relu : Activation::gelu;
  mc.head_mode = t[10] == 0.0 ? HeadMode::mean_pool : HeadMode::class_token;
  mc.ln_eps = t[11];
  mc.validate();
  return mc;
}

inline TensorBundle backbone_bundle(const FrozenBackbone& bb, const ModelConfig& mc) {
  TensorBundle b;
  b["model_config"] = encode_model_config(mc);
  b["E"] = bb.E;
  b["class_token"] = bb.class_token;
  b["E_pos"] = bb.E_pos;
  for (std::size_t e = 0; e < bb.encoders.size(); ++e) {
    const auto& p = bb.encoders[e];
    const std::string pre = "enc" + std::to_string(e) + ".";
    b[pre + "ln1_w"] = p.ln1_w;
    b[pre + "ln1_b"] = p.ln1_b;
    b[pre + "ln2_w"] = p.ln2_w;
    b[pre + "ln2_b"] = p.ln2_b;
    b[pre + "W_MSA"] = p.W_MSA;
    b[pre + "W1"] = p.W1;
    b[pre + "b1"] = p.b1;
    b[pre + "W2"] = p.W2;
    b[pre + "b2"] = p.b2;
    for (std::size_t h = 0; h < p.heads.size(); ++h) {
      const auto& hd = p.heads[h];
      const std::string hp = pre + "head" + std::to_string(h) + ".";
      b[hp + "W_Q"] = hd.W_Q;
      b[hp + "b_Q"] = hd.b_Q;
      b[hp + "W_K"] = hd.W_K;
      b[hp + "b_K"] = hd.b_K;
      b[hp + "W_V"] = hd.W_V;
      b[hp + "b_V"] = hd.b_V;
    }
  }
  b["lnf_w"] = bb.lnf_w;
  b["lnf_b"] = bb.lnf_b;
  b["W_cls"] = bb.W_cls;
  b["b_cls"] = bb.b_cls;
  return b;
}

inline std::pair<FrozenBackbone, ModelConfig> backbone_from_bundle(const TensorBundle& b) {
  const ModelConfig mc = decode_model_config(bundle_get(b, "model_config"));
  FrozenBackbone bb;
  bb.E = bundle_get(b, "E");
  bb.class_token = bundle_get(b, "class_token");
  bb.E_pos = bundle_get(b, "E_pos");
  for (std::size_t e = 0; e < mc.num_encoders; ++e) {
    EncoderParams p;
    const std::string pre = "enc" + std::to_string(e) + ".";
    p.ln1_w = bundle_get(b, pre + "ln1_w");
    p.ln1_b = bundle_get(b, pre + "ln1_b");
    p.ln2_w = bundle_get(b, pre + "ln2_w");
    p.ln2_b = bundle_get(b, pre + "ln2_b");
    p.W_MSA = bundle_get(b, pre + "W_MSA");
    p.W1 = bundle_get(b, pre + "W1");
    p.b1 = bundle_get(b, pre + "b1");
    p.W2 = bundle_get(b, pre + "W2");
    p.b2 = bundle_get(b, pre + "b2");
    for (std::size_t h = 0; h < mc.L; ++h) {
      const std::string hp = pre + "head" + std::to_string(h) + ".";
      p.heads.push_back({bundle_get(b, hp + "W_Q"), bundle_get(b, hp + "b_Q"),
                         bundle_get(b, hp + "W_K"), bundle_get(b, hp + "b_K"),
                         bundle_get(b, hp + "W_V"), bundle_get(b, hp + "b_V")});
    }
    bb.encoders.push_back(std::move(p));
  }
  bb.lnf_w = bundle_get(b, "lnf_w");
  bb.lnf_b = bundle_get(b, "lnf_b");
  bb.W_cls = bundle_get(b, "W_cls");
  bb.b_cls = bundle_get(b, "b_cls");
  try {
    bb.validate(mc);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("backbone bundle: ") + e.what());
  }
  return {std::move(bb), mc};
}

template <typename Collection>
TensorBundle adapters_bundle(const Collection& s, const ModelConfig& mc) {
  TensorBundle b;
  b["model_config"] = encode_model_config(mc);
  for (std::size_t a = 0; a < s.adapters.size(); ++a) {
    const std::string pre = "adapter" + std::to_string(a) + ".";
    b[pre + "W_down"] = s.adapters[a].W_down;
    b[pre + "b_down"] = s.adapters[a].b_down;
    b[pre + "W_up"] = s.adapters[a].W_up;
    b[pre + "b_up"] = s.adapters[a].b_up;
  }
  return b;
}

template <typename Collection>
Collection adapters_from_bundle(const TensorBundle& b, const ModelConfig& mc) {
  const ModelConfig stored = decode_model_config(bundle_get(b, "model_config"));
  if (!(stored == mc)) throw FormatError("adapter bundle was written for a different model");
  Collection s = Collection::zeros(mc);
  for (std::size_t a = 0; a < s.adapters.size(); ++a) {
    const std::string pre = "adapter" + std::to_string(a) + ".";
    auto& ad = s.adapters[a];
    for (auto [t, name] : {std::pair{&ad.W_down, "W_down"}, std::pair{&ad.b_down, "b_down"},
                           std::pair{&ad.W_up, "W_up"}, std::pair{&ad.b_up, "b_up"}}) {
      const Tensor& src = bundle_get(b, pre + name);
      if (!src.same_shape(*t)) throw FormatError("adapter bundle shape mismatch at " + pre + name);
      *t = src;
    }
  }
  return s;
}

// --- images ----------------------------------------------------------------

// P6 with maxval 255. Returns C x H x W (C = 3) with values in [0, 255].
inline Tensor decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        return;
      }
    }
  };
  auto number = [&]() -> long {
    skip_ws();
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos || pos - start > 9) throw FormatError("ppm: bad header number");
    return std::stol(bytes.substr(start, pos - start));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("ppm: not P6");
  pos = 2;
  const long w = number(), h = number(), maxval = number();
  if (w <= 0 || h <= 0) throw FormatError("ppm: bad dimensions");
  if (maxval != 255) throw FormatError("ppm: maxval must be 255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError("ppm: missing separator after header");
  }
  ++pos;
  const std::size_t W = static_cast<std::size_t>(w), H = static_cast<std::size_t>(h);
  if (bytes.size() - pos != 3 * W * H) {
    throw FormatError(bytes.size() - pos < 3 * W * H ? "ppm: truncated pixel data"
                                                     : "ppm: trailing bytes");
  }
  Tensor img({3, H, W}, 0.0);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img[(c * H + y) * W + x] = static_cast<unsigned char>(bytes[pos + 3 * (y * W + x) + c]);
      }
    }
  }
  return img;
}

inline std::string encode_ppm(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) detail::throw_shape("ppm needs 3 x H x W");
  const std::size_t H = img.dim(1), W = img.dim(2);
  std::string s = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = img[(c * H + y) * W + x];
        if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v)) {
          throw DomainError("ppm: pixel values must be integers in [0, 255]");
        }
        s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
      }
    }
  }
  return s;
}

inline Tensor load_ppm(const std::filesystem::path& path) { return decode_ppm(detail::read_file(path)); }

inline void save_ppm(const Tensor& img, const std::filesystem::path& path) {
  detail::write_file(path, encode_ppm(img));
}

// [0, 255] -> [-1, 1]
inline Tensor normalize(const Tensor& img) {
  Tensor out = img;
  for (auto& v : out.values()) v = v / 127.5 - 1.0;
  return out;
}

// [-1, 1] -> integer [0, 255], clamped, round half up.
inline Tensor denormalize(const Tensor& img) {
  Tensor out = img;
  for (auto& v : out.values()) {
    const double c = std::clamp(v, -1.0, 1.0);
    v = std::floor((c + 1.0) * 127.5 + 0.5);
    v = std::clamp(v, 0.0, 255.0);
  }
  return out;
}

// Grayscale or other channel counts are replicated/truncated to RGB for display.
inline Tensor to_rgb(const Tensor& img) {
  if (img.dim(0) == 3) return img;
  const std::size_t H = img.dim(1), W = img.dim(2), C = img.dim(0);
  Tensor out({3, H, W}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t src = std::min(c, C - 1);
    for (std::size_t i = 0; i < H * W; ++i) out[c * H * W + i] = img[src * H * W + i];
  }
  return out;
}

// --- synthetic data ----------------------------------------------------------

enum class SynthKind { uniform, smooth };

inline std::string to_string(SynthKind k) { return k == SynthKind::uniform ? "uniform" : "smooth"; }

// uniform: i.i.d. pixels on [-1, 1). smooth: per channel a sum of three
// sinusoids with random low frequencies and phases, min-max rescaled to [-1, 1].
inline Batch synth_batch(std::size_t M, const ModelConfig& mc, std::uint64_t seed, SynthKind kind) {
  if (M == 0) throw ConfigError("synth_batch: M must be >= 1");
  Batch b;
  Rng base(seed);
  for (std::size_t m = 0; m < M; ++m) {
    Rng rng = base.derive(m);
    Tensor img({mc.C, mc.H, mc.W}, 0.0);
    if (kind == SynthKind::uniform) {
      for (auto& v : img.values()) v = rng.uniform(-1.0, 1.0);
    } else {
      for (std::size_t c = 0; c < mc.C; ++c) {
        double fx[3], fy[3], ph[3], amp[3];
        for (int k = 0; k < 3; ++k) {
          fx[k] = rng.uniform(-1.5, 1.5);
          fy[k] = rng.uniform(-1.5, 1.5);
          ph[k] = rng.uniform(0.0, 2.0 * kPi);
          amp[k] = rng.uniform(0.5, 1.0);
        }
        const std::size_t off = c * mc.H * mc.W;
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t y = 0; y < mc.H; ++y) {
          for (std::size_t x = 0; x < mc.W; ++x) {
            double v = 0.0;
            for (int k = 0; k < 3; ++k) {
              v += amp[k] * std::sin(2.0 * kPi * (fx[k] * static_cast<double>(x) / mc.W +
                                                  fy[k] * static_cast<double>(y) / mc.H) +
                                     ph[k]);
            }
            img[off + y * mc.W + x] = v;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
        }
        for (std::size_t i = 0; i < mc.H * mc.W; ++i) {
          img[off + i] = hi > lo ? 2.0 * (img[off + i] - lo) / (hi - lo) - 1.0 : 0.0;
        }
      }
    }
    b.images.push_back(std::move(img));
    b.labels.push_back(static_cast<std::size_t>(rng.below(mc.num_classes)));
  }
  return b;
}

// Every *.ppm in a directory (sorted by name), normalized, resized by block
// averaging or nearest-neighbour to H x W and truncated to C channels.
inline std::vector<Tensor> load_image_dir(const std::filesystem::path& dir, const ModelConfig& mc) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Tensor> out;
  for (const auto& f : files) {
    const Tensor raw = normalize(load_ppm(f));
    const std::size_t H = raw.dim(1), W = raw.dim(2);
    Tensor img({mc.C, mc.H, mc.W}, 0.0);
    for (std::size_t c = 0; c < mc.C; ++c) {
      const std::size_t sc = std::min<std::size_t>(c, 2);
      for (std::size_t y = 0; y < mc.H; ++y) {
        for (std::size_t x = 0; x < mc.W; ++x) {
          const std::size_t y0 = y * H / mc.H, y1 = std::max(y0 + 1, (y + 1) * H / mc.H);
          const std::size_t x0 = x * W / mc.W, x1 = std::max(x0 + 1, (x + 1) * W / mc.W);
          double acc = 0.0;
          for (std::size_t yy = y0; yy < y1; ++yy)
            for (std::size_t xx = x0; xx < x1; ++xx) acc += raw[(sc * H + yy) * W + xx];
          img[(c * mc.H + y) * mc.W + x] =
              std::clamp(acc / static_cast<double>((y1 - y0) * (x1 - x0)), -1.0, 1.0);
        }
      }
    }
    out.push_back(std::move(img));
  }
  if (out.empty()) throw ConfigError("no .ppm images in " + dir.string());
  return out;
}

}  // namespace peftleak

#endif  // PEFTLEAK_DATAIO_HPP
