// Network definitions: dense-block encoders, the warp-predicting decoder, the
// Wasserstein critic and the retrieval autoencoder, plus checkpoint I/O.
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "semawarp/autograd.hpp"
#include "semawarp/parsemap.hpp"

namespace semawarp {

/// Fixed-length real embedding of a parsing map.
template <typename T>
struct ShapeCode {
  std::vector<T> values;
  std::size_t size() const { return values.size(); }
  friend bool operator==(const ShapeCode&, const ShapeCode&) = default;
};

enum class Domain { photo, caricature, retrieval_photo, retrieval_caricature };

struct ModelSpec {
  std::size_t code_dim = 128;
  std::size_t n_blocks = 4;
  std::vector<std::size_t> widths = {16, 24, 32, 32};  // block widths, finest first
  std::size_t growth = 8;
  std::size_t layers_per_block = 2;
  std::size_t channels = 11;
  std::size_t height = 64;
  std::size_t width = 64;
  double flow_bound_fraction = 0.5;  // residual flow limited to this * max(H, W)
  bool shared_cycle_decoder = false;
  std::vector<std::string> categories = default_categories();

  /// Factor between the input grid and the coarsest feature grid.
  std::size_t reduction() const { return std::size_t{1} << n_blocks; }
  double flow_bound() const { return flow_bound_fraction * double(std::max(height, width)); }

  void validate() const {
    require(n_blocks >= 1 && code_dim >= 1, "invalid_spec", "n_blocks and code_dim must be >= 1");
    require(widths.size() == n_blocks, "invalid_spec", "one width per block required");
    require(channels >= 1 && channels == categories.size(), "invalid_spec",
            "channel count must match the category list");
    require(height % reduction() == 0 && width % reduction() == 0 && height / reduction() >= 1,
            "invalid_spec", "image size must be divisible by 2^n_blocks");
    require(flow_bound_fraction > 0, "invalid_spec", "flow bound must be positive");
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

namespace nn {

template <typename T>
using Var = ag::Var<T>;

/// Ordered, named parameter collection.
template <typename T>
class ParamSet {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    auto v = ag::parameter(std::move(init));
    items_.emplace_back(name, v);
    return v;
  }
  const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }
  void zero_grad() {
    for (auto& [_, v] : items_) v->grad = Tensor<T>();
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : items_) n += v->value.size();
    return n;
  }
  void set_trainable(bool on) {
    for (auto& [_, v] : items_) v->requires_grad = on;
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
};

template <typename T>
Tensor<T> uniform_init(Shape s, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(3.0 / double(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> t(std::move(s));
  for (auto& v : t.storage()) v = T(u(rng));
  return t;
}

template <typename T>
struct Conv {
  Var<T> w, b;
  std::size_t stride = 1, pad = 0;
  Conv() = default;
  Conv(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
       std::size_t stride_, std::size_t pad_, std::mt19937_64& rng, bool zero = false)
      : stride(stride_), pad(pad_) {
    w = ps.add(name + ".w", zero ? Tensor<T>({out, in, k, k})
                                 : uniform_init<T>({out, in, k, k}, in * k * k, rng));
    b = ps.add(name + ".b", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct ConvT {
  Var<T> w, b;
  std::size_t stride = 2, pad = 1;
  ConvT() = default;
  ConvT(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
        std::mt19937_64& rng) {
    w = ps.add(name + ".w", uniform_init<T>({in, out, 4, 4}, in * 4, rng));
    b = ps.add(name + ".b", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return ag::conv_transpose2d(x, w, b, stride, pad); }
};

template <typename T>
struct Linear {
  Var<T> w, b;
  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
         std::mt19937_64& rng) {
    w = ps.add(name + ".w", uniform_init<T>({out, in}, in, rng));
    b = ps.add(name + ".b", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return ag::linear(x, w, b); }
};

/// Densely connected block: each layer sees the concatenation of all previous
/// feature maps and contributes `growth` new channels.
template <typename T>
struct DenseBlock {
  std::vector<Conv<T>> layers;
  std::size_t out_channels = 0;
  DenseBlock() = default;
  DenseBlock(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t growth,
             std::size_t n_layers, std::mt19937_64& rng) {
    std::size_t c = in;
    for (std::size_t l = 0; l < n_layers; ++l) {
      layers.emplace_back(ps, name + ".l" + std::to_string(l), c, growth, 3, 1, 1, rng);
      c += growth;
    }
    out_channels = c;
  }
  Var<T> operator()(Var<T> x) const {
    for (const auto& conv : layers) x = ag::concat<T>({x, ag::leaky_relu(conv(x))});
    return x;
  }
};

/// Parsing map -> code. Stem halves the resolution, blocks are separated by
/// pooling transitions; the last block output is flattened.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamSet<T>& ps, const std::string& name, const ModelSpec& spec, std::mt19937_64& rng)
      : spec_(spec) {
    stem_ = Conv<T>(ps, name + ".stem", spec.channels, spec.widths[0], 3, 2, 1, rng);
    for (std::size_t b = 0; b < spec.n_blocks; ++b) {
      blocks_.emplace_back(ps, name + ".block" + std::to_string(b), spec.widths[b], spec.growth,
                           spec.layers_per_block, rng);
      const std::size_t next = b + 1 < spec.n_blocks ? spec.widths[b + 1] : spec.widths[b];
      transitions_.emplace_back(ps, name + ".trans" + std::to_string(b),
                                blocks_.back().out_channels, next, 1, 1, 0, rng);
    }
    const std::size_t g = spec.reduction();
    flat_ = spec.widths.back() * (spec.height / g) * (spec.width / g);
    head_ = Linear<T>(ps, name + ".fc", flat_, spec.code_dim, rng);
  }

  /// x: N x C x H x W -> N x code_dim
  Var<T> operator()(const Var<T>& x) const {
    auto h = ag::leaky_relu(stem_(x));
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      h = ag::leaky_relu(transitions_[b](blocks_[b](h)));
      if (b + 1 < blocks_.size()) h = ag::avg_pool2(h);
    }
    return head_(ag::reshape(h, {h->value.dim(0), flat_}));
  }

 private:
  ModelSpec spec_;
  Conv<T> stem_;
  std::vector<DenseBlock<T>> blocks_;
  std::vector<Conv<T>> transitions_;
  Linear<T> head_;
  std::size_t flat_ = 0;
};

/// Code -> full-resolution feature map through dense blocks and transposed
/// convolutions, mirroring the encoder.
template <typename T>
class UpsamplingTrunk {
 public:
  UpsamplingTrunk() = default;
  UpsamplingTrunk(ParamSet<T>& ps, const std::string& name, const ModelSpec& spec,
                  std::size_t in_dim, std::mt19937_64& rng)
      : spec_(spec) {
    const std::size_t g = spec.reduction();
    h0_ = spec.height / g;
    w0_ = spec.width / g;
    fc_ = Linear<T>(ps, name + ".fc", in_dim, spec.widths.back() * h0_ * w0_, rng);
    std::size_t c = spec.widths.back();
    for (std::size_t i = 0; i < spec.n_blocks; ++i) {
      const std::size_t b = spec.n_blocks - 1 - i;
      blocks_.emplace_back(ps, name + ".block" + std::to_string(b), c, spec.growth,
                           spec.layers_per_block, rng);
      const std::size_t out = b > 0 ? spec.widths[b - 1] : std::max<std::size_t>(spec.widths[0] / 2, 4);
      ups_.emplace_back(ps, name + ".up" + std::to_string(b), blocks_.back().out_channels, out, rng);
      c = out;
    }
    out_channels = c;
  }

  Var<T> operator()(const Var<T>& z) const {
    const std::size_t N = z->value.dim(0);
    auto h = ag::leaky_relu(fc_(z));
    h = ag::reshape(h, {N, spec_.widths.back(), h0_, w0_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) h = ag::leaky_relu(ups_[i](blocks_[i](h)));
    return h;
  }

  std::size_t out_channels = 0;

 private:
  ModelSpec spec_;
  std::size_t h0_ = 0, w0_ = 0;
  Linear<T> fc_;
  std::vector<DenseBlock<T>> blocks_;
  std::vector<ConvT<T>> ups_;
};

/// (z_src, z_tgt) -> absolute backward field = identity + bounded residual.
/// The residual head starts at zero, so an untrained decoder is the identity.
template <typename T>
class WarpDecoder {
 public:
  WarpDecoder() = default;
  WarpDecoder(ParamSet<T>& ps, const std::string& name, const ModelSpec& spec,
              std::mt19937_64& rng)
      : spec_(spec), trunk_(ps, name, spec, 2 * spec.code_dim, rng) {
    head_ = Conv<T>(ps, name + ".flow", trunk_.out_channels, 2, 3, 1, 1, rng, /*zero=*/true);
    identity_ = identity_warp<T>(spec.height, spec.width).data;
  }

  Var<T> operator()(const Var<T>& z_src, const Var<T>& z_tgt) const {
    require(z_src->value.shape() == z_tgt->value.shape(), "dimension_mismatch",
            "decoder codes differ in shape");
    const std::size_t N = z_src->value.dim(0);
    auto residual = ag::scaled_tanh(head_(trunk_(ag::concat<T>({z_src, z_tgt}))),
                                    T(spec_.flow_bound()));
    Tensor<T> base({N, 2, spec_.height, spec_.width});
    for (std::size_t n = 0; n < N; ++n)
      std::copy(identity_.storage().begin(), identity_.storage().end(),
                base.data() + n * identity_.size());
    return ag::add_constant(residual, base);
  }

 private:
  ModelSpec spec_;
  UpsamplingTrunk<T> trunk_;
  Conv<T> head_;
  Tensor<T> identity_;
};

/// Code -> parsing map with a channel softmax.
template <typename T>
class MapDecoder {
 public:
  MapDecoder() = default;
  MapDecoder(ParamSet<T>& ps, const std::string& name, const ModelSpec& spec, std::mt19937_64& rng)
      : trunk_(ps, name, spec, spec.code_dim, rng) {
    head_ = Conv<T>(ps, name + ".out", trunk_.out_channels, spec.channels, 3, 1, 1, rng);
  }
  Var<T> operator()(const Var<T>& z) const { return ag::softmax_channels(head_(trunk_(z))); }

 private:
  UpsamplingTrunk<T> trunk_;
  Conv<T> head_;
};

/// Parsing map -> scalar score. Strided convolutions without normalisation.
template <typename T>
class Critic {
 public:
  Critic() = default;
  Critic(ParamSet<T>& ps, const std::string& name, const ModelSpec& spec, std::mt19937_64& rng) {
    std::size_t c = spec.channels;
    for (std::size_t b = 0; b < spec.n_blocks; ++b) {
      const std::size_t out = spec.widths[b];
      convs_.emplace_back(ps, name + ".conv" + std::to_string(b), c, out, 4, 2, 1, rng);
      c = out;
    }
    const std::size_t g = spec.reduction();
    flat_ = c * (spec.height / g) * (spec.width / g);
    head_ = Linear<T>(ps, name + ".fc", flat_, 1, rng);
  }
  Var<T> operator()(const Var<T>& x) const {
    auto h = x;
    for (const auto& conv : convs_) h = ag::leaky_relu(conv(h));
    return head_(ag::reshape(h, {h->value.dim(0), flat_}));
  }

 private:
  std::vector<Conv<T>> convs_;
  Linear<T> head_;
  std::size_t flat_ = 0;
};

}  // namespace nn

// ---------------------------------------------------------------------------
// Batching helpers between domain types and NCHW tensors

template <typename T>
Tensor<T> stack_maps(const std::vector<const ParsingMap<T>*>& maps) {
  require(!maps.empty(), "empty_batch", "cannot stack an empty batch");
  const auto& s = maps[0]->data().shape();
  Tensor<T> out({maps.size(), s[0], s[1], s[2]});
  const std::size_t stride = maps[0]->data().size();
  for (std::size_t n = 0; n < maps.size(); ++n) {
    require(maps[n]->data().shape() == s, "shape_mismatch", "batch maps differ in shape");
    std::copy_n(maps[n]->data().data(), stride, out.data() + n * stride);
  }
  return out;
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& batch, std::size_t n) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t stride = shape_numel(s);
  return Tensor<T>(s, std::vector<T>(batch.data() + n * stride, batch.data() + (n + 1) * stride));
}

template <typename T>
ShapeCode<T> code_row(const Tensor<T>& codes, std::size_t n) {
  const std::size_t D = codes.dim(1);
  return {std::vector<T>(codes.data() + n * D, codes.data() + (n + 1) * D)};
}

template <typename T>
Tensor<T> codes_batch(const std::vector<const ShapeCode<T>*>& codes) {
  const std::size_t D = codes.at(0)->size();
  Tensor<T> out({codes.size(), D});
  for (std::size_t n = 0; n < codes.size(); ++n) {
    require(codes[n]->size() == D, "dimension_mismatch", "codes differ in length");
    std::copy(codes[n]->values.begin(), codes[n]->values.end(), out.data() + n * D);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Key/value manifest stored at the top of a checkpoint.
using Manifest = std::map<std::string, std::string>;

inline std::string spec_to_string(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline void write_spec(Manifest& m, const ModelSpec& s) {
  m["code_dim"] = std::to_string(s.code_dim);
  m["n_blocks"] = std::to_string(s.n_blocks);
  m["widths"] = spec_to_string(s.widths);
  m["growth"] = std::to_string(s.growth);
  m["layers_per_block"] = std::to_string(s.layers_per_block);
  m["channels"] = std::to_string(s.channels);
  m["height"] = std::to_string(s.height);
  m["width"] = std::to_string(s.width);
  std::ostringstream fb;
  fb.precision(17);
  fb << s.flow_bound_fraction;
  m["flow_bound_fraction"] = fb.str();
  m["shared_cycle_decoder"] = s.shared_cycle_decoder ? "1" : "0";
  std::string cats;
  for (std::size_t i = 0; i < s.categories.size(); ++i) cats += (i ? "," : "") + s.categories[i];
  m["categories"] = cats;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

inline ModelSpec read_spec(const Manifest& m) {
  auto get = [&](const char* k) {
    auto it = m.find(k);
    if (it == m.end()) throw Error("bad_checkpoint", std::string("manifest lacks ") + k);
    return it->second;
  };
  ModelSpec s;
  s.code_dim = std::stoul(get("code_dim"));
  s.n_blocks = std::stoul(get("n_blocks"));
  s.widths.clear();
  for (const auto& w : split(get("widths"), ',')) s.widths.push_back(std::stoul(w));
  s.growth = std::stoul(get("growth"));
  s.layers_per_block = std::stoul(get("layers_per_block"));
  s.channels = std::stoul(get("channels"));
  s.height = std::stoul(get("height"));
  s.width = std::stoul(get("width"));
  s.flow_bound_fraction = std::stod(get("flow_bound_fraction"));
  s.shared_cycle_decoder = get("shared_cycle_decoder") == "1";
  s.categories = split(get("categories"), ',');
  s.validate();
  return s;
}

inline constexpr const char* kCheckpointMagic = "SEMAWARP-CKPT v1";

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline void put_f32_le(std::string& out, float v) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= std::uint32_t(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

/// Serialises a manifest and parameters (stored as little-endian float32).
template <typename T>
std::string serialize_checkpoint(const Manifest& manifest, const nn::ParamSet<T>& params) {
  std::string out = std::string(kCheckpointMagic) + "\n";
  for (const auto& [k, v] : manifest) out += k + " " + v + "\n";
  out += "params " + std::to_string(params.items().size()) + "\n";
  for (const auto& [name, var] : params.items()) {
    out += name + " " + std::to_string(var->value.size()) + "\n";
    for (T v : var->value.storage()) put_f32_le(out, float(v));
    out += "\n";
  }
  return out;
}

struct CheckpointBlob {
  Manifest manifest;
  std::vector<std::pair<std::string, std::vector<float>>> params;
};

inline CheckpointBlob parse_checkpoint(const std::string& bytes) {
  CheckpointBlob blob;
  std::size_t pos = 0;
  auto line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw Error("bad_checkpoint", "truncated checkpoint");
    std::string l = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return l;
  };
  if (line() != kCheckpointMagic) throw Error("bad_checkpoint", "not a SEMAWARP-CKPT v1 file");
  for (;;) {
    const std::string l = line();
    const auto sp = l.find(' ');
    if (sp == std::string::npos) throw Error("bad_checkpoint", "malformed manifest line");
    const std::string key = l.substr(0, sp), val = l.substr(sp + 1);
    if (key == "params") {
      const std::size_t n = std::stoul(val);
      for (std::size_t i = 0; i < n; ++i) {
        const std::string h = line();
        const auto s2 = h.rfind(' ');
        const std::size_t count = std::stoul(h.substr(s2 + 1));
        if (pos + 4 * count + 1 > bytes.size()) throw Error("bad_checkpoint", "truncated tensor");
        std::vector<float> v(count);
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
        for (std::size_t j = 0; j < count; ++j) v[j] = get_f32_le(p + 4 * j);
        pos += 4 * count + 1;
        blob.params.emplace_back(h.substr(0, s2), std::move(v));
      }
      return blob;
    }
    blob.manifest[key] = val;
  }
}

template <typename T>
void load_params(nn::ParamSet<T>& params, const CheckpointBlob& blob) {
  std::map<std::string, const std::vector<float>*> byname;
  for (const auto& [n, v] : blob.params) byname[n] = &v;
  for (auto& [name, var] : params.items()) {
    auto it = byname.find(name);
    require(it != byname.end(), "bad_checkpoint", "checkpoint lacks parameter " + name);
    require(it->second->size() == var->value.size(), "bad_checkpoint",
            "parameter size mismatch for " + name);
    for (std::size_t i = 0; i < var->value.size(); ++i) var->value[i] = T((*it->second)[i]);
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), "io_error", "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), "io_error", "cannot write " + path);
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[std::size_t(i)] = digits[v & 0xF];
  return s;
}

// ---------------------------------------------------------------------------
// Model bundles

/// Two domain encoders, forward and cycle warp decoders and the critic.
template <typename T>
class ShapeTransformer {
 public:
  explicit ShapeTransformer(const ModelSpec& spec, std::uint64_t seed = 0) : spec_(spec) {
    spec.validate();
    std::mt19937_64 rng(seed);
    enc_photo_ = nn::Encoder<T>(gen_, "enc_photo", spec, rng);
    enc_cari_ = nn::Encoder<T>(gen_, "enc_cari", spec, rng);
    dec_fwd_ = nn::WarpDecoder<T>(gen_, "dec_fwd", spec, rng);
    if (!spec.shared_cycle_decoder) dec_cyc_ = nn::WarpDecoder<T>(gen_, "dec_cyc", spec, rng);
    critic_ = nn::Critic<T>(critic_params_, "critic", spec, rng);
  }

  ShapeTransformer(ShapeTransformer&&) noexcept = default;
  ShapeTransformer& operator=(ShapeTransformer&&) noexcept = default;
  ShapeTransformer(const ShapeTransformer&) = delete;

  const ModelSpec& spec() const { return spec_; }
  nn::ParamSet<T>& generator_params() { return gen_; }
  nn::ParamSet<T>& critic_params() { return critic_params_; }
  const nn::ParamSet<T>& generator_params() const { return gen_; }
  const nn::ParamSet<T>& critic_params() const { return critic_params_; }

  // Batched graph builders (N x ...).
  ag::Var<T> encode_photo(const ag::Var<T>& x) const { return enc_photo_(x); }
  ag::Var<T> encode_caricature(const ag::Var<T>& x) const { return enc_cari_(x); }
  ag::Var<T> forward_field(const ag::Var<T>& z_src, const ag::Var<T>& z_tgt) const {
    return dec_fwd_(z_src, z_tgt);
  }
  ag::Var<T> cycle_field(const ag::Var<T>& z_src, const ag::Var<T>& z_tgt) const {
    return spec_.shared_cycle_decoder ? dec_fwd_(z_src, z_tgt) : dec_cyc_(z_src, z_tgt);
  }
  ag::Var<T> score(const ag::Var<T>& x) const { return critic_(x); }

  ShapeCode<T> encode(Domain d, const ParsingMap<T>& map) const {
    check_map(map);
    auto x = ag::constant(stack_maps<T>({&map}));
    if (d == Domain::photo) return code_row(frozen([&] { return enc_photo_(x); }), 0);
    if (d == Domain::caricature) return code_row(frozen([&] { return enc_cari_(x); }), 0);
    throw Error("wrong_domain", "shape transformer has photo and caricature encoders only");
  }

  WarpField<T> decode_warp(const ShapeCode<T>& z_src, const ShapeCode<T>& z_tgt) const {
    require(z_src.size() == spec_.code_dim && z_tgt.size() == spec_.code_dim,
            "dimension_mismatch", "code length does not match the model");
    auto a = ag::constant(codes_batch<T>({&z_src})), b = ag::constant(codes_batch<T>({&z_tgt}));
    return {slice_batch(frozen([&] { return dec_fwd_(a, b); }), 0)};
  }

  T critic(const ParsingMap<T>& map) const {
    check_map(map);
    auto x = ag::constant(stack_maps<T>({&map}));
    return frozen([&] { return critic_(x); })[0];
  }

  /// Clamps every critic parameter to [-clip, clip].
  void clip_critic(T clip) {
    for (auto& [_, v] : critic_params_.items())
      for (auto& x : v->value.storage()) x = std::clamp(x, -clip, clip);
  }

  std::string serialize(std::size_t step, std::uint64_t seed) const {
    Manifest m;
    write_spec(m, spec_);
    m["kind"] = "shape";
    m["step"] = std::to_string(step);
    m["seed"] = std::to_string(seed);
    nn::ParamSet<T> all = gen_;
    for (const auto& [n, v] : critic_params_.items()) all.add(n, v->value);
    return serialize_checkpoint(m, all);
  }

  static ShapeTransformer deserialize(const std::string& bytes) {
    const auto blob = parse_checkpoint(bytes);
    require(blob.manifest.count("kind") && blob.manifest.at("kind") == "shape", "bad_checkpoint",
            "checkpoint is not a shape-transformer checkpoint");
    ShapeTransformer model(read_spec(blob.manifest));
    load_params(model.gen_, blob);
    load_params(model.critic_params_, blob);
    return model;
  }

  void check_map(const ParsingMap<T>& map) const {
    require(map.channels() == spec_.channels && map.height() == spec_.height &&
                map.width() == spec_.width,
            "shape_mismatch",
            "map " + shape_str(map.data().shape()) + " does not match model " +
                shape_str({spec_.channels, spec_.height, spec_.width}));
  }

 private:
  template <typename F>
  static Tensor<T> frozen(F&& f) {
    ag::NoGradGuard guard;
    return f()->value;
  }

  ModelSpec spec_;
  nn::ParamSet<T> gen_, critic_params_;
  nn::Encoder<T> enc_photo_, enc_cari_;
  nn::WarpDecoder<T> dec_fwd_, dec_cyc_;
  nn::Critic<T> critic_;
};

/// Photo and caricature encoders with a shared reconstruction decoder.
template <typename T>
class RetrievalModel {
 public:
  explicit RetrievalModel(const ModelSpec& spec, std::uint64_t seed = 0) : spec_(spec) {
    spec.validate();
    std::mt19937_64 rng(seed);
    enc_photo_ = nn::Encoder<T>(params_, "ret_photo", spec, rng);
    enc_cari_ = nn::Encoder<T>(params_, "ret_cari", spec, rng);
    decoder_ = nn::MapDecoder<T>(params_, "ret_dec", spec, rng);
  }

  RetrievalModel(RetrievalModel&&) noexcept = default;
  RetrievalModel& operator=(RetrievalModel&&) noexcept = default;
  RetrievalModel(const RetrievalModel&) = delete;

  const ModelSpec& spec() const { return spec_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }

  ag::Var<T> encode_photo(const ag::Var<T>& x) const { return enc_photo_(x); }
  ag::Var<T> encode_caricature(const ag::Var<T>& x) const { return enc_cari_(x); }
  ag::Var<T> reconstruct(const ag::Var<T>& z) const { return decoder_(z); }

  ShapeCode<T> encode(Domain d, const ParsingMap<T>& map) const {
    require(map.channels() == spec_.channels && map.height() == spec_.height &&
                map.width() == spec_.width,
            "shape_mismatch", "map does not match the retrieval model");
    auto x = ag::constant(stack_maps<T>({&map}));
    if (d == Domain::retrieval_photo) return code_row(frozen([&] { return enc_photo_(x); }), 0);
    if (d == Domain::retrieval_caricature) return code_row(frozen([&] { return enc_cari_(x); }), 0);
    throw Error("wrong_domain", "retrieval model has retrieval encoders only");
  }

  ParsingMap<T> retrieval_decode(const ShapeCode<T>& z) const {
    require(z.size() == spec_.code_dim, "dimension_mismatch", "code length does not match the model");
    auto x = ag::constant(codes_batch<T>({&z}));
    return ParsingMap<T>(slice_batch(frozen([&] { return decoder_(x); }), 0), spec_.categories,
                         Hardness::soft);
  }

  std::string serialize(std::size_t step, std::uint64_t seed) const {
    Manifest m;
    write_spec(m, spec_);
    m["kind"] = "retrieval";
    m["step"] = std::to_string(step);
    m["seed"] = std::to_string(seed);
    return serialize_checkpoint(m, params_);
  }

  static RetrievalModel deserialize(const std::string& bytes) {
    const auto blob = parse_checkpoint(bytes);
    require(blob.manifest.count("kind") && blob.manifest.at("kind") == "retrieval",
            "bad_checkpoint", "checkpoint is not a retrieval checkpoint");
    RetrievalModel model(read_spec(blob.manifest));
    load_params(model.params_, blob);
    return model;
  }

  /// Hash of the caricature-encoder parameters; binds a gallery index to the
  /// encoder that produced its codes.
  std::string fingerprint() const {
    std::uint64_t h = fnv1a("ret_cari", 8);
    for (const auto& [name, var] : params_.items()) {
      if (name.rfind("ret_cari", 0) != 0) continue;
      std::string bytes;
      for (T v : var->value.storage()) put_f32_le(bytes, float(v));
      h = fnv1a(name.data(), name.size(), h);
      h = fnv1a(bytes.data(), bytes.size(), h);
    }
    return hex64(h);
  }

 private:
  template <typename F>
  static Tensor<T> frozen(F&& f) {
    ag::NoGradGuard guard;
    return f()->value;
  }

  ModelSpec spec_;
  nn::ParamSet<T> params_;
  nn::Encoder<T> enc_photo_, enc_cari_;
  nn::MapDecoder<T> decoder_;
};

}  // namespace semawarp
