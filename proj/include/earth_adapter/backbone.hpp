#pragma once

// Tiny vision transformer used as the frozen feature extractor, and the
// per-token decoder that turns the last feature map into pixel logits.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "earth_adapter/autodiff.hpp"
#include "earth_adapter/optim.hpp"
#include "earth_adapter/tensor.hpp"

namespace ea {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t depth = 8;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 4;
  std::size_t decoder_dim = 64;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || depth == 0 || dim == 0 || heads == 0 || mlp_ratio == 0 ||
        decoder_dim == 0)
      throw RangeError("backbone extents must be positive");
    if (image_size % patch_size != 0)
      throw DimensionError("image_size " + std::to_string(image_size) + " is not a multiple of patch_size " +
                           std::to_string(patch_size));
    if (dim % heads != 0)
      throw DimensionError("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
    if (num_classes < 2) throw RangeError("num_classes must be at least 2");
  }
};

/// Gaussian initializer with a fixed-seed engine.
inline void init_normal(Tensor& t, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = dist(rng);
}

/// Binds a tensor into the graph: trainable when it requires a gradient.
inline Var bind(Graph& g, Tensor& t) { return t.requires_grad() ? g.param(t) : g.frozen(t); }

/// Non-overlapping patches of a 3 x S x S image as an n x (3 p p) matrix.
/// Row t = py * G + px; column = (channel * p + dy) * p + dx.
inline Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2) || image.dim(1) % patch != 0)
    throw DimensionError("patchify: expected 3 x S x S with S divisible by " + std::to_string(patch) + ", got " +
                         shape_str(image.shape()));
  const std::size_t s = image.dim(1), grid = s / patch;
  Tensor out(Shape{grid * grid, 3 * patch * patch});
  for (std::size_t py = 0; py < grid; ++py)
    for (std::size_t px = 0; px < grid; ++px) {
      double* row = out.ptr() + (py * grid + px) * out.dim(1);
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            row[(ch * patch + dy) * patch + dx] = image[(ch * s + py * patch + dy) * s + px * patch + dx];
    }
  return out;
}

/// Fixed 1D sinusoidal encoding over token index.
inline Tensor sinusoidal_positions(std::size_t tokens, std::size_t dim) {
  Tensor pe(Shape{tokens, dim});
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double a = static_cast<double>(t) * freq;
      pe[t * dim + i] = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  return pe;
}

/// Hook called after every block; returns the (possibly adapted) feature.
class FeatureHook {
 public:
  virtual ~FeatureHook() = default;
  virtual Var after_block(Graph& g, std::size_t layer, Var feature) = 0;
};

struct TransformerBlock {
  Tensor ln1_g, ln1_b, w_qkv, b_qkv, w_proj, b_proj;
  Tensor ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
};

class VisionTransformer {
 public:
  VisionTransformer() = default;
  VisionTransformer(const ViTConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t c = cfg_.dim, hid = c * cfg_.mlp_ratio;
    patch_w_ = Tensor(Shape{cfg_.patch_dim(), c});
    init_normal(patch_w_, rng, 1.0 / std::sqrt(static_cast<double>(cfg_.patch_dim())));
    patch_b_ = Tensor(Shape{c});
    positions_ = sinusoidal_positions(cfg_.tokens(), c);
    blocks_.resize(cfg_.depth);
    const double sc = 1.0 / std::sqrt(static_cast<double>(c));
    const double sh = 1.0 / std::sqrt(static_cast<double>(hid));
    for (auto& b : blocks_) {
      b.ln1_g = Tensor(Shape{c}, 1.0);
      b.ln1_b = Tensor(Shape{c});
      b.w_qkv = Tensor(Shape{c, 3 * c});
      init_normal(b.w_qkv, rng, sc);
      b.b_qkv = Tensor(Shape{3 * c});
      b.w_proj = Tensor(Shape{c, c});
      init_normal(b.w_proj, rng, sc / std::sqrt(2.0 * static_cast<double>(cfg_.depth)));
      b.b_proj = Tensor(Shape{c});
      b.ln2_g = Tensor(Shape{c}, 1.0);
      b.ln2_b = Tensor(Shape{c});
      b.w_fc1 = Tensor(Shape{c, hid});
      init_normal(b.w_fc1, rng, sc);
      b.b_fc1 = Tensor(Shape{hid});
      b.w_fc2 = Tensor(Shape{hid, c});
      init_normal(b.w_fc2, rng, sh / std::sqrt(2.0 * static_cast<double>(cfg_.depth)));
      b.b_fc2 = Tensor(Shape{c});
    }
  }

  const ViTConfig& config() const noexcept { return cfg_; }
  const Tensor& positions() const noexcept { return positions_; }

  std::vector<NamedParam> named_params() {
    std::vector<NamedParam> out{{"backbone/patch_w", &patch_w_}, {"backbone/patch_b", &patch_b_}};
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto& b = blocks_[i];
      const std::string p = "backbone/block" + std::to_string(i) + "/";
      for (auto [name, t] : {std::pair<const char*, Tensor*>{"ln1_g", &b.ln1_g}, {"ln1_b", &b.ln1_b},
                             {"w_qkv", &b.w_qkv}, {"b_qkv", &b.b_qkv}, {"w_proj", &b.w_proj},
                             {"b_proj", &b.b_proj}, {"ln2_g", &b.ln2_g}, {"ln2_b", &b.ln2_b},
                             {"w_fc1", &b.w_fc1}, {"b_fc1", &b.b_fc1}, {"w_fc2", &b.w_fc2},
                             {"b_fc2", &b.b_fc2}})
        out.push_back({p + name, t});
    }
    return out;
  }

  void set_trainable(bool on) {
    for (auto& p : named_params()) {
      p.tensor->set_requires_grad(on);
      if (!on) p.tensor->clear_grad();
    }
  }

  /// FNV-1a over the raw bytes of every backbone parameter.
  std::uint64_t checksum() {
    std::uint64_t h = 1469598103934665603ull;
    for (auto& p : named_params()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.tensor->ptr());
      for (std::size_t i = 0; i < p.tensor->size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    }
    return h;
  }

  Var patch_embed(Graph& g, const Tensor& image) {
    if (image.ndim() != 3 || image.dim(1) != cfg_.image_size || image.dim(2) != cfg_.image_size)
      throw DimensionError("patch_embed: image " + shape_str(image.shape()) + " does not match image_size " +
                           std::to_string(cfg_.image_size));
    Var x = g.constant(patchify(image, cfg_.patch_size));
    Var t = add_bias(matmul(x, bind(g, patch_w_)), bind(g, patch_b_));
    return add(t, g.frozen(positions_));
  }

  Var block_forward(Graph& g, std::size_t index, Var x) {
    auto& b = blocks_.at(index);
    const std::size_t c = cfg_.dim, dh = c / cfg_.heads;
    Var h = layer_norm(x, bind(g, b.ln1_g), bind(g, b.ln1_b));
    Var qkv = add_bias(matmul(h, bind(g, b.w_qkv)), bind(g, b.b_qkv));
    std::vector<Var> heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
      Var q = slice_cols(qkv, hd * dh, (hd + 1) * dh);
      Var k = slice_cols(qkv, c + hd * dh, c + (hd + 1) * dh);
      Var v = slice_cols(qkv, 2 * c + hd * dh, 2 * c + (hd + 1) * dh);
      Var att = softmax(scale(matmul(q, transpose(k)), inv), 1);
      last_attention_ = att;
      heads.push_back(matmul(att, v));
    }
    Var a = add_bias(matmul(concat_cols(heads), bind(g, b.w_proj)), bind(g, b.b_proj));
    x = add(x, a);
    Var m = layer_norm(x, bind(g, b.ln2_g), bind(g, b.ln2_b));
    m = gelu(add_bias(matmul(m, bind(g, b.w_fc1)), bind(g, b.b_fc1)));
    m = add_bias(matmul(m, bind(g, b.w_fc2)), bind(g, b.b_fc2));
    return add(x, m);
  }

  /// Runs every block; after block i the hook (if any) may replace the feature.
  std::vector<Var> forward_features(Graph& g, const Tensor& image, FeatureHook* hook = nullptr) {
    std::vector<Var> feats;
    feats.reserve(cfg_.depth);
    Var x = patch_embed(g, image);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      x = block_forward(g, i, x);
      if (hook) x = hook->after_block(g, i, x);
      if (!g.value(x).all_finite()) throw NumericError("non-finite activation after block " + std::to_string(i));
      feats.push_back(x);
    }
    return feats;
  }

  /// Attention matrix of the last head of the last block run (for diagnostics).
  Var last_attention() const noexcept { return last_attention_; }

 private:
  ViTConfig cfg_;
  Tensor patch_w_, patch_b_, positions_;
  std::vector<TransformerBlock> blocks_;
  Var last_attention_{};
};

/// Per-token two-layer projection c -> d -> K with nearest-neighbour upsampling.
class SegDecoder {
 public:
  SegDecoder() = default;
  SegDecoder(const ViTConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    w1_ = Tensor(Shape{cfg.dim, cfg.decoder_dim});
    init_normal(w1_, rng, std::sqrt(2.0 / static_cast<double>(cfg.dim)));
    b1_ = Tensor(Shape{cfg.decoder_dim});
    w2_ = Tensor(Shape{cfg.decoder_dim, cfg.num_classes});
    init_normal(w2_, rng, 1.0 / std::sqrt(static_cast<double>(cfg.decoder_dim)));
    b2_ = Tensor(Shape{cfg.num_classes});
  }

  std::vector<NamedParam> named_params() {
    return {{"decoder/w1", &w1_}, {"decoder/b1", &b1_}, {"decoder/w2", &w2_}, {"decoder/b2", &b2_}};
  }

  /// Token logits, n x K.
  Var token_logits(Graph& g, Var feature) {
    const Tensor& f = g.value(feature);
    if (f.ndim() != 2 || f.dim(0) != cfg_.tokens() || f.dim(1) != cfg_.dim)
      throw DimensionError("decode: feature " + shape_str(f.shape()) + " does not match " +
                           std::to_string(cfg_.tokens()) + "x" + std::to_string(cfg_.dim));
    Var h = relu(add_bias(matmul(feature, bind(g, w1_)), bind(g, b1_)));
    return add_bias(matmul(h, bind(g, w2_)), bind(g, b2_));
  }

  /// Pixel logits, (S*S) x K with pixel index y * S + x.
  Var decode(Graph& g, Var feature) { return gather_rows(token_logits(g, feature), pixel_to_token()); }

  std::vector<std::size_t> pixel_to_token() const {
    const std::size_t s = cfg_.image_size, p = cfg_.patch_size, grid = cfg_.grid();
    std::vector<std::size_t> idx(s * s);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) idx[y * s + x] = (y / p) * grid + x / p;
    return idx;
  }

 private:
  ViTConfig cfg_;
  Tensor w1_, b1_, w2_, b2_;
};

/// Per-pixel argmax of (S*S) x K logits; ties resolve to the lowest class.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t p = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(p);
  for (std::size_t i = 0; i < p; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

/// Reorders (S*S) x K pixel logits into the K x S x S layout.
inline Tensor logits_to_planes(const Tensor& logits, std::size_t image_size) {
  const std::size_t k = logits.dim(1), n = image_size * image_size;
  if (logits.dim(0) != n) throw DimensionError("logits_to_planes: size mismatch");
  Tensor out(Shape{k, image_size, image_size});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[j * n + i] = logits[i * k + j];
  return out;
}

}  // namespace ea
