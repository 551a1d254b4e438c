#pragma once

// Mixture of frequency-split adapters injected after backbone blocks.
//
// Per adapted layer i with feature F (n x c):
//   dF_spatial = Up(ReLU(Down(F)))
//   F_low, F_high = masked inverse DFT of the token grid of F at cutoff rho
//   dF_low = Up_low(ReLU(Down_low(F_low))), dF_high likewise
//   w = softmax(R(mean_tokens(F)))            one weight per enabled expert
//   F_bar = F + alpha * sum_k w_k dF_k
// Layers without frequency experts use F_bar = F + alpha * dF_spatial.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "earth_adapter/autodiff.hpp"
#include "earth_adapter/backbone.hpp"
#include "earth_adapter/optim.hpp"
#include "earth_adapter/spectral.hpp"
#include "earth_adapter/tensor.hpp"

namespace ea {

enum class Expert : std::size_t { kSpatial = 0, kLow = 1, kHigh = 2 };

inline const char* expert_name(Expert e) {
  switch (e) {
    case Expert::kSpatial: return "spatial";
    case Expert::kLow: return "low";
    case Expert::kHigh: return "high";
  }
  return "?";
}

struct AdapterConfig {
  std::size_t dim = 16;
  double rho = 0.3;
  std::vector<std::size_t> freq_layers{5, 6, 7};
  /// Layers that receive any adapter; empty means every block.
  std::vector<std::size_t> layers{};
  double alpha_init = 0.01;
  bool spatial = true;
  bool low = true;
  bool high = true;

  bool any_expert() const { return spatial || low || high; }
};

/// Biasless bottleneck W_up(ReLU(W_down x)) applied per token.
struct AdapterExpert {
  Tensor w_down;  // c x d
  Tensor w_up;    // d x c

  AdapterExpert() = default;
  AdapterExpert(std::size_t c, std::size_t d, std::mt19937_64& rng)
      : w_down(Shape{c, d}), w_up(Shape{d, c}) {
    init_normal(w_down, rng, 1.0 / std::sqrt(static_cast<double>(c)));
  }
};

inline Var spatial_delta(Graph& g, Var feature, AdapterExpert& e) {
  const Tensor& f = g.value(feature);
  if (f.ndim() != 2 || f.dim(1) != e.w_down.dim(0))
    throw DimensionError("adapter expects n x " + std::to_string(e.w_down.dim(0)) + " features, got " +
                         shape_str(f.shape()));
  return matmul(relu(matmul(feature, bind(g, e.w_down))), bind(g, e.w_up));
}

struct FrequencyDeltas {
  Var low_feature, high_feature;
  Var low, high;
};

inline FrequencyDeltas frequency_deltas(Graph& g, Var feature, AdapterExpert& low_e, AdapterExpert& high_e,
                                        double rho) {
  auto [lo, hi] = spectral::frequency_split(feature, rho);
  return {lo, hi, spatial_delta(g, lo, low_e), spatial_delta(g, hi, high_e)};
}

/// Intermediate values of one adapted layer, recorded on request.
struct MoACapture {
  std::size_t layer = 0;
  std::optional<Var> spatial, low, high;
  Var aggregated{};
  Var weights{};
  std::vector<Expert> experts;
};

class MoALayer {
 public:
  MoALayer(std::size_t layer, std::size_t c, const AdapterConfig& cfg, bool has_frequency, std::mt19937_64& rng)
      : layer_(layer), rho_(cfg.rho), has_frequency_(has_frequency), alpha_(Shape{1}, cfg.alpha_init) {
    if (cfg.spatial) {
      experts_.push_back(Expert::kSpatial);
      spatial_.emplace(c, cfg.dim, rng);
    }
    if (has_frequency && cfg.low) {
      experts_.push_back(Expert::kLow);
      low_.emplace(c, cfg.dim, rng);
    }
    if (has_frequency && cfg.high) {
      experts_.push_back(Expert::kHigh);
      high_.emplace(c, cfg.dim, rng);
    }
    if (has_frequency) {
      router_w_ = Tensor(Shape{c, experts_.size()});
      router_b_ = Tensor(Shape{experts_.size()});
    }
  }

  std::size_t layer() const noexcept { return layer_; }
  bool has_frequency() const noexcept { return has_frequency_; }
  bool routed() const noexcept { return has_frequency_; }
  double rho() const noexcept { return rho_; }
  const std::vector<Expert>& experts() const noexcept { return experts_; }

  Tensor& alpha() { return alpha_; }
  Tensor& router_weight() { return router_w_; }
  Tensor& router_bias() { return router_b_; }
  AdapterExpert* expert(Expert e) {
    switch (e) {
      case Expert::kSpatial: return spatial_ ? &*spatial_ : nullptr;
      case Expert::kLow: return low_ ? &*low_ : nullptr;
      case Expert::kHigh: return high_ ? &*high_ : nullptr;
    }
    return nullptr;
  }

  std::vector<NamedParam> named_params() {
    const std::string p = "peft/layer" + std::to_string(layer_) + "/";
    std::vector<NamedParam> out{{p + "alpha", &alpha_}};
    for (Expert e : experts_) {
      AdapterExpert* x = expert(e);
      out.push_back({p + expert_name(e) + "/w_down", &x->w_down});
      out.push_back({p + expert_name(e) + "/w_up", &x->w_up});
    }
    if (routed()) {
      out.push_back({p + "router/w", &router_w_});
      out.push_back({p + "router/b", &router_b_});
    }
    return out;
  }

  /// Softmax router over the enabled experts, from the token-mean of F.
  Var router_weights(Graph& g, Var feature) {
    Var logits = add_bias(matmul(mean_rows(feature), bind(g, router_w_)), bind(g, router_b_));
    return softmax(logits, 1);
  }

  Var forward(Graph& g, Var feature, MoACapture* capture = nullptr) {
    std::vector<Var> deltas;
    std::optional<FrequencyDeltas> fd;
    if (has_frequency_ && (low_ || high_)) {
      auto [lo, hi] = spectral::frequency_split(feature, rho_);
      fd = FrequencyDeltas{lo, hi, {}, {}};
      if (low_) fd->low = spatial_delta(g, lo, *low_);
      if (high_) fd->high = spatial_delta(g, hi, *high_);
    }
    for (Expert e : experts_) {
      switch (e) {
        case Expert::kSpatial: deltas.push_back(spatial_delta(g, feature, *spatial_)); break;
        case Expert::kLow: deltas.push_back(fd->low); break;
        case Expert::kHigh: deltas.push_back(fd->high); break;
      }
    }
    Var mixed{};
    Var w{};
    if (routed()) {
      w = router_weights(g, feature);
      mixed = aggregate(g, deltas, w);
    } else {
      mixed = deltas.front();
    }
    Var delta = scale_by(mixed, bind(g, alpha_));
    if (capture) {
      capture->layer = layer_;
      capture->experts = experts_;
      capture->weights = w;
      capture->aggregated = delta;
      for (std::size_t k = 0; k < experts_.size(); ++k) {
        if (experts_[k] == Expert::kSpatial) capture->spatial = deltas[k];
        if (experts_[k] == Expert::kLow) capture->low = deltas[k];
        if (experts_[k] == Expert::kHigh) capture->high = deltas[k];
      }
    }
    return add(feature, delta);
  }

  /// sum_k w_k * delta_k
  static Var aggregate(Graph& g, const std::vector<Var>& deltas, Var weights) {
    if (g.value(weights).size() != deltas.size())
      throw DimensionError("aggregate: " + std::to_string(deltas.size()) + " deltas for " +
                           shape_str(g.shape(weights)) + " weights");
    Var acc = scale_by(deltas[0], element(weights, 0));
    for (std::size_t k = 1; k < deltas.size(); ++k) {
      if (g.shape(deltas[k]) != g.shape(deltas[0])) throw DimensionError("aggregate: delta shapes disagree");
      acc = add(acc, scale_by(deltas[k], element(weights, k)));
    }
    return acc;
  }

 private:
  std::size_t layer_;
  double rho_;
  bool has_frequency_;
  std::vector<Expert> experts_;
  std::optional<AdapterExpert> spatial_, low_, high_;
  Tensor router_w_, router_b_;
  Tensor alpha_;
};

/// F_bar = F + alpha * sum_k w_k * delta_k on plain tensors.
inline Tensor aggregate_inject(const Tensor& feature, const std::vector<Tensor>& deltas,
                               const std::vector<double>& weights, double alpha) {
  if (deltas.size() != weights.size()) throw DimensionError("aggregate_inject: weight/delta count mismatch");
  Tensor out = feature;
  out.clear_grad();
  for (std::size_t k = 0; k < deltas.size(); ++k) {
    if (deltas[k].shape() != feature.shape())
      throw DimensionError("aggregate_inject: delta " + shape_str(deltas[k].shape()) + " vs feature " +
                           shape_str(feature.shape()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += alpha * weights[k] * deltas[k][i];
  }
  return out;
}

/// The full set of per-layer adapters; installs itself as a backbone hook.
class EarthAdapter : public FeatureHook {
 public:
  EarthAdapter() = default;
  EarthAdapter(const ViTConfig& vit, const AdapterConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    for (auto l : cfg.freq_layers)
      if (l >= vit.depth)
        throw RangeError("frequency layer " + std::to_string(l) + " outside [0, " + std::to_string(vit.depth) + ")");
    for (auto l : cfg.layers)
      if (l >= vit.depth)
        throw RangeError("adapter layer " + std::to_string(l) + " outside [0, " + std::to_string(vit.depth) + ")");
    if (cfg.dim == 0) throw RangeError("adapter dim must be positive");
    std::mt19937_64 rng(seed ^ 0xa5a5a5a5deadbeefull);
    const auto in = [](const std::vector<std::size_t>& v, std::size_t x) {
      return std::find(v.begin(), v.end(), x) != v.end();
    };
    slot_.assign(vit.depth, -1);
    for (std::size_t l = 0; l < vit.depth; ++l) {
      if (!cfg.layers.empty() && !in(cfg.layers, l)) continue;
      const bool freq = in(cfg.freq_layers, l) && (cfg.low || cfg.high);
      if (!freq && !cfg.spatial) continue;
      slot_[l] = static_cast<int>(layers_.size());
      layers_.emplace_back(l, vit.dim, cfg, freq, rng);
    }
  }

  const AdapterConfig& config() const noexcept { return cfg_; }
  std::vector<MoALayer>& layers() noexcept { return layers_; }
  MoALayer* at_layer(std::size_t l) {
    if (l >= slot_.size() || slot_[l] < 0) return nullptr;
    return &layers_[static_cast<std::size_t>(slot_[l])];
  }

  std::size_t frequency_layer_count() const {
    return static_cast<std::size_t>(std::count_if(layers_.begin(), layers_.end(),
                                                  [](const MoALayer& m) { return m.has_frequency(); }));
  }

  std::vector<NamedParam> named_params() {
    std::vector<NamedParam> out;
    for (auto& l : layers_)
      for (auto& p : l.named_params()) out.push_back(p);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& p : named_params()) n += p.tensor->size();
    return n;
  }

  /// Capture intermediates of layer `l` during the next forward pass.
  void capture_layer(std::optional<std::size_t> l) {
    capture_layer_ = l;
    capture_ = MoACapture{};
  }
  const MoACapture& capture() const noexcept { return capture_; }

  Var after_block(Graph& g, std::size_t layer, Var feature) override {
    MoALayer* m = at_layer(layer);
    if (!m) return feature;
    const bool cap = capture_layer_ && *capture_layer_ == layer;
    return m->forward(g, feature, cap ? &capture_ : nullptr);
  }

 private:
  AdapterConfig cfg_;
  std::vector<MoALayer> layers_;
  std::vector<int> slot_;
  std::optional<std::size_t> capture_layer_;
  MoACapture capture_;
};

}  // namespace ea
