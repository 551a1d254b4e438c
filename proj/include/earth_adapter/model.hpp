#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "earth_adapter/adapter.hpp"
#include "earth_adapter/autodiff.hpp"
#include "earth_adapter/backbone.hpp"
#include "earth_adapter/optim.hpp"

namespace ea {

/// Segmentation network G = decoder(adapter(backbone(x))). The backbone is
/// shared between a student and its teacher; decoder and adapters are owned.
class SegModel {
 public:
  SegModel(std::shared_ptr<VisionTransformer> backbone, SegDecoder decoder,
           std::optional<EarthAdapter> adapter = std::nullopt)
      : backbone_(std::move(backbone)), decoder_(std::move(decoder)), adapter_(std::move(adapter)) {}

  VisionTransformer& backbone() { return *backbone_; }
  const std::shared_ptr<VisionTransformer>& backbone_ptr() const { return backbone_; }
  SegDecoder& decoder() { return decoder_; }
  EarthAdapter* adapter() { return adapter_ ? &*adapter_ : nullptr; }
  const ViTConfig& config() const { return backbone_->config(); }

  /// Decoder parameters followed by adapter parameters.
  std::vector<NamedParam> trainable_params() {
    auto out = decoder_.named_params();
    if (adapter_)
      for (auto& p : adapter_->named_params()) out.push_back(p);
    return out;
  }

  std::vector<Var> features(Graph& g, const Tensor& image) {
    return backbone_->forward_features(g, image, adapter_ ? &*adapter_ : nullptr);
  }

  /// Pixel logits (S*S) x K.
  Var forward(Graph& g, const Tensor& image) { return decoder_.decode(g, features(g, image).back()); }

  std::vector<int> predict(const Tensor& image) {
    Graph g;
    Var f = features(g, image).back();
    std::vector<int> tok = argmax_rows(g.value(decoder_.token_logits(g, f)));
    std::vector<int> out;
    out.reserve(config().image_size * config().image_size);
    for (auto t : decoder_.pixel_to_token()) out.push_back(tok[t]);
    return out;
  }

  /// Copy sharing the backbone, with every owned parameter detached from
  /// gradient tracking.
  SegModel detached_copy() const {
    SegModel c = *this;
    for (auto& p : c.trainable_params()) {
      p.tensor->set_requires_grad(false);
      p.tensor->clear_grad();
    }
    return c;
  }

 private:
  std::shared_ptr<VisionTransformer> backbone_;
  SegDecoder decoder_;
  std::optional<EarthAdapter> adapter_;
};

}  // namespace ea
