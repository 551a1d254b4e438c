#pragma once

// Supervised source training and self-training domain adaptation with an
// EMA teacher, argmax pseudo-labels and class-wise mixing.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "earth_adapter/autodiff.hpp"
#include "earth_adapter/benchgen.hpp"
#include "earth_adapter/model.hpp"
#include "earth_adapter/optim.hpp"

namespace ea::train {

struct LossReport {
  long step = 0;
  double l_src = 0.0;
  double l_mix = 0.0;
  double total = 0.0;
};

/// Pixels of x_mix come from the source where mask == 1, else from the target.
struct MixBatch {
  Tensor image;
  std::vector<int> label;
  std::vector<unsigned char> mask;  // 1 = source pixel
  std::vector<int> classes;         // source classes selected for the mask
};

inline std::vector<int> pseudo_label(SegModel& teacher, const Tensor& target_image) {
  return teacher.predict(target_image);
}

/// teacher <- alpha * teacher + (1 - alpha) * student, parameter by parameter.
inline void ema_update(SegModel& teacher, SegModel& student, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw RangeError("EMA coefficient must lie in [0, 1)");
  auto tp = teacher.trainable_params();
  auto sp = student.trainable_params();
  if (tp.size() != sp.size()) throw ConsistencyError("teacher and student parameter sets differ in size");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (tp[i].name != sp[i].name || tp[i].tensor->shape() != sp[i].tensor->shape())
      throw ConsistencyError("teacher parameter '" + tp[i].name + "' does not match student '" + sp[i].name + "'");
    Tensor& t = *tp[i].tensor;
    const Tensor& s = *sp[i].tensor;
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = alpha * t[k] + (1.0 - alpha) * s[k];
  }
}

/// Class-wise mix with an explicit set of source classes.
inline MixBatch classmix_with_classes(const bench::Sample& source, const Tensor& target_image,
                                      const std::vector<int>& target_pseudo, std::vector<int> classes) {
  const Tensor& xs = source.image;
  if (xs.shape() != target_image.shape() || source.label.size() != target_pseudo.size())
    throw DimensionError("classmix: source " + shape_str(xs.shape()) + " and target " +
                         shape_str(target_image.shape()) + " differ");
  const std::size_t plane = source.label.size();
  if (xs.size() % plane != 0) throw DimensionError("classmix: label does not match image plane");
  const std::size_t channels = xs.size() / plane;
  MixBatch mb{Tensor(xs.shape()), std::vector<int>(plane), std::vector<unsigned char>(plane), std::move(classes)};
  for (std::size_t i = 0; i < plane; ++i) {
    const bool src = std::find(mb.classes.begin(), mb.classes.end(), source.label[i]) != mb.classes.end();
    mb.mask[i] = src ? 1 : 0;
    mb.label[i] = src ? source.label[i] : target_pseudo[i];
    for (std::size_t c = 0; c < channels; ++c)
      mb.image[c * plane + i] = src ? xs[c * plane + i] : target_image[c * plane + i];
  }
  return mb;
}

/// Selects ceil(|classes(y_S)| / 2) of the source classes uniformly at random.
inline MixBatch classmix(const bench::Sample& source, const Tensor& target_image,
                         const std::vector<int>& target_pseudo, std::mt19937_64& rng) {
  std::vector<int> present(source.label.begin(), source.label.end());
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());
  std::shuffle(present.begin(), present.end(), rng);
  present.resize((present.size() + 1) / 2);
  std::sort(present.begin(), present.end());
  return classmix_with_classes(source, target_image, target_pseudo, std::move(present));
}

namespace detail {

inline void require_finite(double v, const char* what, long step) {
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << "non-finite " << what << " at step " << step;
    throw NumericError(os.str());
  }
}

/// Mean per-image cross entropy over a batch.
inline Var batch_loss(Graph& g, SegModel& model, const std::vector<const Tensor*>& images,
                      const std::vector<const std::vector<int>*>& labels) {
  Var acc{};
  for (std::size_t i = 0; i < images.size(); ++i) {
    Var l = cross_entropy(model.forward(g, *images[i]), *labels[i]);
    acc = i == 0 ? l : add(acc, l);
  }
  return images.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(images.size()));
}

}  // namespace detail

/// One supervised step on source samples only.
inline LossReport dg_step(SegModel& student, AdamW& opt, std::span<const bench::Sample* const> batch, long step) {
  if (batch.empty()) throw DimensionError("dg_step: empty batch");
  Graph g;
  std::vector<const Tensor*> xs;
  std::vector<const std::vector<int>*> ys;
  for (const auto* s : batch) {
    xs.push_back(&s->image);
    ys.push_back(&s->label);
  }
  Var loss = detail::batch_loss(g, student, xs, ys);
  const double l = g.value(loss)[0];
  detail::require_finite(l, "source loss", step);
  opt.zero_grad();
  g.backward(loss);
  opt.step();
  return {step, l, 0.0, l};
}

/// One self-training step: source loss plus lambda times the loss on
/// class-mixed images labelled by the teacher, then the EMA teacher update.
inline LossReport uda_step(SegModel& student, SegModel& teacher, AdamW& opt,
                           std::span<const bench::Sample* const> source, std::span<const Tensor* const> target,
                           double lambda_uda, double ema_alpha, std::mt19937_64& rng, long step) {
  if (source.empty() || source.size() != target.size())
    throw DimensionError("uda_step: source and target batches must be non-empty and equally sized");
  std::vector<MixBatch> mixes;
  mixes.reserve(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) {
    auto pseudo = pseudo_label(teacher, *target[i]);
    mixes.push_back(classmix(*source[i], *target[i], pseudo, rng));
  }
  Graph g;
  std::vector<const Tensor*> xs, xm;
  std::vector<const std::vector<int>*> ys, ym;
  for (std::size_t i = 0; i < source.size(); ++i) {
    xs.push_back(&source[i]->image);
    ys.push_back(&source[i]->label);
    xm.push_back(&mixes[i].image);
    ym.push_back(&mixes[i].label);
  }
  Var l_src = detail::batch_loss(g, student, xs, ys);
  Var l_mix = detail::batch_loss(g, student, xm, ym);
  Var total = add(l_src, scale(l_mix, lambda_uda));
  LossReport r{step, g.value(l_src)[0], g.value(l_mix)[0], g.value(total)[0]};
  detail::require_finite(r.l_src, "source loss", step);
  detail::require_finite(r.l_mix, "mixed loss", step);
  opt.zero_grad();
  g.backward(total);
  opt.step();
  ema_update(teacher, student, ema_alpha);
  return r;
}

/// Predictions and mIoU of `model` over labelled samples.
inline bench::Evaluation evaluate_model(SegModel& model, const std::vector<bench::Sample>& samples) {
  std::vector<std::vector<int>> preds, labels;
  preds.reserve(samples.size());
  for (const auto& s : samples) {
    preds.push_back(model.predict(s.image));
    labels.push_back(s.label);
  }
  return bench::evaluate(preds, labels, model.config().num_classes);
}

/// Indices of a training batch for `step`, drawn from an RNG keyed by (seed, step).
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, long step, std::size_t stream, std::size_t batch,
                                              std::size_t population) {
  if (population == 0) throw DimensionError("cannot draw a batch from an empty split");
  std::mt19937_64 rng(bench::mix_seed(bench::mix_seed(seed, static_cast<std::uint64_t>(step)), stream));
  std::uniform_int_distribution<std::size_t> pick(0, population - 1);
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = pick(rng);
  return out;
}

/// Supervised training of backbone and decoder on the source domain. The
/// backbone is left frozen afterwards.
inline void pretrain_source(SegModel& model, const std::vector<bench::Sample>& source, long steps, std::size_t batch,
                            double lr, std::uint64_t seed) {
  model.backbone().set_trainable(true);
  AdamW opt;
  auto params = model.backbone().named_params();
  opt.add_group("backbone", lr, params);
  opt.add_group("decoder", lr, model.decoder().named_params());
  try {
    for (long s = 0; s < steps; ++s) {
      auto idx = batch_indices(seed, s, 0, batch, source.size());
      std::vector<const bench::Sample*> b;
      for (auto i : idx) b.push_back(&source[i]);
      dg_step(model, opt, b, s);
    }
  } catch (const NumericError& e) {
    std::ostringstream os;
    os << "pretraining diverged (seed " << seed << ", lr " << lr << ", batch " << batch << "): " << e.what();
    model.backbone().set_trainable(false);
    throw NumericError(os.str());
  }
  model.backbone().set_trainable(false);
  for (auto& p : model.decoder().named_params()) {
    p.tensor->set_requires_grad(false);
    p.tensor->clear_grad();
  }
}

}  // namespace ea::train
