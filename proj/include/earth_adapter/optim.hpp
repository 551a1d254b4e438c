#pragma once

// AdamW with decoupled weight decay and per-group learning rates.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "earth_adapter/tensor.hpp"

namespace ea {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct NamedParam {
  std::string name;
  Tensor* tensor = nullptr;
};

class AdamW {
 public:
  struct Slot {
    NamedParam param;
    std::size_t group = 0;
    Tensor m;
    Tensor v;
  };
  struct Group {
    std::string name;
    double lr = 1e-4;
  };

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// Registers a parameter group. Every tensor is marked as requiring grad.
  void add_group(std::string name, double lr, std::vector<NamedParam> params) {
    if (!(lr >= 0.0) || !std::isfinite(lr))
      throw RangeError("learning rate of group '" + name + "' must be finite and non-negative");
    groups_.push_back({std::move(name), lr});
    for (auto& p : params) {
      p.tensor->set_requires_grad(true);
      Slot s{p, groups_.size() - 1, Tensor(p.tensor->shape()), Tensor(p.tensor->shape())};
      slots_.push_back(std::move(s));
    }
  }

  /// One update. Parameters without a gradient buffer are skipped.
  void step() {
    for (const auto& s : slots_) {
      const Tensor& p = *s.param.tensor;
      if (!p.has_grad()) continue;
      if (p.shape() != s.m.shape())
        throw DimensionError("optimizer state of '" + s.param.name + "' does not match " + shape_str(p.shape()));
      for (double gv : p.grad())
        if (!std::isfinite(gv)) throw NumericError("non-finite gradient in parameter '" + s.param.name + "'");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      Tensor& p = *s.param.tensor;
      if (!p.has_grad()) continue;
      const double lr = groups_[s.group].lr;
      const auto g = std::as_const(p).grad();
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] -= lr * cfg_.weight_decay * p[i];
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.tensor->zero_grad();
  }

  long step_count() const noexcept { return t_; }
  void set_step_count(long t) {
    if (t < 0) throw RangeError("optimizer step counter must be non-negative");
    t_ = t;
  }
  const AdamWConfig& config() const noexcept { return cfg_; }
  std::vector<Slot>& slots() noexcept { return slots_; }
  const std::vector<Slot>& slots() const noexcept { return slots_; }
  const std::vector<Group>& groups() const noexcept { return groups_; }

 private:
  AdamWConfig cfg_;
  std::vector<Group> groups_;
  std::vector<Slot> slots_;
  long t_ = 0;
};

}  // namespace ea
