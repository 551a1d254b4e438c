#pragma once

// Shared helpers for the unit and acceptance tests: a central-difference
// gradient oracle, random tensors, and a brute-force DFT.

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "earth_adapter/autodiff.hpp"
#include "earth_adapter/optim.hpp"

namespace ea::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

struct GradReport {
  double max_rel_err = 0.0;
  std::string worst;  // "name[index]"
  std::size_t checked = 0;
};

/// Compares the tape gradient of `loss_fn` against central differences for
/// every element of every tensor in `params`. The relative error of one
/// element is |a - n| / max(|a|, |n|, floor).
inline GradReport check_gradients(const std::function<Var(Graph&)>& loss_fn, const std::vector<NamedParam>& params,
                                  double h = 1e-5, double floor = 1e-6) {
  for (const auto& p : params) {
    p.tensor->set_requires_grad(true);
    p.tensor->zero_grad();
  }
  {
    Graph g;
    g.backward(loss_fn(g));
  }
  GradReport rep;
  for (const auto& p : params) {
    Tensor& t = *p.tensor;
    const std::vector<double> analytic(std::as_const(t).grad().begin(), std::as_const(t).grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      double fp, fm;
      {
        Graph g;
        fp = g.value(loss_fn(g))[0];
      }
      t[i] = orig - h;
      {
        Graph g;
        fm = g.value(loss_fn(g))[0];
      }
      t[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      ++rep.checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

/// Direct O(N^2) DFT of one H x W plane with the centered index convention.
inline std::vector<std::complex<double>> brute_dft_centered(const std::vector<double>& x, std::size_t h, std::size_t w) {
  const double pi = std::acos(-1.0);
  std::vector<std::complex<double>> out(h * w);
  for (std::size_t ku = 0; ku < h; ++ku)
    for (std::size_t kv = 0; kv < w; ++kv) {
      const long u = (static_cast<long>(ku) - static_cast<long>(h / 2) + static_cast<long>(h)) % static_cast<long>(h);
      const long v = (static_cast<long>(kv) - static_cast<long>(w / 2) + static_cast<long>(w)) % static_cast<long>(w);
      std::complex<double> acc = 0.0;
      for (std::size_t a = 0; a < h; ++a)
        for (std::size_t b = 0; b < w; ++b) {
          const double ang = -2.0 * pi * (static_cast<double>(u * static_cast<long>(a)) / static_cast<double>(h) +
                                           static_cast<double>(v * static_cast<long>(b)) / static_cast<double>(w));
          acc += x[a * w + b] * std::polar(1.0, ang);
        }
      out[ku * w + kv] = acc;
    }
  return out;
}

/// Sum of squares of a tensor.
inline double energy(const Tensor& t) {
  double e = 0.0;
  for (double v : t.data()) e += v * v;
  return e;
}

}  // namespace ea::testing
