#pragma once

// 2D discrete Fourier transform with a centered spectrum, the square
// low-pass mask, and the low/high frequency decomposition of feature grids.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "earth_adapter/autodiff.hpp"
#include "earth_adapter/tensor.hpp"

namespace ea::spectral {

/// Centered spectrum: bin (floor(H/2), floor(W/2)) holds the zero frequency.
struct Spectrum {
  Tensor real;  // c x H x W
  Tensor imag;  // c x H x W
};

/// Binary H x W low-pass mask.
struct FreqMask {
  std::size_t height = 0;
  std::size_t width = 0;
  double rho = 0.0;
  std::vector<unsigned char> bits;

  bool operator()(std::size_t u, std::size_t v) const { return bits[u * width + v] != 0; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : bits) c += b;
    return c;
  }
};

/// Maximum imaginary magnitude tolerated when an inverse transform is read back as real.
inline constexpr double kImagResidueLimit = 1e-8;

namespace detail {

// Full n x n table of exp(-2 pi i k j / n), indexed k * n + j.
struct Twiddle {
  std::size_t n;
  std::vector<double> cos, sin;
  explicit Twiddle(std::size_t size) : n(size), cos(size * size), sin(size * size) {
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t r = (k * j) % n;
        const double a = 2.0 * std::numbers::pi * static_cast<double>(r) / static_cast<double>(n);
        cos[k * n + j] = std::cos(a);
        sin[k * n + j] = std::sin(a);
      }
  }
};

// In-place 1D DFT of `n` complex values spaced `stride` apart.
// sign = -1 forward, +1 inverse (unnormalized).
inline void dft1d(double* re, double* im, std::size_t n, std::size_t stride, int sign, const Twiddle& tw,
                  std::vector<double>& sr, std::vector<double>& si) {
  sr.resize(2 * n);
  si.resize(n);
  double* xr = sr.data() + n;
  for (std::size_t j = 0; j < n; ++j) {
    xr[j] = re[j * stride];
    si[j] = im[j * stride];
  }
  const double sg = static_cast<double>(sign);
  for (std::size_t k = 0; k < n; ++k) {
    const double* c = tw.cos.data() + k * n;
    const double* s = tw.sin.data() + k * n;
    double ar = 0.0, ai = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      ar += xr[j] * c[j] - sg * si[j] * s[j];
      ai += sg * xr[j] * s[j] + si[j] * c[j];
    }
    re[k * stride] = ar;
    im[k * stride] = ai;
  }
}

inline void require_grid(const Tensor& x, const char* op) {
  if (x.ndim() != 3) throw DimensionError(std::string(op) + ": expected a c x H x W grid, got " + shape_str(x.shape()));
}

// Unshifted complex 2D transform of every channel, in place.
inline void transform(std::vector<double>& re, std::vector<double>& im, std::size_t c, std::size_t h,
                      std::size_t w, int sign) {
  const Twiddle th(h), tw(w);
  std::vector<double> sr, si;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double* r = re.data() + ch * h * w;
    double* i = im.data() + ch * h * w;
    for (std::size_t row = 0; row < h; ++row) dft1d(r + row * w, i + row * w, w, 1, sign, tw, sr, si);
    for (std::size_t col = 0; col < w; ++col) dft1d(r + col, i + col, h, w, sign, th, sr, si);
  }
}

}  // namespace detail

/// Per-channel 2D DFT followed by the center shift.
inline Spectrum dft2d(const Tensor& x) {
  detail::require_grid(x, "dft2d");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> re(x.data().begin(), x.data().end()), im(x.size(), 0.0);
  detail::transform(re, im, c, h, w, -1);
  Spectrum s{Tensor(x.shape()), Tensor(x.shape())};
  const std::size_t ch_ = h / 2, cw = w / 2;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t u = 0; u < h; ++u)
      for (std::size_t v = 0; v < w; ++v) {
        // shifted[u][v] = unshifted[(u - H/2) mod H][(v - W/2) mod W]
        const std::size_t su = (u + h - ch_) % h, sv = (v + w - cw) % w;
        const std::size_t from = ch * h * w + su * w + sv;
        const std::size_t to = ch * h * w + u * w + v;
        s.real[to] = re[from];
        s.imag[to] = im[from];
      }
  return s;
}

/// Inverse of dft2d. Throws ConsistencyError if the result is not real.
inline Tensor idft2d(const Spectrum& s) {
  detail::require_grid(s.real, "idft2d");
  if (s.real.shape() != s.imag.shape())
    throw DimensionError("idft2d: real/imag shapes differ " + shape_str(s.real.shape()) + " vs " +
                         shape_str(s.imag.shape()));
  const std::size_t c = s.real.dim(0), h = s.real.dim(1), w = s.real.dim(2);
  std::vector<double> re(s.real.size()), im(s.real.size());
  const std::size_t ch_ = h / 2, cw = w / 2;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t u = 0; u < h; ++u)
      for (std::size_t v = 0; v < w; ++v) {
        const std::size_t su = (u + h - ch_) % h, sv = (v + w - cw) % w;
        re[ch * h * w + su * w + sv] = s.real[ch * h * w + u * w + v];
        im[ch * h * w + su * w + sv] = s.imag[ch * h * w + u * w + v];
      }
  detail::transform(re, im, c, h, w, +1);
  const double norm = 1.0 / static_cast<double>(h * w);
  Tensor out(s.real.shape());
  double residue = 0.0;
  for (std::size_t i = 0; i < re.size(); ++i) {
    out[i] = re[i] * norm;
    residue = std::max(residue, std::abs(im[i] * norm));
  }
  if (residue > kImagResidueLimit)
    throw ConsistencyError("idft2d: imaginary residue " + std::to_string(residue) + " exceeds tolerance");
  return out;
}

/// Square low-pass mask: 1 iff max(|u - H/2|, |v - W/2|) <= rho * H / 2.
inline FreqMask freq_mask(std::size_t height, std::size_t width, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw RangeError("frequency cutoff must lie in [0, 1], got " + std::to_string(rho));
  if (height == 0 || width == 0) throw DimensionError("frequency mask needs a non-empty grid");
  if (height != width)
    throw DimensionError("frequency mask requires a square grid, got " + std::to_string(height) + "x" +
                         std::to_string(width));
  FreqMask m{height, width, rho, std::vector<unsigned char>(height * width, 0)};
  const double limit = rho * static_cast<double>(height) / 2.0;
  const auto cu = static_cast<double>(height / 2), cv = static_cast<double>(width / 2);
  for (std::size_t u = 0; u < height; ++u)
    for (std::size_t v = 0; v < width; ++v) {
      const double d = std::max(std::abs(static_cast<double>(u) - cu), std::abs(static_cast<double>(v) - cv));
      m.bits[u * width + v] = d <= limit ? 1 : 0;
    }
  return m;
}

struct FrequencySplit {
  Tensor low;
  Tensor high;
};

/// low = IFT(M * FT(x)), high = IFT((1 - M) * FT(x)).
inline FrequencySplit split_frequency(const Tensor& x, double rho) {
  detail::require_grid(x, "split_frequency");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const FreqMask mask = freq_mask(h, w, rho);
  const Spectrum s = dft2d(x);
  Spectrum lo{s.real, s.imag}, hi{s.real, s.imag};
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t k = 0; k < h * w; ++k) {
      const std::size_t i = ch * h * w + k;
      if (mask.bits[k]) {
        hi.real[i] = 0.0;
        hi.imag[i] = 0.0;
      } else {
        lo.real[i] = 0.0;
        lo.imag[i] = 0.0;
      }
    }
  return {idft2d(lo), idft2d(hi)};
}

/// Token matrix (n x c, token t = h * W + w) to channel-major grid c x H x W.
inline Tensor tokens_to_grid(const Tensor& tokens, std::size_t height, std::size_t width) {
  if (tokens.ndim() != 2 || tokens.dim(0) != height * width)
    throw DimensionError("tokens " + shape_str(tokens.shape()) + " do not form a " + std::to_string(height) + "x" +
                         std::to_string(width) + " grid");
  const std::size_t n = tokens.dim(0), c = tokens.dim(1);
  Tensor grid(Shape{c, height, width});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t ch = 0; ch < c; ++ch) grid[ch * n + t] = tokens[t * c + ch];
  return grid;
}

inline Tensor grid_to_tokens(const Tensor& grid) {
  detail::require_grid(grid, "grid_to_tokens");
  const std::size_t c = grid.dim(0), n = grid.dim(1) * grid.dim(2);
  Tensor tokens(Shape{n, c});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t ch = 0; ch < c; ++ch) tokens[t * c + ch] = grid[ch * n + t];
  return tokens;
}

/// Side length of a square token grid with n tokens; throws when n is not a square.
inline std::size_t square_side(std::size_t n) {
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != n)
    throw DimensionError("token count " + std::to_string(n) + " does not form a square grid");
  return side;
}

/// Differentiable split of a token matrix. The masked projections are
/// self-adjoint, so each backward pass re-applies the same projection.
inline std::pair<Var, Var> frequency_split(Var tokens, double rho) {
  Graph& g = ea::detail::graph_of(tokens);
  const Tensor& x = g.value(tokens);
  if (x.ndim() != 2) throw DimensionError("frequency_split: expected n x c tokens, got " + shape_str(x.shape()));
  const std::size_t side = square_side(x.dim(0));
  FrequencySplit parts = split_frequency(tokens_to_grid(x, side, side), rho);
  const std::size_t it = tokens.id;
  auto project_back = [it, side, rho](bool low) {
    return [it, side, rho, low](Graph& gr, std::size_t self) {
      const auto& gy = gr.grad_of(self);
      const std::size_t c = gr.value_of(it).dim(1);
      Tensor gt(Shape{side * side, c}, std::vector<double>(gy.begin(), gy.end()));
      FrequencySplit p = split_frequency(tokens_to_grid(gt, side, side), rho);
      Tensor back = grid_to_tokens(low ? p.low : p.high);
      auto& ga = gr.grad_buffer(it);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += back[i];
    };
  };
  Var lo = g.record("freq_low", grid_to_tokens(parts.low), {it}, project_back(true));
  Var hi = g.record("freq_high", grid_to_tokens(parts.high), {it}, project_back(false));
  return {lo, hi};
}

}  // namespace ea::spectral
