#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "earth_adapter/spectral.hpp"
#include "support.hpp"

using namespace ea;
using namespace ea::spectral;
using ea::testing::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor checkerboard(std::size_t n) {
  Tensor t(Shape{1, n, n});
  for (std::size_t h = 0; h < n; ++h)
    for (std::size_t w = 0; w < n; ++w) t[h * n + w] = ((h + w) % 2 == 0) ? 1.0 : -1.0;
  return t;
}

}  // namespace

TEST(Dft, MatchesBruteForceCentered) {
  std::mt19937_64 rng(10);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {5, 7}, {6, 4}}) {
    Tensor x = random_tensor({2, h, w}, rng);
    Spectrum s = dft2d(x);
    for (std::size_t c = 0; c < 2; ++c) {
      std::vector<double> plane(x.data().begin() + c * h * w, x.data().begin() + (c + 1) * h * w);
      auto ref = ea::testing::brute_dft_centered(plane, h, w);
      for (std::size_t i = 0; i < h * w; ++i) {
        EXPECT_NEAR(s.real[c * h * w + i], ref[i].real(), 1e-10);
        EXPECT_NEAR(s.imag[c * h * w + i], ref[i].imag(), 1e-10);
      }
    }
  }
}

TEST(Dft, ConstantGridIsPureDc) {
  Tensor x(Shape{1, 8, 8}, 0.7);
  Spectrum s = dft2d(x);
  for (std::size_t i = 0; i < 64; ++i) {
    if (i == 4 * 8 + 4) {
      EXPECT_NEAR(s.real[i], 0.7 * 64, 1e-10);
    } else {
      EXPECT_LT(std::hypot(s.real[i], s.imag[i]), 1e-10);
    }
  }
}

TEST(Dft, ImpulseHasFlatMagnitude) {
  Tensor x(Shape{1, 6, 6}, 0.0);
  x[0] = 1.0;
  Spectrum s = dft2d(x);
  for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(std::hypot(s.real[i], s.imag[i]), 1.0, 1e-12);
}

TEST(Dft, RoundtripAndParseval) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({3, 16, 16}, rng);
  Spectrum s = dft2d(x);
  EXPECT_LT(max_abs_diff(idft2d(s), x), 1e-10);
  double ex = 0.0, es = 0.0;
  for (double v : x.data()) ex += v * v;
  for (std::size_t i = 0; i < s.real.size(); ++i) es += s.real[i] * s.real[i] + s.imag[i] * s.imag[i];
  EXPECT_NEAR(ex, es / 256.0, 1e-8 * ex);
}

TEST(Dft, ZeroSpectrumAndCheckerboard) {
  Spectrum z = dft2d(Tensor(Shape{1, 4, 4}, 0.0));
  const Tensor zg = idft2d(z);
  for (double v : zg.data()) EXPECT_EQ(v, 0.0);
  Tensor cb = checkerboard(8);
  Spectrum s = dft2d(cb);
  // The only nonzero bin is the Nyquist pair, which the shift moves to (0,0).
  EXPECT_NEAR(s.real[0], 64.0, 1e-10);
  for (std::size_t i = 1; i < 64; ++i) EXPECT_LT(std::hypot(s.real[i], s.imag[i]), 1e-10);
  EXPECT_LT(max_abs_diff(idft2d(s), cb), 1e-12);
}

TEST(Dft, LargeImaginaryResidueIsRejected) {
  Spectrum s = dft2d(Tensor(Shape{1, 4, 4}, 0.0));
  s.imag[5] = 1.0;  // breaks Hermitian symmetry
  EXPECT_THROW(idft2d(s), ConsistencyError);
}

TEST(FreqMask, Enumeration) {
  EXPECT_EQ(freq_mask(8, 8, 0.0).count(), 1u);
  EXPECT_TRUE(freq_mask(8, 8, 0.0)(4, 4));
  EXPECT_EQ(freq_mask(8, 8, 1.0).count(), 64u);
  FreqMask m = freq_mask(8, 8, 0.3);
  std::size_t ones = 0;
  for (std::size_t u = 0; u < 8; ++u)
    for (std::size_t v = 0; v < 8; ++v) {
      const bool expect = u >= 3 && u <= 5 && v >= 3 && v <= 5;
      EXPECT_EQ(m(u, v), expect) << u << "," << v;
      ones += m(u, v);
    }
  EXPECT_EQ(ones, 9u);
  EXPECT_EQ(m.count(), 9u);
}

TEST(FreqMask, RangeAndShapeErrors) {
  EXPECT_THROW(freq_mask(8, 8, -0.1), RangeError);
  EXPECT_THROW(freq_mask(8, 8, 1.1), RangeError);
  EXPECT_THROW(freq_mask(8, 6, 0.3), DimensionError);
}

TEST(FreqMask, Monotone) {
  for (double r1 = 0.0; r1 <= 1.0; r1 += 0.1)
    for (double r2 = r1; r2 <= 1.0; r2 += 0.1) {
      FreqMask a = freq_mask(16, 16, r1), b = freq_mask(16, 16, r2);
      for (std::size_t u = 0; u < 16; ++u)
        for (std::size_t v = 0; v < 16; ++v) EXPECT_LE(a(u, v), b(u, v));
    }
}

TEST(Split, ConstantAndCheckerboard) {
  Tensor x(Shape{2, 8, 8}, -0.4);
  for (double rho : {0.0, 0.3, 1.0}) {
    auto p = split_frequency(x, rho);
    EXPECT_LT(max_abs_diff(p.low, x), 1e-12);
    for (double v : p.high.data()) EXPECT_LT(std::abs(v), 1e-12);
  }
  Tensor cb = checkerboard(8);
  auto p = split_frequency(cb, 0.3);
  for (double v : p.low.data()) EXPECT_LT(std::abs(v), 1e-12);
  EXPECT_LT(max_abs_diff(p.high, cb), 1e-12);
}

TEST(Split, PartitionAndLinearity) {
  std::mt19937_64 rng(12);
  for (double rho : {0.0, 0.1, 0.3, 0.7, 1.0}) {
    Tensor x = random_tensor({2, 16, 16}, rng), y = random_tensor({2, 16, 16}, rng);
    auto px = split_frequency(x, rho), py = split_frequency(y, rho);
    Tensor sum(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) sum[i] = px.low[i] + px.high[i];
    EXPECT_LT(max_abs_diff(sum, x), 1e-10);
    Tensor comb(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) comb[i] = 2.0 * x[i] - 0.5 * y[i];
    auto pc = split_frequency(comb, rho);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_NEAR(pc.low[i], 2.0 * px.low[i] - 0.5 * py.low[i], 1e-9);
      EXPECT_NEAR(pc.high[i], 2.0 * px.high[i] - 0.5 * py.high[i], 1e-9);
    }
  }
}

TEST(Split, SmoothInputsAreMostlyLow) {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({1, 16, 16}, rng);
  // Separable 5-tap binomial blur applied twice, periodic boundary.
  const double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
  for (int pass = 0; pass < 4; ++pass) {
    Tensor y(x.shape(), 0.0);
    for (std::size_t h = 0; h < 16; ++h)
      for (std::size_t w = 0; w < 16; ++w)
        for (int d = -2; d <= 2; ++d) {
          const std::size_t hh = (h + 16 + d) % 16, ww = (w + 16 + d) % 16;
          y[h * 16 + w] += (pass % 2 ? k[d + 2] * x[hh * 16 + w] : k[d + 2] * x[h * 16 + ww]);
        }
    x = y;
  }
  auto p = split_frequency(x, 0.3);
  EXPECT_GT(ea::testing::energy(p.low), ea::testing::energy(p.high));
}

TEST(Split, TokenLayoutRoundtrip) {
  std::mt19937_64 rng(14);
  Tensor tokens = random_tensor({16, 5}, rng);
  Tensor grid = tokens_to_grid(tokens, 4, 4);
  EXPECT_EQ(grid.shape(), (Shape{5, 4, 4}));
  EXPECT_EQ(grid[(2 * 4 + 1) * 4 + 3], tokens[(1 * 4 + 3) * 5 + 2]);
  EXPECT_EQ(max_abs_diff(grid_to_tokens(grid), tokens), 0.0);
  EXPECT_THROW(square_side(15), DimensionError);
}

TEST(Split, AutodiffBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  Tensor x = random_tensor({16, 3}, rng), wl = random_tensor({16, 3}, rng), wh = random_tensor({16, 3}, rng);
  auto rep = ea::testing::check_gradients(
      [&](Graph& g) {
        auto [lo, hi] = frequency_split(g.param(x), 0.3);
        return add(sum(mul(lo, g.constant(wl))), sum(mul(hi, g.constant(wh))));
      },
      {{"x", &x}});
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
}
