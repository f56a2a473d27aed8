#include <gtest/gtest.h>

#include <cmath>
#include <complex>

#include "dffnet/fft.hpp"
#include "helpers.hpp"

using namespace dffnet;
using testing_util::dft_plane;
using testing_util::randn;
using spectral::Strategy;

namespace {

constexpr double kTol = 1e-10;

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Compares every stored half-spectrum bin with direct summation.
void expect_matches_direct(const Tensor<double>& x, const CompTensor<double>& f) {
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1), Wf = W / 2 + 1;
  const std::size_t planes = x.numel() / (H * W);
  for (std::size_t p = 0; p < planes; ++p) {
    const auto ref = dft_plane(x.raw() + p * H * W, H, W);
    for (std::size_t v = 0; v < H; ++v)
      for (std::size_t u = 0; u < Wf; ++u) {
        const std::size_t i = (p * H + v) * Wf + u;
        ASSERT_NEAR(f.re[i], ref[v * W + u].real(), kTol) << "H=" << H << " W=" << W << " v=" << v << " u=" << u;
        ASSERT_NEAR(f.im[i], ref[v * W + u].imag(), kTol) << "H=" << H << " W=" << W << " v=" << v << " u=" << u;
      }
  }
}

/// Real inverse of a half-spectrum: columns other than DC and (even W) Nyquist
/// stand for themselves and their conjugate mirror, so they count twice.
Tensor<double> direct_irfft(const CompTensor<double>& f) {
  const std::size_t H = f.height, W = f.width, Wf = W / 2 + 1;
  const double pi = std::acos(-1.0);
  Tensor<double> x(Shape{H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t xx = 0; xx < W; ++xx) {
      double acc = 0;
      for (std::size_t v = 0; v < H; ++v)
        for (std::size_t u = 0; u < Wf; ++u) {
          const double c = (u == 0 || (W % 2 == 0 && u == W / 2)) ? 1.0 : 2.0;
          const double ang = 2 * pi * (static_cast<double>(u * xx % W) / W + static_cast<double>(v * y % H) / H);
          const std::complex<double> F(f.re[v * Wf + u], f.im[v * Wf + u]);
          acc += c * (F * std::polar(1.0, ang)).real();
        }
      x.at(y, xx) = acc / static_cast<double>(H * W);
    }
  return x;
}

}  // namespace

TEST(Rfft2, MatchesDirectSumForAllSmallSizes) {
  for (std::size_t H = 1; H <= 16; ++H)
    for (std::size_t W = 1; W <= 16; ++W) {
      const auto x = randn({2, H, W}, 100 * H + W);
      const auto f = rfft2(x);
      ASSERT_EQ(f.re.shape(), (Shape{2, H, W / 2 + 1}));
      EXPECT_EQ(f.height, H);
      EXPECT_EQ(f.width, W);
      expect_matches_direct(x, f);
    }
}

TEST(Rfft2, SeparablePathMatchesDirectSum) {
  for (auto [H, W] : {std::pair<std::size_t, std::size_t>{33, 40}, {11, 11}, {7, 16}, {1, 48}})
    expect_matches_direct(randn({1, H, W}, H * W), rfft2(randn({1, H, W}, H * W), Strategy::separable));
}

TEST(Rfft2, MatchesLibraryNaiveDft) {
  const auto x = randn({3, 5, 6}, 9);
  const auto full = hermitian_complete(rfft2(x));
  const auto ref = naive_dft2(x);
  EXPECT_LE(max_abs_diff(full.re, ref.re), kTol);
  EXPECT_LE(max_abs_diff(full.im, ref.im), kTol);
}

TEST(Rfft2, DenseAndSeparableAgree) {
  for (auto [H, W] : {std::pair<std::size_t, std::size_t>{11, 11}, {8, 9}, {16, 16}, {3, 2}}) {
    const auto x = randn({2, 3, H, W}, H + 7 * W);
    const auto a = rfft2(x, Strategy::dense), b = rfft2(x, Strategy::separable);
    EXPECT_LE(max_abs_diff(a.re, b.re), 1e-12);
    EXPECT_LE(max_abs_diff(a.im, b.im), 1e-12);
    EXPECT_LE(max_abs_diff(irfft2(a, Strategy::dense), irfft2(a, Strategy::separable)), 1e-12);
  }
}

TEST(Rfft2, ConstantPlaneHasOnlyDc) {
  const auto f = rfft2(Tensor<double>(Shape{4, 4}, 1.0));
  for (std::size_t i = 0; i < f.re.numel(); ++i) {
    EXPECT_NEAR(f.re[i], i == 0 ? 16.0 : 0.0, 1e-12);
    EXPECT_NEAR(f.im[i], 0.0, 1e-12);
  }
}

TEST(Rfft2, ImpulseIsFlat) {
  Tensor<double> x(Shape{4, 4});
  x.at(0, 0) = 1;
  const auto f = rfft2(x);
  for (std::size_t i = 0; i < f.re.numel(); ++i) {
    EXPECT_NEAR(f.re[i], 1.0, 1e-12);
    EXPECT_NEAR(f.im[i], 0.0, 1e-12);
  }
}

TEST(Rfft2, ConjugateSymmetryOfDcColumn) {
  const std::size_t H = 7, W = 6, Wf = 4;
  const auto f = rfft2(randn({H, W}, 3));
  for (std::size_t v = 0; v < H; ++v)
    for (std::size_t u : {std::size_t{0}, W / 2}) {
      EXPECT_NEAR(f.re[v * Wf + u], f.re[((H - v) % H) * Wf + u], 1e-12);
      EXPECT_NEAR(f.im[v * Wf + u], -f.im[((H - v) % H) * Wf + u], 1e-12);
    }
}

TEST(Rfft2, Linearity) {
  const auto x = randn({5, 8}, 1), y = randn({5, 8}, 2);
  const double a = 0.7, b = -1.3;
  Tensor<double> z(x.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) z[i] = a * x[i] + b * y[i];
  const auto fx = rfft2(x), fy = rfft2(y), fz = rfft2(z);
  for (std::size_t i = 0; i < fz.re.numel(); ++i) {
    EXPECT_NEAR(fz.re[i], a * fx.re[i] + b * fy.re[i], 1e-12);
    EXPECT_NEAR(fz.im[i], a * fx.im[i] + b * fy.im[i], 1e-12);
  }
}

TEST(Rfft2, Parseval) {
  for (auto [H, W] : {std::pair<std::size_t, std::size_t>{6, 7}, {11, 11}, {40, 33}}) {
    const auto x = randn({H, W}, H * 3 + W);
    const auto full = hermitian_complete(rfft2(x));
    double ex = 0, ef = 0;
    for (double v : x.data()) ex += v * v;
    for (std::size_t i = 0; i < full.re.numel(); ++i) ef += full.re[i] * full.re[i] + full.im[i] * full.im[i];
    EXPECT_NEAR(ex, ef / static_cast<double>(H * W), 1e-9 * ex);
  }
}

TEST(Irfft2, RoundTrip) {
  for (std::size_t H = 1; H <= 16; ++H)
    for (std::size_t W = 1; W <= 16; ++W) {
      const auto x = randn({2, H, W}, 7 * H + W);
      ASSERT_LE(max_abs_diff(irfft2(rfft2(x)), x), kTol) << H << "x" << W;
    }
  const auto big = randn({2, 48, 37}, 5);
  EXPECT_LE(max_abs_diff(irfft2(rfft2(big)), big), kTol);
}

TEST(Irfft2, DcOnlySpectrumIsConstant) {
  CompTensor<double> f{Tensor<double>(Shape{4, 3}), Tensor<double>(Shape{4, 3}), 4, 4};
  f.re[0] = 16;
  const auto x = irfft2(f);
  for (double v : x.data()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Irfft2, MatchesDirectInverseOfArbitrarySpectrum) {
  for (auto [H, W] : {std::pair<std::size_t, std::size_t>{5, 8}, {6, 7}, {4, 1}, {11, 11}, {34, 34}}) {
    const std::size_t Wf = W / 2 + 1;
    CompTensor<double> f{randn({H, Wf}, H), randn({H, Wf}, W), H, W};
    EXPECT_LE(max_abs_diff(irfft2(f), direct_irfft(f)), kTol) << H << "x" << W;
  }
}

TEST(Irfft2, MatchesLibraryNaiveInverse) {
  const auto f = rfft2(randn({6, 5}, 4));
  const auto ref = naive_idft2(hermitian_complete(f));
  EXPECT_LE(max_abs_diff(irfft2(f), ref.re), kTol);
  for (double v : ref.im.data()) EXPECT_NEAR(v, 0.0, kTol);
}

TEST(Rfft2, RejectsBadMetadata) {
  CompTensor<double> f{Tensor<double>(Shape{4, 3}), Tensor<double>(Shape{4, 3}), 4, 7};
  EXPECT_THROW(irfft2(f), ShapeError);
  EXPECT_THROW(rfft2(Tensor<double>(Shape{5})), ShapeError);
}

TEST(Rfft2, SinglePrecisionTracksDouble) {
  const auto x = randn({2, 11, 11}, 8);
  const auto fd = rfft2(x);
  const auto ff = rfft2(x.cast<float>());
  for (std::size_t i = 0; i < fd.re.numel(); ++i) {
    EXPECT_NEAR(ff.re[i], fd.re[i], 1e-4);
    EXPECT_NEAR(ff.im[i], fd.im[i], 1e-4);
  }
}

TEST(SpectralOps, StackedLayout) {
  Tape<double> t;
  const auto x0 = randn({2, 3, 5, 6}, 11);
  auto s = ops::rfft2(t.leaf(x0, "x"));
  ASSERT_EQ(s.shape(), (Shape{2, 6, 5, 4}));
  const auto ref = rfft2(x0);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < 5; ++v)
        for (std::size_t u = 0; u < 4; ++u) {
          EXPECT_EQ(s.value().at(b, c, v, u), ref.re.at(b, c, v, u));
          EXPECT_EQ(s.value().at(b, c + 3, v, u), ref.im.at(b, c, v, u));
        }
  auto back = ops::irfft2(s, 6);
  EXPECT_LE(max_abs_diff(back.value(), x0), kTol);
}

TEST(SpectralOps, ComplexMul) {
  Tape<double> t;
  auto a = t.leaf(Tensor<double>::from({1, 2, 1, 1}, {1, 2}), "a");
  auto b = t.leaf(Tensor<double>::from({1, 2, 1, 1}, {3, 4}), "b");
  const auto& y = ops::complex_mul(a, b).value();
  EXPECT_EQ(y[0], -5.0);
  EXPECT_EQ(y[1], 10.0);
}
