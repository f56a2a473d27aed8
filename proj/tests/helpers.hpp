#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "dffnet/rng.hpp"
#include "dffnet/tensor.hpp"

namespace testing_util {

using dffnet::Shape;
using dffnet::Tensor;

inline Tensor<double> randn(Shape s, std::uint64_t seed, double scale = 1.0) {
  dffnet::Rng rng(seed);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline Tensor<double> uniform(Shape s, std::uint64_t seed, double lo, double hi) {
  dffnet::Rng rng(seed);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Full 2-D DFT of one H x W plane by direct summation, written independently
/// of the library's oracle: F[v][u] = sum_y sum_x x[y][x] e^{-2 pi j (u x / W + v y / H)}.
inline std::vector<std::complex<double>> dft_plane(const double* x, std::size_t H, std::size_t W) {
  std::vector<std::complex<double>> out(H * W);
  const double pi = std::acos(-1.0);
  for (std::size_t v = 0; v < H; ++v)
    for (std::size_t u = 0; u < W; ++u) {
      std::complex<double> acc = 0;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const double ang = -2 * pi * (static_cast<double>(u * xx % W) / static_cast<double>(W) +
                                        static_cast<double>(v * y % H) / static_cast<double>(H));
          acc += x[y * W + xx] * std::polar(1.0, ang);
        }
      out[v * W + u] = acc;
    }
  return out;
}

}  // namespace testing_util
