#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dffnet/io.hpp"
#include "dffnet/rng.hpp"
#include "dffnet/tensor.hpp"

namespace dffnet::data {

/// Co-registered modalities. hsi: bands x H x W, aux: channels x H x W,
/// labels: H x W with 0 = unlabeled and 1..K classes.
struct Scene {
  Tensor<double> hsi;
  Tensor<double> aux;
  Tensor<std::int32_t> labels;
  std::size_t classes = 0;
  std::map<std::string, std::string> meta;

  std::size_t height() const { return labels.dim(0); }
  std::size_t width() const { return labels.dim(1); }
  std::size_t bands() const { return hsi.dim(0); }
  std::size_t aux_channels() const { return aux.dim(0); }

  void validate() const {
    if (labels.rank() != 2) throw ShapeError("scene: labels must be rank 2, got " + shape_str(labels.shape()));
    if (hsi.rank() != 3 || aux.rank() != 3) throw ShapeError("scene: hsi and aux must be rank 3");
    const Shape hw{height(), width()};
    if (Shape{hsi.dim(1), hsi.dim(2)} != hw || Shape{aux.dim(1), aux.dim(2)} != hw) {
      throw ShapeError("scene: spatial size mismatch hsi " + shape_str(hsi.shape()) + ", aux " + shape_str(aux.shape()) +
                       ", labels " + shape_str(labels.shape()));
    }
    for (auto v : labels.data()) {
      if (v < 0 || static_cast<std::size_t>(v) > classes) {
        throw FormatError("scene: label " + std::to_string(v) + " outside [0, " + std::to_string(classes) + "]");
      }
    }
  }
};

inline void save_scene(const std::filesystem::path& dir, const Scene& s) {
  s.validate();
  std::filesystem::create_directories(dir);
  io::write_tensor(dir / "hsi.dtns", s.hsi);
  io::write_tensor(dir / "aux.dtns", s.aux);
  io::write_tensor(dir / "labels.dtns", s.labels);
  std::ofstream meta(dir / "meta", std::ios::trunc);
  meta << "classes=" << s.classes << "\n";
  for (const auto& [k, v] : s.meta) {
    if (k != "classes") meta << k << "=" << v << "\n";
  }
  if (!meta) throw Error("cannot write '" + (dir / "meta").string() + "'");
}

inline std::map<std::string, std::string> read_kv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline Scene load_scene(const std::filesystem::path& dir) {
  Scene s;
  s.hsi = io::read_tensor<double>(dir / "hsi.dtns");
  s.aux = io::read_tensor<double>(dir / "aux.dtns");
  io::Record lab = io::read_file(dir / "labels.dtns");
  if (lab.dtype != io::DType::i32) throw FormatError("labels.dtns must hold i32 values, got " + std::string(io::dtype_name(lab.dtype)));
  s.labels = Tensor<std::int32_t>(lab.shape, lab.as<std::int32_t>());
  s.meta = read_kv(dir / "meta");
  if (s.meta.count("classes")) {
    s.classes = std::stoull(s.meta.at("classes"));
  } else {
    std::int32_t k = 0;
    for (auto v : s.labels.data()) k = std::max(k, v);
    s.classes = static_cast<std::size_t>(k);
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// PCA

struct EigenDecomposition {
  std::vector<double> values;   // descending
  std::vector<double> vectors;  // n x n, column j is the vector for values[j]
};

/// Cyclic Jacobi eigendecomposition of a symmetric row-major n x n matrix.
inline EigenDecomposition symmetric_eigen(std::vector<double> a, std::size_t n) {
  if (a.size() != n * n) throw ShapeError("symmetric_eigen: matrix is not n x n");
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1;
  auto A = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };
  double scale = 0;
  for (double x : a) scale += x * x;
  scale = std::sqrt(scale);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += A(i, j) * A(i, j);
    if (std::sqrt(off) <= 1e-15 * scale || off == 0) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = A(p, q);
        if (apq == 0) continue;
        const double theta = (A(q, q) - A(p, p)) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return A(x, x) > A(y, y); });
  EigenDecomposition e{std::vector<double>(n), std::vector<double>(n * n)};
  for (std::size_t j = 0; j < n; ++j) {
    e.values[j] = A(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) e.vectors[k * n + j] = v[k * n + order[j]];
  }
  return e;
}

struct PcaModel {
  Tensor<double> mean;         // bands
  Tensor<double> components;   // k x bands, orthonormal rows
  Tensor<double> eigenvalues;  // k, non-increasing

  std::size_t bands() const { return mean.numel(); }
  std::size_t k() const { return eigenvalues.numel(); }
};

/// Top-k principal directions of the rows of `pixels` (n x bands), using the
/// n-1 normalised covariance. Each component's largest-magnitude entry is positive.
inline PcaModel pca_fit(const Tensor<double>& pixels, std::size_t k) {
  if (pixels.rank() != 2) throw ShapeError("pca_fit: expected n x bands, got " + shape_str(pixels.shape()));
  const std::size_t n = pixels.dim(0), b = pixels.dim(1);
  if (n < 2) throw Error("pca_fit: need at least 2 pixels, got " + std::to_string(n));
  if (k == 0 || k > b) throw Error("pca_fit: k=" + std::to_string(k) + " not in [1, " + std::to_string(b) + "]");
  std::vector<double> mean(b, 0.0), cov(b * b, 0.0), row(b);
  const double* x = pixels.raw();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < b; ++j) mean[j] += x[i * b + j];
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < b; ++j) row[j] = x[i * b + j] - mean[j];
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t l = j; l < b; ++l) cov[j * b + l] += row[j] * row[l];
  }
  for (std::size_t j = 0; j < b; ++j) {
    for (std::size_t l = j; l < b; ++l) {
      cov[j * b + l] /= static_cast<double>(n - 1);
      cov[l * b + j] = cov[j * b + l];
    }
  }
  EigenDecomposition e = symmetric_eigen(std::move(cov), b);
  PcaModel m{Tensor<double>(Shape{b}, mean), Tensor<double>(Shape{k, b}), Tensor<double>(Shape{k})};
  for (std::size_t c = 0; c < k; ++c) {
    m.eigenvalues[c] = std::max(0.0, e.values[c]);
    std::size_t arg = 0;
    for (std::size_t j = 1; j < b; ++j) {
      if (std::abs(e.vectors[j * b + c]) > std::abs(e.vectors[arg * b + c])) arg = j;
    }
    const double sign = e.vectors[arg * b + c] < 0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < b; ++j) m.components[c * b + j] = sign * e.vectors[j * b + c];
  }
  return m;
}

/// (pixels - mean) * components^T.
inline Tensor<double> pca_transform(const PcaModel& m, const Tensor<double>& pixels) {
  if (pixels.rank() != 2 || pixels.dim(1) != m.bands()) {
    throw ShapeError("pca_transform: expected n x " + std::to_string(m.bands()) + ", got " + shape_str(pixels.shape()));
  }
  const std::size_t n = pixels.dim(0), b = m.bands(), k = m.k();
  Tensor<double> out(Shape{n, k});
  std::vector<double> row(b);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < b; ++j) row[j] = pixels[i * b + j] - m.mean[j];
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < b; ++j) s += row[j] * m.components[c * b + j];
      out[i * k + c] = s;
    }
  }
  return out;
}

/// channels x H x W cube to (H*W) x channels pixel rows, optionally restricted to `pixels`.
inline Tensor<double> cube_to_pixels(const Tensor<double>& cube, const std::vector<std::size_t>* pixels = nullptr) {
  const std::size_t c = cube.dim(0), hw = cube.dim(1) * cube.dim(2);
  const std::size_t n = pixels ? pixels->size() : hw;
  if (n == 0) throw Error("no pixels selected");
  Tensor<double> out(Shape{n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t px = pixels ? (*pixels)[i] : i;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = cube[j * hw + px];
  }
  return out;
}

inline Tensor<double> pixels_to_cube(const Tensor<double>& rows, std::size_t h, std::size_t w) {
  const std::size_t n = rows.dim(0), c = rows.dim(1);
  if (n != h * w) throw ShapeError("pixels_to_cube: " + std::to_string(n) + " rows for a " + std::to_string(h) + "x" + std::to_string(w) + " grid");
  Tensor<double> out(Shape{c, h, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * n + i] = rows[i * c + j];
  return out;
}

// ---------------------------------------------------------------------------
// Patches

/// Reflect index without edge repetition: ... 2 1 | 0 1 2 ... n-1 | n-2 ...
inline std::size_t reflect_index(long long i, std::size_t n) {
  if (n == 1) return 0;
  const long long period = 2 * static_cast<long long>(n - 1);
  long long r = i % period;
  if (r < 0) r += period;
  if (r >= static_cast<long long>(n)) r = period - r;
  return static_cast<std::size_t>(r);
}

struct Sample {
  Tensor<double> hsi;  // 1 x k x p x p
  Tensor<double> aux;  // c x p x p
  int label = 0;       // 1..K
  std::size_t row = 0, col = 0;
};

/// p x p window of a channels x H x W cube centred at (row, col), reflect padded.
template <class T>
void copy_window(const Tensor<double>& cube, std::size_t row, std::size_t col, std::size_t p, T* dst) {
  const std::size_t c = cube.dim(0), h = cube.dim(1), w = cube.dim(2);
  const long long r0 = static_cast<long long>(row) - static_cast<long long>(p / 2);
  const long long c0 = static_cast<long long>(col) - static_cast<long long>(p / 2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = cube.raw() + ch * h * w;
    for (std::size_t i = 0; i < p; ++i) {
      const std::size_t ri = reflect_index(r0 + static_cast<long long>(i), h);
      for (std::size_t j = 0; j < p; ++j) *dst++ = static_cast<T>(src[ri * w + reflect_index(c0 + static_cast<long long>(j), w)]);
    }
  }
}

/// Patch pair around a labeled pixel. `hsi` is the (reduced) k x H x W cube.
inline Sample extract_patch(const Tensor<double>& hsi, const Tensor<double>& aux, const Tensor<std::int32_t>& labels,
                            std::size_t row, std::size_t col, std::size_t p) {
  if (p == 0 || p % 2 == 0) throw Error("extract_patch: patch size must be odd, got " + std::to_string(p));
  if (row >= labels.dim(0) || col >= labels.dim(1)) {
    throw Error("extract_patch: pixel (" + std::to_string(row) + ", " + std::to_string(col) + ") outside scene");
  }
  const int lab = labels[row * labels.dim(1) + col];
  if (lab <= 0) throw Error("extract_patch: pixel (" + std::to_string(row) + ", " + std::to_string(col) + ") is unlabeled");
  Sample s{Tensor<double>(Shape{1, hsi.dim(0), p, p}), Tensor<double>(Shape{aux.dim(0), p, p}), lab, row, col};
  copy_window(hsi, row, col, p, s.hsi.raw());
  copy_window(aux, row, col, p, s.aux.raw());
  return s;
}

// ---------------------------------------------------------------------------
// Splitting

struct Split {
  std::vector<std::size_t> train;  // linear pixel indices row * W + col
  std::vector<std::size_t> test;
};

/// Per class: shuffle its pixels (raster order, seeded), first round(fraction * n)
/// go to train (at least one when the class has two or more pixels).
inline Split split_dataset(const Tensor<std::int32_t>& labels, std::size_t classes, double train_fraction,
                           std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw Error("split: train fraction must be in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(classes + 1);
  for (std::size_t i = 0; i < labels.numel(); ++i) {
    const auto v = labels[i];
    if (v > 0) by_class.at(static_cast<std::size_t>(v)).push_back(i);
  }
  Rng rng(seed);
  Split out;
  for (std::size_t c = 1; c <= classes; ++c) {
    auto& px = by_class[c];
    rng.shuffle(px);
    std::size_t n = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(px.size())));
    if (n == 0 && px.size() >= 2) n = 1;
    if (n == px.size() && px.size() >= 2) n = px.size() - 1;
    out.train.insert(out.train.end(), px.begin(), px.begin() + static_cast<std::ptrdiff_t>(n));
    out.test.insert(out.test.end(), px.begin() + static_cast<std::ptrdiff_t>(n), px.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SynthConfig {
  std::size_t classes = 5;
  std::size_t size = 64;
  std::size_t bands = 64;
  std::size_t aux_channels = 1;
  std::uint64_t seed = 42;
  double noise = 0.05;
  std::size_t sites_per_class = 3;
};

/// Smooth class signature: three Gaussian bumps over the band axis.
inline std::vector<double> synth_signature(std::size_t bands, Rng& rng) {
  std::vector<double> s(bands, 0.0);
  const double nb = static_cast<double>(bands);
  for (int bump = 0; bump < 3; ++bump) {
    const double centre = rng.uniform(0.0, nb), width = rng.uniform(0.06, 0.18) * nb, amp = rng.uniform(0.4, 1.0);
    for (std::size_t b = 0; b < bands; ++b) {
      const double z = (static_cast<double>(b) - centre) / width;
      s[b] += amp * std::exp(-0.5 * z * z);
    }
  }
  return s;
}

/// Voronoi class map, per-class spectral signatures plus noise, and per-class
/// oriented sinusoid textures plus noise on the auxiliary channels.
inline Scene synth_generate(const SynthConfig& cfg) {
  if (cfg.classes < 2) throw Error("synth: need at least 2 classes, got " + std::to_string(cfg.classes));
  if (cfg.size == 0 || cfg.bands == 0 || cfg.aux_channels == 0) throw Error("synth: empty scene dimension");
  if (cfg.noise < 0) throw Error("synth: noise must be non-negative");
  const std::size_t K = cfg.classes, n = cfg.size, hw = n * n;
  Rng rng(cfg.seed);

  const std::size_t sites = K * std::max<std::size_t>(1, cfg.sites_per_class);
  std::vector<double> sy(sites), sx(sites);
  for (std::size_t i = 0; i < sites; ++i) {
    sy[i] = rng.uniform(0.0, static_cast<double>(n));
    sx[i] = rng.uniform(0.0, static_cast<double>(n));
  }
  std::vector<std::vector<double>> sig(K);
  for (auto& s : sig) s = synth_signature(cfg.bands, rng);
  std::vector<double> freq(K), angle(K), phase(K * cfg.aux_channels);
  for (std::size_t c = 0; c < K; ++c) {
    freq[c] = 0.08 + 0.30 * static_cast<double>(c) / static_cast<double>(K - 1);
    angle[c] = std::numbers::pi * static_cast<double>(c) / static_cast<double>(K);
  }
  for (auto& p : phase) p = rng.uniform(0.0, 2 * std::numbers::pi);

  Scene s{Tensor<double>(Shape{cfg.bands, n, n}), Tensor<double>(Shape{cfg.aux_channels, n, n}),
          Tensor<std::int32_t>(Shape{n, n}), K, {}};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t i = 0; i < sites; ++i) {
        const double dy = static_cast<double>(r) + 0.5 - sy[i], dx = static_cast<double>(c) + 0.5 - sx[i];
        const double d = dy * dy + dx * dx;
        if (d < bd) bd = d, best = i;
      }
      s.labels[r * n + c] = static_cast<std::int32_t>(best % K + 1);
    }
  }
  for (std::size_t px = 0; px < hw; ++px) {
    const auto& g = sig[static_cast<std::size_t>(s.labels[px] - 1)];
    for (std::size_t b = 0; b < cfg.bands; ++b) s.hsi[b * hw + px] = g[b] + cfg.noise * rng.normal();
  }
  for (std::size_t a = 0; a < cfg.aux_channels; ++a) {
    for (std::size_t px = 0; px < hw; ++px) {
      const std::size_t k = static_cast<std::size_t>(s.labels[px] - 1);
      const double r = static_cast<double>(px / n), c = static_cast<double>(px % n);
      const double u = std::cos(angle[k]) * c + std::sin(angle[k]) * r;
      s.aux[a * hw + px] = std::sin(2 * std::numbers::pi * freq[k] * u + phase[k * cfg.aux_channels + a]) + cfg.noise * rng.normal();
    }
  }
  s.meta = {{"classes", std::to_string(K)},         {"size", std::to_string(n)},
            {"bands", std::to_string(cfg.bands)},    {"aux_channels", std::to_string(cfg.aux_channels)},
            {"seed", std::to_string(cfg.seed)},      {"noise", std::to_string(cfg.noise)},
            {"generator", "voronoi-gaussian-sinusoid"}};
  return s;
}

}  // namespace dffnet::data
