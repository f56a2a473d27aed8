#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dffnet/data.hpp"

/// Scene to network inputs: PCA on the spectra, global rescaling of the
/// components, per-channel standardisation of the auxiliary modality, and
/// batched patch extraction.
namespace dffnet::data {

struct Preprocess {
  PcaModel pca;
  double hsi_scale = 1.0;     // 1 / sqrt(leading eigenvalue)
  Tensor<double> aux_mean;    // aux channels
  Tensor<double> aux_scale;   // 1 / std per aux channel

  std::size_t components() const { return pca.k(); }
};

/// Statistics from the training pixels only.
inline Preprocess fit_preprocess(const Scene& scene, const std::vector<std::size_t>& train_pixels, std::size_t k) {
  scene.validate();
  if (k > scene.bands()) {
    throw Error("pca: " + std::to_string(k) + " components requested from " + std::to_string(scene.bands()) + " bands");
  }
  Preprocess p;
  p.pca = pca_fit(cube_to_pixels(scene.hsi, &train_pixels), k);
  const double lead = p.pca.eigenvalues[0];
  p.hsi_scale = lead > 0 ? 1.0 / std::sqrt(lead) : 1.0;
  const Tensor<double> ax = cube_to_pixels(scene.aux, &train_pixels);
  const std::size_t n = ax.dim(0), c = ax.dim(1);
  p.aux_mean = Tensor<double>(Shape{c});
  p.aux_scale = Tensor<double>(Shape{c});
  for (std::size_t j = 0; j < c; ++j) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < n; ++i) m += ax[i * c + j];
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) v += (ax[i * c + j] - m) * (ax[i * c + j] - m);
    v /= static_cast<double>(std::max<std::size_t>(1, n - 1));
    p.aux_mean[j] = m;
    p.aux_scale[j] = v > 0 ? 1.0 / std::sqrt(v) : 1.0;
  }
  return p;
}

/// Scene after preprocessing: reduced hsi (k x H x W), standardised aux.
struct Prepared {
  Tensor<double> hsi;
  Tensor<double> aux;
  Tensor<std::int32_t> labels;
  std::size_t classes = 0;
};

inline Prepared apply_preprocess(const Preprocess& p, const Scene& scene) {
  scene.validate();
  if (scene.bands() != p.pca.bands()) {
    throw ShapeError("scene has " + std::to_string(scene.bands()) + " bands, preprocessing expects " +
                     std::to_string(p.pca.bands()));
  }
  if (scene.aux_channels() != p.aux_mean.numel()) {
    throw ShapeError("scene has " + std::to_string(scene.aux_channels()) + " aux channels, preprocessing expects " +
                     std::to_string(p.aux_mean.numel()));
  }
  const std::size_t h = scene.height(), w = scene.width(), hw = h * w;
  Prepared out;
  out.hsi = pixels_to_cube(pca_transform(p.pca, cube_to_pixels(scene.hsi)), h, w);
  for (auto& v : out.hsi.data()) v *= p.hsi_scale;
  out.aux = scene.aux;
  for (std::size_t j = 0; j < scene.aux_channels(); ++j)
    for (std::size_t i = 0; i < hw; ++i) out.aux[j * hw + i] = (out.aux[j * hw + i] - p.aux_mean[j]) * p.aux_scale[j];
  out.labels = scene.labels;
  out.classes = scene.classes;
  return out;
}

/// Network-ready minibatch. Labels are zero-based (scene class - 1); -1 marks
/// an unlabeled pixel and is only produced when `allow_unlabeled` is set.
template <class T>
struct Batch {
  Tensor<T> hsi;  // B x 1 x k x p x p
  Tensor<T> aux;  // B x c x p x p
  std::vector<int> labels;
  std::vector<std::size_t> pixels;
};

template <class T>
Batch<T> make_batch(const Prepared& d, const std::vector<std::size_t>& pixels, std::size_t begin, std::size_t end,
                    std::size_t patch, bool allow_unlabeled = false) {
  if (begin >= end || end > pixels.size()) throw Error("make_batch: empty or out-of-range batch");
  if (patch == 0 || patch % 2 == 0) throw Error("patch size must be odd, got " + std::to_string(patch));
  const std::size_t B = end - begin, k = d.hsi.dim(0), c = d.aux.dim(0), w = d.labels.dim(1);
  Batch<T> b{Tensor<T>(Shape{B, 1, k, patch, patch}), Tensor<T>(Shape{B, c, patch, patch}), {}, {}};
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t px = pixels[begin + i];
    if (px >= d.labels.numel()) throw Error("make_batch: pixel index " + std::to_string(px) + " outside scene");
    const int lab = d.labels[px];
    if (lab <= 0 && !allow_unlabeled) {
      throw Error("pixel (" + std::to_string(px / w) + ", " + std::to_string(px % w) + ") is unlabeled");
    }
    copy_window(d.hsi, px / w, px % w, patch, b.hsi.raw() + i * k * patch * patch);
    copy_window(d.aux, px / w, px % w, patch, b.aux.raw() + i * c * patch * patch);
    b.labels.push_back(lab - 1);
    b.pixels.push_back(px);
  }
  return b;
}

}  // namespace dffnet::data
