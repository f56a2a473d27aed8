#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>
#include <numbers>
#include <utility>
#include <vector>

#include "dffnet/autodiff.hpp"
#include "dffnet/kernels.hpp"
#include "dffnet/tensor.hpp"

namespace dffnet {

/// Half-spectrum of a real signal over its last two axes.
///
/// `re` and `im` have shape (..., H, W/2 + 1); `height`/`width` record the
/// spatial size of the signal (the width cannot be recovered from W/2 + 1).
template <class T>
struct CompTensor {
  Tensor<T> re;
  Tensor<T> im;
  std::size_t height = 0;
  std::size_t width = 0;

  static std::size_t half_width(std::size_t w) { return w / 2 + 1; }

  void validate() const {
    if (re.shape() != im.shape()) {
      throw ShapeError("CompTensor: re " + shape_str(re.shape()) + " vs im " + shape_str(im.shape()));
    }
    const Shape& s = re.shape();
    if (s.size() < 2 || height == 0 || width == 0 || s[s.size() - 2] != height || s.back() != half_width(width)) {
      throw ShapeError("CompTensor: inconsistent H/W metadata H=" + std::to_string(height) + " W=" +
                       std::to_string(width) + " for spectrum " + shape_str(s));
    }
  }
};

/// Full (non-redundant and redundant) complex spectrum, shape (..., H, W).
template <class T>
struct FullSpectrum {
  Tensor<T> re;
  Tensor<T> im;
};

namespace spectral {

/// Transform strategy. Small planes use one dense DFT matrix per direction
/// (a single GEMM over the batch); larger planes use the separable
/// width-then-height factorization.
enum class Strategy { automatic, dense, separable };

inline constexpr std::size_t kDenseLimit = 1024;  // H * W

/// Twiddle tables for one (H, W) pair. All stored row-major.
///   separable: cos_w, sin_w (W x Wf); cos_h, sin_h (H x H, symmetric);
///              inv_cos_w, inv_sin_w (Wf x W, weighted by Hermitian
///              multiplicity / (H W))
///   dense:     fwd_re, fwd_im (HW x HWf); inv_re, inv_im (HWf x HW)
template <class T>
struct Plan {
  std::size_t H, W, Wf;
  bool dense;
  std::vector<T> cos_w, sin_w, cos_h, sin_h, inv_cos_w, inv_sin_w;
  std::vector<T> fwd_re, fwd_im, inv_re, inv_im;

  Plan(std::size_t h, std::size_t w, Strategy s = Strategy::automatic)
      : H(h), W(w), Wf(w / 2 + 1), dense(s == Strategy::dense || (s == Strategy::automatic && h * w <= kDenseLimit)) {
    // exp(2 pi i k / n), exact at multiples of a quarter turn.
    struct Root {
      double c, s;
    };
    auto root = [](std::size_t k, std::size_t n) -> Root {
      k %= n;
      if ((4 * k) % n == 0) {
        constexpr Root quarter[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
        return quarter[4 * k / n];
      }
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      return {std::cos(a), std::sin(a)};
    };
    const double norm = 1.0 / static_cast<double>(H * W);
    auto multiplicity = [&](std::size_t u) { return (u == 0 || (W % 2 == 0 && u == W / 2)) ? 1.0 : 2.0; };
    if (dense) {
      const std::size_t n = H * W, m = H * Wf;
      fwd_re.resize(n * m);
      fwd_im.resize(n * m);
      inv_re.resize(m * n);
      inv_im.resize(m * n);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          for (std::size_t v = 0; v < H; ++v)
            for (std::size_t u = 0; u < Wf; ++u) {
              // theta = 2 pi (u x / W + v y / H), reduced exactly modulo H W.
              const Root r = root(u * x * H + v * y * W, H * W);
              const std::size_t i = y * W + x, k = v * Wf + u;
              fwd_re[i * m + k] = static_cast<T>(r.c);
              fwd_im[i * m + k] = static_cast<T>(-r.s);
              inv_re[k * n + i] = static_cast<T>(multiplicity(u) * norm * r.c);
              inv_im[k * n + i] = static_cast<T>(-multiplicity(u) * norm * r.s);
            }
      return;
    }
    cos_w.resize(W * Wf);
    sin_w.resize(W * Wf);
    inv_cos_w.resize(Wf * W);
    inv_sin_w.resize(Wf * W);
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t u = 0; u < Wf; ++u) {
        const Root r = root(u * x, W);
        cos_w[x * Wf + u] = static_cast<T>(r.c);
        sin_w[x * Wf + u] = static_cast<T>(r.s);
        inv_cos_w[u * W + x] = static_cast<T>(multiplicity(u) * norm * r.c);
        inv_sin_w[u * W + x] = static_cast<T>(multiplicity(u) * norm * r.s);
      }
    }
    cos_h.resize(H * H);
    sin_h.resize(H * H);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t v = 0; v < H; ++v) {
        const Root r = root(v * y, H);
        cos_h[y * H + v] = static_cast<T>(r.c);
        sin_h[y * H + v] = static_cast<T>(r.s);
      }
    }
  }
};

template <class T>
std::shared_ptr<const Plan<T>> plan(std::size_t h, std::size_t w, Strategy s = Strategy::automatic) {
  static std::mutex mu;
  static std::map<std::tuple<std::size_t, std::size_t, int>, std::shared_ptr<const Plan<T>>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[{h, w, static_cast<int>(s)}];
  if (!slot) slot = std::make_shared<const Plan<T>>(h, w, s);
  return slot;
}

// Height-direction transforms operate on an H x (nb * Wf) "height-major"
// layout so a whole batch is one GEMM.

template <class T>
void to_height_major(const T* blocks, std::size_t nb, std::size_t H, std::size_t Wf, T* hm) {
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t u = 0; u < Wf; ++u) hm[y * nb * Wf + b * Wf + u] = blocks[(b * H + y) * Wf + u];
}

template <class T>
void from_height_major(const T* hm, std::size_t nb, std::size_t H, std::size_t Wf, T* blocks) {
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t u = 0; u < Wf; ++u) blocks[(b * H + y) * Wf + u] = hm[y * nb * Wf + b * Wf + u];
}

/// Forward: x (nb blocks of H x W) -> re, im (nb blocks of H x Wf).
template <class T>
void forward(const Plan<T>& p, std::size_t nb, const T* x, T* re, T* im) {
  if (p.dense) {
    kernels::gemm(false, false, nb, p.H * p.Wf, p.H * p.W, x, p.fwd_re.data(), re);
    kernels::gemm(false, false, nb, p.H * p.Wf, p.H * p.W, x, p.fwd_im.data(), im);
    return;
  }
  const std::size_t rows = nb * p.H, n = nb * p.Wf;
  std::vector<T> a(rows * p.Wf), b(rows * p.Wf);
  kernels::gemm(false, false, rows, p.Wf, p.W, x, p.cos_w.data(), a.data());
  kernels::gemm(false, false, rows, p.Wf, p.W, x, p.sin_w.data(), b.data());
  for (auto& v : b) v = -v;
  std::vector<T> ah(rows * p.Wf), bh(rows * p.Wf), rh(rows * p.Wf), ih(rows * p.Wf);
  to_height_major(a.data(), nb, p.H, p.Wf, ah.data());
  to_height_major(b.data(), nb, p.H, p.Wf, bh.data());
  // re = Ch A + Sh B ; im = Ch B - Sh A
  kernels::gemm(false, false, p.H, n, p.H, p.cos_h.data(), ah.data(), rh.data());
  kernels::gemm(false, false, p.H, n, p.H, p.sin_h.data(), bh.data(), rh.data(), true);
  kernels::gemm(false, false, p.H, n, p.H, p.sin_h.data(), ah.data(), ih.data());
  for (auto& v : ih) v = -v;
  kernels::gemm(false, false, p.H, n, p.H, p.cos_h.data(), bh.data(), ih.data(), true);
  from_height_major(rh.data(), nb, p.H, p.Wf, re);
  from_height_major(ih.data(), nb, p.H, p.Wf, im);
}

/// Adjoint of `forward`: (g_re, g_im) -> g_x.
template <class T>
void forward_adjoint(const Plan<T>& p, std::size_t nb, const T* gre, const T* gim, T* gx) {
  if (p.dense) {
    kernels::gemm(false, true, nb, p.H * p.W, p.H * p.Wf, gre, p.fwd_re.data(), gx);
    kernels::gemm(false, true, nb, p.H * p.W, p.H * p.Wf, gim, p.fwd_im.data(), gx, true);
    return;
  }
  const std::size_t rows = nb * p.H, n = nb * p.Wf;
  std::vector<T> grh(rows * p.Wf), gih(rows * p.Wf), gah(rows * p.Wf), gbh(rows * p.Wf);
  to_height_major(gre, nb, p.H, p.Wf, grh.data());
  to_height_major(gim, nb, p.H, p.Wf, gih.data());
  // gA = Ch Gr - Sh Gi ; gB = Sh Gr + Ch Gi
  kernels::gemm(false, false, p.H, n, p.H, p.sin_h.data(), gih.data(), gah.data());
  for (auto& v : gah) v = -v;
  kernels::gemm(false, false, p.H, n, p.H, p.cos_h.data(), grh.data(), gah.data(), true);
  kernels::gemm(false, false, p.H, n, p.H, p.sin_h.data(), grh.data(), gbh.data());
  kernels::gemm(false, false, p.H, n, p.H, p.cos_h.data(), gih.data(), gbh.data(), true);
  std::vector<T> ga(rows * p.Wf), gb(rows * p.Wf);
  from_height_major(gah.data(), nb, p.H, p.Wf, ga.data());
  from_height_major(gbh.data(), nb, p.H, p.Wf, gb.data());
  // gX = gA Cw^T - gB Sw^T
  for (auto& v : gb) v = -v;
  kernels::gemm(false, true, rows, p.W, p.Wf, ga.data(), p.cos_w.data(), gx);
  kernels::gemm(false, true, rows, p.W, p.Wf, gb.data(), p.sin_w.data(), gx, true);
}

/// Inverse: re, im (nb blocks of H x Wf) -> x (nb blocks of H x W), real,
/// normalized by 1/(H W). The half-spectrum is treated as Hermitian-completed:
/// imaginary parts that completion forces to cancel (u = 0, Nyquist) drop out.
template <class T>
void inverse(const Plan<T>& p, std::size_t nb, const T* re, const T* im, T* x) {
  if (p.dense) {
    kernels::gemm(false, false, nb, p.H * p.W, p.H * p.Wf, re, p.inv_re.data(), x);
    kernels::gemm(false, false, nb, p.H * p.W, p.H * p.Wf, im, p.inv_im.data(), x, true);
    return;
  }
  const std::size_t rows = nb * p.H, n = nb * p.Wf;
  std::vector<T> rh(rows * p.Wf), ih(rows * p.Wf), grh(rows * p.Wf), gih(rows * p.Wf);
  to_height_major(re, nb, p.H, p.Wf, rh.data());
  to_height_major(im, nb, p.H, p.Wf, ih.data());
  // g_r = Ch Fr - Sh Fi ; g_i = Ch Fi + Sh Fr
  kernels::gemm(false, false, p.H, n, p.H, p.sin_h.data(), ih.data(), grh.data());
  for (auto& v : grh) v = -v;
  kernels::gemm(false, false, p.H, n, p.H, p.cos_h.data(), rh.data(), grh.data(), true);
  kernels::gemm(false, false, p.H, n, p.H, p.cos_h.data(), ih.data(), gih.data());
  kernels::gemm(false, false, p.H, n, p.H, p.sin_h.data(), rh.data(), gih.data(), true);
  std::vector<T> gr(rows * p.Wf), gi(rows * p.Wf);
  from_height_major(grh.data(), nb, p.H, p.Wf, gr.data());
  from_height_major(gih.data(), nb, p.H, p.Wf, gi.data());
  // x = g_r Mc - g_i Ms
  for (auto& v : gi) v = -v;
  kernels::gemm(false, false, rows, p.W, p.Wf, gr.data(), p.inv_cos_w.data(), x);
  kernels::gemm(false, false, rows, p.W, p.Wf, gi.data(), p.inv_sin_w.data(), x, true);
}

/// Adjoint of `inverse`: g_x -> (g_re, g_im).
template <class T>
void inverse_adjoint(const Plan<T>& p, std::size_t nb, const T* gx, T* gre, T* gim) {
  if (p.dense) {
    kernels::gemm(false, true, nb, p.H * p.Wf, p.H * p.W, gx, p.inv_re.data(), gre);
    kernels::gemm(false, true, nb, p.H * p.Wf, p.H * p.W, gx, p.inv_im.data(), gim);
    return;
  }
  const std::size_t rows = nb * p.H, n = nb * p.Wf;
  std::vector<T> ggr(rows * p.Wf), ggi(rows * p.Wf);
  kernels::gemm(false, true, rows, p.Wf, p.W, gx, p.inv_cos_w.data(), ggr.data());
  kernels::gemm(false, true, rows, p.Wf, p.W, gx, p.inv_sin_w.data(), ggi.data());
  for (auto& v : ggi) v = -v;
  std::vector<T> ggrh(rows * p.Wf), ggih(rows * p.Wf), gfr(rows * p.Wf), gfi(rows * p.Wf);
  to_height_major(ggr.data(), nb, p.H, p.Wf, ggrh.data());
  to_height_major(ggi.data(), nb, p.H, p.Wf, ggih.data());
  // gFr = Ch g_r + Sh g_i ; gFi = -Sh g_r + Ch g_i
  kernels::gemm(false, false, p.H, n, p.H, p.cos_h.data(), ggrh.data(), gfr.data());
  kernels::gemm(false, false, p.H, n, p.H, p.sin_h.data(), ggih.data(), gfr.data(), true);
  kernels::gemm(false, false, p.H, n, p.H, p.sin_h.data(), ggrh.data(), gfi.data());
  for (auto& v : gfi) v = -v;
  kernels::gemm(false, false, p.H, n, p.H, p.cos_h.data(), ggih.data(), gfi.data(), true);
  from_height_major(gfr.data(), nb, p.H, p.Wf, gre);
  from_height_major(gfi.data(), nb, p.H, p.Wf, gim);
}

inline void require_spatial(const Shape& s, const char* what) {
  if (s.size() < 2) throw ShapeError(std::string(what) + ": need at least H x W, got " + shape_str(s));
}

}  // namespace spectral

/// f(u, v) = sum_y sum_x x(y, x) exp(-j 2 pi (u x / W + v y / H)) over the last
/// two axes, unnormalized, stored for u in [0, W/2].
template <class T>
CompTensor<T> rfft2(const Tensor<T>& x, spectral::Strategy strategy = spectral::Strategy::automatic) {
  spectral::require_spatial(x.shape(), "rfft2");
  const Shape& s = x.shape();
  const std::size_t H = s[s.size() - 2], W = s.back();
  Shape hs = s;
  hs.back() = W / 2 + 1;
  CompTensor<T> out{Tensor<T>(hs), Tensor<T>(hs), H, W};
  const auto p = spectral::plan<T>(H, W, strategy);
  spectral::forward(*p, x.numel() / (H * W), x.raw(), out.re.raw(), out.im.raw());
  return out;
}

/// Real inverse with 1/(H W) normalization.
template <class T>
Tensor<T> irfft2(const CompTensor<T>& spec, spectral::Strategy strategy = spectral::Strategy::automatic) {
  spec.validate();
  Shape s = spec.re.shape();
  s.back() = spec.width;
  Tensor<T> out(s);
  const auto p = spectral::plan<T>(spec.height, spec.width, strategy);
  spectral::inverse(*p, spec.re.numel() / (spec.height * p->Wf), spec.re.raw(), spec.im.raw(), out.raw());
  return out;
}

/// Direct O((H W)^2) evaluation of the forward transform over the full
/// spectrum: the reference against which the fast path is tested.
template <class T>
FullSpectrum<T> naive_dft2(const Tensor<T>& x) {
  spectral::require_spatial(x.shape(), "naive_dft2");
  const Shape& s = x.shape();
  const std::size_t H = s[s.size() - 2], W = s.back();
  if (H * W > 4096) throw Error("naive_dft2: H*W = " + std::to_string(H * W) + " exceeds oracle cap 4096");
  FullSpectrum<T> out{Tensor<T>(s), Tensor<T>(s)};
  const std::size_t nb = x.numel() / (H * W);
  for (std::size_t b = 0; b < nb; ++b) {
    const T* xb = x.raw() + b * H * W;
    for (std::size_t v = 0; v < H; ++v)
      for (std::size_t u = 0; u < W; ++u) {
        long double sr = 0, si = 0;
        for (std::size_t yy = 0; yy < H; ++yy)
          for (std::size_t xx = 0; xx < W; ++xx) {
            const long double a = 2.0L * std::numbers::pi_v<long double> *
                                  (static_cast<long double>(u * xx) / W + static_cast<long double>(v * yy) / H);
            sr += xb[yy * W + xx] * std::cos(a);
            si -= xb[yy * W + xx] * std::sin(a);
          }
        out.re[(b * H + v) * W + u] = static_cast<T>(sr);
        out.im[(b * H + v) * W + u] = static_cast<T>(si);
      }
  }
  return out;
}

/// Direct inverse over a full spectrum, 1/(H W) normalized, complex result.
template <class T>
FullSpectrum<T> naive_idft2(const FullSpectrum<T>& f) {
  spectral::require_spatial(f.re.shape(), "naive_idft2");
  const Shape& s = f.re.shape();
  const std::size_t H = s[s.size() - 2], W = s.back();
  if (H * W > 4096) throw Error("naive_idft2: H*W exceeds oracle cap 4096");
  FullSpectrum<T> out{Tensor<T>(s), Tensor<T>(s)};
  const std::size_t nb = f.re.numel() / (H * W);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t yy = 0; yy < H; ++yy)
      for (std::size_t xx = 0; xx < W; ++xx) {
        long double sr = 0, si = 0;
        for (std::size_t v = 0; v < H; ++v)
          for (std::size_t u = 0; u < W; ++u) {
            const long double a = 2.0L * std::numbers::pi_v<long double> *
                                  (static_cast<long double>(u * xx) / W + static_cast<long double>(v * yy) / H);
            const long double fr = f.re[(b * H + v) * W + u], fi = f.im[(b * H + v) * W + u];
            sr += fr * std::cos(a) - fi * std::sin(a);
            si += fr * std::sin(a) + fi * std::cos(a);
          }
        out.re[(b * H + yy) * W + xx] = static_cast<T>(sr / (H * W));
        out.im[(b * H + yy) * W + xx] = static_cast<T>(si / (H * W));
      }
  return out;
}

/// Expands a half-spectrum to the full spectrum: stored columns are kept,
/// F(v, u) = conj(F(-v mod H, W - u)) fills columns u >= W/2 + 1.
template <class T>
FullSpectrum<T> hermitian_complete(const CompTensor<T>& spec) {
  spec.validate();
  const std::size_t H = spec.height, W = spec.width, Wf = W / 2 + 1;
  Shape s = spec.re.shape();
  s.back() = W;
  FullSpectrum<T> out{Tensor<T>(s), Tensor<T>(s)};
  const std::size_t nb = spec.re.numel() / (H * Wf);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t v = 0; v < H; ++v)
      for (std::size_t u = 0; u < W; ++u) {
        T r, i;
        if (u < Wf) {
          r = spec.re[(b * H + v) * Wf + u];
          i = spec.im[(b * H + v) * Wf + u];
        } else {
          const std::size_t mv = (H - v) % H, mu = W - u;
          r = spec.re[(b * H + mv) * Wf + mu];
          i = -spec.im[(b * H + mv) * Wf + mu];
        }
        out.re[(b * H + v) * W + u] = r;
        out.im[(b * H + v) * W + u] = i;
      }
  return out;
}

namespace ops {

/// B x C x H x W -> B x 2C x H x (W/2+1) with channels [re_0..re_{C-1}, im_0..im_{C-1}].
template <class T>
Var<T> rfft2(Var<T> x) {
  Tape<T>& tape = *x.tape;
  if (x.shape().size() != 4) tape.fail("rfft2", "expected B x C x H x W, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), Wf = W / 2 + 1;
  const auto p = spectral::plan<T>(H, W);
  const std::size_t blk = H * Wf;
  std::vector<T> re(B * C * blk), im(B * C * blk);
  spectral::forward(*p, B * C, x.value().raw(), re.data(), im.data());
  Tensor<T> out(Shape{B, 2 * C, H, Wf});
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(re.begin() + b * C * blk, re.begin() + (b + 1) * C * blk, out.raw() + b * 2 * C * blk);
    std::copy(im.begin() + b * C * blk, im.begin() + (b + 1) * C * blk, out.raw() + (b * 2 + 1) * C * blk);
  }
  return tape.record("rfft2", std::move(out), {x.id}, [ix = x.id, p, B, C, blk](Tape<T>& t, const Tensor<T>& g) {
    std::vector<T> gre(B * C * blk), gim(B * C * blk);
    for (std::size_t b = 0; b < B; ++b) {
      std::copy(g.raw() + b * 2 * C * blk, g.raw() + (b * 2 + 1) * C * blk, gre.begin() + b * C * blk);
      std::copy(g.raw() + (b * 2 + 1) * C * blk, g.raw() + (b * 2 + 2) * C * blk, gim.begin() + b * C * blk);
    }
    Tensor<T> gx(t.value(ix).shape());
    spectral::forward_adjoint(*p, B * C, gre.data(), gim.data(), gx.raw());
    t.accumulate(ix, std::move(gx));
  });
}

/// Inverse of `rfft2` for the stacked layout; `width` is the spatial W.
template <class T>
Var<T> irfft2(Var<T> spec, std::size_t width) {
  Tape<T>& tape = *spec.tape;
  const Shape& s = spec.shape();
  if (s.size() != 4 || s[1] % 2 != 0 || s[3] != width / 2 + 1) {
    tape.fail("irfft2", "inconsistent H/W metadata: spectrum " + shape_str(s) + " for width " + std::to_string(width));
  }
  const std::size_t B = s[0], C = s[1] / 2, H = s[2], Wf = s[3];
  const auto p = spectral::plan<T>(H, width);
  const std::size_t blk = H * Wf;
  std::vector<T> re(B * C * blk), im(B * C * blk);
  const T* in = spec.value().raw();
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(in + b * 2 * C * blk, in + (b * 2 + 1) * C * blk, re.begin() + b * C * blk);
    std::copy(in + (b * 2 + 1) * C * blk, in + (b * 2 + 2) * C * blk, im.begin() + b * C * blk);
  }
  Tensor<T> out(Shape{B, C, H, width});
  spectral::inverse(*p, B * C, re.data(), im.data(), out.raw());
  return tape.record("irfft2", std::move(out), {spec.id}, [is = spec.id, p, B, C, blk](Tape<T>& t, const Tensor<T>& g) {
    std::vector<T> gre(B * C * blk), gim(B * C * blk);
    spectral::inverse_adjoint(*p, B * C, g.raw(), gre.data(), gim.data());
    Tensor<T> gs(t.value(is).shape());
    for (std::size_t b = 0; b < B; ++b) {
      std::copy(gre.begin() + b * C * blk, gre.begin() + (b + 1) * C * blk, gs.raw() + b * 2 * C * blk);
      std::copy(gim.begin() + b * C * blk, gim.begin() + (b + 1) * C * blk, gs.raw() + (b * 2 + 1) * C * blk);
    }
    t.accumulate(is, std::move(gs));
  });
}

/// Element-wise complex product of two stacked spectra (B x 2C x H x Wf).
template <class T>
Var<T> complex_mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  if (a.shape() != b.shape() || a.shape().size() != 4 || a.dim(1) % 2 != 0) {
    tape.fail("complex_mul", "spectrum shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t B = a.dim(0), C = a.dim(1) / 2, blk = a.dim(2) * a.dim(3), half = C * blk;
  Tensor<T> out(a.shape());
  const T* av = a.value().raw();
  const T* bv = b.value().raw();
  for (std::size_t s = 0; s < B; ++s) {
    const std::size_t o = s * 2 * half;
    for (std::size_t i = 0; i < half; ++i) {
      const T ar = av[o + i], ai = av[o + half + i], br = bv[o + i], bi = bv[o + half + i];
      out[o + i] = ar * br - ai * bi;
      out[o + half + i] = ar * bi + ai * br;
    }
  }
  return tape.record("complex_mul", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, B, half](Tape<T>& t, const Tensor<T>& g) {
    const T* av = t.value(ia).raw();
    const T* bv = t.value(ib).raw();
    // d/da of (a * b) contracted with conj-free real pairing: ga = g * conj(b).
    auto grad_of = [&](const T* other) {
      Tensor<T> gx(t.value(ia).shape());
      for (std::size_t s = 0; s < B; ++s) {
        const std::size_t o = s * 2 * half;
        for (std::size_t i = 0; i < half; ++i) {
          const T gr = g[o + i], gi = g[o + half + i], orr = other[o + i], oi = other[o + half + i];
          gx[o + i] = gr * orr + gi * oi;
          gx[o + half + i] = gi * orr - gr * oi;
        }
      }
      return gx;
    };
    if (t.requires_grad(ia)) t.accumulate(ia, grad_of(bv));
    if (t.requires_grad(ib)) t.accumulate(ib, grad_of(av));
  });
}

}  // namespace ops
}  // namespace dffnet
