#pragma once

#include <string>

#include "dffnet/fft.hpp"
#include "dffnet/ops.hpp"
#include "dffnet/params.hpp"

/// Dynamic Filter Block.
///
/// The feature map is moved to the frequency domain, multiplied by a complex
/// filter that is a softmax-weighted mixture of N learnable bases (the
/// weights come from an MLP over the globally pooled input), moved back, and
/// passed through a three-branch feed-forward network:
///
///   K(x)  = sum_n softmax(MLP(GAP(x)))_n * F_n
///   y     = irfft2(K(x) * rfft2(x))
///   out   = y + DWConv(y) + irfft2(DWConv([Re; Im] rfft2(y)))
namespace dffnet::dfb {

struct FfnSpec {
  std::size_t spatial_kernel = 3;
  std::size_t frequency_kernel = 3;
};

/// Shape of one block. `height`/`width` are the spatial size of the maps it
/// filters; the bases are sized to their half-spectrum.
struct DfbConfig {
  std::size_t channels = 64;
  std::size_t height = 11;
  std::size_t width = 11;
  std::size_t bases = 4;
  FfnSpec ffn{};

  std::size_t half_width() const { return width / 2 + 1; }
  std::size_t mlp_hidden() const { return std::max<std::size_t>(1, channels / 4); }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0) throw ShapeError("dfb: empty geometry");
    if (bases == 0) throw ShapeError("dfb: need at least one filter basis");
    if (ffn.spatial_kernel % 2 == 0 || ffn.frequency_kernel % 2 == 0) throw ShapeError("dfb: FFN kernels must be odd");
  }
};

/// Registers `prefix.bank.{re,im}`, `prefix.mlp.fc{1,2}`, `prefix.ffn.{spatial,freq}`.
///
/// Bases start near all-pass: re ~ 1 + N(0, 0.02), im ~ N(0, 0.02).
template <class T>
void add_params(ParamStore<T>& store, const std::string& prefix, const DfbConfig& cfg, Rng& rng) {
  cfg.validate();
  const Shape bank{cfg.bases, cfg.channels, cfg.height, cfg.half_width()};
  store.add(prefix + ".bank.re", init::normal<T>(bank, 1.0, 0.02, rng));
  store.add(prefix + ".bank.im", init::normal<T>(bank, 0.0, 0.02, rng));
  init::dense(store, prefix + ".mlp.fc1", Shape{cfg.mlp_hidden(), cfg.channels}, rng);
  init::dense(store, prefix + ".mlp.fc2", Shape{cfg.bases, cfg.mlp_hidden()}, rng);
  const std::size_t ks = cfg.ffn.spatial_kernel, kf = cfg.ffn.frequency_kernel;
  init::dense(store, prefix + ".ffn.spatial", Shape{cfg.channels, 1, ks, ks}, rng);
  init::dense(store, prefix + ".ffn.freq", Shape{2 * cfg.channels, 1, kf, kf}, rng);
}

template <class T>
struct DynamicFilter {
  Var<T> weights;  // B x N mixture weights
  Var<T> filter;   // B x 2C x H x Wf stacked [re; im]
};

/// w = softmax(MLP(GAP(x))), K = sum_n w_n F_n.
template <class T>
DynamicFilter<T> generate_filter(const BoundParams<T>& p, const std::string& prefix, const DfbConfig& cfg, Var<T> x) {
  Tape<T>& tape = *x.tape;
  if (x.shape().size() != 4 || x.dim(1) != cfg.channels || x.dim(2) != cfg.height || x.dim(3) != cfg.width) {
    tape.fail("dfb.generate_filter", "input " + shape_str(x.shape()) + " does not match bank for C=" +
                                         std::to_string(cfg.channels) + " H=" + std::to_string(cfg.height) +
                                         " W=" + std::to_string(cfg.width));
  }
  const std::size_t B = x.dim(0);
  Var<T> pooled = ops::pool_spatial(x, ops::PoolKind::avg);
  Var<T> h = ops::relu(ops::linear(pooled, p[prefix + ".mlp.fc1.w"], p[prefix + ".mlp.fc1.b"]));
  Var<T> logits = ops::linear(h, p[prefix + ".mlp.fc2.w"], p[prefix + ".mlp.fc2.b"]);
  Var<T> w = ops::softmax(logits);
  const std::size_t per_basis = 2 * cfg.channels * cfg.height * cfg.half_width();
  Var<T> bank = ops::concat<T>({p[prefix + ".bank.re"], p[prefix + ".bank.im"]}, 1);
  Var<T> mixed = ops::matmul(w, ops::reshape(bank, Shape{cfg.bases, per_basis}));
  Var<T> k = ops::reshape(mixed, Shape{B, 2 * cfg.channels, cfg.height, cfg.half_width()});
  return {w, k};
}

/// irfft2(K * rfft2(x)).
template <class T>
Var<T> apply_filter(Var<T> x, Var<T> filter) {
  Tape<T>& tape = *x.tape;
  if (x.shape().size() != 4) tape.fail("dfb.apply_filter", "expected B x C x H x W, got " + shape_str(x.shape()));
  const Shape want{x.dim(0), 2 * x.dim(1), x.dim(2), x.dim(3) / 2 + 1};
  if (filter.shape() != want) {
    tape.fail("dfb.apply_filter", "filter " + shape_str(filter.shape()) + " vs spectrum " + shape_str(want));
  }
  return ops::irfft2(ops::complex_mul(filter, ops::rfft2(x)), x.dim(3));
}

/// x + DWConv_spatial(x) + irfft2(DWConv_freq([Re; Im] rfft2(x))).
template <class T>
Var<T> ffn(const BoundParams<T>& p, const std::string& prefix, const DfbConfig& cfg, Var<T> x) {
  const std::size_t C = cfg.channels;
  auto spatial = ops::ConvSpec::depthwise2d(C, cfg.ffn.spatial_kernel);
  auto freq = ops::ConvSpec::depthwise2d(2 * C, cfg.ffn.frequency_kernel);
  Var<T> s = ops::conv2d(x, p[prefix + ".ffn.spatial.w"], p[prefix + ".ffn.spatial.b"], spatial);
  Var<T> f = ops::conv2d(ops::rfft2(x), p[prefix + ".ffn.freq.w"], p[prefix + ".ffn.freq.b"], freq);
  return ops::add(ops::add(x, s), ops::irfft2(f, x.dim(3)));
}

template <class T>
Var<T> forward(const BoundParams<T>& p, const std::string& prefix, const DfbConfig& cfg, Var<T> x) {
  DynamicFilter<T> k = generate_filter(p, prefix, cfg, x);
  return ffn(p, prefix, cfg, apply_filter(x, k.filter));
}

/// Splits a stacked B x 2C x H x Wf filter into a CompTensor for sample `b`.
template <class T>
CompTensor<T> unstack(const Tensor<T>& stacked, std::size_t b, std::size_t width) {
  const Shape& s = stacked.shape();
  const std::size_t C = s.at(1) / 2, H = s.at(2), Wf = s.at(3), blk = C * H * Wf;
  CompTensor<T> out{Tensor<T>(Shape{C, H, Wf}), Tensor<T>(Shape{C, H, Wf}), H, width};
  const T* src = stacked.raw() + b * 2 * blk;
  std::copy(src, src + blk, out.re.raw());
  std::copy(src + blk, src + 2 * blk, out.im.raw());
  out.validate();
  return out;
}

}  // namespace dffnet::dfb
