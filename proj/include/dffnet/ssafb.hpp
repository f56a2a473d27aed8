#pragma once

#include <string>

#include "dffnet/ops.hpp"
#include "dffnet/params.hpp"

/// Spectral-Spatial Adaptive Fusion Block.
///
///   F'_h = F_h + C1x1(relu(C1x1(GAP_spatial(F_h))))        (broadcast over H x W)
///   F'_x = F_x + C5x5([avg_c(F_x), max_c(F_x)])            (broadcast over channels)
///   F_o  = C1x1(shuffle_2([F'_h, F'_x]))
///
/// Both attentions are additive residuals with no sigmoid gate. The 1x1
/// convolutions on the pooled C-vector are stored as linear layers.
namespace dffnet::ssafb {

struct SsafbConfig {
  std::size_t channels = 64;
  std::size_t squeeze = 4;
  std::size_t spatial_kernel = 5;

  std::size_t hidden() const { return std::max<std::size_t>(1, channels / squeeze); }
};

template <class T>
void add_params(ParamStore<T>& store, const std::string& prefix, const SsafbConfig& cfg, Rng& rng) {
  const std::size_t C = cfg.channels, k = cfg.spatial_kernel;
  init::dense(store, prefix + ".ca.fc1", Shape{cfg.hidden(), C}, rng);
  init::dense(store, prefix + ".ca.fc2", Shape{C, cfg.hidden()}, rng);
  init::dense(store, prefix + ".sa.conv", Shape{1, 2, k, k}, rng);
  init::dense(store, prefix + ".fuse", Shape{C, 2 * C, 1, 1}, rng);
}

template <class T>
Var<T> channel_attention(const BoundParams<T>& p, const std::string& prefix, Var<T> fh) {
  Tape<T>& tape = *fh.tape;
  if (fh.shape().size() != 4) tape.fail("ssafb.channel_attention", "expected B x C x H x W, got " + shape_str(fh.shape()));
  Var<T> d = ops::pool_spatial(fh, ops::PoolKind::avg);
  Var<T> a = ops::linear(ops::relu(ops::linear(d, p[prefix + ".ca.fc1.w"], p[prefix + ".ca.fc1.b"])),
                         p[prefix + ".ca.fc2.w"], p[prefix + ".ca.fc2.b"]);
  return ops::add_broadcast(fh, ops::reshape(a, Shape{fh.dim(0), fh.dim(1), 1, 1}));
}

template <class T>
Var<T> spatial_attention(const BoundParams<T>& p, const std::string& prefix, const SsafbConfig& cfg, Var<T> fx) {
  Tape<T>& tape = *fx.tape;
  if (fx.shape().size() != 4) tape.fail("ssafb.spatial_attention", "expected B x C x H x W, got " + shape_str(fx.shape()));
  Var<T> pooled = ops::concat<T>({ops::pool_channel(fx, ops::PoolKind::avg), ops::pool_channel(fx, ops::PoolKind::max)}, 1);
  Var<T> m = ops::conv2d(pooled, p[prefix + ".sa.conv.w"], p[prefix + ".sa.conv.b"],
                         ops::ConvSpec::same2d(2, 1, cfg.spatial_kernel));
  return ops::add_broadcast(fx, m);
}

template <class T>
Var<T> fuse(const BoundParams<T>& p, const std::string& prefix, const SsafbConfig& cfg, Var<T> fh, Var<T> fx) {
  Tape<T>& tape = *fh.tape;
  if (fh.shape() != fx.shape()) {
    tape.fail("ssafb.fuse", "stream shapes " + shape_str(fh.shape()) + " and " + shape_str(fx.shape()) + " differ");
  }
  Var<T> mixed = ops::channel_shuffle(ops::concat<T>({fh, fx}, 1), 2);
  return ops::conv2d(mixed, p[prefix + ".fuse.w"], p[prefix + ".fuse.b"], ops::ConvSpec::same2d(2 * cfg.channels, cfg.channels, 1));
}

template <class T>
struct SsafbOutput {
  Var<T> hsi;    // F_h + F_o
  Var<T> aux;    // F_x + F_o
  Var<T> fused;  // F_o
};

template <class T>
SsafbOutput<T> forward(const BoundParams<T>& p, const std::string& prefix, const SsafbConfig& cfg, Var<T> fh, Var<T> fx) {
  Tape<T>& tape = *fh.tape;
  if (fh.shape() != fx.shape()) {
    tape.fail("ssafb", "stream shapes " + shape_str(fh.shape()) + " and " + shape_str(fx.shape()) + " differ");
  }
  Var<T> fo = fuse(p, prefix, cfg, channel_attention(p, prefix, fh), spatial_attention(p, prefix, cfg, fx));
  return {ops::add(fh, fo), ops::add(fx, fo), fo};
}

}  // namespace dffnet::ssafb
