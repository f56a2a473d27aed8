#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "dffnet/autodiff.hpp"
#include "dffnet/kernels.hpp"
#include "dffnet/tensor.hpp"

/// Differentiable primitives. Feature maps carry a leading batch axis:
/// B x C x H x W for 2-D maps, B x C x D x H x W for volumes, B x n for vectors.
namespace dffnet::ops {

namespace detail {

inline std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

template <class T>
void require_same_shape(const Tape<T>& tape, const char* op, Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    tape.fail(op, "operand shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
}

template <class T>
void require_rank(const Tape<T>& tape, const char* op, Var<T> x, std::size_t rank) {
  if (x.shape().size() != rank) {
    tape.fail(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  detail::require_same_shape(tape, "add", a, b);
  Tensor<T> out = a.value();
  out += b.value();
  return tape.record("add", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  detail::require_same_shape(tape, "sub", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return tape.record("sub", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, g);
    Tensor<T> neg = g;
    for (auto& v : neg.data()) v = -v;
    t.accumulate(ib, std::move(neg));
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  detail::require_same_shape(tape, "mul", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return tape.record("mul", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= bv[i];
      t.accumulate(ia, std::move(ga));
    }
    if (t.requires_grad(ib)) {
      Tensor<T> gb = g;
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] *= av[i];
      t.accumulate(ib, std::move(gb));
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape->record("scale", std::move(out), {a.id}, [ia = a.id, s](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> ga = g;
    for (auto& v : ga.data()) v *= s;
    t.accumulate(ia, std::move(ga));
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (auto v : a.value().data()) s += v;
  return a.tape->record("sum", Tensor<T>::scalar(s), {a.id}, [ia = a.id](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, Tensor<T>(t.value(ia).shape(), g.item()));
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().numel());
  T s = 0;
  for (auto v : a.value().data()) s += v;
  return a.tape->record("mean", Tensor<T>::scalar(s / n), {a.id}, [ia = a.id, n](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, Tensor<T>(t.value(ia).shape(), g.item() / n));
  });
}

/// max(0, x). The subgradient at 0 is 0.
template <class T>
Var<T> relu(Var<T> x) {
  Tape<T>& tape = *x.tape;
  Tensor<T> out = x.value();
  std::uint64_t h = 0x52454c55;
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const bool on = out[i] > 0;
    if (!on) out[i] = 0;
    word = (word << 1) | static_cast<std::uint64_t>(on);
    if ((i & 63) == 63) {
      h = detail::mix(h, word);
      word = 0;
    }
  }
  tape.note_kink(detail::mix(h, word));
  return tape.record("relu", std::move(out), {x.id}, [ix = x.id](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(ix);
    Tensor<T> gx = g;
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      if (!(xv[i] > 0)) gx[i] = 0;
    }
    t.accumulate(ix, std::move(gx));
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tape<T>& tape = *x.tape;
  if (shape_numel(shape) != x.value().numel()) {
    tape.fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return tape.record("reshape", x.value().reshape(std::move(shape)), {x.id}, [ix = x.id](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ix, g.reshape(t.value(ix).shape()));
  });
}

/// Concatenation along `axis`; all other dimensions must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis = 1) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Tape<T>& tape = *xs.front().tape;
  const Shape& s0 = xs.front().shape();
  if (axis >= s0.size()) tape.fail("concat", "axis out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) tape.fail("concat", "incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  Shape os = s0;
  os[axis] = total;
  Tensor<T> out(os);
  std::vector<NodeId> ids;
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.shape()[axis] * inner;
    const T* src = x.value().raw();
    for (std::size_t o = 0; o < outer; ++o) std::copy(src + o * w, src + (o + 1) * w, out.raw() + o * total * inner + off);
    off += w;
    ids.push_back(x.id);
    widths.push_back(w);
  }
  return tape.record("concat", std::move(out), ids, [ids, widths, outer, total, inner](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t w = widths[k];
      if (t.requires_grad(ids[k])) {
        Tensor<T> gx(t.value(ids[k]).shape());
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = g.raw() + o * total * inner + off;
          std::copy(src, src + w, gx.raw() + o * w);
        }
        t.accumulate(ids[k], std::move(gx));
      }
      off += w;
    }
  });
}

/// Channel permutation out[i] = in[(i mod g) * C/g + i div g] on axis 1:
/// view channels as g x (C/g), transpose, flatten.
inline std::vector<std::size_t> shuffle_permutation(std::size_t channels, std::size_t groups) {
  if (groups == 0 || channels % groups != 0) {
    throw ShapeError("channel_shuffle: " + std::to_string(channels) + " channels not divisible by " +
                     std::to_string(groups) + " groups");
  }
  const std::size_t per = channels / groups;
  std::vector<std::size_t> src(channels);
  for (std::size_t i = 0; i < channels; ++i) src[i] = (i % groups) * per + i / groups;
  return src;
}

template <class T>
Var<T> channel_shuffle(Var<T> x, std::size_t groups = 2) {
  Tape<T>& tape = *x.tape;
  const Shape& s = x.shape();
  if (s.size() < 2) tape.fail("channel_shuffle", "expected at least B x C, got " + shape_str(s));
  const std::size_t B = s[0], C = s[1];
  if (groups == 0 || C % groups != 0) {
    tape.fail("channel_shuffle", std::to_string(C) + " channels not divisible by " + std::to_string(groups));
  }
  const std::size_t inner = x.value().numel() / (B * C);
  auto src = shuffle_permutation(C, groups);
  Tensor<T> out(s);
  const T* in = x.value().raw();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* from = in + (b * C + src[c]) * inner;
      std::copy(from, from + inner, out.raw() + (b * C + c) * inner);
    }
  }
  return tape.record("channel_shuffle", std::move(out), {x.id},
                     [ix = x.id, src, B, C, inner](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T> gx(t.value(ix).shape());
                       for (std::size_t b = 0; b < B; ++b) {
                         for (std::size_t c = 0; c < C; ++c) {
                           const T* from = g.raw() + (b * C + c) * inner;
                           std::copy(from, from + inner, gx.raw() + (b * C + src[c]) * inner);
                         }
                       }
                       t.accumulate(ix, std::move(gx));
                     });
}

/// x + y where y has the same rank and each dimension equal to x's or 1.
template <class T>
Var<T> add_broadcast(Var<T> x, Var<T> y) {
  Tape<T>& tape = *x.tape;
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  if (xs.size() != ys.size()) tape.fail("add_broadcast", "rank mismatch " + shape_str(xs) + " vs " + shape_str(ys));
  for (std::size_t d = 0; d < xs.size(); ++d) {
    if (ys[d] != xs[d] && ys[d] != 1) {
      tape.fail("add_broadcast", "cannot broadcast " + shape_str(ys) + " to " + shape_str(xs));
    }
  }
  const std::size_t n = x.value().numel();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::size_t> ystride(ys.size(), 0);
    std::size_t st = 1;
    for (std::size_t d = ys.size(); d-- > 0;) {
      ystride[d] = ys[d] == 1 ? 0 : st;
      st *= ys[d];
    }
    std::vector<std::size_t> idx(xs.size(), 0);
    std::size_t yoff = 0;
    for (std::size_t i = 0; i < n; ++i) {
      (*map)[i] = yoff;
      for (std::size_t d = xs.size(); d-- > 0;) {
        ++idx[d];
        yoff += ystride[d];
        if (idx[d] < xs[d]) break;
        yoff -= ystride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  Tensor<T> out = x.value();
  const auto& yv = y.value();
  for (std::size_t i = 0; i < n; ++i) out[i] += yv[(*map)[i]];
  return tape.record("add_broadcast", std::move(out), {x.id, y.id},
                     [ix = x.id, iy = y.id, map](Tape<T>& t, const Tensor<T>& g) {
                       t.accumulate(ix, g);
                       if (t.requires_grad(iy)) {
                         Tensor<T> gy(t.value(iy).shape(), T{0});
                         for (std::size_t i = 0; i < g.numel(); ++i) gy[(*map)[i]] += g[i];
                         t.accumulate(iy, std::move(gy));
                       }
                     });
}

// ---------------------------------------------------------------------------
// Dense layers

/// (m x k) * (k x n).
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    tape.fail("matmul", "incompatible operands " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[0], k = as[1], n = bs[1];
  Tensor<T> out(Shape{m, n});
  kernels::gemm(false, false, m, n, k, a.value().raw(), b.value().raw(), out.raw());
  return tape.record("matmul", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, m, n, k](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) {
      Tensor<T> ga(Shape{m, k});
      kernels::gemm(false, true, m, k, n, g.raw(), t.value(ib).raw(), ga.raw());
      t.accumulate(ia, std::move(ga));
    }
    if (t.requires_grad(ib)) {
      Tensor<T> gb(Shape{k, n});
      kernels::gemm(true, false, k, n, m, t.value(ia).raw(), g.raw(), gb.raw());
      t.accumulate(ib, std::move(gb));
    }
  });
}

/// x (B x d_in) -> x W^T + b, W stored d_out x d_in.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>& tape = *x.tape;
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 2 || ws.size() != 2 || ws[1] != xs[1]) {
    tape.fail("linear", "input " + shape_str(xs) + " does not match weight " + shape_str(ws));
  }
  if (b.shape() != Shape{ws[0]}) tape.fail("linear", "bias " + shape_str(b.shape()) + " for " + std::to_string(ws[0]) + " outputs");
  const std::size_t B = xs[0], din = xs[1], dout = ws[0];
  Tensor<T> out(Shape{B, dout});
  kernels::gemm(false, true, B, dout, din, x.value().raw(), w.value().raw(), out.raw());
  const auto& bv = b.value();
  for (std::size_t r = 0; r < B; ++r) {
    for (std::size_t c = 0; c < dout; ++c) out[r * dout + c] += bv[c];
  }
  return tape.record("linear", std::move(out), {x.id, w.id, b.id},
                     [ix = x.id, iw = w.id, ib = b.id, B, din, dout](Tape<T>& t, const Tensor<T>& g) {
                       if (t.requires_grad(ix)) {
                         Tensor<T> gx(Shape{B, din});
                         kernels::gemm(false, false, B, din, dout, g.raw(), t.value(iw).raw(), gx.raw());
                         t.accumulate(ix, std::move(gx));
                       }
                       if (t.requires_grad(iw)) {
                         Tensor<T> gw(Shape{dout, din});
                         kernels::gemm(true, false, dout, din, B, g.raw(), t.value(ix).raw(), gw.raw());
                         t.accumulate(iw, std::move(gw));
                       }
                       if (t.requires_grad(ib)) {
                         Tensor<T> gb(Shape{dout}, T{0});
                         for (std::size_t r = 0; r < B; ++r) {
                           for (std::size_t c = 0; c < dout; ++c) gb[c] += g[r * dout + c];
                         }
                         t.accumulate(ib, std::move(gb));
                       }
                     });
}

// ---------------------------------------------------------------------------
// Normalization and losses

/// Softmax over the last axis, max-shifted.
template <class T>
Var<T> softmax(Var<T> x) {
  Tape<T>& tape = *x.tape;
  if (x.shape().empty()) tape.fail("softmax", "scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().numel() / n;
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.raw() + r * n;
    T mx = row[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += (row[i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < n; ++i) row[i] /= s;
  }
  const NodeId out_id = tape.next_id();
  return tape.record("softmax", std::move(out), {x.id}, [ix = x.id, out_id, n, rows](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(out_id);
    Tensor<T> gx(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = y.raw() + r * n;
      const T* gr = g.raw() + r * n;
      T dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += yr[i] * gr[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] = yr[i] * (gr[i] - dot);
    }
    t.accumulate(ix, std::move(gx));
  });
}

/// Mean over the batch of -log softmax(logits)[label], computed in log space.
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels) {
  Tape<T>& tape = *logits.tape;
  detail::require_rank(tape, "cross_entropy", logits, 2);
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) tape.fail("cross_entropy", "label count " + std::to_string(labels.size()) + " for batch " + std::to_string(B));
  auto probs = std::make_shared<Tensor<T>>(logits.shape());
  T total = 0;
  for (std::size_t r = 0; r < B; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= K) {
      throw Error("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(K) + ")");
    }
    const T* row = logits.value().raw() + r * K;
    T mx = row[0];
    for (std::size_t i = 1; i < K; ++i) mx = std::max(mx, row[i]);
    T s = 0;
    for (std::size_t i = 0; i < K; ++i) s += std::exp(row[i] - mx);
    const T lse = mx + std::log(s);
    total += lse - row[labels[r]];
    for (std::size_t i = 0; i < K; ++i) (*probs)[r * K + i] = std::exp(row[i] - lse);
  }
  return tape.record("cross_entropy", Tensor<T>::scalar(total / static_cast<T>(B)), {logits.id},
                     [il = logits.id, probs, labels, B, K](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T> gl = *probs;
                       for (std::size_t r = 0; r < B; ++r) gl[r * K + static_cast<std::size_t>(labels[r])] -= 1;
                       const T s = g.item() / static_cast<T>(B);
                       for (auto& v : gl.data()) v *= s;
                       t.accumulate(il, std::move(gl));
                     });
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolKind { avg, max };

/// B x C x H x W -> B x C, reducing every spatial position of each channel.
template <class T>
Var<T> pool_spatial(Var<T> x, PoolKind kind) {
  Tape<T>& tape = *x.tape;
  detail::require_rank(tape, "pool_spatial", x, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{B, C});
  const T* in = x.value().raw();
  if (kind == PoolKind::avg) {
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      T s = 0;
      for (std::size_t i = 0; i < HW; ++i) s += in[bc * HW + i];
      out[bc] = s / static_cast<T>(HW);
    }
    return tape.record("pool_spatial_avg", std::move(out), {x.id}, [ix = x.id, HW](Tape<T>& t, const Tensor<T>& g) {
      Tensor<T> gx(t.value(ix).shape());
      for (std::size_t bc = 0; bc < g.numel(); ++bc) {
        const T v = g[bc] / static_cast<T>(HW);
        std::fill(gx.raw() + bc * HW, gx.raw() + (bc + 1) * HW, v);
      }
      t.accumulate(ix, std::move(gx));
    });
  }
  auto arg = std::make_shared<std::vector<std::size_t>>(B * C);
  std::uint64_t h = 0x4d4158;
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < HW; ++i) {
      if (in[bc * HW + i] > in[bc * HW + best]) best = i;
    }
    (*arg)[bc] = best;
    out[bc] = in[bc * HW + best];
    h = detail::mix(h, best);
  }
  tape.note_kink(h);
  return tape.record("pool_spatial_max", std::move(out), {x.id}, [ix = x.id, HW, arg](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gx(t.value(ix).shape(), T{0});
    for (std::size_t bc = 0; bc < g.numel(); ++bc) gx[bc * HW + (*arg)[bc]] = g[bc];
    t.accumulate(ix, std::move(gx));
  });
}

/// B x C x H x W -> B x 1 x H x W, reducing over channels at each position.
template <class T>
Var<T> pool_channel(Var<T> x, PoolKind kind) {
  Tape<T>& tape = *x.tape;
  detail::require_rank(tape, "pool_channel", x, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{B, 1, x.dim(2), x.dim(3)});
  const T* in = x.value().raw();
  if (kind == PoolKind::avg) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < HW; ++i) {
        T s = 0;
        for (std::size_t c = 0; c < C; ++c) s += in[(b * C + c) * HW + i];
        out[b * HW + i] = s / static_cast<T>(C);
      }
    }
    return tape.record("pool_channel_avg", std::move(out), {x.id}, [ix = x.id, B, C, HW](Tape<T>& t, const Tensor<T>& g) {
      Tensor<T> gx(t.value(ix).shape());
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t i = 0; i < HW; ++i) gx[(b * C + c) * HW + i] = g[b * HW + i] / static_cast<T>(C);
        }
      }
      t.accumulate(ix, std::move(gx));
    });
  }
  auto arg = std::make_shared<std::vector<std::size_t>>(B * HW);
  std::uint64_t h = 0x434d4158;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < HW; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c) {
        if (in[(b * C + c) * HW + i] > in[(b * C + best) * HW + i]) best = c;
      }
      (*arg)[b * HW + i] = best;
      out[b * HW + i] = in[(b * C + best) * HW + i];
      h = detail::mix(h, best);
    }
  }
  tape.note_kink(h);
  return tape.record("pool_channel_max", std::move(out), {x.id}, [ix = x.id, C, HW, arg](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gx(t.value(ix).shape(), T{0});
    for (std::size_t bi = 0; bi < g.numel(); ++bi) {
      const std::size_t b = bi / HW, i = bi % HW;
      gx[(b * C + (*arg)[bi]) * HW + i] = g[bi];
    }
    t.accumulate(ix, std::move(gx));
  });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding)

/// Geometry of a convolution over up to three spatial axes (depth, height,
/// width). 2-D convolutions use depth 1 with kernel/stride/padding 1/1/0.
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> padding{0, 0, 0};
  std::size_t groups = 1;

  /// k x k, stride 1, zero "same" padding.
  static ConvSpec same2d(std::size_t cin, std::size_t cout, std::size_t k, std::size_t groups = 1) {
    if (k % 2 == 0) throw ShapeError("same padding needs an odd kernel, got " + std::to_string(k));
    ConvSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.kernel = {1, k, k};
    s.padding = {0, k / 2, k / 2};
    s.groups = groups;
    s.validate();
    return s;
  }

  static ConvSpec depthwise2d(std::size_t channels, std::size_t k) { return same2d(channels, channels, k, channels); }

  void validate() const {
    if (groups == 0 || in_channels % groups || out_channels % groups) {
      throw ShapeError("conv: channels " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                       " not divisible by groups " + std::to_string(groups));
    }
    for (std::size_t d = 0; d < 3; ++d) {
      if (kernel[d] == 0 || stride[d] == 0) throw ShapeError("conv: kernel and stride must be positive");
    }
  }

  Shape weight_shape2d() const { return {out_channels, in_channels / groups, kernel[1], kernel[2]}; }
  Shape weight_shape3d() const { return {out_channels, in_channels / groups, kernel[0], kernel[1], kernel[2]}; }

  std::size_t out_extent(std::size_t axis, std::size_t in) const {
    const std::size_t padded = in + 2 * padding[axis];
    if (padded < kernel[axis]) {
      throw ShapeError("conv: kernel " + std::to_string(kernel[axis]) + " larger than padded extent " +
                       std::to_string(padded));
    }
    return (padded - kernel[axis]) / stride[axis] + 1;
  }
};

namespace detail {

struct ConvDims {
  std::size_t B, Cin, D, H, W, Cout, Do, Ho, Wo, kd, kh, kw;
  std::size_t P() const { return Do * Ho * Wo; }
  std::size_t In() const { return D * H * W; }
  std::size_t K(std::size_t groups) const { return Cin / groups * kd * kh * kw; }
};

/// Column matrix K x (n * P) for samples [first, first + n); column index = (b - first) * P + p.
template <class T>
void im2col(const ConvSpec& s, const ConvDims& d, const T* x, T* col, std::size_t first, std::size_t n) {
  const std::size_t P = d.P(), BP = n * P;
  parallel_for(n, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = first + b0; b < first + b1; ++b) {
      std::size_t row = 0;
      for (std::size_t c = 0; c < d.Cin; ++c) {
        const T* xc = x + (b * d.Cin + c) * d.In();
        for (std::size_t a = 0; a < d.kd; ++a)
          for (std::size_t i = 0; i < d.kh; ++i)
            for (std::size_t j = 0; j < d.kw; ++j, ++row) {
              T* dst = col + row * BP + (b - first) * P;
              for (std::size_t od = 0; od < d.Do; ++od) {
                const std::ptrdiff_t zd = static_cast<std::ptrdiff_t>(od * s.stride[0] + a) - static_cast<std::ptrdiff_t>(s.padding[0]);
                for (std::size_t oh = 0; oh < d.Ho; ++oh) {
                  const std::ptrdiff_t zh = static_cast<std::ptrdiff_t>(oh * s.stride[1] + i) - static_cast<std::ptrdiff_t>(s.padding[1]);
                  T* out = dst + (od * d.Ho + oh) * d.Wo;
                  if (zd < 0 || zd >= static_cast<std::ptrdiff_t>(d.D) || zh < 0 || zh >= static_cast<std::ptrdiff_t>(d.H)) {
                    std::fill(out, out + d.Wo, T{0});
                    continue;
                  }
                  const T* src = xc + (static_cast<std::size_t>(zd) * d.H + static_cast<std::size_t>(zh)) * d.W;
                  for (std::size_t ow = 0; ow < d.Wo; ++ow) {
                    const std::ptrdiff_t zw = static_cast<std::ptrdiff_t>(ow * s.stride[2] + j) - static_cast<std::ptrdiff_t>(s.padding[2]);
                    out[ow] = (zw < 0 || zw >= static_cast<std::ptrdiff_t>(d.W)) ? T{0} : src[zw];
                  }
                }
              }
            }
      }
    }
  });
}

template <class T>
void col2im(const ConvSpec& s, const ConvDims& d, const T* col, T* dx, std::size_t first, std::size_t n) {
  const std::size_t P = d.P(), BP = n * P;
  parallel_for(n, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = first + b0; b < first + b1; ++b) {
      std::size_t row = 0;
      for (std::size_t c = 0; c < d.Cin; ++c) {
        T* xc = dx + (b * d.Cin + c) * d.In();
        for (std::size_t a = 0; a < d.kd; ++a)
          for (std::size_t i = 0; i < d.kh; ++i)
            for (std::size_t j = 0; j < d.kw; ++j, ++row) {
              const T* src = col + row * BP + (b - first) * P;
              for (std::size_t od = 0; od < d.Do; ++od) {
                const std::ptrdiff_t zd = static_cast<std::ptrdiff_t>(od * s.stride[0] + a) - static_cast<std::ptrdiff_t>(s.padding[0]);
                if (zd < 0 || zd >= static_cast<std::ptrdiff_t>(d.D)) continue;
                for (std::size_t oh = 0; oh < d.Ho; ++oh) {
                  const std::ptrdiff_t zh = static_cast<std::ptrdiff_t>(oh * s.stride[1] + i) - static_cast<std::ptrdiff_t>(s.padding[1]);
                  if (zh < 0 || zh >= static_cast<std::ptrdiff_t>(d.H)) continue;
                  T* dst = xc + (static_cast<std::size_t>(zd) * d.H + static_cast<std::size_t>(zh)) * d.W;
                  const T* in = src + (od * d.Ho + oh) * d.Wo;
                  for (std::size_t ow = 0; ow < d.Wo; ++ow) {
                    const std::ptrdiff_t zw = static_cast<std::ptrdiff_t>(ow * s.stride[2] + j) - static_cast<std::ptrdiff_t>(s.padding[2]);
                    if (zw >= 0 && zw < static_cast<std::ptrdiff_t>(d.W)) dst[zw] += in[ow];
                  }
                }
              }
            }
      }
    }
  });
}

/// Direct loops for grouped (including depthwise) convolution.
/// Each output element: sum over the group's input channels and kernel taps.
template <class T>
void grouped_conv(const ConvSpec& s, const ConvDims& d, const T* x, const T* w, T* y, T* gx, T* gw, const T* gy) {
  const std::size_t cin_g = d.Cin / s.groups, cout_g = d.Cout / s.groups;
  const std::size_t ksz = d.kd * d.kh * d.kw;
  auto body = [&](std::size_t b, std::size_t oc, bool weight_pass) {
    const std::size_t gidx = oc / cout_g;
    for (std::size_t icg = 0; icg < cin_g; ++icg) {
      const std::size_t ic = gidx * cin_g + icg;
      const T* xc = x + (b * d.Cin + ic) * d.In();
      const T* wk = w + (oc * cin_g + icg) * ksz;
      for (std::size_t a = 0; a < d.kd; ++a)
        for (std::size_t i = 0; i < d.kh; ++i)
          for (std::size_t j = 0; j < d.kw; ++j) {
            const std::size_t tap = (a * d.kh + i) * d.kw + j;
            T wacc = 0;
            for (std::size_t od = 0; od < d.Do; ++od) {
              const std::ptrdiff_t zd = static_cast<std::ptrdiff_t>(od * s.stride[0] + a) - static_cast<std::ptrdiff_t>(s.padding[0]);
              if (zd < 0 || zd >= static_cast<std::ptrdiff_t>(d.D)) continue;
              for (std::size_t oh = 0; oh < d.Ho; ++oh) {
                const std::ptrdiff_t zh = static_cast<std::ptrdiff_t>(oh * s.stride[1] + i) - static_cast<std::ptrdiff_t>(s.padding[1]);
                if (zh < 0 || zh >= static_cast<std::ptrdiff_t>(d.H)) continue;
                const std::size_t xrow = (static_cast<std::size_t>(zd) * d.H + static_cast<std::size_t>(zh)) * d.W;
                const std::size_t orow = ((b * d.Cout + oc) * d.Do + od) * d.Ho * d.Wo + oh * d.Wo;
                for (std::size_t ow = 0; ow < d.Wo; ++ow) {
                  const std::ptrdiff_t zw = static_cast<std::ptrdiff_t>(ow * s.stride[2] + j) - static_cast<std::ptrdiff_t>(s.padding[2]);
                  if (zw < 0 || zw >= static_cast<std::ptrdiff_t>(d.W)) continue;
                  const std::size_t xi = xrow + static_cast<std::size_t>(zw);
                  if (y) y[orow + ow] += wk[tap] * xc[xi];
                  if (gy) {
                    if (weight_pass) {
                      wacc += gy[orow + ow] * xc[xi];
                    } else {
                      gx[(b * d.Cin + ic) * d.In() + xi] += wk[tap] * gy[orow + ow];
                    }
                  }
                }
              }
            }
            if (weight_pass) gw[(oc * cin_g + icg) * ksz + tap] += wacc;
          }
    }
  };
  if (y || gx) {
    // Forward and input gradient: samples are independent.
    parallel_for(d.B, [&](std::size_t b0, std::size_t b1) {
      for (std::size_t b = b0; b < b1; ++b)
        for (std::size_t oc = 0; oc < d.Cout; ++oc) body(b, oc, false);
    });
  }
  if (gw) {
    // Weight gradient: output channels are independent, samples summed in order.
    parallel_for(d.Cout, [&](std::size_t c0, std::size_t c1) {
      for (std::size_t oc = c0; oc < c1; ++oc)
        for (std::size_t b = 0; b < d.B; ++b) body(b, oc, true);
    });
  }
}

/// Stride-1 depthwise 2-D convolution on zero-padded planes. With row pitch
/// Wp = W + 2 pw every tap is one contiguous run of (Ho - 1) * Wp + Wo
/// elements; the columns past Wo in each row are scratch.
/// Any of y / gx / gw may be null; gy is required for the gradient outputs.
template <class T>
void depthwise_plane_conv(const ConvDims& d, std::size_t ph, std::size_t pw, const T* x, const T* w, T* y, T* gx,
                          T* gw, const T* gy) {
  const std::size_t C = d.Cin, HW = d.H * d.W, OHW = d.Ho * d.Wo, kk = d.kh * d.kw;
  const std::size_t Wp = d.W + 2 * pw, Hp = d.H + 2 * ph, run = (d.Ho - 1) * Wp + d.Wo;
  parallel_for(C, [&](std::size_t c0, std::size_t c1) {
    std::vector<T> xp(Hp * Wp), buf(d.Ho * Wp), gxp(gx ? Hp * Wp : 0);
    for (std::size_t c = c0; c < c1; ++c) {
      const T* wc = w + c * kk;
      for (std::size_t b = 0; b < d.B; ++b) {
        const T* xc = x + (b * C + c) * HW;
        if (y || gw) {
          std::fill(xp.begin(), xp.end(), T{0});
          for (std::size_t h = 0; h < d.H; ++h) std::copy(xc + h * d.W, xc + (h + 1) * d.W, xp.data() + (h + ph) * Wp + pw);
        }
        if (y) {
          std::fill(buf.begin(), buf.end(), T{0});
          for (std::size_t i = 0; i < d.kh; ++i)
            for (std::size_t j = 0; j < d.kw; ++j) {
              const T wt = wc[i * d.kw + j];
              const T* src = xp.data() + i * Wp + j;
              T* dst = buf.data();
              for (std::size_t t = 0; t < run; ++t) dst[t] += wt * src[t];
            }
          T* yc = y + (b * C + c) * OHW;
          for (std::size_t oh = 0; oh < d.Ho; ++oh) std::copy(buf.data() + oh * Wp, buf.data() + oh * Wp + d.Wo, yc + oh * d.Wo);
          continue;
        }
        const T* gc = gy + (b * C + c) * OHW;
        std::fill(buf.begin(), buf.end(), T{0});
        for (std::size_t oh = 0; oh < d.Ho; ++oh) std::copy(gc + oh * d.Wo, gc + (oh + 1) * d.Wo, buf.data() + oh * Wp);
        if (gw) {
          for (std::size_t i = 0; i < d.kh; ++i)
            for (std::size_t j = 0; j < d.kw; ++j) {
              const T* src = xp.data() + i * Wp + j;
              T acc = 0;
              for (std::size_t t = 0; t < run; ++t) acc += buf[t] * src[t];
              gw[c * kk + i * d.kw + j] += acc;
            }
        }
        if (gx) {
          std::fill(gxp.begin(), gxp.end(), T{0});
          for (std::size_t i = 0; i < d.kh; ++i)
            for (std::size_t j = 0; j < d.kw; ++j) {
              const T wt = wc[i * d.kw + j];
              T* dst = gxp.data() + i * Wp + j;
              for (std::size_t t = 0; t < run; ++t) dst[t] += wt * buf[t];
            }
          T* gxc = gx + (b * C + c) * HW;
          for (std::size_t h = 0; h < d.H; ++h)
            for (std::size_t ww = 0; ww < d.W; ++ww) gxc[h * d.W + ww] += gxp[(h + ph) * Wp + ww + pw];
        }
      }
    }
  });
}

inline bool is_plain_depthwise(const ConvSpec& s, const ConvDims& d) {
  return s.groups == d.Cin && d.Cin == d.Cout && d.kd == 1 && d.D == 1 && s.stride[0] == 1 && s.stride[1] == 1 &&
         s.stride[2] == 1 && s.padding[0] == 0;
}

/// Samples per im2col block, sized to keep the column buffer cache resident.
inline std::size_t conv_chunk(const ConvDims& d) {
  const std::size_t target = std::max<std::size_t>(1, (std::size_t{1} << 17) / std::max<std::size_t>(1, d.K(1) * d.P()));
  return std::min(d.B, target);
}

template <class T>
Var<T> conv_impl(const char* op, Var<T> x, Var<T> w, const Var<T>* b, const ConvSpec& s, const ConvDims& d,
                 Shape out_shape) {
  Tape<T>& tape = *x.tape;
  const std::size_t P = d.P();
  Tensor<T> out(std::move(out_shape), T{0});
  if (s.groups == 1) {
    const std::size_t K = d.K(1), chunk = conv_chunk(d);
    std::vector<T> col(K * chunk * P), ycol(d.Cout * chunk * P);
    for (std::size_t b0 = 0; b0 < d.B; b0 += chunk) {
      const std::size_t n = std::min(chunk, d.B - b0), NP = n * P;
      im2col(s, d, x.value().raw(), col.data(), b0, n);
      kernels::gemm(false, false, d.Cout, NP, K, w.value().raw(), col.data(), ycol.data());
      for (std::size_t bb = 0; bb < n; ++bb)
        for (std::size_t oc = 0; oc < d.Cout; ++oc)
          std::copy(ycol.data() + oc * NP + bb * P, ycol.data() + oc * NP + (bb + 1) * P,
                    out.raw() + ((b0 + bb) * d.Cout + oc) * P);
    }
  } else if (is_plain_depthwise(s, d)) {
    depthwise_plane_conv<T>(d, s.padding[1], s.padding[2], x.value().raw(), w.value().raw(), out.raw(), nullptr, nullptr, nullptr);
  } else {
    grouped_conv<T>(s, d, x.value().raw(), w.value().raw(), out.raw(), nullptr, nullptr, nullptr);
  }
  std::vector<NodeId> ids{x.id, w.id};
  if (b) {
    const auto& bv = b->value();
    for (std::size_t bb = 0; bb < d.B; ++bb)
      for (std::size_t oc = 0; oc < d.Cout; ++oc) {
        T* o = out.raw() + (bb * d.Cout + oc) * P;
        for (std::size_t p = 0; p < P; ++p) o[p] += bv[oc];
      }
    ids.push_back(b->id);
  }
  const NodeId ib = b ? b->id : NodeId{0};
  const bool has_bias = b != nullptr;
  return tape.record(op, std::move(out), ids, [ix = x.id, iw = w.id, ib, has_bias, s, d](Tape<T>& t, const Tensor<T>& g) {
    const std::size_t P = d.P();
    const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
    if (has_bias && t.requires_grad(ib)) {
      Tensor<T> gb(Shape{d.Cout}, T{0});
      for (std::size_t bb = 0; bb < d.B; ++bb)
        for (std::size_t oc = 0; oc < d.Cout; ++oc) {
          const T* go = g.raw() + (bb * d.Cout + oc) * P;
          T acc = 0;
          for (std::size_t p = 0; p < P; ++p) acc += go[p];
          gb[oc] += acc;
        }
      t.accumulate(ib, std::move(gb));
    }
    if (!need_x && !need_w) return;
    const Tensor<T>& xv = t.value(ix);
    const Tensor<T>& wv = t.value(iw);
    if (s.groups == 1) {
      const std::size_t K = d.K(1), chunk = conv_chunk(d);
      std::vector<T> gcol(d.Cout * chunk * P), col(K * chunk * P);
      std::optional<Tensor<T>> gx, gw;
      if (need_x) gx.emplace(xv.shape(), T{0});
      if (need_w) gw.emplace(wv.shape(), T{0});
      for (std::size_t b0 = 0; b0 < d.B; b0 += chunk) {
        const std::size_t n = std::min(chunk, d.B - b0), NP = n * P;
        for (std::size_t bb = 0; bb < n; ++bb)
          for (std::size_t oc = 0; oc < d.Cout; ++oc)
            std::copy(g.raw() + ((b0 + bb) * d.Cout + oc) * P, g.raw() + ((b0 + bb) * d.Cout + oc + 1) * P,
                      gcol.data() + oc * NP + bb * P);
        if (need_w) {
          im2col(s, d, xv.raw(), col.data(), b0, n);
          kernels::gemm(false, true, d.Cout, K, NP, gcol.data(), col.data(), gw->raw(), b0 > 0);
        }
        if (need_x) {
          kernels::gemm(true, false, K, NP, d.Cout, wv.raw(), gcol.data(), col.data());
          col2im(s, d, col.data(), gx->raw(), b0, n);
        }
      }
      if (gw) t.accumulate(iw, std::move(*gw));
      if (gx) t.accumulate(ix, std::move(*gx));
    } else {
      std::optional<Tensor<T>> gx, gw;
      if (need_x) gx.emplace(xv.shape(), T{0});
      if (need_w) gw.emplace(wv.shape(), T{0});
      if (is_plain_depthwise(s, d)) {
        depthwise_plane_conv<T>(d, s.padding[1], s.padding[2], xv.raw(), wv.raw(), nullptr, gx ? gx->raw() : nullptr,
                                gw ? gw->raw() : nullptr, g.raw());
      } else {
        grouped_conv<T>(s, d, xv.raw(), wv.raw(), nullptr, gx ? gx->raw() : nullptr, gw ? gw->raw() : nullptr, g.raw());
      }
      if (gx) t.accumulate(ix, std::move(*gx));
      if (gw) t.accumulate(iw, std::move(*gw));
    }
  });
}

}  // namespace detail

/// 2-D convolution: x B x C_in x H x W, w C_out x C_in/groups x k_h x k_w,
/// optional bias C_out.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, const Var<T>* b, const ConvSpec& spec) {
  Tape<T>& tape = *x.tape;
  spec.validate();
  detail::require_rank(tape, "conv2d", x, 4);
  if (x.dim(1) != spec.in_channels) {
    tape.fail("conv2d", "input has " + std::to_string(x.dim(1)) + " channels, spec expects " + std::to_string(spec.in_channels));
  }
  if (w.shape() != spec.weight_shape2d()) {
    tape.fail("conv2d", "weight " + shape_str(w.shape()) + " vs expected " + shape_str(spec.weight_shape2d()));
  }
  if (b && b->shape() != Shape{spec.out_channels}) tape.fail("conv2d", "bias shape " + shape_str(b->shape()));
  if (spec.kernel[0] != 1 || spec.stride[0] != 1 || spec.padding[0] != 0) tape.fail("conv2d", "depth geometry must be trivial");
  detail::ConvDims d{x.dim(0), spec.in_channels, 1, x.dim(2), x.dim(3), spec.out_channels, 1,
                     spec.out_extent(1, x.dim(2)), spec.out_extent(2, x.dim(3)), 1, spec.kernel[1], spec.kernel[2]};
  return detail::conv_impl<T>("conv2d", x, w, b, spec, d, Shape{d.B, d.Cout, d.Ho, d.Wo});
}

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, const ConvSpec& spec) {
  return conv2d(x, w, &b, spec);
}

/// 3-D convolution: x B x C_in x D x H x W, w C_out x C_in/groups x k_d x k_h x k_w.
template <class T>
Var<T> conv3d(Var<T> x, Var<T> w, const Var<T>* b, const ConvSpec& spec) {
  Tape<T>& tape = *x.tape;
  spec.validate();
  detail::require_rank(tape, "conv3d", x, 5);
  if (x.dim(1) != spec.in_channels) {
    tape.fail("conv3d", "input has " + std::to_string(x.dim(1)) + " channels, spec expects " + std::to_string(spec.in_channels));
  }
  if (w.shape() != spec.weight_shape3d()) {
    tape.fail("conv3d", "weight " + shape_str(w.shape()) + " vs expected " + shape_str(spec.weight_shape3d()));
  }
  if (b && b->shape() != Shape{spec.out_channels}) tape.fail("conv3d", "bias shape " + shape_str(b->shape()));
  detail::ConvDims d{x.dim(0), spec.in_channels, x.dim(2), x.dim(3), x.dim(4), spec.out_channels,
                     spec.out_extent(0, x.dim(2)), spec.out_extent(1, x.dim(3)), spec.out_extent(2, x.dim(4)),
                     spec.kernel[0], spec.kernel[1], spec.kernel[2]};
  return detail::conv_impl<T>("conv3d", x, w, b, spec, d, Shape{d.B, d.Cout, d.Do, d.Ho, d.Wo});
}

template <class T>
Var<T> conv3d(Var<T> x, Var<T> w, Var<T> b, const ConvSpec& spec) {
  return conv3d(x, w, &b, spec);
}

}  // namespace dffnet::ops
