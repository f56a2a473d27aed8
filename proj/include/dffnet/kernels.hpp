#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

#include <Eigen/Core>

namespace dffnet {

namespace detail {
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{1};
  return cap;
}
}  // namespace detail

/// Upper bound on worker threads used by per-sample loops. Default 1.
inline void set_num_threads(int n) { detail::thread_cap() = std::max(1, n); }
inline int num_threads() { return detail::thread_cap(); }

/// Splits [0, n) into contiguous chunks, one per worker. `fn(begin, end)` must
/// only write to state owned by its index range.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n);
  if (workers <= 1) {
    if (n) fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& t : pool) t.join();
}

namespace kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

/// C(m x n) (+)= op(A) * op(B) on row-major buffers. op(A) is m x k: A is
/// stored k x m when `trans_a`. Same for B (n x k when `trans_b`).
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate = false) {
  using Idx = Eigen::Index;
  MapMat<T> C(c, static_cast<Idx>(m), static_cast<Idx>(n));
  const Idx M = static_cast<Idx>(m), N = static_cast<Idx>(n), K = static_cast<Idx>(k);
  auto run = [&](const auto& A, const auto& B) {
    if (accumulate) {
      C.noalias() += A * B;
    } else {
      C.noalias() = A * B;
    }
  };
  if (!trans_a && !trans_b) {
    run(CMapMat<T>(a, M, K), CMapMat<T>(b, K, N));
  } else if (trans_a && !trans_b) {
    run(CMapMat<T>(a, K, M).transpose(), CMapMat<T>(b, K, N));
  } else if (!trans_a && trans_b) {
    run(CMapMat<T>(a, M, K), CMapMat<T>(b, N, K).transpose());
  } else {
    run(CMapMat<T>(a, K, M).transpose(), CMapMat<T>(b, N, K).transpose());
  }
}

}  // namespace kernels
}  // namespace dffnet
