#pragma once

// Hot loops in two flavours: a serial reference that fixes the semantics and an
// OpenMP variant that must agree with it. The serial versions are what the unit
// tests and the benchmark compare against.

#include <cstddef>
#include <span>

namespace textmamba::kernels {

/// c[m x n] = a[m x k] * b[k x n]. Accumulates over k in increasing order for
/// every output element, so the parallel variant is bit-identical.
template <typename T>
void matmul_serial(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
                   std::size_t k, std::size_t n);

template <typename T>
void matmul_parallel(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
                     std::size_t k, std::size_t n);

/// First-order linear recurrence h_t = a_t * h_{t-1} + b_t with h_{-1} = 0,
/// run independently on each of `lanes` interleaved lanes. All buffers are
/// [steps x lanes] row-major.
template <typename T>
void linear_recurrence_serial(std::span<const T> a, std::span<const T> b, std::span<T> h,
                              std::size_t steps, std::size_t lanes);

/// Same recurrence as a work-efficient (up-sweep / down-sweep) scan over
/// (a, b) pairs under (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2). The tree
/// shape depends only on `steps`, never on the thread count.
template <typename T>
void linear_recurrence_parallel(std::span<const T> a, std::span<const T> b, std::span<T> h,
                                std::size_t steps, std::size_t lanes);

/// Threads the OpenMP runtime would use for a parallel region (1 without OpenMP).
int max_threads();

}  // namespace textmamba::kernels
