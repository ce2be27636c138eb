#include "textmamba/kernels.hpp"

#include <algorithm>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace textmamba::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

int max_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename T>
void matmul_serial(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
                   std::size_t k, std::size_t n) {
  std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), T{0});
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_parallel(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    T* crow = c.data() + i * n;
    std::fill(crow, crow + n, T{0});
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b.data() + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void linear_recurrence_serial(std::span<const T> a, std::span<const T> b, std::span<T> h,
                              std::size_t steps, std::size_t lanes) {
  for (std::size_t r = 0; r < lanes; ++r) h[r] = b[r];
  for (std::size_t t = 1; t < steps; ++t) {
    const T* at = a.data() + t * lanes;
    const T* bt = b.data() + t * lanes;
    const T* prev = h.data() + (t - 1) * lanes;
    T* cur = h.data() + t * lanes;
    for (std::size_t r = 0; r < lanes; ++r) cur[r] = at[r] * prev[r] + bt[r];
  }
}

template <typename T>
void linear_recurrence_parallel(std::span<const T> a, std::span<const T> b, std::span<T> h,
                                std::size_t steps, std::size_t lanes) {
  if (steps == 0) return;
  const std::size_t padded = next_pow2(steps);
  std::vector<T> ta(padded * lanes, T{1});
  std::vector<T> tb(padded * lanes, T{0});
  std::copy(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(steps * lanes), ta.begin());
  std::copy(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(steps * lanes), tb.begin());

  // Up-sweep: node i accumulates (right subtree) o (left subtree).
  for (std::size_t stride = 1; stride < padded; stride <<= 1) {
    const auto nodes = static_cast<std::ptrdiff_t>(padded / (2 * stride));
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(nodes) * lanes >= kParallelWork)
    for (std::ptrdiff_t kk = 0; kk < nodes; ++kk) {
      const std::size_t i = (static_cast<std::size_t>(kk) + 1) * 2 * stride - 1;
      const std::size_t j = i - stride;
      T* ai = ta.data() + i * lanes;
      T* bi = tb.data() + i * lanes;
      const T* aj = ta.data() + j * lanes;
      const T* bj = tb.data() + j * lanes;
#pragma omp simd
      for (std::size_t r = 0; r < lanes; ++r) {
        bi[r] = ai[r] * bj[r] + bi[r];
        ai[r] = ai[r] * aj[r];
      }
    }
  }

  // Down-sweep to exclusive prefixes: the root gets the identity map.
  std::fill(ta.begin() + static_cast<std::ptrdiff_t>((padded - 1) * lanes), ta.end(), T{1});
  std::fill(tb.begin() + static_cast<std::ptrdiff_t>((padded - 1) * lanes), tb.end(), T{0});
  for (std::size_t stride = padded >> 1; stride >= 1; stride >>= 1) {
    const auto nodes = static_cast<std::ptrdiff_t>(padded / (2 * stride));
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(nodes) * lanes >= kParallelWork)
    for (std::ptrdiff_t kk = 0; kk < nodes; ++kk) {
      const std::size_t i = (static_cast<std::size_t>(kk) + 1) * 2 * stride - 1;
      const std::size_t j = i - stride;
      T* ai = ta.data() + i * lanes;
      T* bi = tb.data() + i * lanes;
      T* aj = ta.data() + j * lanes;
      T* bj = tb.data() + j * lanes;
#pragma omp simd
      for (std::size_t r = 0; r < lanes; ++r) {
        const T left_a = aj[r];
        const T left_b = bj[r];
        aj[r] = ai[r];
        bj[r] = bi[r];
        // right prefix = (left subtree) o (parent prefix)
        bi[r] = left_a * bi[r] + left_b;
        ai[r] = left_a * ai[r];
      }
    }
    if (stride == 1) break;
  }

  // Inclusive: h_t = a_t * (exclusive prefix applied to h_{-1} = 0) + b_t.
  const auto total = static_cast<std::ptrdiff_t>(steps);
#pragma omp parallel for schedule(static) if (steps * lanes >= kParallelWork)
  for (std::ptrdiff_t tt = 0; tt < total; ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    const T* at = a.data() + t * lanes;
    const T* bt = b.data() + t * lanes;
    const T* ex = tb.data() + t * lanes;
    T* ht = h.data() + t * lanes;
#pragma omp simd
    for (std::size_t r = 0; r < lanes; ++r) ht[r] = at[r] * ex[r] + bt[r];
  }
}

#define TEXTMAMBA_INSTANTIATE(T)                                                             \
  template void matmul_serial<T>(std::span<const T>, std::span<const T>, std::span<T>,        \
                                 std::size_t, std::size_t, std::size_t);                     \
  template void matmul_parallel<T>(std::span<const T>, std::span<const T>, std::span<T>,      \
                                   std::size_t, std::size_t, std::size_t);                   \
  template void linear_recurrence_serial<T>(std::span<const T>, std::span<const T>,           \
                                            std::span<T>, std::size_t, std::size_t);          \
  template void linear_recurrence_parallel<T>(std::span<const T>, std::span<const T>,         \
                                              std::span<T>, std::size_t, std::size_t);

TEXTMAMBA_INSTANTIATE(float)
TEXTMAMBA_INSTANTIATE(double)
#undef TEXTMAMBA_INSTANTIATE

}  // namespace textmamba::kernels
