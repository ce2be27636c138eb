#pragma once

// Shared test helpers: seeded property generators and naive reference
// implementations that the optimised code is checked against.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "textmamba/ndarray.hpp"
#include "textmamba/rng.hpp"

namespace tmt {

using textmamba::NdArray;
using textmamba::Shape;

/// Hand-rolled generator for property tests. Each case draws its own sizes
/// and values from one seeded stream, so a failing case is reproducible from
/// (seed, case index) alone.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  std::size_t size(std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng_.next() % (hi - lo + 1));
  }
  double real(double lo, double hi) { return rng_.uniform(lo, hi); }
  bool coin() { return (rng_.next() & 1) != 0; }

  template <typename T = double>
  NdArray<T> normal(Shape shape, double stddev = 1.0) {
    return rng_.normal_array<T>(std::move(shape), stddev);
  }
  template <typename T = double>
  NdArray<T> uniform(Shape shape, double lo, double hi) {
    return rng_.uniform_array<T>(std::move(shape), lo, hi);
  }
  /// Values drawn from a small integer set so ties are common.
  template <typename T = double>
  NdArray<T> tie_heavy(Shape shape, int levels) {
    NdArray<T> a(std::move(shape));
    for (auto& v : a.data()) v = static_cast<T>(rng_.next() % static_cast<std::uint64_t>(levels));
    return a;
  }

  textmamba::Rng& rng() { return rng_; }

 private:
  textmamba::Rng rng_;
};

template <typename T>
double max_abs_diff(const NdArray<T>& a, const NdArray<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

/// max |a - b| / max |b|, the normwise deviation used for scan comparisons.
template <typename T>
double normwise_rel_diff(const NdArray<T>& a, const NdArray<T>& b) {
  double scale = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) scale = std::max(scale, std::abs(double(b[i])));
  return max_abs_diff(a, b) / std::max(scale, 1e-300);
}

template <typename T>
double max_abs(const NdArray<T>& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i])));
  return m;
}

/// c = a b with a plain triple loop, summing over k from zero upwards.
template <typename T>
NdArray<T> naive_matmul(const NdArray<T>& a, const NdArray<T>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  NdArray<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  }
  return c;
}

/// x W + b on [rows x in].
template <typename T>
NdArray<T> naive_linear(const NdArray<T>& x, const NdArray<T>& w, const NdArray<T>& b) {
  const std::size_t in = w.dim(0), out = w.dim(1), rows = x.size() / in;
  NdArray<T> y({rows, out});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      T s = 0;
      for (std::size_t p = 0; p < in; ++p) s += x[r * in + p] * w(p, o);
      y(r, o) = s + (b.empty() ? T{0} : b[o]);
    }
  }
  return y;
}

/// Indices of a row sorted by value descending, ties to the lower index.
template <typename T>
std::vector<std::size_t> sorted_order(const T* row, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [row](std::size_t a, std::size_t b) {
    return row[a] > row[b];
  });
  return idx;
}

/// Splits a [L x C] sequence into consecutive runs of `run` rows and returns
/// them sorted, for order-insensitive comparison of scan segments.
template <typename T>
std::vector<std::vector<T>> sorted_runs(const NdArray<T>& seq, std::size_t run) {
  const std::size_t width = run * seq.dim(1);
  std::vector<std::vector<T>> out;
  for (std::size_t s = 0; s + width <= seq.size(); s += width)
    out.emplace_back(seq.vec().begin() + static_cast<std::ptrdiff_t>(s),
                     seq.vec().begin() + static_cast<std::ptrdiff_t>(s + width));
  std::sort(out.begin(), out.end());
  return out;
}

/// Run r of a [L x C] sequence, as a flat vector.
template <typename T>
std::vector<T> run_of(const NdArray<T>& seq, std::size_t run, std::size_t r) {
  const std::size_t width = run * seq.dim(1);
  return {seq.vec().begin() + static_cast<std::ptrdiff_t>(r * width),
          seq.vec().begin() + static_cast<std::ptrdiff_t>((r + 1) * width)};
}

}  // namespace tmt
