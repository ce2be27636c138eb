#pragma once

// Selective state-space recurrence (S6):
//
//   delta_t = softplus(x_t Wd + bd)               [L x C]
//   B_t = x_t Wb, C_t = x_t Wc                    [L x N]
//   Abar = exp(delta * A), Bbar = delta * B       (ZOH for A, Euler for B)
//   h_t = Abar_t * h_{t-1} + Bbar_t * x_t,  h_{-1} = 0
//   y_t = <C_t, h_t> + D * x_t
//
// A = -exp(A_log) keeps every |Abar| < 1.

#include <cstddef>
#include <string>
#include <utility>

#include "textmamba/ndarray.hpp"
#include "textmamba/rng.hpp"

namespace textmamba {

inline constexpr std::size_t kDefaultStateDim = 16;

template <typename T>
struct S6Params {
  NdArray<T> a_log;    // [C x N]
  NdArray<T> delta_w;  // [C x C]
  NdArray<T> delta_b;  // [C]
  NdArray<T> b_proj;   // [C x N]
  NdArray<T> c_proj;   // [C x N]
  NdArray<T> d;        // [C]

  std::size_t channels() const { return a_log.dim(0); }
  std::size_t state_dim() const { return a_log.dim(1); }

  /// A = -exp(A_log), strictly negative.
  NdArray<T> a() const;

  /// Mamba-style initialisation: A_log[c][n] = log(n + 1), softplus(delta_b)
  /// log-uniform in [1e-3, 1e-1], projections ~ U(+-1/sqrt(C)), D = 1.
  static S6Params init(std::size_t channels, std::size_t state_dim, Rng& rng);

  template <typename F>
  void visit(F&& f) {
    visit_fields(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_fields(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_fields(Self& s, F& f) {
    f("a_log", s.a_log);
    f("delta_w", s.delta_w);
    f("delta_b", s.delta_b);
    f("b_proj", s.b_proj);
    f("c_proj", s.c_proj);
    f("d", s.d);
  }
};

/// Multiplicative / additive carry of one recurrence step: h -> a h + b.
template <typename T>
struct ScanPair {
  T a{1};
  T b{0};
};

/// `later` applied after `earlier`: (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2).
template <typename T>
constexpr ScanPair<T> compose(const ScanPair<T>& later, const ScanPair<T>& earlier) {
  return {later.a * earlier.a, later.a * earlier.b + later.b};
}

enum class ScanKernel { sequential, parallel };

/// Saved activations for s6_backward.
template <typename T>
struct S6Cache {
  NdArray<T> x;      // [L x C]
  NdArray<T> raw;    // pre-softplus delta [L x C]
  NdArray<T> delta;  // [L x C]
  NdArray<T> bmat;   // [L x N]
  NdArray<T> cmat;   // [L x N]
  NdArray<T> abar;   // [L x C x N]
  NdArray<T> h;      // [L x C x N]
  bool valid = false;
};

/// Abar = exp(delta A), Bbar = delta B. Rejects any delta <= 0.
template <typename T>
std::pair<NdArray<T>, NdArray<T>> discretize(const NdArray<T>& delta, const NdArray<T>& a,
                                             const NdArray<T>& b);

/// Runs the recurrence on already-discretised coefficients: abar/bbar
/// [L x C x N], cmat [L x N], x [L x C], d [C]. Optionally returns h.
template <typename T>
NdArray<T> scan_discretized(const NdArray<T>& abar, const NdArray<T>& bbar,
                            const NdArray<T>& cmat, const NdArray<T>& x, const NdArray<T>& d,
                            ScanKernel kernel, NdArray<T>* h_out = nullptr);

template <typename T>
NdArray<T> selective_scan_sequential(const NdArray<T>& x, const S6Params<T>& params,
                                     S6Cache<T>* cache = nullptr);

template <typename T>
NdArray<T> selective_scan_parallel(const NdArray<T>& x, const S6Params<T>& params,
                                   S6Cache<T>* cache = nullptr);

template <typename T>
NdArray<T> selective_scan(const NdArray<T>& x, const S6Params<T>& params, ScanKernel kernel,
                          S6Cache<T>* cache = nullptr);

/// Reverse-scan adjoint. Accumulates into `grads` (same layout as params) and dx.
/// Throws std::logic_error when the cache was not filled by a forward pass.
template <typename T>
void s6_backward(const NdArray<T>& dy, const S6Params<T>& params, const S6Cache<T>& cache,
                 S6Params<T>& grads, NdArray<T>& dx);

}  // namespace textmamba
