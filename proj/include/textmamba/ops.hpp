#pragma once

// Dense primitives with hand-written adjoints. Every *_backward accumulates
// into the gradient buffers it is handed (callers zero them once), so a value
// consumed twice just receives two contributions.

#include <cstddef>
#include <vector>

#include "textmamba/ndarray.hpp"

namespace textmamba::ops {

// ---- linear algebra -------------------------------------------------------

template <typename T>
NdArray<T> matmul(const NdArray<T>& a, const NdArray<T>& b);

template <typename T>
NdArray<T> transpose(const NdArray<T>& a);

/// y = x W + b over the last axis of x. `bias` may be empty.
template <typename T>
NdArray<T> linear(const NdArray<T>& x, const NdArray<T>& weight, const NdArray<T>& bias);

/// Any of dx / dweight / dbias may be null.
template <typename T>
void linear_backward(const NdArray<T>& dy, const NdArray<T>& x, const NdArray<T>& weight,
                     NdArray<T>* dx, NdArray<T>* dweight, NdArray<T>* dbias);

// ---- normalisation and activations ----------------------------------------

template <typename T>
struct LayerNormCache {
  NdArray<T> normalized;  // (x - mean) * rstd, before the affine
  std::vector<T> rstd;
};

/// Normalises each position over the last (channel) axis, then gamma * . + beta.
template <typename T>
NdArray<T> layer_norm(const NdArray<T>& x, const NdArray<T>& gamma, const NdArray<T>& beta,
                      T eps, LayerNormCache<T>* cache = nullptr);

template <typename T>
void layer_norm_backward(const NdArray<T>& dy, const NdArray<T>& gamma,
                         const LayerNormCache<T>& cache, NdArray<T>* dx, NdArray<T>* dgamma,
                         NdArray<T>* dbeta);

template <typename T>
NdArray<T> softmax(const NdArray<T>& x, std::size_t axis);

/// Adjoint of softmax along the last axis given its output y.
template <typename T>
NdArray<T> softmax_backward(const NdArray<T>& y, const NdArray<T>& dy);

template <typename T>
NdArray<T> relu(const NdArray<T>& x);

/// dx += dy where x > 0.
template <typename T>
void relu_backward(const NdArray<T>& dy, const NdArray<T>& x, NdArray<T>& dx);

template <typename T>
T sigmoid(T x);

template <typename T>
T softplus(T x);

template <typename T>
NdArray<T> sigmoid(const NdArray<T>& x);

// ---- convolutions ---------------------------------------------------------

/// x[K x n x Cin], weight[ks x Cin x Cout], bias[Cout]. Odd ks, zero padding
/// ks/2 on both ends so n is preserved. Slides along the n axis.
template <typename T>
NdArray<T> conv1d(const NdArray<T>& x, const NdArray<T>& weight, const NdArray<T>& bias);

template <typename T>
void conv1d_backward(const NdArray<T>& dy, const NdArray<T>& x, const NdArray<T>& weight,
                     NdArray<T>* dx, NdArray<T>* dweight, NdArray<T>* dbias);

template <typename T>
struct SeparableConvCache {
  NdArray<T> input;
  NdArray<T> depthwise_out;
};

/// 3x3 depthwise (zero padding 1, given stride) followed by a 1x1 pointwise
/// projection. x[H x W x C], depthwise[3 x 3 x C], pointwise[C x Cout],
/// bias[Cout]. Output extents are ceil(H / stride) x ceil(W / stride).
template <typename T>
NdArray<T> separable_conv2d(const NdArray<T>& x, const NdArray<T>& depthwise,
                            const NdArray<T>& pointwise, const NdArray<T>& bias,
                            std::size_t stride, SeparableConvCache<T>* cache = nullptr);

template <typename T>
void separable_conv2d_backward(const NdArray<T>& dy, const NdArray<T>& depthwise,
                               const NdArray<T>& pointwise, std::size_t stride,
                               const SeparableConvCache<T>& cache, NdArray<T>* dx,
                               NdArray<T>* ddepthwise, NdArray<T>* dpointwise,
                               NdArray<T>* dbias);

/// Nearest-neighbour x2 upsampling of [H x W x C] to [out_h x out_w x C]
/// (out extents at most 2H, 2W).
template <typename T>
NdArray<T> upsample_nearest2x(const NdArray<T>& x, std::size_t out_h, std::size_t out_w);

template <typename T>
void upsample_nearest2x_backward(const NdArray<T>& dy, NdArray<T>& dx);

// ---- sampling -------------------------------------------------------------

/// Bilinear sample of channels [c0, c0 + count) of a row-major [h x w x stride]
/// map at a normalised point (x, y). Pixel (i, j) has its centre at
/// ((j + 0.5) / w, (i + 0.5) / h); taps outside the map read zero.
template <typename T>
void bilinear_sample_point(const T* map, std::size_t h, std::size_t w, std::size_t stride,
                           std::size_t c0, std::size_t count, T x, T y, T* out);

/// Adjoint of bilinear_sample_point. dmap may be null; dxy (2 values) may be null.
template <typename T>
void bilinear_sample_point_backward(const T* map, std::size_t h, std::size_t w,
                                    std::size_t stride, std::size_t c0, std::size_t count, T x,
                                    T y, const T* dout, T* dmap, T* dxy);

/// map[H x W x C], points[P x 2] as (x, y) in normalised coordinates -> [P x C].
template <typename T>
NdArray<T> bilinear_sample(const NdArray<T>& map, const NdArray<T>& points);

template <typename T>
void bilinear_sample_backward(const NdArray<T>& map, const NdArray<T>& points,
                              const NdArray<T>& dy, NdArray<T>* dmap, NdArray<T>* dpoints);

/// grid[i][j] = (x_j, y_i), evenly spaced on [0, 1]; a single-extent axis sits at 0.5.
template <typename T>
NdArray<T> linspace_grid(std::size_t h, std::size_t w);

}  // namespace textmamba::ops
