#include "textmamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "textmamba/kernels.hpp"

namespace textmamba::ops {

namespace {

template <typename T>
void require_rank(const NdArray<T>& a, std::size_t rank, const char* what) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

}  // namespace

template <typename T>
NdArray<T> matmul(const NdArray<T>& a, const NdArray<T>& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  NdArray<T> c({a.dim(0), b.dim(1)});
  kernels::matmul_parallel<T>(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

template <typename T>
NdArray<T> transpose(const NdArray<T>& a) {
  require_rank(a, 2, "transpose");
  NdArray<T> t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
  return t;
}

template <typename T>
NdArray<T> linear(const NdArray<T>& x, const NdArray<T>& weight, const NdArray<T>& bias) {
  require_rank(weight, 2, "linear weight");
  const std::size_t in = weight.dim(0);
  const std::size_t out = weight.dim(1);
  if (x.rank() == 0 || x.shape().back() != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not end in " +
                     std::to_string(in) + " (weight " + shape_str(weight.shape()) + ")");
  }
  if (!bias.empty() && bias.size() != out) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = out;
  NdArray<T> y(std::move(shape));
  kernels::matmul_parallel<T>(x.data(), weight.data(), y.data(), rows, in, out);
  if (!bias.empty()) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out; ++o) y[r * out + o] += bias[o];
  }
  return y;
}

template <typename T>
void linear_backward(const NdArray<T>& dy, const NdArray<T>& x, const NdArray<T>& weight,
                     NdArray<T>* dx, NdArray<T>* dweight, NdArray<T>* dbias) {
  const std::size_t in = weight.dim(0);
  const std::size_t out = weight.dim(1);
  const std::size_t rows = x.size() / in;
  if (dy.size() != rows * out) {
    throw ShapeError("linear_backward: upstream " + shape_str(dy.shape()) + " vs input " +
                     shape_str(x.shape()) + " and weight " + shape_str(weight.shape()));
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = dy.ptr() + r * out;
    const T* xr = x.ptr() + r * in;
    if (dx) {
      T* dxr = dx->ptr() + r * in;
      for (std::size_t i = 0; i < in; ++i) {
        const T* wr = weight.ptr() + i * out;
        T acc{0};
        for (std::size_t o = 0; o < out; ++o) acc += g[o] * wr[o];
        dxr[i] += acc;
      }
    }
    if (dweight) {
      for (std::size_t i = 0; i < in; ++i) {
        T* dwr = dweight->ptr() + i * out;
        const T xv = xr[i];
        for (std::size_t o = 0; o < out; ++o) dwr[o] += xv * g[o];
      }
    }
    if (dbias) {
      for (std::size_t o = 0; o < out; ++o) (*dbias)[o] += g[o];
    }
  }
}

template <typename T>
NdArray<T> layer_norm(const NdArray<T>& x, const NdArray<T>& gamma, const NdArray<T>& beta,
                      T eps, LayerNormCache<T>* cache) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("layer_norm: channel extent " + std::to_string(c) + " vs gamma " +
                     shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.size() / c;
  NdArray<T> y(x.shape());
  if (cache) {
    cache->normalized = NdArray<T>(x.shape());
    cache->rstd.assign(rows, T{0});
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * c;
    T mean{0};
    for (std::size_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<T>(c);
    T var{0};
    for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(c);
    const T rstd = T{1} / std::sqrt(var + eps);
    T* yr = y.ptr() + r * c;
    for (std::size_t i = 0; i < c; ++i) {
      const T n = (xr[i] - mean) * rstd;
      if (cache) cache->normalized[r * c + i] = n;
      yr[i] = n * gamma[i] + beta[i];
    }
    if (cache) cache->rstd[r] = rstd;
  }
  return y;
}

template <typename T>
void layer_norm_backward(const NdArray<T>& dy, const NdArray<T>& gamma,
                         const LayerNormCache<T>& cache, NdArray<T>* dx, NdArray<T>* dgamma,
                         NdArray<T>* dbeta) {
  const std::size_t c = gamma.size();
  const std::size_t rows = cache.rstd.size();
  std::vector<T> dn(c);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = dy.ptr() + r * c;
    const T* n = cache.normalized.ptr() + r * c;
    T mean_dn{0};
    T mean_dn_n{0};
    for (std::size_t i = 0; i < c; ++i) {
      dn[i] = g[i] * gamma[i];
      mean_dn += dn[i];
      mean_dn_n += dn[i] * n[i];
      if (dgamma) (*dgamma)[i] += g[i] * n[i];
      if (dbeta) (*dbeta)[i] += g[i];
    }
    mean_dn /= static_cast<T>(c);
    mean_dn_n /= static_cast<T>(c);
    if (dx) {
      T* d = dx->ptr() + r * c;
      const T rstd = cache.rstd[r];
      for (std::size_t i = 0; i < c; ++i) d[i] += rstd * (dn[i] - mean_dn - n[i] * mean_dn_n);
    }
  }
}

template <typename T>
NdArray<T> softmax(const NdArray<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  NdArray<T> y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      T sum{0};
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        y[base + k * inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < n; ++k) y[base + k * inner] /= sum;
    }
  }
  return y;
}

template <typename T>
NdArray<T> softmax_backward(const NdArray<T>& y, const NdArray<T>& dy) {
  y.require_same_shape(dy, "softmax_backward");
  const std::size_t n = y.shape().back();
  const std::size_t rows = y.size() / n;
  NdArray<T> dx(y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T dot{0};
    for (std::size_t k = 0; k < n; ++k) dot += y[r * n + k] * dy[r * n + k];
    for (std::size_t k = 0; k < n; ++k) dx[r * n + k] = y[r * n + k] * (dy[r * n + k] - dot);
  }
  return dx;
}

template <typename T>
NdArray<T> relu(const NdArray<T>& x) {
  NdArray<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
void relu_backward(const NdArray<T>& dy, const NdArray<T>& x, NdArray<T>& dx) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] > T{0}) dx[i] += dy[i];
}

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
T softplus(T x) {
  // log(1 + e^x) without overflow for large x
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
NdArray<T> sigmoid(const NdArray<T>& x) {
  NdArray<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

template <typename T>
NdArray<T> conv1d(const NdArray<T>& x, const NdArray<T>& weight, const NdArray<T>& bias) {
  require_rank(x, 3, "conv1d input");
  require_rank(weight, 3, "conv1d weight");
  const std::size_t ks = weight.dim(0);
  if (ks % 2 == 0) {
    throw std::invalid_argument("conv1d: kernel size " + std::to_string(ks) +
                                " is even; only odd sizes keep the length");
  }
  const std::size_t batch = x.dim(0), n = x.dim(1), cin = x.dim(2), cout = weight.dim(2);
  if (weight.dim(1) != cin || bias.size() != cout) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const auto pad = static_cast<std::ptrdiff_t>(ks / 2);
  NdArray<T> y({batch, n, cout});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      T* yr = y.ptr() + (b * n + i) * cout;
      for (std::size_t o = 0; o < cout; ++o) yr[o] = bias[o];
      for (std::size_t t = 0; t < ks; ++t) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + t) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
        const T* xr = x.ptr() + (b * n + static_cast<std::size_t>(src)) * cin;
        for (std::size_t c = 0; c < cin; ++c) {
          const T* wr = weight.ptr() + (t * cin + c) * cout;
          for (std::size_t o = 0; o < cout; ++o) yr[o] += xr[c] * wr[o];
        }
      }
    }
  }
  return y;
}

template <typename T>
void conv1d_backward(const NdArray<T>& dy, const NdArray<T>& x, const NdArray<T>& weight,
                     NdArray<T>* dx, NdArray<T>* dweight, NdArray<T>* dbias) {
  const std::size_t ks = weight.dim(0);
  const std::size_t batch = x.dim(0), n = x.dim(1), cin = x.dim(2), cout = weight.dim(2);
  const auto pad = static_cast<std::ptrdiff_t>(ks / 2);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      const T* g = dy.ptr() + (b * n + i) * cout;
      if (dbias)
        for (std::size_t o = 0; o < cout; ++o) (*dbias)[o] += g[o];
      for (std::size_t t = 0; t < ks; ++t) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + t) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
        const std::size_t row = (b * n + static_cast<std::size_t>(src)) * cin;
        for (std::size_t c = 0; c < cin; ++c) {
          const std::size_t wrow = (t * cin + c) * cout;
          T acc{0};
          for (std::size_t o = 0; o < cout; ++o) {
            acc += g[o] * weight[wrow + o];
            if (dweight) (*dweight)[wrow + o] += x[row + c] * g[o];
          }
          if (dx) (*dx)[row + c] += acc;
        }
      }
    }
  }
}

template <typename T>
NdArray<T> separable_conv2d(const NdArray<T>& x, const NdArray<T>& depthwise,
                            const NdArray<T>& pointwise, const NdArray<T>& bias,
                            std::size_t stride, SeparableConvCache<T>* cache) {
  if (stride != 1 && stride != 2) {
    throw std::invalid_argument("separable_conv2d: stride " + std::to_string(stride) +
                                " not in {1, 2}");
  }
  require_rank(x, 3, "separable_conv2d input");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (depthwise.shape() != Shape{3, 3, c} || pointwise.rank() != 2 || pointwise.dim(0) != c ||
      bias.size() != pointwise.dim(1)) {
    throw ShapeError("separable_conv2d: input " + shape_str(x.shape()) + ", depthwise " +
                     shape_str(depthwise.shape()) + ", pointwise " +
                     shape_str(pointwise.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t oh = (h + stride - 1) / stride;
  const std::size_t ow = (w + stride - 1) / stride;
  NdArray<T> dw({oh, ow, c});
  for (std::size_t oi = 0; oi < oh; ++oi) {
    for (std::size_t oj = 0; oj < ow; ++oj) {
      T* out = dw.ptr() + (oi * ow + oj) * c;
      for (std::size_t di = 0; di < 3; ++di) {
        const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(oi * stride + di) - 1;
        if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t dj = 0; dj < 3; ++dj) {
          const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(oj * stride + dj) - 1;
          if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* in = x.ptr() + (static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)) * c;
          const T* k = depthwise.ptr() + (di * 3 + dj) * c;
          for (std::size_t ch = 0; ch < c; ++ch) out[ch] += in[ch] * k[ch];
        }
      }
    }
  }
  NdArray<T> y = linear(dw, pointwise, bias);
  if (cache) {
    cache->input = x;
    cache->depthwise_out = std::move(dw);
  }
  return y;
}

template <typename T>
void separable_conv2d_backward(const NdArray<T>& dy, const NdArray<T>& depthwise,
                               const NdArray<T>& pointwise, std::size_t stride,
                               const SeparableConvCache<T>& cache, NdArray<T>* dx,
                               NdArray<T>* ddepthwise, NdArray<T>* dpointwise,
                               NdArray<T>* dbias) {
  const NdArray<T>& x = cache.input;
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  NdArray<T> ddw = NdArray<T>::zeros_like(cache.depthwise_out);
  linear_backward(dy, cache.depthwise_out, pointwise, &ddw, dpointwise, dbias);
  const std::size_t oh = ddw.dim(0), ow = ddw.dim(1);
  for (std::size_t oi = 0; oi < oh; ++oi) {
    for (std::size_t oj = 0; oj < ow; ++oj) {
      const T* g = ddw.ptr() + (oi * ow + oj) * c;
      for (std::size_t di = 0; di < 3; ++di) {
        const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(oi * stride + di) - 1;
        if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t dj = 0; dj < 3; ++dj) {
          const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(oj * stride + dj) - 1;
          if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
          const std::size_t at = (static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)) * c;
          const std::size_t kt = (di * 3 + dj) * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            if (dx) (*dx)[at + ch] += g[ch] * depthwise[kt + ch];
            if (ddepthwise) (*ddepthwise)[kt + ch] += g[ch] * x[at + ch];
          }
        }
      }
    }
  }
}

template <typename T>
NdArray<T> upsample_nearest2x(const NdArray<T>& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "upsample_nearest2x");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (out_h > 2 * h || out_w > 2 * w || out_h == 0 || out_w == 0) {
    throw ShapeError("upsample_nearest2x: cannot map " + shape_str(x.shape()) + " to " +
                     std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  NdArray<T> y({out_h, out_w, c});
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j)
      std::copy_n(x.ptr() + ((i / 2) * w + j / 2) * c, c, y.ptr() + (i * out_w + j) * c);
  return y;
}

template <typename T>
void upsample_nearest2x_backward(const NdArray<T>& dy, NdArray<T>& dx) {
  const std::size_t out_h = dy.dim(0), out_w = dy.dim(1), c = dy.dim(2);
  const std::size_t w = dx.dim(1);
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        dx[((i / 2) * w + j / 2) * c + ch] += dy[(i * out_w + j) * c + ch];
}

template <typename T>
void bilinear_sample_point(const T* map, std::size_t h, std::size_t w, std::size_t stride,
                           std::size_t c0, std::size_t count, T x, T y, T* out) {
  const T px = x * static_cast<T>(w) - T{0.5};
  const T py = y * static_cast<T>(h) - T{0.5};
  const T fx0 = std::floor(px);
  const T fy0 = std::floor(py);
  const T fx = px - fx0;
  const T fy = py - fy0;
  std::fill(out, out + count, T{0});
  // Far-away points: skip before converting to integers.
  if (!(fx0 >= T{-2}) || !(fy0 >= T{-2}) || fx0 > static_cast<T>(w) || fy0 > static_cast<T>(h))
    return;
  const auto x0 = static_cast<std::ptrdiff_t>(fx0);
  const auto y0 = static_cast<std::ptrdiff_t>(fy0);
  const T weights[4] = {(T{1} - fx) * (T{1} - fy), fx * (T{1} - fy), (T{1} - fx) * fy, fx * fy};
  const std::ptrdiff_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const std::ptrdiff_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
  for (int tap = 0; tap < 4; ++tap) {
    if (xs[tap] < 0 || ys[tap] < 0 || xs[tap] >= static_cast<std::ptrdiff_t>(w) ||
        ys[tap] >= static_cast<std::ptrdiff_t>(h))
      continue;
    const T* src = map + (static_cast<std::size_t>(ys[tap]) * w + static_cast<std::size_t>(xs[tap])) * stride + c0;
    for (std::size_t ch = 0; ch < count; ++ch) out[ch] += weights[tap] * src[ch];
  }
}

template <typename T>
void bilinear_sample_point_backward(const T* map, std::size_t h, std::size_t w,
                                    std::size_t stride, std::size_t c0, std::size_t count, T x,
                                    T y, const T* dout, T* dmap, T* dxy) {
  const T px = x * static_cast<T>(w) - T{0.5};
  const T py = y * static_cast<T>(h) - T{0.5};
  const T fx0 = std::floor(px);
  const T fy0 = std::floor(py);
  const T fx = px - fx0;
  const T fy = py - fy0;
  if (!(fx0 >= T{-2}) || !(fy0 >= T{-2}) || fx0 > static_cast<T>(w) || fy0 > static_cast<T>(h))
    return;
  const auto x0 = static_cast<std::ptrdiff_t>(fx0);
  const auto y0 = static_cast<std::ptrdiff_t>(fy0);
  const T weights[4] = {(T{1} - fx) * (T{1} - fy), fx * (T{1} - fy), (T{1} - fx) * fy, fx * fy};
  // d weight / d fx and d weight / d fy per tap
  const T dwx[4] = {-(T{1} - fy), T{1} - fy, -fy, fy};
  const T dwy[4] = {-(T{1} - fx), -fx, T{1} - fx, fx};
  const std::ptrdiff_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const std::ptrdiff_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
  T gx{0};
  T gy{0};
  for (int tap = 0; tap < 4; ++tap) {
    if (xs[tap] < 0 || ys[tap] < 0 || xs[tap] >= static_cast<std::ptrdiff_t>(w) ||
        ys[tap] >= static_cast<std::ptrdiff_t>(h))
      continue;
    const std::size_t at = (static_cast<std::size_t>(ys[tap]) * w + static_cast<std::size_t>(xs[tap])) * stride + c0;
    T dot{0};
    for (std::size_t ch = 0; ch < count; ++ch) {
      dot += dout[ch] * map[at + ch];
      if (dmap) dmap[at + ch] += weights[tap] * dout[ch];
    }
    gx += dwx[tap] * dot;
    gy += dwy[tap] * dot;
  }
  if (dxy) {
    dxy[0] += gx * static_cast<T>(w);
    dxy[1] += gy * static_cast<T>(h);
  }
}

template <typename T>
NdArray<T> bilinear_sample(const NdArray<T>& map, const NdArray<T>& points) {
  require_rank(map, 3, "bilinear_sample map");
  if (points.rank() != 2 || points.dim(1) != 2) {
    throw ShapeError("bilinear_sample: points must be [P x 2], got " + shape_str(points.shape()));
  }
  const std::size_t c = map.dim(2);
  NdArray<T> out({points.dim(0), c});
  for (std::size_t p = 0; p < points.dim(0); ++p) {
    bilinear_sample_point(map.ptr(), map.dim(0), map.dim(1), c, std::size_t{0}, c, points(p, 0),
                          points(p, 1), out.ptr() + p * c);
  }
  return out;
}

template <typename T>
void bilinear_sample_backward(const NdArray<T>& map, const NdArray<T>& points,
                              const NdArray<T>& dy, NdArray<T>* dmap, NdArray<T>* dpoints) {
  const std::size_t c = map.dim(2);
  for (std::size_t p = 0; p < points.dim(0); ++p) {
    bilinear_sample_point_backward(map.ptr(), map.dim(0), map.dim(1), c, std::size_t{0}, c,
                                   points(p, 0), points(p, 1), dy.ptr() + p * c,
                                   dmap ? dmap->ptr() : nullptr,
                                   dpoints ? dpoints->ptr() + p * 2 : nullptr);
  }
}

template <typename T>
NdArray<T> linspace_grid(std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) {
    throw std::invalid_argument("linspace_grid: zero extent (" + std::to_string(h) + "x" +
                                std::to_string(w) + ")");
  }
  auto coord = [](std::size_t i, std::size_t n) {
    return n == 1 ? T{0.5} : static_cast<T>(i) / static_cast<T>(n - 1);
  };
  NdArray<T> g({h, w, 2});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      g(i, j, 0) = coord(j, w);
      g(i, j, 1) = coord(i, h);
    }
  }
  return g;
}

#define TEXTMAMBA_INSTANTIATE(T)                                                               \
  template NdArray<T> matmul(const NdArray<T>&, const NdArray<T>&);                             \
  template NdArray<T> transpose(const NdArray<T>&);                                             \
  template NdArray<T> linear(const NdArray<T>&, const NdArray<T>&, const NdArray<T>&);          \
  template void linear_backward(const NdArray<T>&, const NdArray<T>&, const NdArray<T>&,        \
                                NdArray<T>*, NdArray<T>*, NdArray<T>*);                         \
  template NdArray<T> layer_norm(const NdArray<T>&, const NdArray<T>&, const NdArray<T>&, T,    \
                                 LayerNormCache<T>*);                                           \
  template void layer_norm_backward(const NdArray<T>&, const NdArray<T>&,                       \
                                    const LayerNormCache<T>&, NdArray<T>*, NdArray<T>*,         \
                                    NdArray<T>*);                                               \
  template NdArray<T> softmax(const NdArray<T>&, std::size_t);                                  \
  template NdArray<T> softmax_backward(const NdArray<T>&, const NdArray<T>&);                   \
  template NdArray<T> relu(const NdArray<T>&);                                                  \
  template void relu_backward(const NdArray<T>&, const NdArray<T>&, NdArray<T>&);               \
  template T sigmoid(T);                                                                        \
  template T softplus(T);                                                                       \
  template NdArray<T> sigmoid(const NdArray<T>&);                                               \
  template NdArray<T> conv1d(const NdArray<T>&, const NdArray<T>&, const NdArray<T>&);          \
  template void conv1d_backward(const NdArray<T>&, const NdArray<T>&, const NdArray<T>&,        \
                                NdArray<T>*, NdArray<T>*, NdArray<T>*);                         \
  template NdArray<T> separable_conv2d(const NdArray<T>&, const NdArray<T>&, const NdArray<T>&, \
                                       const NdArray<T>&, std::size_t,                          \
                                       SeparableConvCache<T>*);                                 \
  template void separable_conv2d_backward(const NdArray<T>&, const NdArray<T>&,                 \
                                          const NdArray<T>&, std::size_t,                       \
                                          const SeparableConvCache<T>&, NdArray<T>*,            \
                                          NdArray<T>*, NdArray<T>*, NdArray<T>*);               \
  template NdArray<T> upsample_nearest2x(const NdArray<T>&, std::size_t, std::size_t);          \
  template void upsample_nearest2x_backward(const NdArray<T>&, NdArray<T>&);                    \
  template void bilinear_sample_point(const T*, std::size_t, std::size_t, std::size_t,          \
                                      std::size_t, std::size_t, T, T, T*);                      \
  template void bilinear_sample_point_backward(const T*, std::size_t, std::size_t,              \
                                               std::size_t, std::size_t, std::size_t, T, T,     \
                                               const T*, T*, T*);                               \
  template NdArray<T> bilinear_sample(const NdArray<T>&, const NdArray<T>&);                    \
  template void bilinear_sample_backward(const NdArray<T>&, const NdArray<T>&,                  \
                                         const NdArray<T>&, NdArray<T>*, NdArray<T>*);          \
  template NdArray<T> linspace_grid(std::size_t, std::size_t);

TEXTMAMBA_INSTANTIATE(float)
TEXTMAMBA_INSTANTIATE(double)
#undef TEXTMAMBA_INSTANTIATE

}  // namespace textmamba::ops
