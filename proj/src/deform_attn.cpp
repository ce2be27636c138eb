#include "textmamba/deform_attn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "textmamba/ops.hpp"

namespace textmamba {

std::size_t default_topk(std::size_t levels, std::size_t points) {
  return (levels * points + 1) / 2;
}

template <typename T>
std::vector<unsigned char> topk_mask(const T* row, std::size_t n, std::size_t k) {
  std::vector<unsigned char> keep(n, 0);
  if (k >= n) {
    std::fill(keep.begin(), keep.end(), 1);
    return keep;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [row](std::size_t a, std::size_t b) {
                      return row[a] > row[b] || (row[a] == row[b] && a < b);
                    });
  for (std::size_t i = 0; i < k; ++i) keep[order[i]] = 1;
  return keep;
}

template <typename T>
NdArray<T> topk_sparsify(const NdArray<T>& w, std::size_t k, bool renormalize) {
  if (k == 0) throw std::invalid_argument("topk_sparsify: k must be at least 1");
  if (w.rank() == 0) throw ShapeError("topk_sparsify: scalar input");
  const std::size_t n = w.shape().back();
  if (k >= n) return w;
  NdArray<T> out(w.shape());
  const std::size_t rows = n == 0 ? 0 : w.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = w.ptr() + r * n;
    const auto keep = topk_mask(in, n, k);
    T sum{0};
    for (std::size_t i = 0; i < n; ++i) {
      out[r * n + i] = keep[i] ? in[i] : T{0};
      sum += out[r * n + i];
    }
    if (renormalize && sum > T{0})
      for (std::size_t i = 0; i < n; ++i) out[r * n + i] /= sum;
  }
  return out;
}

template <typename T>
DeformAttnParams<T> DeformAttnParams<T>::init(std::size_t channels, std::size_t heads,
                                              std::size_t levels, std::size_t points, Rng& rng,
                                              bool zero_out_proj) {
  if (heads == 0 || channels % heads != 0) {
    throw std::invalid_argument("DeformAttnParams: " + std::to_string(channels) +
                                " channels do not split into " + std::to_string(heads) + " heads");
  }
  DeformAttnParams p;
  p.heads = heads;
  p.levels = levels;
  p.points = points;
  const std::size_t samples = heads * levels * points;
  const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
  p.value_w = rng.uniform_array<T>({channels, channels}, -scale, scale);
  p.value_b = NdArray<T>({channels});
  p.offset_w = rng.uniform_array<T>({channels, 2 * samples}, -0.1 * scale, 0.1 * scale);
  // Offsets start on a ring per head, growing with the point index (in pixels).
  p.offset_b = NdArray<T>({2 * samples});
  constexpr double kPi = 3.14159265358979323846;
  for (std::size_t m = 0; m < heads; ++m) {
    const double angle = 2.0 * kPi * static_cast<double>(m) / static_cast<double>(heads);
    for (std::size_t l = 0; l < levels; ++l) {
      for (std::size_t pt = 0; pt < points; ++pt) {
        const std::size_t s = (m * levels + l) * points + pt;
        p.offset_b[2 * s] = static_cast<T>(std::cos(angle) * static_cast<double>(pt + 1) * 0.5);
        p.offset_b[2 * s + 1] = static_cast<T>(std::sin(angle) * static_cast<double>(pt + 1) * 0.5);
      }
    }
  }
  p.weight_w = rng.uniform_array<T>({channels, samples}, -scale, scale);
  p.weight_b = NdArray<T>({samples});
  p.out_w = zero_out_proj ? NdArray<T>({channels, channels})
                          : rng.uniform_array<T>({channels, channels}, -scale, scale);
  p.out_b = NdArray<T>({channels});
  return p;
}

template <typename T>
NdArray<T> deformable_attention(const NdArray<T>& queries,
                                const std::vector<NdArray<T>>& value_maps,
                                const NdArray<T>& ref_points, const DeformAttnParams<T>& params,
                                const AttnOptions& options, DeformAttnCache<T>* cache) {
  const std::size_t c = params.channels();
  const std::size_t heads = params.heads, levels = params.levels, points = params.points;
  const std::size_t per_head = levels * points;
  if (queries.rank() != 2 || queries.dim(1) != c) {
    throw ShapeError("deformable_attention: queries " + shape_str(queries.shape()) + " vs " +
                     std::to_string(c) + " channels");
  }
  if (value_maps.size() != levels) {
    throw ShapeError("deformable_attention: " + std::to_string(value_maps.size()) +
                     " value maps for " + std::to_string(levels) + " levels");
  }
  const std::size_t nq = queries.dim(0);
  if (ref_points.shape() != Shape{nq, 2}) {
    throw ShapeError("deformable_attention: reference points " + shape_str(ref_points.shape()) +
                     " for " + std::to_string(nq) + " queries");
  }
  for (std::size_t i = 0; i < ref_points.size(); ++i) {
    if (!(ref_points[i] >= T{0} && ref_points[i] <= T{1})) {
      throw std::invalid_argument("deformable_attention: reference point coordinate " +
                                  std::to_string(static_cast<double>(ref_points[i])) +
                                  " outside [0, 1]");
    }
  }
  if (options.sparsify && options.k == 0) {
    throw std::invalid_argument("deformable_attention: Top_k arity must be at least 1");
  }
  const std::size_t head_dim = c / heads;

  std::vector<NdArray<T>> flat(levels), values(levels);
  std::vector<std::size_t> hs(levels), ws(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    const auto& m = value_maps[l];
    if (m.rank() != 3 || m.dim(2) != c) {
      throw ShapeError("deformable_attention: value map " + std::to_string(l) + " is " +
                       shape_str(m.shape()));
    }
    hs[l] = m.dim(0);
    ws[l] = m.dim(1);
    flat[l] = m.reshaped({hs[l] * ws[l], c});
    values[l] = ops::linear(flat[l], params.value_w, params.value_b);
  }

  NdArray<T> offsets = ops::linear(queries, params.offset_w, params.offset_b);
  NdArray<T> logits =
      ops::linear(queries, params.weight_w, params.weight_b).reshaped({nq, heads, per_head});
  NdArray<T> probs = ops::softmax(logits, 2);
  const bool sparse = options.sparsify && options.k < per_head;
  NdArray<T> weights = sparse ? topk_sparsify(probs, options.k, options.renormalize) : probs;

  NdArray<T> heads_out({nq, c});
  std::vector<T> sample(head_dim);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t m = 0; m < heads; ++m) {
      T* acc = heads_out.ptr() + q * c + m * head_dim;
      for (std::size_t l = 0; l < levels; ++l) {
        for (std::size_t p = 0; p < points; ++p) {
          const std::size_t s = (m * levels + l) * points + p;
          const T w = weights(q, m, l * points + p);
          if (w == T{0}) continue;
          const T x = ref_points(q, 0) + offsets(q, 2 * s) / static_cast<T>(ws[l]);
          const T y = ref_points(q, 1) + offsets(q, 2 * s + 1) / static_cast<T>(hs[l]);
          ops::bilinear_sample_point(values[l].ptr(), hs[l], ws[l], c, m * head_dim, head_dim, x,
                                     y, sample.data());
          for (std::size_t d = 0; d < head_dim; ++d) acc[d] += w * sample[d];
        }
      }
    }
  }
  NdArray<T> out = ops::linear(heads_out, params.out_w, params.out_b);

  if (cache) {
    cache->queries = queries;
    cache->maps = std::move(flat);
    cache->values = std::move(values);
    cache->heights = std::move(hs);
    cache->widths = std::move(ws);
    cache->ref_points = ref_points;
    cache->offsets = std::move(offsets);
    cache->mask.assign(probs.size(), 1);
    if (sparse) {
      for (std::size_t r = 0; r < nq * heads; ++r) {
        const auto keep = topk_mask(probs.ptr() + r * per_head, per_head, options.k);
        std::copy(keep.begin(), keep.end(), cache->mask.begin() + static_cast<std::ptrdiff_t>(r * per_head));
      }
    }
    cache->probs = std::move(probs);
    cache->weights = std::move(weights);
    cache->heads_out = std::move(heads_out);
    cache->options = options;
    cache->options.sparsify = sparse;
    cache->valid = true;
  }
  return out;
}

template <typename T>
void attn_backward(const NdArray<T>& dout, const DeformAttnParams<T>& params,
                   const DeformAttnCache<T>& cache, DeformAttnParams<T>& grads,
                   NdArray<T>& dqueries, std::vector<NdArray<T>>& dmaps) {
  if (!cache.valid) throw std::logic_error("attn_backward: forward was run without a cache");
  const std::size_t c = params.channels();
  const std::size_t heads = params.heads, levels = params.levels, points = params.points;
  const std::size_t per_head = levels * points;
  const std::size_t head_dim = c / heads;
  const std::size_t nq = cache.queries.dim(0);

  NdArray<T> dheads({nq, c});
  ops::linear_backward(dout, cache.heads_out, params.out_w, &dheads, &grads.out_w, &grads.out_b);

  std::vector<NdArray<T>> dvalues(levels);
  for (std::size_t l = 0; l < levels; ++l) dvalues[l] = NdArray<T>::zeros_like(cache.values[l]);
  NdArray<T> doffsets = NdArray<T>::zeros_like(cache.offsets);
  NdArray<T> dweights = NdArray<T>::zeros_like(cache.weights);
  std::vector<T> sample(head_dim), scaled(head_dim);

  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t m = 0; m < heads; ++m) {
      const T* g = dheads.ptr() + q * c + m * head_dim;
      for (std::size_t l = 0; l < levels; ++l) {
        const std::size_t h = cache.heights[l], w = cache.widths[l];
        for (std::size_t p = 0; p < points; ++p) {
          const std::size_t s = (m * levels + l) * points + p;
          const std::size_t wi = (q * heads + m) * per_head + l * points + p;
          if (!cache.mask[wi]) continue;
          const T x = cache.ref_points(q, 0) + cache.offsets(q, 2 * s) / static_cast<T>(w);
          const T y = cache.ref_points(q, 1) + cache.offsets(q, 2 * s + 1) / static_cast<T>(h);
          ops::bilinear_sample_point(cache.values[l].ptr(), h, w, c, m * head_dim, head_dim, x, y,
                                     sample.data());
          T dw{0};
          for (std::size_t d = 0; d < head_dim; ++d) dw += g[d] * sample[d];
          dweights[wi] = dw;
          const T weight = cache.weights[wi];
          for (std::size_t d = 0; d < head_dim; ++d) scaled[d] = weight * g[d];
          T dxy[2] = {T{0}, T{0}};
          ops::bilinear_sample_point_backward(cache.values[l].ptr(), h, w, c, m * head_dim,
                                              head_dim, x, y, scaled.data(),
                                              dvalues[l].ptr(), dxy);
          doffsets(q, 2 * s) += dxy[0] / static_cast<T>(w);
          doffsets(q, 2 * s + 1) += dxy[1] / static_cast<T>(h);
        }
      }
    }
  }

  // Back through the (optional) renormalisation and the fixed Top_k mask.
  NdArray<T> dprobs(cache.probs.shape());
  for (std::size_t r = 0; r < nq * heads; ++r) {
    const std::size_t base = r * per_head;
    if (cache.options.sparsify && cache.options.renormalize) {
      T kept{0};
      T dot{0};
      for (std::size_t i = 0; i < per_head; ++i) {
        if (!cache.mask[base + i]) continue;
        kept += cache.probs[base + i];
        dot += dweights[base + i] * cache.weights[base + i];
      }
      for (std::size_t i = 0; i < per_head; ++i)
        if (cache.mask[base + i]) dprobs[base + i] = (dweights[base + i] - dot) / kept;
    } else {
      for (std::size_t i = 0; i < per_head; ++i)
        if (cache.mask[base + i]) dprobs[base + i] = dweights[base + i];
    }
  }
  NdArray<T> dlogits = ops::softmax_backward(cache.probs, dprobs).reshaped({nq, heads * per_head});
  ops::linear_backward(dlogits, cache.queries, params.weight_w, &dqueries, &grads.weight_w,
                       &grads.weight_b);
  ops::linear_backward(doffsets, cache.queries, params.offset_w, &dqueries, &grads.offset_w,
                       &grads.offset_b);
  for (std::size_t l = 0; l < levels; ++l) {
    NdArray<T> dflat = NdArray<T>::zeros_like(cache.maps[l]);
    ops::linear_backward(dvalues[l], cache.maps[l], params.value_w, &dflat, &grads.value_w,
                         &grads.value_b);
    dmaps[l] += dflat.reshaped(dmaps[l].shape());
  }
}

#define TEXTMAMBA_INSTANTIATE(T)                                                               \
  template std::vector<unsigned char> topk_mask(const T*, std::size_t, std::size_t);            \
  template NdArray<T> topk_sparsify(const NdArray<T>&, std::size_t, bool);                      \
  template struct DeformAttnParams<T>;                                                          \
  template NdArray<T> deformable_attention(const NdArray<T>&, const std::vector<NdArray<T>>&,   \
                                           const NdArray<T>&, const DeformAttnParams<T>&,       \
                                           const AttnOptions&, DeformAttnCache<T>*);            \
  template void attn_backward(const NdArray<T>&, const DeformAttnParams<T>&,                    \
                              const DeformAttnCache<T>&, DeformAttnParams<T>&, NdArray<T>&,     \
                              std::vector<NdArray<T>>&);

TEXTMAMBA_INSTANTIATE(float)
TEXTMAMBA_INSTANTIATE(double)
#undef TEXTMAMBA_INSTANTIATE

}  // namespace textmamba
