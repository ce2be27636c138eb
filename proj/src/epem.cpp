#include "textmamba/epem.hpp"

#include <cmath>
#include <stdexcept>

namespace textmamba {

template <typename T>
void PyramidFeatures<T>::validate() const {
  for (std::size_t i = 0; i + 1 < maps.size(); ++i) {
    const auto& big = maps[i];
    const auto& small = maps[i + 1];
    if (big.rank() != 3 || small.rank() != 3 || big.dim(2) != small.dim(2) ||
        small.dim(0) != (big.dim(0) + 1) / 2 || small.dim(1) != (big.dim(1) + 1) / 2) {
      throw ShapeError("PyramidFeatures: level " + std::to_string(i + 1) + " " +
                       shape_str(small.shape()) + " is not half of " + shape_str(big.shape()));
    }
  }
}

template <typename T>
SeparableConvParams<T> SeparableConvParams<T>::init(std::size_t cin, std::size_t cout, Rng& rng) {
  SeparableConvParams p;
  p.depthwise = rng.uniform_array<T>({3, 3, cin}, -1.0 / 3.0, 1.0 / 3.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cin));
  p.pointwise = rng.uniform_array<T>({cin, cout}, -scale, scale);
  p.bias = NdArray<T>({cout});
  return p;
}

template <typename T>
SeparableConvParams<T> SeparableConvParams<T>::identity(std::size_t channels) {
  SeparableConvParams p;
  p.depthwise = NdArray<T>({3, 3, channels});
  for (std::size_t c = 0; c < channels; ++c) p.depthwise(1, 1, c) = T{1};
  p.pointwise = NdArray<T>({channels, channels});
  for (std::size_t c = 0; c < channels; ++c) p.pointwise(c, c) = T{1};
  p.bias = NdArray<T>({channels});
  return p;
}

template <typename T>
SeparableConvParams<T> SeparableConvParams<T>::zero(std::size_t channels) {
  SeparableConvParams p;
  p.depthwise = NdArray<T>({3, 3, channels});
  p.pointwise = NdArray<T>({channels, channels});
  p.bias = NdArray<T>({channels});
  return p;
}

template <typename T>
FpemParams<T> FpemParams<T>::init(std::size_t channels, Rng& rng) {
  FpemParams p;
  for (auto& c : p.up) c = SeparableConvParams<T>::init(channels, channels, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    p.down_stride[i] = SeparableConvParams<T>::init(channels, channels, rng);
    p.down_smooth[i] = SeparableConvParams<T>::init(channels, channels, rng);
  }
  return p;
}

template <typename T>
FpemParams<T> FpemParams<T>::identity(std::size_t channels) {
  FpemParams p;
  for (std::size_t i = 0; i < 3; ++i) {
    p.up[i] = SeparableConvParams<T>::identity(channels);
    p.down_stride[i] = SeparableConvParams<T>::zero(channels);
    p.down_smooth[i] = SeparableConvParams<T>::identity(channels);
  }
  return p;
}

template <typename T>
PyramidFeatures<T> reconstruct_maps(const EmbeddingSequence<T>& seq) {
  seq.validate();
  PyramidFeatures<T> out;
  for (std::size_t l = 0; l < seq.levels(); ++l) out.maps.push_back(seq.level_map(l));
  return out;
}

template <typename T>
EmbeddingSequence<T> flatten_pyramid(const PyramidFeatures<T>& pyramid) {
  return EmbeddingSequence<T>::flatten(pyramid.maps);
}

template <typename T>
PyramidFeatures<T> fuse_add(const PyramidFeatures<T>& reconstructed,
                            const PyramidFeatures<T>& backbone) {
  if (reconstructed.levels() != backbone.levels()) {
    throw ShapeError("fuse_add: " + std::to_string(reconstructed.levels()) + " vs " +
                     std::to_string(backbone.levels()) + " levels");
  }
  PyramidFeatures<T> out;
  for (std::size_t l = 0; l < reconstructed.levels(); ++l) {
    if (reconstructed.maps[l].shape() != backbone.maps[l].shape()) {
      throw ShapeError("fuse_add: level " + std::to_string(l) + " " +
                       shape_str(reconstructed.maps[l].shape()) + " vs backbone " +
                       shape_str(backbone.maps[l].shape()));
    }
    out.maps.push_back(reconstructed.maps[l] + backbone.maps[l]);
  }
  return out;
}

namespace {

template <typename T>
NdArray<T> conv(const NdArray<T>& x, const SeparableConvParams<T>& p, std::size_t stride,
                ops::SeparableConvCache<T>* cache) {
  return ops::separable_conv2d(x, p.depthwise, p.pointwise, p.bias, stride, cache);
}

template <typename T>
NdArray<T> conv_backward(const NdArray<T>& dy, const SeparableConvParams<T>& p,
                         std::size_t stride, const ops::SeparableConvCache<T>& cache,
                         SeparableConvParams<T>& g) {
  NdArray<T> dx = NdArray<T>::zeros_like(cache.input);
  ops::separable_conv2d_backward(dy, p.depthwise, p.pointwise, stride, cache, &dx, &g.depthwise,
                                 &g.pointwise, &g.bias);
  return dx;
}

}  // namespace

template <typename T>
PyramidFeatures<T> fpem(const PyramidFeatures<T>& features, const FpemParams<T>& params,
                        FpemCache<T>* cache) {
  if (features.levels() != 4) {
    throw ShapeError("fpem: expected 4 pyramid levels, got " + std::to_string(features.levels()));
  }
  features.validate();
  const auto& f = features.maps;
  std::vector<NdArray<T>> up(4);
  up[3] = f[3];
  for (std::size_t i = 3; i-- > 0;) {
    NdArray<T> sum = f[i] + ops::upsample_nearest2x(up[i + 1], f[i].dim(0), f[i].dim(1));
    up[i] = conv(sum, params.up[i], 1, cache ? &cache->up[i] : nullptr);
  }
  PyramidFeatures<T> out;
  out.maps.resize(4);
  out.maps[0] = up[0];
  for (std::size_t i = 0; i < 3; ++i) {
    NdArray<T> reduced =
        conv(out.maps[i], params.down_stride[i], 2, cache ? &cache->down_stride[i] : nullptr);
    reduced += up[i + 1];
    out.maps[i + 1] =
        conv(reduced, params.down_smooth[i], 1, cache ? &cache->down_smooth[i] : nullptr);
  }
  if (cache) {
    cache->after_up = std::move(up);
    cache->valid = true;
  }
  return out;
}

template <typename T>
void fpem_backward(const std::vector<NdArray<T>>& dout, const FpemParams<T>& params,
                   const FpemCache<T>& cache, FpemParams<T>& grads,
                   std::vector<NdArray<T>>& dinput) {
  if (!cache.valid) throw std::logic_error("fpem_backward: forward was run without a cache");
  std::vector<NdArray<T>> dd = dout;
  std::vector<NdArray<T>> dup(4);
  for (std::size_t i = 0; i < 4; ++i) dup[i] = NdArray<T>::zeros_like(cache.after_up[i]);
  for (std::size_t i = 3; i-- > 0;) {
    NdArray<T> dreduced = conv_backward(dd[i + 1], params.down_smooth[i], 1,
                                        cache.down_smooth[i], grads.down_smooth[i]);
    dup[i + 1] += dreduced;
    dd[i] += conv_backward(dreduced, params.down_stride[i], 2, cache.down_stride[i],
                           grads.down_stride[i]);
  }
  dup[0] += dd[0];
  for (std::size_t i = 0; i < 3; ++i) {
    NdArray<T> dsum = conv_backward(dup[i], params.up[i], 1, cache.up[i], grads.up[i]);
    dinput[i] += dsum;
    ops::upsample_nearest2x_backward(dsum, dup[i + 1]);
  }
  dinput[3] += dup[3];
}

template <typename T>
EpemResult<T> epem_forward(const EmbeddingSequence<T>& seq, const PyramidFeatures<T>& backbone,
                           const FpemParams<T>& params, FpemCache<T>* cache) {
  PyramidFeatures<T> fused = fuse_add(reconstruct_maps(seq), backbone);
  PyramidFeatures<T> enhanced = fpem(fused, params, cache);
  EpemResult<T> r;
  r.f3_prime = enhanced.maps[1];
  r.seq = flatten_pyramid(enhanced);
  return r;
}

template <typename T>
void epem_backward(const NdArray<T>& dseq, const NdArray<T>& df3, const EmbeddingSequence<T>& seq,
                   const FpemParams<T>& params, const FpemCache<T>& cache, FpemParams<T>& grads,
                   NdArray<T>& dtokens, std::vector<NdArray<T>>* dbackbone) {
  EmbeddingSequence<T> dout_seq(dseq, seq.level_shapes);
  std::vector<NdArray<T>> dout = reconstruct_maps(dout_seq).maps;
  if (!df3.empty()) dout[1] += df3;
  std::vector<NdArray<T>> dfused;
  for (const auto& m : dout) dfused.push_back(NdArray<T>::zeros_like(m));
  fpem_backward(dout, params, cache, grads, dfused);
  dtokens += EmbeddingSequence<T>::flatten(dfused).tokens;
  if (dbackbone) {
    for (std::size_t l = 0; l < dfused.size(); ++l) (*dbackbone)[l] += dfused[l];
  }
}

#define TEXTMAMBA_INSTANTIATE(T)                                                                \
  template struct PyramidFeatures<T>;                                                            \
  template struct SeparableConvParams<T>;                                                        \
  template struct FpemParams<T>;                                                                 \
  template PyramidFeatures<T> reconstruct_maps(const EmbeddingSequence<T>&);                     \
  template EmbeddingSequence<T> flatten_pyramid(const PyramidFeatures<T>&);                      \
  template PyramidFeatures<T> fuse_add(const PyramidFeatures<T>&, const PyramidFeatures<T>&);    \
  template PyramidFeatures<T> fpem(const PyramidFeatures<T>&, const FpemParams<T>&,              \
                                   FpemCache<T>*);                                               \
  template void fpem_backward(const std::vector<NdArray<T>>&, const FpemParams<T>&,              \
                              const FpemCache<T>&, FpemParams<T>&, std::vector<NdArray<T>>&);    \
  template EpemResult<T> epem_forward(const EmbeddingSequence<T>&, const PyramidFeatures<T>&,    \
                                      const FpemParams<T>&, FpemCache<T>*);                      \
  template void epem_backward(const NdArray<T>&, const NdArray<T>&, const EmbeddingSequence<T>&, \
                              const FpemParams<T>&, const FpemCache<T>&, FpemParams<T>&,         \
                              NdArray<T>&, std::vector<NdArray<T>>*);

TEXTMAMBA_INSTANTIATE(float)
TEXTMAMBA_INSTANTIATE(double)
#undef TEXTMAMBA_INSTANTIATE

}  // namespace textmamba
