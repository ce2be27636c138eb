#include "textmamba/ss2d.hpp"

#include <algorithm>
#include <stdexcept>

namespace textmamba {

const char* scan_path_name(ScanPathId id) {
  switch (id) {
    case ScanPathId::row_forward: return "row_forward";
    case ScanPathId::row_backward: return "row_backward";
    case ScanPathId::col_forward: return "col_forward";
    case ScanPathId::col_backward: return "col_backward";
  }
  return "unknown";
}

ScanPath make_scan_path(ScanPathId id, std::size_t h, std::size_t w) {
  ScanPath path{id, {}};
  path.index_map.reserve(h * w);
  const bool columns = id == ScanPathId::col_forward || id == ScanPathId::col_backward;
  if (columns) {
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t i = 0; i < h; ++i) path.index_map.push_back(i * w + j);
  } else {
    for (std::size_t k = 0; k < h * w; ++k) path.index_map.push_back(k);
  }
  if (id == ScanPathId::row_backward || id == ScanPathId::col_backward) {
    std::reverse(path.index_map.begin(), path.index_map.end());
  }
  return path;
}

template <typename T>
NdArray<T> gather_path(const NdArray<T>& map, const ScanPath& path) {
  const std::size_t c = map.dim(2);
  const std::size_t len = path.index_map.size();
  if (len != map.dim(0) * map.dim(1)) {
    throw ShapeError("gather_path: path of length " + std::to_string(len) + " on map " +
                     shape_str(map.shape()));
  }
  NdArray<T> seq({len, c});
  for (std::size_t t = 0; t < len; ++t)
    std::copy_n(map.ptr() + path.index_map[t] * c, c, seq.ptr() + t * c);
  return seq;
}

template <typename T>
NdArray<T> scatter_path(const NdArray<T>& seq, const ScanPath& path, std::size_t h,
                        std::size_t w) {
  if (seq.rank() != 2 || seq.dim(0) != h * w || path.index_map.size() != h * w) {
    throw ShapeError("scatter_path: sequence " + shape_str(seq.shape()) + " onto " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t c = seq.dim(1);
  NdArray<T> map({h, w, c});
  for (std::size_t t = 0; t < h * w; ++t)
    std::copy_n(seq.ptr() + t * c, c, map.ptr() + path.index_map[t] * c);
  return map;
}

template <typename T>
std::array<NdArray<T>, 4> cross_scan(const NdArray<T>& map) {
  if (map.rank() != 3 || map.dim(0) == 0 || map.dim(1) == 0) {
    throw ShapeError("cross_scan: expected a non-empty [H x W x C] map, got " +
                     shape_str(map.shape()));
  }
  std::array<NdArray<T>, 4> out;
  for (std::size_t i = 0; i < 4; ++i)
    out[i] = gather_path(map, make_scan_path(kScanPaths[i], map.dim(0), map.dim(1)));
  return out;
}

template <typename T>
NdArray<T> cross_merge(const std::array<NdArray<T>, 4>& paths, std::size_t h, std::size_t w) {
  for (const auto& p : paths) {
    if (p.rank() != 2 || p.dim(0) != h * w || p.dim(1) != paths[0].dim(1)) {
      throw ShapeError("cross_merge: sequence " + shape_str(p.shape()) + " does not cover " +
                       std::to_string(h) + "x" + std::to_string(w));
    }
  }
  NdArray<T> merged({h, w, paths[0].dim(1)});
  for (std::size_t i = 0; i < 4; ++i)
    merged += scatter_path(paths[i], make_scan_path(kScanPaths[i], h, w), h, w);
  return merged;
}

template <typename T>
Ss2dParams<T> Ss2dParams<T>::init(std::size_t channels, std::size_t state_dim, Rng& rng,
                                  bool zero_out_proj, bool shared) {
  Ss2dParams p;
  p.shared = shared;
  for (auto& path : p.paths) path = S6Params<T>::init(channels, state_dim, rng);
  p.norm_gamma = NdArray<T>({channels}, T{1});
  p.norm_beta = NdArray<T>({channels});
  const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
  p.out_w = zero_out_proj ? NdArray<T>({channels, channels})
                          : rng.uniform_array<T>({channels, channels}, -scale, scale);
  p.out_b = NdArray<T>({channels});
  return p;
}

template <typename T>
NdArray<T> ss2d_forward(const NdArray<T>& map, const Ss2dParams<T>& params, ScanKernel kernel,
                        Ss2dCache<T>* cache) {
  if (map.rank() != 3 || map.dim(2) != params.channels()) {
    throw ShapeError("ss2d_forward: map " + shape_str(map.shape()) + " vs " +
                     std::to_string(params.channels()) + " channels");
  }
  const std::size_t h = map.dim(0), w = map.dim(1);
  auto seqs = cross_scan(map);
  std::array<NdArray<T>, 4> ys;
  for (std::size_t i = 0; i < 4; ++i) {
    ys[i] = selective_scan(seqs[i], params.path_params(i), kernel,
                           cache ? &cache->scans[i] : nullptr);
  }
  NdArray<T> merged = cross_merge(ys, h, w);
  NdArray<T> normed = ops::layer_norm(merged, params.norm_gamma, params.norm_beta,
                                      static_cast<T>(kLayerNormEps), cache ? &cache->norm : nullptr);
  NdArray<T> out = ops::linear(normed, params.out_w, params.out_b);
  if (cache) {
    cache->normed = std::move(normed);
    cache->h = h;
    cache->w = w;
    cache->valid = true;
  }
  return out;
}

template <typename T>
void ss2d_backward(const NdArray<T>& dy, const Ss2dParams<T>& params, const Ss2dCache<T>& cache,
                   Ss2dParams<T>& grads, NdArray<T>& dmap) {
  if (!cache.valid) throw std::logic_error("ss2d_backward: forward was run without a cache");
  NdArray<T> dnormed = NdArray<T>::zeros_like(cache.normed);
  ops::linear_backward(dy, cache.normed, params.out_w, &dnormed, &grads.out_w, &grads.out_b);
  NdArray<T> dmerged = NdArray<T>::zeros_like(cache.normed);
  ops::layer_norm_backward(dnormed, params.norm_gamma, cache.norm, &dmerged, &grads.norm_gamma,
                           &grads.norm_beta);
  for (std::size_t i = 0; i < 4; ++i) {
    const ScanPath path = make_scan_path(kScanPaths[i], cache.h, cache.w);
    // Adjoint of scatter is gather along the same path.
    NdArray<T> dy_path = gather_path(dmerged, path);
    NdArray<T> dseq = NdArray<T>::zeros_like(dy_path);
    s6_backward(dy_path, params.path_params(i), cache.scans[i], grads.paths[params.shared ? 0 : i],
                dseq);
    dmap += scatter_path(dseq, path, cache.h, cache.w);
  }
}

template <typename T>
NdArray<T> flip_width(const NdArray<T>& map) {
  const std::size_t h = map.dim(0), w = map.dim(1), c = map.dim(2);
  NdArray<T> out(map.shape());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      std::copy_n(map.ptr() + (i * w + j) * c, c, out.ptr() + (i * w + (w - 1 - j)) * c);
  return out;
}

#define TEXTMAMBA_INSTANTIATE(T)                                                               \
  template NdArray<T> gather_path(const NdArray<T>&, const ScanPath&);                          \
  template NdArray<T> scatter_path(const NdArray<T>&, const ScanPath&, std::size_t,             \
                                   std::size_t);                                                \
  template std::array<NdArray<T>, 4> cross_scan(const NdArray<T>&);                             \
  template NdArray<T> cross_merge(const std::array<NdArray<T>, 4>&, std::size_t, std::size_t);  \
  template struct Ss2dParams<T>;                                                                \
  template NdArray<T> ss2d_forward(const NdArray<T>&, const Ss2dParams<T>&, ScanKernel,         \
                                   Ss2dCache<T>*);                                              \
  template void ss2d_backward(const NdArray<T>&, const Ss2dParams<T>&, const Ss2dCache<T>&,     \
                              Ss2dParams<T>&, NdArray<T>&);                                     \
  template NdArray<T> flip_width(const NdArray<T>&);

TEXTMAMBA_INSTANTIATE(float)
TEXTMAMBA_INSTANTIATE(double)
#undef TEXTMAMBA_INSTANTIATE

}  // namespace textmamba
