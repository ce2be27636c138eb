#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "textmamba/ndarray.hpp"
#include "textmamba/ops.hpp"
#include "textmamba/params.hpp"
#include "textmamba/s6.hpp"

namespace textmamba {

inline constexpr double kLayerNormEps = 1e-5;

enum class ScanPathId { row_forward = 0, row_backward = 1, col_forward = 2, col_backward = 3 };

inline constexpr std::array<ScanPathId, 4> kScanPaths = {
    ScanPathId::row_forward, ScanPathId::row_backward, ScanPathId::col_forward,
    ScanPathId::col_backward};

const char* scan_path_name(ScanPathId id);

/// One traversal of an H x W grid. index_map[t] is the row-major cell visited
/// at step t. Column paths are the row paths of the transposed grid.
struct ScanPath {
  ScanPathId id;
  std::vector<std::size_t> index_map;
};

ScanPath make_scan_path(ScanPathId id, std::size_t h, std::size_t w);

/// [H x W x C] -> four [H*W x C] sequences in kScanPaths order.
template <typename T>
std::array<NdArray<T>, 4> cross_scan(const NdArray<T>& map);

/// Scatters each sequence back through its path and sums the four maps in
/// kScanPaths order.
template <typename T>
NdArray<T> cross_merge(const std::array<NdArray<T>, 4>& paths, std::size_t h, std::size_t w);

/// Gathers one path (cross_scan for a single direction).
template <typename T>
NdArray<T> gather_path(const NdArray<T>& map, const ScanPath& path);

/// Inverse of gather_path.
template <typename T>
NdArray<T> scatter_path(const NdArray<T>& seq, const ScanPath& path, std::size_t h,
                        std::size_t w);

template <typename T>
struct Ss2dParams {
  std::array<S6Params<T>, 4> paths;
  NdArray<T> norm_gamma;  // [C]
  NdArray<T> norm_beta;   // [C]
  NdArray<T> out_w;       // [C x C]
  NdArray<T> out_b;       // [C]
  bool shared = false;    // all four directions use paths[0]

  std::size_t channels() const { return norm_gamma.size(); }
  const S6Params<T>& path_params(std::size_t i) const { return paths[shared ? 0 : i]; }

  /// zero_out_proj starts the branch at exactly zero output.
  static Ss2dParams init(std::size_t channels, std::size_t state_dim, Rng& rng,
                         bool zero_out_proj, bool shared = false);

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
    const std::size_t n = s.shared ? 1 : 4;
    for (std::size_t i = 0; i < n; ++i) {
      auto sub = prefixed(std::string("path") + std::to_string(i), f);
      s.paths[i].visit(sub);
    }
    f("norm_gamma", s.norm_gamma);
    f("norm_beta", s.norm_beta);
    f("out_w", s.out_w);
    f("out_b", s.out_b);
  }
};

template <typename T>
struct Ss2dCache {
  std::array<S6Cache<T>, 4> scans;
  ops::LayerNormCache<T> norm;
  NdArray<T> normed;  // layer_norm output, input of the projection
  std::size_t h = 0, w = 0;
  bool valid = false;
};

/// cross_scan -> per-path S6 -> cross_merge -> layer_norm -> linear. No residual.
template <typename T>
NdArray<T> ss2d_forward(const NdArray<T>& map, const Ss2dParams<T>& params,
                        ScanKernel kernel = ScanKernel::parallel, Ss2dCache<T>* cache = nullptr);

template <typename T>
void ss2d_backward(const NdArray<T>& dy, const Ss2dParams<T>& params, const Ss2dCache<T>& cache,
                   Ss2dParams<T>& grads, NdArray<T>& dmap);

/// Mirror of a map along its width axis.
template <typename T>
NdArray<T> flip_width(const NdArray<T>& map);

}  // namespace textmamba
