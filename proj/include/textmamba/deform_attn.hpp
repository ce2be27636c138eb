#pragma once

// Multi-scale deformable attention with per-row Top_k sparsification of the
// sampling weights. For each query, head, level and point a location
// ref + offset / (W_l, H_l) is sampled bilinearly from the projected value map;
// the samples are mixed with softmax weights over the Lv*P axis, of which only
// the k largest survive.

#include <cstddef>
#include <vector>

#include "textmamba/ndarray.hpp"
#include "textmamba/params.hpp"
#include "textmamba/rng.hpp"

namespace textmamba {

template <typename T>
struct DeformAttnParams {
  std::size_t heads = 4;
  std::size_t levels = 4;
  std::size_t points = 4;
  NdArray<T> value_w, value_b;    // [C x C], [C]
  NdArray<T> offset_w, offset_b;  // [C x 2*M*Lv*P], [2*M*Lv*P]
  NdArray<T> weight_w, weight_b;  // [C x M*Lv*P], [M*Lv*P]
  NdArray<T> out_w, out_b;        // [C x C], [C]

  std::size_t channels() const { return value_w.dim(0); }
  std::size_t samples_per_head() const { return levels * points; }

  static DeformAttnParams init(std::size_t channels, std::size_t heads, std::size_t levels,
                               std::size_t points, Rng& rng, bool zero_out_proj = false);

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
    f("value_w", s.value_w);
    f("value_b", s.value_b);
    f("offset_w", s.offset_w);
    f("offset_b", s.offset_b);
    f("weight_w", s.weight_w);
    f("weight_b", s.weight_b);
    f("out_w", s.out_w);
    f("out_b", s.out_b);
  }
};

struct AttnOptions {
  std::size_t k = 1;
  bool sparsify = true;      // false: dense softmax weights
  bool renormalize = false;  // rescale retained weights to sum to 1
};

/// ceil(Lv * P / 2)
std::size_t default_topk(std::size_t levels, std::size_t points);

/// Keep-mask of the k largest entries of a row; ties at the k-th value go to
/// the lowest index.
template <typename T>
std::vector<unsigned char> topk_mask(const T* row, std::size_t n, std::size_t k);

/// Zeroes every entry outside each last-axis row's k largest. Retained values
/// are untouched unless `renormalize`. k >= row length is the identity.
template <typename T>
NdArray<T> topk_sparsify(const NdArray<T>& w, std::size_t k, bool renormalize = false);

template <typename T>
struct DeformAttnCache {
  NdArray<T> queries;
  std::vector<NdArray<T>> maps;    // flattened [H_l*W_l x C] inputs
  std::vector<NdArray<T>> values;  // projected, same shapes
  std::vector<std::size_t> heights, widths;
  NdArray<T> ref_points;
  NdArray<T> offsets;  // [Q x M*Lv*P*2]
  NdArray<T> probs;    // [Q x M x Lv*P] softmax output
  NdArray<T> weights;  // after sparsification
  std::vector<unsigned char> mask;
  NdArray<T> heads_out;  // [Q x C], input of the output projection
  AttnOptions options;
  bool valid = false;
};

/// queries [Q x C], value_maps[l] [H_l x W_l x C], ref_points [Q x 2] in [0,1]^2.
template <typename T>
NdArray<T> deformable_attention(const NdArray<T>& queries,
                                const std::vector<NdArray<T>>& value_maps,
                                const NdArray<T>& ref_points, const DeformAttnParams<T>& params,
                                const AttnOptions& options, DeformAttnCache<T>* cache = nullptr);

/// The Top_k set is held fixed: gradient reaches only retained weights (and,
/// through the softmax, every logit).
template <typename T>
void attn_backward(const NdArray<T>& dout, const DeformAttnParams<T>& params,
                   const DeformAttnCache<T>& cache, DeformAttnParams<T>& grads,
                   NdArray<T>& dqueries, std::vector<NdArray<T>>& dmaps);

}  // namespace textmamba
