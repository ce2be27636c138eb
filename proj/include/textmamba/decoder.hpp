#pragma once

// Query-based decoder: Top-K proposal selection over the encoder sequence,
// instance mask head, anchor priors as the softmax-expected grid coordinate of
// each mask, and layer-by-layer control point refinement in inverse-sigmoid
// space.

#include <cstddef>
#include <string>
#include <vector>

#include "textmamba/ndarray.hpp"
#include "textmamba/ops.hpp"
#include "textmamba/params.hpp"
#include "textmamba/rng.hpp"

namespace textmamba {

inline constexpr std::size_t kDefaultProposals = 100;
inline constexpr std::size_t kDefaultControlPoints = 16;
inline constexpr std::size_t kDefaultDecoderLayers = 4;

struct DecoderConfig {
  std::size_t num_proposals = kDefaultProposals;
  std::size_t num_points = kDefaultControlPoints;
  std::size_t num_layers = kDefaultDecoderLayers;
};

template <typename T>
struct MaskHeadParams {
  NdArray<T> qm_logits;         // [n] weights of the control-point summation
  NdArray<T> conv9_w, conv9_b;  // [9 x C x C], [C]
  NdArray<T> conv1_w, conv1_b;  // [1 x C x C], [C]
  NdArray<T> mlp1_w, mlp1_b;    // [C x C]
  NdArray<T> mlp2_w, mlp2_b;    // [C x C']
  NdArray<T> proj_w, proj_b;    // [C x C'], projection of F3'

  static MaskHeadParams init(std::size_t channels, std::size_t points, std::size_t mask_dim,
                             Rng& rng);

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
    f("qm_logits", s.qm_logits);
    f("conv9_w", s.conv9_w);
    f("conv9_b", s.conv9_b);
    f("conv1_w", s.conv1_w);
    f("conv1_b", s.conv1_b);
    f("mlp1_w", s.mlp1_w);
    f("mlp1_b", s.mlp1_b);
    f("mlp2_w", s.mlp2_w);
    f("mlp2_b", s.mlp2_b);
    f("proj_w", s.proj_w);
    f("proj_b", s.proj_b);
  }
};

template <typename T>
struct RefineLayerParams {
  NdArray<T> pos_w, pos_b;  // [2 x C], [C] point embedding
  NdArray<T> q_w, k_w, v_w;  // [C x C]
  NdArray<T> o_w, o_b;       // [C x C], [C]
  NdArray<T> norm_gamma, norm_beta;
  NdArray<T> off1_w, off1_b;  // [C x C]
  NdArray<T> off2_w, off2_b;  // [C x 2]

  /// zero_offsets makes the layer a fixed point of the control points.
  static RefineLayerParams init(std::size_t channels, Rng& rng, bool zero_offsets);

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
    f("pos_w", s.pos_w);
    f("pos_b", s.pos_b);
    f("q_w", s.q_w);
    f("k_w", s.k_w);
    f("v_w", s.v_w);
    f("o_w", s.o_w);
    f("o_b", s.o_b);
    f("norm_gamma", s.norm_gamma);
    f("norm_beta", s.norm_beta);
    f("off1_w", s.off1_w);
    f("off1_b", s.off1_b);
    f("off2_w", s.off2_w);
    f("off2_b", s.off2_b);
  }
};

template <typename T>
struct DecoderParams {
  NdArray<T> cls_w, cls_b;  // [C x 1], [1]
  NdArray<T> ctrl_embed;    // [n x C] learnable control-point embeddings
  MaskHeadParams<T> mask_head;
  std::vector<RefineLayerParams<T>> layers;

  static DecoderParams init(std::size_t channels, const DecoderConfig& cfg, Rng& rng);

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
    f("cls_w", s.cls_w);
    f("cls_b", s.cls_b);
    f("ctrl_embed", s.ctrl_embed);
    auto mh = prefixed("mask_head", f);
    s.mask_head.visit(mh);
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
      auto sub = prefixed("layer" + std::to_string(i), f);
      s.layers[i].visit(sub);
    }
  }
};

template <typename T>
struct ProposalSet {
  NdArray<T> embeddings;                    // Q [K x n x C]
  NdArray<T> scores;                        // [K], descending
  std::vector<std::size_t> source_indices;  // token index of each proposal
  NdArray<T> all_scores;                    // [L]
};

/// Indices of the k largest values, descending; equal values keep the lower index first.
template <typename T>
std::vector<std::size_t> topk_indices(const NdArray<T>& values, std::size_t k);

/// Per-token sigmoid(linear) scores, Top-K tokens, broadcast over the n
/// control points plus the control-point embeddings.
template <typename T>
ProposalSet<T> select_proposals(const NdArray<T>& tokens, const NdArray<T>& cls_w,
                                const NdArray<T>& cls_b, const NdArray<T>& ctrl_embed,
                                std::size_t num_proposals);

template <typename T>
struct MaskHeadCache {
  NdArray<T> q, qm_weights, conv9_out, conv1_out, pooled_sig, mask_e, hidden_pre, hidden,
      mask_embed, f3_flat, pixel_embed;
  std::size_t h = 0, w = 0;
  bool valid = false;
};

template <typename T>
struct MaskHeadOutputs {
  NdArray<T> mask_e;  // [K x 1 x C]
  NdArray<T> mask_i;  // [K x h x w]
};

template <typename T>
MaskHeadOutputs<T> mask_head(const NdArray<T>& q, const NdArray<T>& f3_prime,
                             const MaskHeadParams<T>& params, MaskHeadCache<T>* cache = nullptr);

/// dmask_i [K x h x w]; accumulates into dq and df3.
template <typename T>
void mask_head_backward(const NdArray<T>& dmask_i, const MaskHeadParams<T>& params,
                        const MaskHeadCache<T>& cache, MaskHeadParams<T>& grads, NdArray<T>& dq,
                        NdArray<T>& df3);

/// Expected grid coordinate under softmax(mask_i) over the h*w cells -> [K x 2].
template <typename T>
NdArray<T> anchor_priors(const NdArray<T>& mask_i);

template <typename T>
void anchor_priors_backward(const NdArray<T>& dpriors, const NdArray<T>& mask_i,
                            NdArray<T>& dmask_i);

template <typename T>
struct RefineLayerCache {
  NdArray<T> features_in, points_in, z, qh, kh, vh, attn, mixed, residual;
  ops::LayerNormCache<T> norm;
  NdArray<T> features_out, hidden_pre, hidden, delta, logits_in, points_out;
  bool valid = false;
};

template <typename T>
struct RefineCache {
  std::vector<RefineLayerCache<T>> layers;
};

inline constexpr double kInverseSigmoidEps = 1e-5;

/// Starts every control point at its proposal's prior and returns the points
/// after each layer ([K x n x 2] each, inside (0, 1)).
template <typename T>
std::vector<NdArray<T>> refine_control_points(const NdArray<T>& q, const NdArray<T>& priors,
                                              const std::vector<RefineLayerParams<T>>& layers,
                                              RefineCache<T>* cache = nullptr);

template <typename T>
void refine_backward(const std::vector<NdArray<T>>& dpoints,
                     const std::vector<RefineLayerParams<T>>& layers, const RefineCache<T>& cache,
                     std::vector<RefineLayerParams<T>>& grads, NdArray<T>& dq,
                     NdArray<T>& dpriors);

template <typename T>
struct DecoderOutputs {
  ProposalSet<T> proposals;
  NdArray<T> mask_e;
  NdArray<T> mask_i;  // [K x h x w] logits
  NdArray<T> priors;  // [K x 2]
  std::vector<NdArray<T>> control_points;
};

template <typename T>
struct DecoderCache {
  MaskHeadCache<T> mask;
  RefineCache<T> refine;
};

template <typename T>
DecoderOutputs<T> decoder_forward(const NdArray<T>& tokens, const NdArray<T>& f3_prime,
                                  const DecoderParams<T>& params, const DecoderConfig& cfg,
                                  DecoderCache<T>* cache = nullptr);

/// Upstream gradients of the quantities the loss consumes.
template <typename T>
struct DecoderUpstream {
  NdArray<T> dscores;  // [K]
  NdArray<T> dmask_i;  // [K x h x w]
  std::vector<NdArray<T>> dpoints;
};

template <typename T>
void decoder_backward(const DecoderUpstream<T>& up, const NdArray<T>& tokens,
                      const DecoderOutputs<T>& out, const DecoderParams<T>& params,
                      const DecoderCache<T>& cache, DecoderParams<T>& grads, NdArray<T>& dtokens,
                      NdArray<T>& df3);

}  // namespace textmamba
