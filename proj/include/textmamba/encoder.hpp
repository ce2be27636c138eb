#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "textmamba/deform_attn.hpp"
#include "textmamba/ndarray.hpp"
#include "textmamba/ops.hpp"
#include "textmamba/params.hpp"
#include "textmamba/ss2d.hpp"

namespace textmamba {

using LevelShape = std::pair<std::size_t, std::size_t>;  // (H_l, W_l)

/// Multi-level token sequence: level l occupies rows
/// [level_offsets[l], level_offsets[l] + H_l * W_l) of `tokens`, row-major.
template <typename T>
struct EmbeddingSequence {
  NdArray<T> tokens;  // [L x C]
  std::vector<LevelShape> level_shapes;
  std::vector<std::size_t> level_offsets;

  EmbeddingSequence() = default;
  EmbeddingSequence(NdArray<T> tokens, std::vector<LevelShape> shapes);

  std::size_t length() const { return tokens.dim(0); }
  std::size_t channels() const { return tokens.dim(1); }
  std::size_t levels() const { return level_shapes.size(); }

  /// Level l as [H_l x W_l x C].
  NdArray<T> level_map(std::size_t l) const;
  void set_level_map(std::size_t l, const NdArray<T>& map);

  static EmbeddingSequence flatten(const std::vector<NdArray<T>>& maps);

  /// Pixel-centre position of every token within its own level, [L x 2] as (x, y).
  NdArray<T> reference_points() const;

  void validate() const;
};

template <typename T>
struct DsffnParams {
  NdArray<T> norm_gamma, norm_beta;  // [C]
  NdArray<T> e1_w, e1_b;             // C -> 2C
  NdArray<T> r1_w, r1_b;             // 2C -> C
  NdArray<T> e2_w, e2_b;             // C -> 4C
  NdArray<T> r2_w, r2_b;             // 4C -> C

  std::size_t channels() const { return norm_gamma.size(); }
  static DsffnParams init(std::size_t channels, Rng& rng);

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
    f("norm_gamma", s.norm_gamma);
    f("norm_beta", s.norm_beta);
    f("e1_w", s.e1_w);
    f("e1_b", s.e1_b);
    f("r1_w", s.r1_w);
    f("r1_b", s.r1_b);
    f("e2_w", s.e2_w);
    f("e2_b", s.e2_b);
    f("r2_w", s.r2_w);
    f("r2_b", s.r2_b);
  }
};

/// Single-path feed-forward used when the dual-scale network is switched off:
/// L_in + R(relu(E(L_in))) with a 4C hidden width.
template <typename T>
struct FfnParams {
  NdArray<T> norm_gamma, norm_beta;
  NdArray<T> e_w, e_b;  // C -> 4C
  NdArray<T> r_w, r_b;  // 4C -> C

  static FfnParams init(std::size_t channels, Rng& rng);

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
    f("norm_gamma", s.norm_gamma);
    f("norm_beta", s.norm_beta);
    f("e_w", s.e_w);
    f("e_b", s.e_b);
    f("r_w", s.r_w);
    f("r_b", s.r_b);
  }
};

template <typename T>
struct FfnCache {
  ops::LayerNormCache<T> norm;
  NdArray<T> l_in;
  NdArray<T> pre1, act1, pre2, act2;  // branch pre-activations and activations
  bool valid = false;
};

/// L_out = L_in + R1(relu(E1 L_in)) + R2(relu(E2 L_in)), L_in = layer_norm(x).
template <typename T>
NdArray<T> dsffn_forward(const NdArray<T>& x, const DsffnParams<T>& params,
                         FfnCache<T>* cache = nullptr);

template <typename T>
void dsffn_backward(const NdArray<T>& dy, const DsffnParams<T>& params, const FfnCache<T>& cache,
                    DsffnParams<T>& grads, NdArray<T>& dx);

template <typename T>
NdArray<T> ffn_forward(const NdArray<T>& x, const FfnParams<T>& params,
                       FfnCache<T>* cache = nullptr);

template <typename T>
void ffn_backward(const NdArray<T>& dy, const FfnParams<T>& params, const FfnCache<T>& cache,
                  FfnParams<T>& grads, NdArray<T>& dx);

struct MixSsmConfig {
  std::size_t num_blocks = 6;
  std::size_t heads = 4;
  std::size_t points = 4;
  std::size_t state_dim = kDefaultStateDim;
  std::size_t k = 0;  // 0 -> default_topk(levels, points)
  bool renormalize = false;
  bool enable_ss2d = true;
  bool enable_dsffn = true;
  bool enable_topk = true;
  bool share_scan_params = false;
  ScanKernel scan_kernel = ScanKernel::parallel;

  std::size_t topk(std::size_t levels) const { return k == 0 ? default_topk(levels, points) : k; }
  AttnOptions attn_options(std::size_t levels) const;
};

/// One Mix-SSM block. Optional members follow the component switches, so the
/// parameter count of a configuration is exactly what it would train.
template <typename T>
struct MixSsmBlockParams {
  DeformAttnParams<T> attn;
  NdArray<T> norm1_gamma, norm1_beta;
  std::optional<Ss2dParams<T>> ss2d;
  NdArray<T> norm2_gamma, norm2_beta;
  std::optional<DsffnParams<T>> dsffn;
  std::optional<FfnParams<T>> ffn;

  /// SS2D output projection starts at zero so a fresh block begins at the
  /// attention-only baseline.
  static MixSsmBlockParams init(std::size_t channels, std::size_t levels,
                                const MixSsmConfig& cfg, Rng& rng);

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
    auto attn = prefixed("attn", f);
    s.attn.visit(attn);
    f("norm1_gamma", s.norm1_gamma);
    f("norm1_beta", s.norm1_beta);
    if (s.ss2d) {
      auto sub = prefixed("ss2d", f);
      s.ss2d->visit(sub);
      f("norm2_gamma", s.norm2_gamma);
      f("norm2_beta", s.norm2_beta);
    }
    if (s.dsffn) {
      auto sub = prefixed("dsffn", f);
      s.dsffn->visit(sub);
    }
    if (s.ffn) {
      auto sub = prefixed("ffn", f);
      s.ffn->visit(sub);
    }
  }
};

template <typename T>
struct MixSsmBlockCache {
  DeformAttnCache<T> attn;
  ops::LayerNormCache<T> norm1;
  std::vector<Ss2dCache<T>> ss2d;  // per level
  ops::LayerNormCache<T> norm2;
  FfnCache<T> ffn;
  NdArray<T> stage1, stage2;  // outputs of stage 1 and 2
  bool valid = false;
};

/// Stage 1: x1 = LN1(S + attn(S)); stage 2: x2 = LN2(x1 + ss2d per level);
/// stage 3: DSFFN (pre-norm, residual inside).
template <typename T>
EmbeddingSequence<T> mix_ssm_block(const EmbeddingSequence<T>& seq,
                                   const MixSsmBlockParams<T>& params, const MixSsmConfig& cfg,
                                   MixSsmBlockCache<T>* cache = nullptr);

template <typename T>
void mix_ssm_block_backward(const NdArray<T>& dy, const EmbeddingSequence<T>& seq,
                            const MixSsmBlockParams<T>& params, const MixSsmConfig& cfg,
                            const MixSsmBlockCache<T>& cache, MixSsmBlockParams<T>& grads,
                            NdArray<T>& dtokens);

/// Intermediate stage outputs, exposed for the locality check.
template <typename T>
struct BlockStages {
  NdArray<T> stage1, stage2, output;
};

template <typename T>
BlockStages<T> mix_ssm_block_stages(const EmbeddingSequence<T>& seq,
                                    const MixSsmBlockParams<T>& params, const MixSsmConfig& cfg);

template <typename T>
struct EncoderParams {
  std::vector<MixSsmBlockParams<T>> blocks;

  static EncoderParams init(std::size_t channels, std::size_t levels, const MixSsmConfig& cfg,
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
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
      auto sub = prefixed("block" + std::to_string(i), f);
      s.blocks[i].visit(sub);
    }
  }
};

template <typename T>
struct EncoderCache {
  std::vector<EmbeddingSequence<T>> inputs;  // input of each block
  std::vector<MixSsmBlockCache<T>> blocks;
};

template <typename T>
EmbeddingSequence<T> encoder_forward(const EmbeddingSequence<T>& seq,
                                     const EncoderParams<T>& params, const MixSsmConfig& cfg,
                                     EncoderCache<T>* cache = nullptr);

template <typename T>
void encoder_backward(const NdArray<T>& dy, const EncoderParams<T>& params,
                      const MixSsmConfig& cfg, const EncoderCache<T>& cache,
                      EncoderParams<T>& grads, NdArray<T>& dtokens);

}  // namespace textmamba
