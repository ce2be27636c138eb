#include "textmamba/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace textmamba {

// ---- EmbeddingSequence ----------------------------------------------------

template <typename T>
EmbeddingSequence<T>::EmbeddingSequence(NdArray<T> toks, std::vector<LevelShape> shapes)
    : tokens(std::move(toks)), level_shapes(std::move(shapes)) {
  std::size_t offset = 0;
  for (const auto& [h, w] : level_shapes) {
    level_offsets.push_back(offset);
    offset += h * w;
  }
  validate();
}

template <typename T>
void EmbeddingSequence<T>::validate() const {
  if (tokens.rank() != 2) {
    throw ShapeError("EmbeddingSequence: tokens must be [L x C], got " + shape_str(tokens.shape()));
  }
  std::size_t total = 0;
  for (const auto& [h, w] : level_shapes) total += h * w;
  if (total != tokens.dim(0) || level_offsets.size() != level_shapes.size()) {
    throw ShapeError("EmbeddingSequence: level partition covers " + std::to_string(total) +
                     " tokens, sequence has " + std::to_string(tokens.dim(0)));
  }
}

template <typename T>
NdArray<T> EmbeddingSequence<T>::level_map(std::size_t l) const {
  const auto [h, w] = level_shapes.at(l);
  const std::size_t c = channels();
  NdArray<T> map({h, w, c});
  std::copy_n(tokens.ptr() + level_offsets[l] * c, h * w * c, map.ptr());
  return map;
}

template <typename T>
void EmbeddingSequence<T>::set_level_map(std::size_t l, const NdArray<T>& map) {
  const auto [h, w] = level_shapes.at(l);
  if (map.shape() != Shape{h, w, channels()}) {
    throw ShapeError("set_level_map: level " + std::to_string(l) + " expects " +
                     shape_str({h, w, channels()}) + ", got " + shape_str(map.shape()));
  }
  std::copy_n(map.ptr(), map.size(), tokens.ptr() + level_offsets[l] * channels());
}

template <typename T>
EmbeddingSequence<T> EmbeddingSequence<T>::flatten(const std::vector<NdArray<T>>& maps) {
  if (maps.empty()) throw ShapeError("flatten: no levels");
  const std::size_t c = maps[0].dim(2);
  std::size_t total = 0;
  std::vector<LevelShape> shapes;
  for (const auto& m : maps) {
    if (m.rank() != 3 || m.dim(2) != c) {
      throw ShapeError("flatten: level map " + shape_str(m.shape()) + " vs " +
                       std::to_string(c) + " channels");
    }
    shapes.emplace_back(m.dim(0), m.dim(1));
    total += m.dim(0) * m.dim(1);
  }
  NdArray<T> tokens({total, c});
  std::size_t at = 0;
  for (const auto& m : maps) {
    std::copy_n(m.ptr(), m.size(), tokens.ptr() + at);
    at += m.size();
  }
  return EmbeddingSequence(std::move(tokens), std::move(shapes));
}

template <typename T>
NdArray<T> EmbeddingSequence<T>::reference_points() const {
  NdArray<T> ref({length(), 2});
  for (std::size_t l = 0; l < levels(); ++l) {
    const auto [h, w] = level_shapes[l];
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t t = level_offsets[l] + i * w + j;
        ref(t, 0) = (static_cast<T>(j) + T{0.5}) / static_cast<T>(w);
        ref(t, 1) = (static_cast<T>(i) + T{0.5}) / static_cast<T>(h);
      }
    }
  }
  return ref;
}

// ---- feed-forward networks --------------------------------------------------

namespace {

template <typename T>
NdArray<T> uniform_weight(std::size_t in, std::size_t out, Rng& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  return rng.uniform_array<T>({in, out}, -scale, scale);
}

template <typename T>
NdArray<T> branch(const NdArray<T>& l_in, const NdArray<T>& ew, const NdArray<T>& eb,
                  const NdArray<T>& rw, const NdArray<T>& rb, NdArray<T>& pre, NdArray<T>& act) {
  pre = ops::linear(l_in, ew, eb);
  act = ops::relu(pre);
  return ops::linear(act, rw, rb);
}

template <typename T>
void branch_backward(const NdArray<T>& dy, const NdArray<T>& l_in, const NdArray<T>& ew,
                     const NdArray<T>& rw, const NdArray<T>& pre, const NdArray<T>& act,
                     NdArray<T>& dew, NdArray<T>& deb, NdArray<T>& drw, NdArray<T>& drb,
                     NdArray<T>& dl_in) {
  NdArray<T> dact = NdArray<T>::zeros_like(act);
  ops::linear_backward(dy, act, rw, &dact, &drw, &drb);
  NdArray<T> dpre = NdArray<T>::zeros_like(pre);
  ops::relu_backward(dact, pre, dpre);
  ops::linear_backward(dpre, l_in, ew, &dl_in, &dew, &deb);
}

}  // namespace

template <typename T>
DsffnParams<T> DsffnParams<T>::init(std::size_t c, Rng& rng) {
  DsffnParams p;
  p.norm_gamma = NdArray<T>({c}, T{1});
  p.norm_beta = NdArray<T>({c});
  p.e1_w = uniform_weight<T>(c, 2 * c, rng);
  p.e1_b = NdArray<T>({2 * c});
  p.r1_w = uniform_weight<T>(2 * c, c, rng);
  p.r1_b = NdArray<T>({c});
  p.e2_w = uniform_weight<T>(c, 4 * c, rng);
  p.e2_b = NdArray<T>({4 * c});
  p.r2_w = uniform_weight<T>(4 * c, c, rng);
  p.r2_b = NdArray<T>({c});
  return p;
}

template <typename T>
FfnParams<T> FfnParams<T>::init(std::size_t c, Rng& rng) {
  FfnParams p;
  p.norm_gamma = NdArray<T>({c}, T{1});
  p.norm_beta = NdArray<T>({c});
  p.e_w = uniform_weight<T>(c, 4 * c, rng);
  p.e_b = NdArray<T>({4 * c});
  p.r_w = uniform_weight<T>(4 * c, c, rng);
  p.r_b = NdArray<T>({c});
  return p;
}

template <typename T>
NdArray<T> dsffn_forward(const NdArray<T>& x, const DsffnParams<T>& params, FfnCache<T>* cache) {
  if (x.rank() != 2 || x.dim(1) != params.channels() || params.e1_w.dim(1) != 2 * params.channels() ||
      params.e2_w.dim(1) != 4 * params.channels()) {
    throw ShapeError("dsffn_forward: input " + shape_str(x.shape()) + " vs parameters for " +
                     std::to_string(params.channels()) + " channels");
  }
  FfnCache<T> local;
  FfnCache<T>& c = cache ? *cache : local;
  c.l_in = ops::layer_norm(x, params.norm_gamma, params.norm_beta, static_cast<T>(kLayerNormEps),
                           &c.norm);
  NdArray<T> out = c.l_in;
  out += branch(c.l_in, params.e1_w, params.e1_b, params.r1_w, params.r1_b, c.pre1, c.act1);
  out += branch(c.l_in, params.e2_w, params.e2_b, params.r2_w, params.r2_b, c.pre2, c.act2);
  c.valid = true;
  return out;
}

template <typename T>
void dsffn_backward(const NdArray<T>& dy, const DsffnParams<T>& params, const FfnCache<T>& cache,
                    DsffnParams<T>& grads, NdArray<T>& dx) {
  if (!cache.valid) throw std::logic_error("dsffn_backward: forward was run without a cache");
  NdArray<T> dl_in = dy;
  branch_backward(dy, cache.l_in, params.e1_w, params.r1_w, cache.pre1, cache.act1, grads.e1_w,
                  grads.e1_b, grads.r1_w, grads.r1_b, dl_in);
  branch_backward(dy, cache.l_in, params.e2_w, params.r2_w, cache.pre2, cache.act2, grads.e2_w,
                  grads.e2_b, grads.r2_w, grads.r2_b, dl_in);
  ops::layer_norm_backward(dl_in, params.norm_gamma, cache.norm, &dx, &grads.norm_gamma,
                           &grads.norm_beta);
}

template <typename T>
NdArray<T> ffn_forward(const NdArray<T>& x, const FfnParams<T>& params, FfnCache<T>* cache) {
  if (x.rank() != 2 || x.dim(1) != params.norm_gamma.size()) {
    throw ShapeError("ffn_forward: input " + shape_str(x.shape()) + " vs " +
                     std::to_string(params.norm_gamma.size()) + " channels");
  }
  FfnCache<T> local;
  FfnCache<T>& c = cache ? *cache : local;
  c.l_in = ops::layer_norm(x, params.norm_gamma, params.norm_beta, static_cast<T>(kLayerNormEps),
                           &c.norm);
  NdArray<T> out = c.l_in;
  out += branch(c.l_in, params.e_w, params.e_b, params.r_w, params.r_b, c.pre1, c.act1);
  c.valid = true;
  return out;
}

template <typename T>
void ffn_backward(const NdArray<T>& dy, const FfnParams<T>& params, const FfnCache<T>& cache,
                  FfnParams<T>& grads, NdArray<T>& dx) {
  if (!cache.valid) throw std::logic_error("ffn_backward: forward was run without a cache");
  NdArray<T> dl_in = dy;
  branch_backward(dy, cache.l_in, params.e_w, params.r_w, cache.pre1, cache.act1, grads.e_w,
                  grads.e_b, grads.r_w, grads.r_b, dl_in);
  ops::layer_norm_backward(dl_in, params.norm_gamma, cache.norm, &dx, &grads.norm_gamma,
                           &grads.norm_beta);
}

// ---- Mix-SSM block ----------------------------------------------------------

AttnOptions MixSsmConfig::attn_options(std::size_t levels) const {
  AttnOptions o;
  o.k = topk(levels);
  o.sparsify = enable_topk;
  o.renormalize = renormalize;
  return o;
}

template <typename T>
MixSsmBlockParams<T> MixSsmBlockParams<T>::init(std::size_t channels, std::size_t levels,
                                                const MixSsmConfig& cfg, Rng& rng) {
  MixSsmBlockParams p;
  p.attn = DeformAttnParams<T>::init(channels, cfg.heads, levels, cfg.points, rng);
  p.norm1_gamma = NdArray<T>({channels}, T{1});
  p.norm1_beta = NdArray<T>({channels});
  if (cfg.enable_ss2d) {
    p.ss2d = Ss2dParams<T>::init(channels, cfg.state_dim, rng, /*zero_out_proj=*/true,
                                 cfg.share_scan_params);
    p.norm2_gamma = NdArray<T>({channels}, T{1});
    p.norm2_beta = NdArray<T>({channels});
  }
  if (cfg.enable_dsffn) {
    p.dsffn = DsffnParams<T>::init(channels, rng);
  } else {
    p.ffn = FfnParams<T>::init(channels, rng);
  }
  return p;
}

namespace {

template <typename T>
void check_block(const EmbeddingSequence<T>& seq, const MixSsmBlockParams<T>& params,
                 const MixSsmConfig& cfg) {
  seq.validate();
  if (params.attn.levels != seq.levels() || params.attn.channels() != seq.channels()) {
    throw ShapeError("mix_ssm_block: attention built for " + std::to_string(params.attn.levels) +
                     " levels / " + std::to_string(params.attn.channels()) +
                     " channels, sequence has " + std::to_string(seq.levels()) + " / " +
                     std::to_string(seq.channels()));
  }
  if (cfg.enable_ss2d != params.ss2d.has_value()) {
    throw std::invalid_argument("mix_ssm_block: enable_ss2d does not match the parameters");
  }
  if (cfg.enable_dsffn != params.dsffn.has_value() || cfg.enable_dsffn == params.ffn.has_value()) {
    throw std::invalid_argument("mix_ssm_block: enable_dsffn does not match the parameters");
  }
}

template <typename T>
std::vector<NdArray<T>> level_maps(const EmbeddingSequence<T>& seq) {
  std::vector<NdArray<T>> maps;
  for (std::size_t l = 0; l < seq.levels(); ++l) maps.push_back(seq.level_map(l));
  return maps;
}

}  // namespace

template <typename T>
EmbeddingSequence<T> mix_ssm_block(const EmbeddingSequence<T>& seq,
                                   const MixSsmBlockParams<T>& params, const MixSsmConfig& cfg,
                                   MixSsmBlockCache<T>* cache) {
  check_block(seq, params, cfg);
  const T eps = static_cast<T>(kLayerNormEps);
  MixSsmBlockCache<T> local;
  MixSsmBlockCache<T>& c = cache ? *cache : local;
  const bool keep = cache != nullptr;

  // Stage 1: sparse deformable attention, post-norm residual.
  NdArray<T> attn = deformable_attention(seq.tokens, level_maps(seq), seq.reference_points(),
                                         params.attn, cfg.attn_options(seq.levels()),
                                         keep ? &c.attn : nullptr);
  attn += seq.tokens;
  EmbeddingSequence<T> x1 = seq;
  x1.tokens = ops::layer_norm(attn, params.norm1_gamma, params.norm1_beta, eps,
                              keep ? &c.norm1 : nullptr);

  // Stage 2: SS2D on each pyramid level independently, post-norm residual.
  EmbeddingSequence<T> x2 = x1;
  if (params.ss2d) {
    EmbeddingSequence<T> scanned = x1;
    if (keep) c.ss2d.assign(seq.levels(), {});
    for (std::size_t l = 0; l < seq.levels(); ++l) {
      scanned.set_level_map(l, ss2d_forward(x1.level_map(l), *params.ss2d, cfg.scan_kernel,
                                            keep ? &c.ss2d[l] : nullptr));
    }
    scanned.tokens += x1.tokens;
    x2.tokens = ops::layer_norm(scanned.tokens, params.norm2_gamma, params.norm2_beta, eps,
                                keep ? &c.norm2 : nullptr);
  }

  // Stage 3: feed-forward (residual is internal).
  EmbeddingSequence<T> out = x2;
  out.tokens = params.dsffn ? dsffn_forward(x2.tokens, *params.dsffn, keep ? &c.ffn : nullptr)
                            : ffn_forward(x2.tokens, *params.ffn, keep ? &c.ffn : nullptr);
  if (keep) {
    c.stage1 = std::move(x1.tokens);
    c.stage2 = std::move(x2.tokens);
    c.valid = true;
  }
  return out;
}

template <typename T>
void mix_ssm_block_backward(const NdArray<T>& dy, const EmbeddingSequence<T>& seq,
                            const MixSsmBlockParams<T>& params, const MixSsmConfig& cfg,
                            const MixSsmBlockCache<T>& cache, MixSsmBlockParams<T>& grads,
                            NdArray<T>& dtokens) {
  (void)cfg;
  if (!cache.valid) throw std::logic_error("mix_ssm_block_backward: forward had no cache");
  NdArray<T> dx2 = NdArray<T>::zeros_like(dy);
  if (params.dsffn) {
    dsffn_backward(dy, *params.dsffn, cache.ffn, *grads.dsffn, dx2);
  } else {
    ffn_backward(dy, *params.ffn, cache.ffn, *grads.ffn, dx2);
  }

  NdArray<T> dx1 = NdArray<T>::zeros_like(dy);
  if (params.ss2d) {
    NdArray<T> dr2 = NdArray<T>::zeros_like(dy);
    ops::layer_norm_backward(dx2, params.norm2_gamma, cache.norm2, &dr2, &grads.norm2_gamma,
                             &grads.norm2_beta);
    dx1 += dr2;
    EmbeddingSequence<T> dscan(dr2, seq.level_shapes);
    EmbeddingSequence<T> dlevels(NdArray<T>::zeros_like(dy), seq.level_shapes);
    for (std::size_t l = 0; l < seq.levels(); ++l) {
      NdArray<T> dmap = NdArray<T>::zeros_like(dscan.level_map(l));
      ss2d_backward(dscan.level_map(l), *params.ss2d, cache.ss2d[l], *grads.ss2d, dmap);
      dlevels.set_level_map(l, dmap);
    }
    dx1 += dlevels.tokens;
  } else {
    dx1 = std::move(dx2);
  }

  NdArray<T> dr1 = NdArray<T>::zeros_like(dy);
  ops::layer_norm_backward(dx1, params.norm1_gamma, cache.norm1, &dr1, &grads.norm1_gamma,
                           &grads.norm1_beta);
  dtokens += dr1;
  std::vector<NdArray<T>> dmaps;
  for (std::size_t l = 0; l < seq.levels(); ++l) dmaps.push_back(NdArray<T>::zeros_like(seq.level_map(l)));
  attn_backward(dr1, params.attn, cache.attn, grads.attn, dtokens, dmaps);
  EmbeddingSequence<T> dmap_seq = EmbeddingSequence<T>::flatten(dmaps);
  dtokens += dmap_seq.tokens;
}

template <typename T>
BlockStages<T> mix_ssm_block_stages(const EmbeddingSequence<T>& seq,
                                    const MixSsmBlockParams<T>& params, const MixSsmConfig& cfg) {
  MixSsmBlockCache<T> cache;
  BlockStages<T> stages;
  stages.output = mix_ssm_block(seq, params, cfg, &cache).tokens;
  stages.stage1 = std::move(cache.stage1);
  stages.stage2 = std::move(cache.stage2);
  return stages;
}

template <typename T>
EncoderParams<T> EncoderParams<T>::init(std::size_t channels, std::size_t levels,
                                        const MixSsmConfig& cfg, Rng& rng) {
  EncoderParams p;
  for (std::size_t i = 0; i < cfg.num_blocks; ++i)
    p.blocks.push_back(MixSsmBlockParams<T>::init(channels, levels, cfg, rng));
  return p;
}

template <typename T>
EmbeddingSequence<T> encoder_forward(const EmbeddingSequence<T>& seq,
                                     const EncoderParams<T>& params, const MixSsmConfig& cfg,
                                     EncoderCache<T>* cache) {
  if (params.blocks.empty()) throw std::invalid_argument("encoder_forward: num_blocks must be >= 1");
  EmbeddingSequence<T> cur = seq;
  if (cache) {
    cache->inputs.clear();
    cache->blocks.assign(params.blocks.size(), {});
  }
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    if (cache) cache->inputs.push_back(cur);
    cur = mix_ssm_block(cur, params.blocks[i], cfg, cache ? &cache->blocks[i] : nullptr);
  }
  return cur;
}

template <typename T>
void encoder_backward(const NdArray<T>& dy, const EncoderParams<T>& params,
                      const MixSsmConfig& cfg, const EncoderCache<T>& cache,
                      EncoderParams<T>& grads, NdArray<T>& dtokens) {
  NdArray<T> g = dy;
  for (std::size_t i = params.blocks.size(); i-- > 0;) {
    NdArray<T> dprev = NdArray<T>::zeros_like(g);
    mix_ssm_block_backward(g, cache.inputs[i], params.blocks[i], cfg, cache.blocks[i],
                           grads.blocks[i], dprev);
    g = std::move(dprev);
  }
  dtokens += g;
}

#define TEXTMAMBA_INSTANTIATE(T)                                                                \
  template struct EmbeddingSequence<T>;                                                          \
  template struct DsffnParams<T>;                                                                \
  template struct FfnParams<T>;                                                                  \
  template NdArray<T> dsffn_forward(const NdArray<T>&, const DsffnParams<T>&, FfnCache<T>*);     \
  template void dsffn_backward(const NdArray<T>&, const DsffnParams<T>&, const FfnCache<T>&,     \
                               DsffnParams<T>&, NdArray<T>&);                                    \
  template NdArray<T> ffn_forward(const NdArray<T>&, const FfnParams<T>&, FfnCache<T>*);         \
  template void ffn_backward(const NdArray<T>&, const FfnParams<T>&, const FfnCache<T>&,         \
                             FfnParams<T>&, NdArray<T>&);                                        \
  template struct MixSsmBlockParams<T>;                                                          \
  template EmbeddingSequence<T> mix_ssm_block(const EmbeddingSequence<T>&,                       \
                                              const MixSsmBlockParams<T>&, const MixSsmConfig&,  \
                                              MixSsmBlockCache<T>*);                             \
  template void mix_ssm_block_backward(const NdArray<T>&, const EmbeddingSequence<T>&,           \
                                       const MixSsmBlockParams<T>&, const MixSsmConfig&,         \
                                       const MixSsmBlockCache<T>&, MixSsmBlockParams<T>&,        \
                                       NdArray<T>&);                                             \
  template BlockStages<T> mix_ssm_block_stages(const EmbeddingSequence<T>&,                      \
                                               const MixSsmBlockParams<T>&,                      \
                                               const MixSsmConfig&);                             \
  template struct EncoderParams<T>;                                                              \
  template EmbeddingSequence<T> encoder_forward(const EmbeddingSequence<T>&,                     \
                                                const EncoderParams<T>&, const MixSsmConfig&,    \
                                                EncoderCache<T>*);                               \
  template void encoder_backward(const NdArray<T>&, const EncoderParams<T>&,                     \
                                 const MixSsmConfig&, const EncoderCache<T>&, EncoderParams<T>&, \
                                 NdArray<T>&);

TEXTMAMBA_INSTANTIATE(float)
TEXTMAMBA_INSTANTIATE(double)
#undef TEXTMAMBA_INSTANTIATE

}  // namespace textmamba
