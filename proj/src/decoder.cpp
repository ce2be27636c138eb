#include "textmamba/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace textmamba {

namespace {

template <typename T>
NdArray<T> uniform_weight(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
  const double scale = gain / std::sqrt(static_cast<double>(in));
  return rng.uniform_array<T>({in, out}, -scale, scale);
}

template <typename T>
NdArray<T> zeros_or(const NdArray<T>& maybe, const Shape& shape) {
  if (maybe.empty()) return NdArray<T>(shape);
  if (maybe.shape() != shape) {
    throw ShapeError("decoder: upstream gradient " + shape_str(maybe.shape()) + ", expected " +
                     shape_str(shape));
  }
  return maybe;
}

}  // namespace

template <typename T>
MaskHeadParams<T> MaskHeadParams<T>::init(std::size_t c, std::size_t points, std::size_t mask_dim,
                                          Rng& rng) {
  MaskHeadParams p;
  p.qm_logits = NdArray<T>({points});
  const double s9 = 1.0 / std::sqrt(9.0 * static_cast<double>(c));
  p.conv9_w = rng.uniform_array<T>({9, c, c}, -s9, s9);
  p.conv9_b = NdArray<T>({c});
  p.conv1_w = uniform_weight<T>(c, c, rng).reshaped({1, c, c});
  p.conv1_b = NdArray<T>({c});
  p.mlp1_w = uniform_weight<T>(c, c, rng);
  p.mlp1_b = NdArray<T>({c});
  p.mlp2_w = uniform_weight<T>(c, mask_dim, rng);
  p.mlp2_b = NdArray<T>({mask_dim});
  p.proj_w = uniform_weight<T>(c, mask_dim, rng);
  p.proj_b = NdArray<T>({mask_dim});
  return p;
}

template <typename T>
RefineLayerParams<T> RefineLayerParams<T>::init(std::size_t c, Rng& rng, bool zero_offsets) {
  RefineLayerParams p;
  p.pos_w = uniform_weight<T>(2, c, rng);
  p.pos_b = NdArray<T>({c});
  p.q_w = uniform_weight<T>(c, c, rng);
  p.k_w = uniform_weight<T>(c, c, rng);
  p.v_w = uniform_weight<T>(c, c, rng);
  p.o_w = uniform_weight<T>(c, c, rng);
  p.o_b = NdArray<T>({c});
  p.norm_gamma = NdArray<T>({c}, T{1});
  p.norm_beta = NdArray<T>({c});
  p.off1_w = uniform_weight<T>(c, c, rng);
  p.off1_b = NdArray<T>({c});
  p.off2_w = zero_offsets ? NdArray<T>({c, 2}) : uniform_weight<T>(c, 2, rng, 0.1);
  p.off2_b = NdArray<T>({2});
  return p;
}

template <typename T>
DecoderParams<T> DecoderParams<T>::init(std::size_t c, const DecoderConfig& cfg, Rng& rng) {
  DecoderParams p;
  p.cls_w = uniform_weight<T>(c, 1, rng);
  p.cls_b = NdArray<T>({1});
  p.ctrl_embed = rng.normal_array<T>({cfg.num_points, c}, 0.1);
  p.mask_head = MaskHeadParams<T>::init(c, cfg.num_points, c, rng);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    p.layers.push_back(RefineLayerParams<T>::init(c, rng, false));
  }
  return p;
}

// ---- proposal selection ------------------------------------------------------

template <typename T>
std::vector<std::size_t> topk_indices(const NdArray<T>& values, std::size_t k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return values[a] > values[b] || (values[a] == values[b] && a < b);
                    });
  idx.resize(k);
  return idx;
}

template <typename T>
ProposalSet<T> select_proposals(const NdArray<T>& tokens, const NdArray<T>& cls_w,
                                const NdArray<T>& cls_b, const NdArray<T>& ctrl_embed,
                                std::size_t num_proposals) {
  if (tokens.rank() != 2 || ctrl_embed.rank() != 2 || ctrl_embed.dim(1) != tokens.dim(1)) {
    throw ShapeError("select_proposals: tokens " + shape_str(tokens.shape()) +
                     ", control-point embeddings " + shape_str(ctrl_embed.shape()));
  }
  const std::size_t len = tokens.dim(0), c = tokens.dim(1), n = ctrl_embed.dim(0);
  if (num_proposals == 0 || num_proposals > len) {
    throw std::invalid_argument("select_proposals: num_proposals " +
                                std::to_string(num_proposals) + " must be in [1, " +
                                std::to_string(len) + "]");
  }
  ProposalSet<T> out;
  out.all_scores = ops::sigmoid(ops::linear(tokens, cls_w, cls_b)).reshaped({len});
  out.source_indices = topk_indices(out.all_scores, num_proposals);
  out.scores = NdArray<T>({num_proposals});
  out.embeddings = NdArray<T>({num_proposals, n, c});
  for (std::size_t k = 0; k < num_proposals; ++k) {
    const std::size_t src = out.source_indices[k];
    out.scores[k] = out.all_scores[src];
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        out.embeddings(k, j, ch) = tokens(src, ch) + ctrl_embed(j, ch);
  }
  return out;
}

// ---- mask head ---------------------------------------------------------------

template <typename T>
MaskHeadOutputs<T> mask_head(const NdArray<T>& q, const NdArray<T>& f3_prime,
                             const MaskHeadParams<T>& params, MaskHeadCache<T>* cache) {
  if (q.rank() != 3 || f3_prime.rank() != 3 || f3_prime.dim(2) != q.dim(2) ||
      params.qm_logits.size() != q.dim(1)) {
    throw ShapeError("mask_head: queries " + shape_str(q.shape()) + ", F3' " +
                     shape_str(f3_prime.shape()) + ", qm weights " +
                     shape_str(params.qm_logits.shape()));
  }
  const std::size_t kk = q.dim(0), n = q.dim(1), c = q.dim(2);
  const std::size_t h = f3_prime.dim(0), w = f3_prime.dim(1);
  MaskHeadCache<T> local;
  MaskHeadCache<T>& m = cache ? *cache : local;
  m.q = q;
  m.h = h;
  m.w = w;
  m.qm_weights = ops::softmax(params.qm_logits, 0);
  NdArray<T> qm({kk, c});
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) qm(k, ch) += m.qm_weights[j] * q(k, j, ch);
  m.conv9_out = ops::conv1d(q, params.conv9_w, params.conv9_b);
  m.conv1_out = ops::conv1d(m.conv9_out, params.conv1_w, params.conv1_b);
  m.pooled_sig = NdArray<T>({kk, c});
  for (std::size_t k = 0; k < kk; ++k) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T sum{0};
      for (std::size_t j = 0; j < n; ++j) sum += m.conv1_out(k, j, ch);
      m.pooled_sig(k, ch) = ops::sigmoid(sum / static_cast<T>(n));
    }
  }
  m.mask_e = m.pooled_sig + qm;
  m.hidden_pre = ops::linear(m.mask_e, params.mlp1_w, params.mlp1_b);
  m.hidden = ops::relu(m.hidden_pre);
  m.mask_embed = ops::linear(m.hidden, params.mlp2_w, params.mlp2_b);
  m.f3_flat = f3_prime.reshaped({h * w, c});
  m.pixel_embed = ops::linear(m.f3_flat, params.proj_w, params.proj_b);
  MaskHeadOutputs<T> out;
  out.mask_e = m.mask_e.reshaped({kk, 1, c});
  out.mask_i = ops::matmul(m.mask_embed, ops::transpose(m.pixel_embed)).reshaped({kk, h, w});
  m.valid = true;
  return out;
}

template <typename T>
void mask_head_backward(const NdArray<T>& dmask_i, const MaskHeadParams<T>& params,
                        const MaskHeadCache<T>& m, MaskHeadParams<T>& grads, NdArray<T>& dq,
                        NdArray<T>& df3) {
  if (!m.valid) throw std::logic_error("mask_head_backward: forward was run without a cache");
  const std::size_t kk = m.q.dim(0), n = m.q.dim(1), c = m.q.dim(2);
  const NdArray<T> dlogits = dmask_i.reshaped({kk, m.h * m.w});
  NdArray<T> dembed = ops::matmul(dlogits, m.pixel_embed);
  NdArray<T> dpixel = ops::matmul(ops::transpose(dlogits), m.mask_embed);

  NdArray<T> df3_flat = NdArray<T>::zeros_like(m.f3_flat);
  ops::linear_backward(dpixel, m.f3_flat, params.proj_w, &df3_flat, &grads.proj_w, &grads.proj_b);
  df3 += df3_flat.reshaped(df3.shape());

  NdArray<T> dhidden = NdArray<T>::zeros_like(m.hidden);
  ops::linear_backward(dembed, m.hidden, params.mlp2_w, &dhidden, &grads.mlp2_w, &grads.mlp2_b);
  NdArray<T> dhidden_pre = NdArray<T>::zeros_like(m.hidden_pre);
  ops::relu_backward(dhidden, m.hidden_pre, dhidden_pre);
  NdArray<T> dmask_e = NdArray<T>::zeros_like(m.mask_e);
  ops::linear_backward(dhidden_pre, m.mask_e, params.mlp1_w, &dmask_e, &grads.mlp1_w,
                       &grads.mlp1_b);

  NdArray<T> dconv1 = NdArray<T>::zeros_like(m.conv1_out);
  for (std::size_t k = 0; k < kk; ++k) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T s = m.pooled_sig(k, ch);
      const T g = dmask_e(k, ch) * s * (T{1} - s) / static_cast<T>(n);
      for (std::size_t j = 0; j < n; ++j) dconv1(k, j, ch) = g;
    }
  }
  NdArray<T> dconv9 = NdArray<T>::zeros_like(m.conv9_out);
  ops::conv1d_backward(dconv1, m.conv9_out, params.conv1_w, &dconv9, &grads.conv1_w,
                       &grads.conv1_b);
  ops::conv1d_backward(dconv9, m.q, params.conv9_w, &dq, &grads.conv9_w, &grads.conv9_b);

  NdArray<T> dweights({n});
  for (std::size_t k = 0; k < kk; ++k) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        dq(k, j, ch) += m.qm_weights[j] * dmask_e(k, ch);
        dweights[j] += m.q(k, j, ch) * dmask_e(k, ch);
      }
    }
  }
  grads.qm_logits += ops::softmax_backward(m.qm_weights, dweights);
}

// ---- anchor priors -----------------------------------------------------------

template <typename T>
NdArray<T> anchor_priors(const NdArray<T>& mask_i) {
  if (mask_i.rank() != 3) throw ShapeError("anchor_priors: mask " + shape_str(mask_i.shape()));
  const std::size_t kk = mask_i.dim(0), h = mask_i.dim(1), w = mask_i.dim(2);
  const NdArray<T> prob = ops::softmax(mask_i.reshaped({kk, h * w}), 1);
  const NdArray<T> grid = ops::linspace_grid<T>(h, w);
  NdArray<T> priors({kk, 2});
  for (std::size_t k = 0; k < kk; ++k) {
    for (std::size_t p = 0; p < h * w; ++p) {
      priors(k, 0) += prob(k, p) * grid[2 * p];
      priors(k, 1) += prob(k, p) * grid[2 * p + 1];
    }
  }
  return priors;
}

template <typename T>
void anchor_priors_backward(const NdArray<T>& dpriors, const NdArray<T>& mask_i,
                            NdArray<T>& dmask_i) {
  const std::size_t kk = mask_i.dim(0), h = mask_i.dim(1), w = mask_i.dim(2);
  const NdArray<T> prob = ops::softmax(mask_i.reshaped({kk, h * w}), 1);
  const NdArray<T> grid = ops::linspace_grid<T>(h, w);
  NdArray<T> dprob({kk, h * w});
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t p = 0; p < h * w; ++p)
      dprob(k, p) = dpriors(k, 0) * grid[2 * p] + dpriors(k, 1) * grid[2 * p + 1];
  dmask_i += ops::softmax_backward(prob, dprob).reshaped(mask_i.shape());
}

// ---- control point refinement ------------------------------------------------

namespace {

template <typename T>
T clamp_unit(T p) {
  const T eps = static_cast<T>(kInverseSigmoidEps);
  return std::clamp(p, eps, T{1} - eps);
}

template <typename T>
bool inside_clamp(T p) {
  const T eps = static_cast<T>(kInverseSigmoidEps);
  return p > eps && p < T{1} - eps;
}

template <typename T>
NdArray<T> refine_layer(const NdArray<T>& x, const NdArray<T>& pts, const RefineLayerParams<T>& p,
                        RefineLayerCache<T>& m, NdArray<T>& points_out) {
  const std::size_t kk = x.dim(0), n = x.dim(1), c = x.dim(2);
  const T scale = T{1} / std::sqrt(static_cast<T>(c));
  m.features_in = x;
  m.points_in = pts;
  m.z = x + ops::linear(pts, p.pos_w, p.pos_b);
  const NdArray<T> none;
  m.qh = ops::linear(m.z, p.q_w, none);
  m.kh = ops::linear(m.z, p.k_w, none);
  m.vh = ops::linear(m.z, p.v_w, none);
  NdArray<T> scores({kk, n, n});
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T dot{0};
        for (std::size_t ch = 0; ch < c; ++ch) dot += m.qh(k, i, ch) * m.kh(k, j, ch);
        scores(k, i, j) = dot * scale;
      }
  m.attn = ops::softmax(scores, 2);
  m.mixed = NdArray<T>({kk, n, c});
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const T a = m.attn(k, i, j);
        for (std::size_t ch = 0; ch < c; ++ch) m.mixed(k, i, ch) += a * m.vh(k, j, ch);
      }
  m.residual = x + ops::linear(m.mixed, p.o_w, p.o_b);
  m.features_out = ops::layer_norm(m.residual, p.norm_gamma, p.norm_beta,
                                   static_cast<T>(1e-5), &m.norm);
  m.hidden_pre = ops::linear(m.features_out, p.off1_w, p.off1_b);
  m.hidden = ops::relu(m.hidden_pre);
  m.delta = ops::linear(m.hidden, p.off2_w, p.off2_b);
  m.logits_in = NdArray<T>(pts.shape());
  points_out = NdArray<T>(pts.shape());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const T pc = clamp_unit(pts[i]);
    m.logits_in[i] = std::log(pc / (T{1} - pc));
    points_out[i] = ops::sigmoid(m.logits_in[i] + m.delta[i]);
  }
  m.points_out = points_out;
  m.valid = true;
  return m.features_out;
}

/// dfeat / dpts are the upstream gradients of the layer's two outputs; they
/// are replaced by the gradients of its two inputs.
template <typename T>
void refine_layer_backward(const RefineLayerParams<T>& p, const RefineLayerCache<T>& m,
                           RefineLayerParams<T>& g, NdArray<T>& dfeat, NdArray<T>& dpts) {
  const std::size_t kk = m.features_in.dim(0), n = m.features_in.dim(1),
                    c = m.features_in.dim(2);
  const T scale = T{1} / std::sqrt(static_cast<T>(c));

  NdArray<T> ddelta(m.delta.shape());
  NdArray<T> dpts_in(m.points_in.shape());
  for (std::size_t i = 0; i < ddelta.size(); ++i) {
    const T s = m.points_out[i];
    const T dl = dpts[i] * s * (T{1} - s);
    ddelta[i] = dl;
    const T pin = m.points_in[i];
    if (inside_clamp(pin)) dpts_in[i] = dl / (pin * (T{1} - pin));
  }
  NdArray<T> dhidden = NdArray<T>::zeros_like(m.hidden);
  ops::linear_backward(ddelta, m.hidden, p.off2_w, &dhidden, &g.off2_w, &g.off2_b);
  NdArray<T> dhidden_pre = NdArray<T>::zeros_like(m.hidden_pre);
  ops::relu_backward(dhidden, m.hidden_pre, dhidden_pre);
  ops::linear_backward(dhidden_pre, m.features_out, p.off1_w, &dfeat, &g.off1_w, &g.off1_b);

  NdArray<T> dres = NdArray<T>::zeros_like(m.residual);
  ops::layer_norm_backward(dfeat, p.norm_gamma, m.norm, &dres, &g.norm_gamma, &g.norm_beta);
  NdArray<T> dx = dres;
  NdArray<T> dmixed = NdArray<T>::zeros_like(m.mixed);
  ops::linear_backward(dres, m.mixed, p.o_w, &dmixed, &g.o_w, &g.o_b);

  NdArray<T> dattn({kk, n, n});
  NdArray<T> dv = NdArray<T>::zeros_like(m.vh);
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const T a = m.attn(k, i, j);
        T dot{0};
        for (std::size_t ch = 0; ch < c; ++ch) {
          dot += dmixed(k, i, ch) * m.vh(k, j, ch);
          dv(k, j, ch) += a * dmixed(k, i, ch);
        }
        dattn(k, i, j) = dot;
      }
  NdArray<T> dscores = ops::softmax_backward(m.attn, dattn);
  NdArray<T> dqh = NdArray<T>::zeros_like(m.qh);
  NdArray<T> dkh = NdArray<T>::zeros_like(m.kh);
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const T ds = dscores(k, i, j) * scale;
        for (std::size_t ch = 0; ch < c; ++ch) {
          dqh(k, i, ch) += ds * m.kh(k, j, ch);
          dkh(k, j, ch) += ds * m.qh(k, i, ch);
        }
      }
  NdArray<T> dz = NdArray<T>::zeros_like(m.z);
  ops::linear_backward(dqh, m.z, p.q_w, &dz, &g.q_w, static_cast<NdArray<T>*>(nullptr));
  ops::linear_backward(dkh, m.z, p.k_w, &dz, &g.k_w, static_cast<NdArray<T>*>(nullptr));
  ops::linear_backward(dv, m.z, p.v_w, &dz, &g.v_w, static_cast<NdArray<T>*>(nullptr));
  dx += dz;
  ops::linear_backward(dz, m.points_in, p.pos_w, &dpts_in, &g.pos_w, &g.pos_b);
  dfeat = std::move(dx);
  dpts = std::move(dpts_in);
}

}  // namespace

template <typename T>
std::vector<NdArray<T>> refine_control_points(const NdArray<T>& q, const NdArray<T>& priors,
                                              const std::vector<RefineLayerParams<T>>& layers,
                                              RefineCache<T>* cache) {
  if (q.rank() != 3 || priors.rank() != 2 || priors.dim(0) != q.dim(0) || priors.dim(1) != 2) {
    throw ShapeError("refine_control_points: queries " + shape_str(q.shape()) + ", priors " +
                     shape_str(priors.shape()));
  }
  const std::size_t kk = q.dim(0), n = q.dim(1);
  NdArray<T> pts({kk, n, 2});
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t j = 0; j < n; ++j) {
      pts(k, j, 0) = priors(k, 0);
      pts(k, j, 1) = priors(k, 1);
    }
  RefineCache<T> local;
  RefineCache<T>& m = cache ? *cache : local;
  m.layers.assign(layers.size(), RefineLayerCache<T>{});
  std::vector<NdArray<T>> out;
  NdArray<T> feat = q;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    NdArray<T> next;
    feat = refine_layer(feat, pts, layers[l], m.layers[l], next);
    out.push_back(next);
    pts = std::move(next);
  }
  return out;
}

template <typename T>
void refine_backward(const std::vector<NdArray<T>>& dpoints,
                     const std::vector<RefineLayerParams<T>>& layers, const RefineCache<T>& cache,
                     std::vector<RefineLayerParams<T>>& grads, NdArray<T>& dq,
                     NdArray<T>& dpriors) {
  if (cache.layers.size() != layers.size() || dpoints.size() != layers.size()) {
    throw std::logic_error("refine_backward: cache/upstream do not match the layer count");
  }
  if (layers.empty()) return;
  const Shape pshape = cache.layers.back().points_out.shape();
  NdArray<T> dfeat = NdArray<T>::zeros_like(cache.layers.back().features_out);
  NdArray<T> dpts(pshape);
  for (std::size_t l = layers.size(); l-- > 0;) {
    if (!cache.layers[l].valid) throw std::logic_error("refine_backward: missing layer cache");
    dpts += zeros_or(dpoints[l], pshape);
    refine_layer_backward(layers[l], cache.layers[l], grads[l], dfeat, dpts);
  }
  dq += dfeat;
  const std::size_t kk = pshape[0], n = pshape[1];
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t j = 0; j < n; ++j) {
      dpriors(k, 0) += dpts(k, j, 0);
      dpriors(k, 1) += dpts(k, j, 1);
    }
}

// ---- full decoder ------------------------------------------------------------

template <typename T>
DecoderOutputs<T> decoder_forward(const NdArray<T>& tokens, const NdArray<T>& f3_prime,
                                  const DecoderParams<T>& params, const DecoderConfig& cfg,
                                  DecoderCache<T>* cache) {
  if (params.ctrl_embed.rank() != 2 || params.ctrl_embed.dim(0) != cfg.num_points ||
      params.layers.size() != cfg.num_layers) {
    throw ShapeError("decoder_forward: parameters hold " +
                     std::to_string(params.ctrl_embed.rank() == 2 ? params.ctrl_embed.dim(0) : 0) +
                     " control points / " + std::to_string(params.layers.size()) +
                     " layers, config asks for " + std::to_string(cfg.num_points) + " / " +
                     std::to_string(cfg.num_layers));
  }
  DecoderOutputs<T> out;
  out.proposals = select_proposals(tokens, params.cls_w, params.cls_b, params.ctrl_embed,
                                   cfg.num_proposals);
  auto mh = mask_head(out.proposals.embeddings, f3_prime, params.mask_head,
                      cache ? &cache->mask : nullptr);
  out.mask_e = std::move(mh.mask_e);
  out.mask_i = std::move(mh.mask_i);
  out.priors = anchor_priors(out.mask_i);
  out.control_points = refine_control_points(out.proposals.embeddings, out.priors, params.layers,
                                             cache ? &cache->refine : nullptr);
  return out;
}

template <typename T>
void decoder_backward(const DecoderUpstream<T>& up, const NdArray<T>& tokens,
                      const DecoderOutputs<T>& out, const DecoderParams<T>& params,
                      const DecoderCache<T>& cache, DecoderParams<T>& grads, NdArray<T>& dtokens,
                      NdArray<T>& df3) {
  const auto& prop = out.proposals;
  NdArray<T> dq = NdArray<T>::zeros_like(prop.embeddings);
  NdArray<T> dpriors = NdArray<T>::zeros_like(out.priors);
  std::vector<NdArray<T>> dpoints = up.dpoints;
  dpoints.resize(params.layers.size());
  refine_backward(dpoints, params.layers, cache.refine, grads.layers, dq, dpriors);

  NdArray<T> dmask = zeros_or(up.dmask_i, out.mask_i.shape());
  anchor_priors_backward(dpriors, out.mask_i, dmask);
  mask_head_backward(dmask, params.mask_head, cache.mask, grads.mask_head, dq, df3);

  const NdArray<T> dscores = zeros_or(up.dscores, prop.scores.shape());
  const std::size_t kk = prop.scores.size(), n = dq.dim(1), c = dq.dim(2);
  const std::size_t len = tokens.dim(0);
  NdArray<T> dlogits({len, 1});
  for (std::size_t k = 0; k < kk; ++k) {
    const std::size_t src = prop.source_indices[k];
    const T s = prop.scores[k];
    dlogits[src] += dscores[k] * s * (T{1} - s);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        dtokens(src, ch) += dq(k, j, ch);
        grads.ctrl_embed(j, ch) += dq(k, j, ch);
      }
  }
  ops::linear_backward(dlogits, tokens, params.cls_w, &dtokens, &grads.cls_w, &grads.cls_b);
}

#define TEXTMAMBA_INSTANTIATE(T)                                                                 \
  template struct MaskHeadParams<T>;                                                              \
  template struct RefineLayerParams<T>;                                                           \
  template struct DecoderParams<T>;                                                               \
  template std::vector<std::size_t> topk_indices(const NdArray<T>&, std::size_t);                 \
  template ProposalSet<T> select_proposals(const NdArray<T>&, const NdArray<T>&,                  \
                                           const NdArray<T>&, const NdArray<T>&, std::size_t);    \
  template MaskHeadOutputs<T> mask_head(const NdArray<T>&, const NdArray<T>&,                     \
                                        const MaskHeadParams<T>&, MaskHeadCache<T>*);             \
  template void mask_head_backward(const NdArray<T>&, const MaskHeadParams<T>&,                   \
                                   const MaskHeadCache<T>&, MaskHeadParams<T>&, NdArray<T>&,      \
                                   NdArray<T>&);                                                  \
  template NdArray<T> anchor_priors(const NdArray<T>&);                                           \
  template void anchor_priors_backward(const NdArray<T>&, const NdArray<T>&, NdArray<T>&);        \
  template std::vector<NdArray<T>> refine_control_points(                                         \
      const NdArray<T>&, const NdArray<T>&, const std::vector<RefineLayerParams<T>>&,             \
      RefineCache<T>*);                                                                           \
  template void refine_backward(const std::vector<NdArray<T>>&,                                   \
                                const std::vector<RefineLayerParams<T>>&, const RefineCache<T>&,  \
                                std::vector<RefineLayerParams<T>>&, NdArray<T>&, NdArray<T>&);    \
  template DecoderOutputs<T> decoder_forward(const NdArray<T>&, const NdArray<T>&,                \
                                             const DecoderParams<T>&, const DecoderConfig&,       \
                                             DecoderCache<T>*);                                   \
  template void decoder_backward(const DecoderUpstream<T>&, const NdArray<T>&,                    \
                                 const DecoderOutputs<T>&, const DecoderParams<T>&,               \
                                 const DecoderCache<T>&, DecoderParams<T>&, NdArray<T>&,          \
                                 NdArray<T>&);

TEXTMAMBA_INSTANTIATE(float)
TEXTMAMBA_INSTANTIATE(double)
#undef TEXTMAMBA_INSTANTIATE

}  // namespace textmamba
