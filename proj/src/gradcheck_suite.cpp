#include "textmamba/gradcheck_suite.hpp"

#include <functional>
#include <stdexcept>

#include "textmamba/decoder.hpp"
#include "textmamba/deform_attn.hpp"
#include "textmamba/encoder.hpp"
#include "textmamba/epem.hpp"
#include "textmamba/fixtures.hpp"
#include "textmamba/losses.hpp"
#include "textmamba/model.hpp"
#include "textmamba/params.hpp"
#include "textmamba/rng.hpp"
#include "textmamba/s6.hpp"
#include "textmamba/ss2d.hpp"

namespace textmamba {

namespace {

using Array = NdArray<double>;

/// Module parameters plus the module's differentiable inputs.
template <typename P>
struct Bundle {
  P params;
  NamedTensors<double> inputs;

  template <typename F>
  void visit(F&& f) {
    auto p = prefixed("params", f);
    params.visit(p);
    inputs.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    auto p = prefixed("params", f);
    params.visit(p);
    inputs.visit(f);
  }
};

template <typename P>
Bundle<P> zero_grads(const Bundle<P>& b) {
  return zeros_like_params(b);
}

double dot(const Array& a, const Array& b) {
  a.require_same_shape(b, "gradcheck dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Every fixture runs behind the kink guard; smooth modules rarely trigger it.
constexpr KinkGuard kGuard{3, 1e-3, 1e-6};

template <typename P>
GradCheckReport check(const std::function<double(const Bundle<P>&)>& f, const Bundle<P>& b,
                      const Bundle<P>& analytic, double eps) {
  return finite_diff_grad<Bundle<P>>(f, b, analytic, eps, kGuard);
}

// ---- s6 ------------------------------------------------------------------------

GradCheckReport check_s6(double eps) {
  Rng rng(101);
  Bundle<S6Params<double>> b;
  b.params = S6Params<double>::init(2, 3, rng);
  b.inputs.add("x", rng.normal_array<double>({6, 2}, 1.0));
  const Array r = rng.normal_array<double>({6, 2}, 1.0);
  auto f = [&r](const Bundle<S6Params<double>>& v) {
    return dot(r, selective_scan(v.inputs[0], v.params, ScanKernel::parallel));
  };
  S6Cache<double> cache;
  selective_scan(b.inputs[0], b.params, ScanKernel::parallel, &cache);
  auto g = zero_grads(b);
  s6_backward(r, b.params, cache, g.params, g.inputs[0]);
  return check<S6Params<double>>(f, b, g, eps);
}

// ---- ss2d ----------------------------------------------------------------------

GradCheckReport check_ss2d(double eps) {
  // Four channels: a two-channel layer norm saturates to +-gamma and leaves the
  // scan parameters with gradients below finite-difference resolution.
  Rng rng(202);
  const std::size_t c = 4;
  Bundle<Ss2dParams<double>> b;
  b.params = Ss2dParams<double>::init(c, 3, rng, false);
  b.params.norm_gamma = rng.uniform_array<double>({c}, 0.5, 1.5);
  b.params.norm_beta = rng.normal_array<double>({c}, 0.1);
  // Step sizes near 0.5 so the decay rates carry visible gradient.
  for (auto& path : b.params.paths) path.delta_b = rng.uniform_array<double>({c}, -0.5, 0.5);
  b.inputs.add("map", rng.normal_array<double>({3, 3, c}, 1.0));
  const Array r = rng.normal_array<double>({3, 3, c}, 1.0);
  auto f = [&r](const Bundle<Ss2dParams<double>>& v) {
    return dot(r, ss2d_forward(v.inputs[0], v.params));
  };
  Ss2dCache<double> cache;
  ss2d_forward(b.inputs[0], b.params, ScanKernel::parallel, &cache);
  auto g = zero_grads(b);
  ss2d_backward(r, b.params, cache, g.params, g.inputs[0]);
  return check<Ss2dParams<double>>(f, b, g, eps);
}

// ---- deformable attention ------------------------------------------------------

GradCheckReport check_attn(double eps) {
  Rng rng(303);
  const std::size_t c = 8;
  const std::vector<LevelShape> shapes = {{3, 3}, {2, 2}};
  Bundle<DeformAttnParams<double>> b;
  b.params = DeformAttnParams<double>::init(c, 2, shapes.size(), 2, rng);
  b.params.out_b = rng.normal_array<double>({c}, 0.1);
  EmbeddingSequence<double> seq(rng.normal_array<double>({13, c}, 1.0), shapes);
  const Array ref = seq.reference_points();
  b.inputs.add("queries", seq.tokens);
  for (std::size_t l = 0; l < shapes.size(); ++l)
    b.inputs.add("map" + std::to_string(l), seq.level_map(l));
  const Array r = rng.normal_array<double>({13, c}, 1.0);
  AttnOptions opt;
  opt.k = 2;
  opt.sparsify = true;
  auto run = [&](const Bundle<DeformAttnParams<double>>& v, DeformAttnCache<double>* cache) {
    std::vector<Array> maps = {v.inputs[1], v.inputs[2]};
    return deformable_attention(v.inputs[0], maps, ref, v.params, opt, cache);
  };
  auto f = [&](const Bundle<DeformAttnParams<double>>& v) { return dot(r, run(v, nullptr)); };
  DeformAttnCache<double> cache;
  run(b, &cache);
  auto g = zero_grads(b);
  std::vector<Array> dmaps = {g.inputs[1], g.inputs[2]};
  attn_backward(r, b.params, cache, g.params, g.inputs[0], dmaps);
  g.inputs[1] = dmaps[0];
  g.inputs[2] = dmaps[1];
  return check<DeformAttnParams<double>>(f, b, g, eps);
}

// ---- dsffn ---------------------------------------------------------------------

GradCheckReport check_dsffn(double eps) {
  Rng rng(404);
  Bundle<DsffnParams<double>> b;
  b.params = DsffnParams<double>::init(16, rng);
  b.params.norm_gamma = rng.uniform_array<double>({16}, 0.5, 1.5);
  b.params.e1_b = rng.normal_array<double>({32}, 0.1);
  b.params.e2_b = rng.normal_array<double>({64}, 0.1);
  b.inputs.add("x", rng.normal_array<double>({8, 16}, 1.0));
  const Array r = rng.normal_array<double>({8, 16}, 1.0);
  auto f = [&r](const Bundle<DsffnParams<double>>& v) {
    return dot(r, dsffn_forward(v.inputs[0], v.params));
  };
  FfnCache<double> cache;
  dsffn_forward(b.inputs[0], b.params, &cache);
  auto g = zero_grads(b);
  dsffn_backward(r, b.params, cache, g.params, g.inputs[0]);
  return check<DsffnParams<double>>(f, b, g, eps);
}

// ---- epem ----------------------------------------------------------------------

GradCheckReport check_epem(double eps) {
  Rng rng(505);
  const std::size_t c = 2;
  const std::vector<LevelShape> shapes = {{4, 4}, {2, 2}, {1, 1}, {1, 1}};
  Bundle<FpemParams<double>> b;
  b.params = FpemParams<double>::init(c, rng);
  std::size_t len = 0;
  for (const auto& [h, w] : shapes) len += h * w;
  b.inputs.add("tokens", rng.normal_array<double>({len, c}, 1.0));
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    b.inputs.add("backbone" + std::to_string(l),
                 rng.normal_array<double>({shapes[l].first, shapes[l].second, c}, 1.0));
  }
  const Array r_seq = rng.normal_array<double>({len, c}, 1.0);
  const Array r_f3 = rng.normal_array<double>({2, 2, c}, 1.0);
  auto run = [&](const Bundle<FpemParams<double>>& v, FpemCache<double>* cache) {
    EmbeddingSequence<double> seq(v.inputs[0], shapes);
    PyramidFeatures<double> bb;
    for (std::size_t l = 0; l < shapes.size(); ++l) bb.maps.push_back(v.inputs[1 + l]);
    return epem_forward(seq, bb, v.params, cache);
  };
  auto f = [&](const Bundle<FpemParams<double>>& v) {
    const auto e = run(v, nullptr);
    return dot(r_seq, e.seq.tokens) + dot(r_f3, e.f3_prime);
  };
  FpemCache<double> cache;
  run(b, &cache);
  auto g = zero_grads(b);
  std::vector<Array> dbb;
  for (std::size_t l = 0; l < shapes.size(); ++l) dbb.push_back(g.inputs[1 + l]);
  EmbeddingSequence<double> seq(b.inputs[0], shapes);
  epem_backward(r_seq, r_f3, seq, b.params, cache, g.params, g.inputs[0], &dbb);
  for (std::size_t l = 0; l < shapes.size(); ++l) g.inputs[1 + l] = dbb[l];
  return check<FpemParams<double>>(f, b, g, eps);
}

// ---- mask head -----------------------------------------------------------------

GradCheckReport check_mask_head(double eps) {
  Rng rng(606);
  const std::size_t kk = 2, n = 4, c = 8;
  Bundle<MaskHeadParams<double>> b;
  b.params = MaskHeadParams<double>::init(c, n, c, rng);
  b.params.qm_logits = rng.normal_array<double>({n}, 1.0);
  b.params.mlp1_b = rng.normal_array<double>({c}, 0.1);
  b.inputs.add("q", rng.normal_array<double>({kk, n, c}, 1.0));
  b.inputs.add("f3", rng.normal_array<double>({4, 4, c}, 1.0));
  const Array r = rng.normal_array<double>({kk, 4, 4}, 1.0);
  auto f = [&r](const Bundle<MaskHeadParams<double>>& v) {
    return dot(r, mask_head(v.inputs[0], v.inputs[1], v.params).mask_i);
  };
  MaskHeadCache<double> cache;
  mask_head(b.inputs[0], b.inputs[1], b.params, &cache);
  auto g = zero_grads(b);
  mask_head_backward(r, b.params, cache, g.params, g.inputs[0], g.inputs[1]);
  return check<MaskHeadParams<double>>(f, b, g, eps);
}

// ---- refinement ----------------------------------------------------------------

struct RefineLayers {
  std::vector<RefineLayerParams<double>> layers;

  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto sub = prefixed("layer" + std::to_string(i), f);
      layers[i].visit(sub);
    }
  }
  template <typename F>
  void visit(F&& f) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto sub = prefixed("layer" + std::to_string(i), f);
      layers[i].visit(sub);
    }
  }
};

GradCheckReport check_refine(double eps) {
  Rng rng(707);
  const std::size_t kk = 2, n = 4, c = 8, depth = 2;
  Bundle<RefineLayers> b;
  for (std::size_t l = 0; l < depth; ++l) {
    auto p = RefineLayerParams<double>::init(c, rng, false);
    p.off2_w = rng.uniform_array<double>({c, 2}, -0.5, 0.5);
    p.off1_b = rng.normal_array<double>({c}, 0.1);
    b.params.layers.push_back(std::move(p));
  }
  b.inputs.add("q", rng.normal_array<double>({kk, n, c}, 1.0));
  b.inputs.add("priors", rng.uniform_array<double>({kk, 2}, 0.2, 0.8));
  std::vector<Array> r;
  for (std::size_t l = 0; l < depth; ++l) r.push_back(rng.normal_array<double>({kk, n, 2}, 1.0));
  auto f = [&r](const Bundle<RefineLayers>& v) {
    const auto pts = refine_control_points(v.inputs[0], v.inputs[1], v.params.layers);
    double s = 0.0;
    for (std::size_t l = 0; l < pts.size(); ++l) s += dot(r[l], pts[l]);
    return s;
  };
  RefineCache<double> cache;
  refine_control_points(b.inputs[0], b.inputs[1], b.params.layers, &cache);
  auto g = zero_grads(b);
  refine_backward(r, b.params.layers, cache, g.params.layers, g.inputs[0], g.inputs[1]);
  return check<RefineLayers>(f, b, g, eps);
}

// ---- decoder + composite loss --------------------------------------------------

GradCheckReport check_losses(double eps) {
  Rng rng(808);
  const std::size_t c = 8, len = 10;
  DecoderConfig cfg;
  cfg.num_proposals = 2;
  cfg.num_points = 4;
  cfg.num_layers = 2;
  Bundle<DecoderParams<double>> b;
  b.params = DecoderParams<double>::init(c, cfg, rng);
  b.params.mask_head.qm_logits = rng.normal_array<double>({cfg.num_points}, 1.0);
  for (auto& layer : b.params.layers) {
    layer.off2_w = rng.uniform_array<double>({c, 2}, -0.5, 0.5);
    // Sharper self-attention than the init gives, so q/k gradients are not tiny.
    layer.q_w = rng.normal_array<double>({c, c}, 1.0);
    layer.k_w = rng.normal_array<double>({c, c}, 1.0);
  }
  b.inputs.add("tokens", rng.normal_array<double>({len, c}, 1.0));
  b.inputs.add("f3", rng.normal_array<double>({2, 2, c}, 1.0));
  Targets<double> targets;
  targets.points = rectangle_polygon<double>(0.2, 0.3, 0.7, 0.6, cfg.num_points)
                       .reshaped({1, cfg.num_points, 2});
  targets.masks = rectangle_mask<double>(0.2, 0.3, 0.7, 0.6, 2, 2).reshaped({1, 2, 2});
  auto f = [&](const Bundle<DecoderParams<double>>& v) {
    const auto out = decoder_forward(v.inputs[0], v.inputs[1], v.params, cfg);
    return composite_loss(out, targets).components.total;
  };
  DecoderCache<double> cache;
  const auto out = decoder_forward(b.inputs[0], b.inputs[1], b.params, cfg, &cache);
  DecoderUpstream<double> up;
  composite_loss(out, targets, LossWeights{}, &up);
  auto g = zero_grads(b);
  decoder_backward(up, b.inputs[0], out, b.params, cache, g.params, g.inputs[0], g.inputs[1]);
  return check<DecoderParams<double>>(f, b, g, eps);
}

// ---- end to end ----------------------------------------------------------------

GradCheckReport check_e2e(double eps) {
  RunConfig cfg;
  cfg.height = cfg.width = 32;
  cfg.channels = 8;
  cfg.num_blocks = 1;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.state_dim = 4;
  cfg.num_proposals = 4;
  cfg.num_points = 4;
  cfg.decoder_layers = 2;
  cfg.validate();
  Rng rng(909);
  const ModelParams<double> model = ModelParams<double>::init(cfg, rng);
  const auto pyramid = stub_forward(rng.uniform_array<double>({32, 32, 3}, 0.0, 1.0),
                                    model.backbone);
  Bundle<DetectorParams<double>> b;
  b.params = model.detector;
  // Live SS2D branch and offsets so every parameter carries gradient. Fresh
  // attention weight logits all tie and the offset grid lands on cell edges;
  // jitter both so the check point is not itself a Top-k swap or kink.
  b.params.visit([&](const std::string& name, Array& t) {
    if (name.find("ss2d.out_w") != std::string::npos || name.find("off2_w") != std::string::npos) {
      t = rng.uniform_array<double>(t.shape(), -0.3, 0.3);
    } else if (name.find("attn.weight_") != std::string::npos) {
      t = rng.normal_array<double>(t.shape(), 0.5);
    } else if (name.find("attn.offset_") != std::string::npos) {
      t += rng.normal_array<double>(t.shape(), 0.05);
    }
  });
  Targets<double> targets;
  targets.points = Array({2, cfg.num_points, 2});
  targets.masks = Array({2, 4, 4});
  const double boxes[2][4] = {{0.1, 0.1, 0.5, 0.4}, {0.4, 0.5, 0.9, 0.8}};
  for (std::size_t t = 0; t < 2; ++t) {
    const auto* bx = boxes[t];
    const auto poly = rectangle_polygon<double>(bx[0], bx[1], bx[2], bx[3], cfg.num_points);
    const auto mask = rectangle_mask<double>(bx[0], bx[1], bx[2], bx[3], 4, 4);
    std::copy(poly.vec().begin(), poly.vec().end(), targets.points.vec().begin() + t * poly.size());
    std::copy(mask.vec().begin(), mask.vec().end(), targets.masks.vec().begin() + t * mask.size());
  }
  auto f = [&](const Bundle<DetectorParams<double>>& v) {
    const auto r = detector_forward(pyramid, v.params, cfg);
    return composite_loss(r.decoder, targets, cfg.weights()).components.total;
  };
  DetectorCache<double> cache;
  const auto r = detector_forward(pyramid, b.params, cfg, &cache);
  DecoderUpstream<double> up;
  composite_loss(r.decoder, targets, cfg.weights(), &up);
  auto g = zero_grads(b);
  detector_backward(up, r, b.params, cfg, cache, g.params);
  return check<DetectorParams<double>>(f, b, g, eps);
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names = {"s6",        "ss2d",   "attn",   "dsffn", "epem",
                                                 "mask_head", "refine", "losses", "e2e"};
  return names;
}

double default_gradcheck_tolerance(const std::string& module) {
  return module == "e2e" ? 1e-3 : 1e-4;
}

GradCheckReport run_gradcheck(const std::string& module, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("gradcheck: eps must be positive");
  if (module == "s6") return check_s6(eps);
  if (module == "ss2d") return check_ss2d(eps);
  if (module == "attn") return check_attn(eps);
  if (module == "dsffn") return check_dsffn(eps);
  if (module == "epem") return check_epem(eps);
  if (module == "mask_head") return check_mask_head(eps);
  if (module == "refine") return check_refine(eps);
  if (module == "losses") return check_losses(eps);
  if (module == "e2e") return check_e2e(eps);
  std::string valid;
  for (const auto& n : gradcheck_modules()) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown module '" + module + "'; valid: " + valid);
}

}  // namespace textmamba
