#include "textmamba/fixtures.hpp"

#include <algorithm>
#include <cmath>

namespace textmamba {

template <typename T>
NdArray<T> rectangle_polygon(double x0, double y0, double x1, double y1, std::size_t n) {
  const double w = x1 - x0, h = y1 - y0;
  const double perimeter = 2.0 * (w + h);
  NdArray<T> pts({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    double s = perimeter * static_cast<double>(i) / static_cast<double>(n);
    double x, y;
    if (s < w) {
      x = x0 + s;
      y = y0;
    } else if ((s -= w) < h) {
      x = x1;
      y = y0 + s;
    } else if ((s -= h) < w) {
      x = x1 - s;
      y = y1;
    } else {
      s -= w;
      x = x0;
      y = y1 - s;
    }
    pts(i, 0) = static_cast<T>(x);
    pts(i, 1) = static_cast<T>(y);
  }
  return pts;
}

template <typename T>
NdArray<T> rectangle_mask(double x0, double y0, double x1, double y1, std::size_t h,
                          std::size_t w) {
  NdArray<T> m({h, w});
  for (std::size_t i = 0; i < h; ++i) {
    const double cy = (static_cast<double>(i) + 0.5) / static_cast<double>(h);
    for (std::size_t j = 0; j < w; ++j) {
      const double cx = (static_cast<double>(j) + 0.5) / static_cast<double>(w);
      if (cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1) m(i, j) = T{1};
    }
  }
  return m;
}

io::TensorStore generate_fixtures(std::uint64_t seed, const RunConfig& cfg) {
  cfg.validate();
  io::TensorStore store;
  store.seed = seed;
  Rng rng(seed);
  store.add("image", rng.uniform_array<double>({cfg.height, cfg.width, 3}, 0.0, 1.0));

  const std::size_t mh = cfg.height / 8, mw = cfg.width / 8, n = cfg.num_points;
  NdArray<double> points({kFixtureTargets, n, 2});
  NdArray<double> masks({kFixtureTargets, mh, mw});
  for (std::size_t t = 0; t < kFixtureTargets; ++t) {
    const double x0 = rng.uniform(0.05, 0.55), y0 = rng.uniform(0.05, 0.55);
    const double x1 = std::min(0.95, x0 + rng.uniform(0.15, 0.4));
    const double y1 = std::min(0.95, y0 + rng.uniform(0.15, 0.4));
    const auto poly = rectangle_polygon<double>(x0, y0, x1, y1, n);
    std::copy(poly.vec().begin(), poly.vec().end(), points.vec().begin() + t * n * 2);
    const auto mask = rectangle_mask<double>(x0, y0, x1, y1, mh, mw);
    std::copy(mask.vec().begin(), mask.vec().end(), masks.vec().begin() + t * mh * mw);
  }
  store.add("gt.points", points);
  store.add("gt.masks", masks);

  // Superset of parameters: everything switched on, then the single-path
  // feed-forward variant for runs with the dual-scale network off.
  RunConfig full = cfg;
  full.enable_ss2d = full.enable_dsffn = full.enable_epem = true;
  full.share_scan_params = false;
  RunConfig plain = full;
  plain.enable_dsffn = false;
  Rng prng(seed + 1);
  ModelParams<double> a = ModelParams<double>::init(full, prng);
  ModelParams<double> b = ModelParams<double>::init(plain, prng);
  const double out_scale = 1.0 / std::sqrt(static_cast<double>(cfg.channels));
  auto add_param = [&](const std::string& name, auto& t) {
    const std::string key = kParamPrefix + name;
    if (store.contains(key)) return;
    // Fresh SS2D output projections start at zero; give the fixture a live path.
    if (name.find(".ss2d.out_w") != std::string::npos) {
      t = prng.uniform_array<double>(t.shape(), -out_scale, out_scale);
    }
    store.add(key, t);
  };
  a.visit(add_param);
  b.visit(add_param);
  return store;
}

template <typename T>
ModelParams<T> load_params(const io::TensorStore& store, const RunConfig& cfg) {
  const std::string probe = std::string(kParamPrefix) + "backbone.stage0.pointwise";
  if (store.contains(probe) && store.get(probe).values.rank() == 2 &&
      store.get(probe).values.dim(1) != cfg.channels) {
    throw io::InputError("channels", "config asks for " + std::to_string(cfg.channels) +
                                         ", fixtures were generated with " +
                                         std::to_string(store.get(probe).values.dim(1)));
  }
  Rng rng(0);
  ModelParams<T> p = ModelParams<T>::init(cfg, rng);
  p.visit([&](const std::string& name, auto& t) {
    const std::string key = kParamPrefix + name;
    if (!store.contains(key)) throw io::InputError(key, "missing from fixtures");
    const auto& src = store.get(key).values;
    if (src.shape() != t.shape()) {
      throw io::InputError(key, "fixture shape " + shape_str(src.shape()) + ", config needs " +
                                    shape_str(t.shape()));
    }
    t = cast<T>(src);
  });
  return p;
}

template <typename T>
Targets<T> load_targets(const io::TensorStore& store) {
  Targets<T> t;
  t.points = cast<T>(store.get("gt.points").values);
  t.masks = cast<T>(store.get("gt.masks").values);
  return t;
}

namespace {

template <typename T>
io::TensorStore run_typed(const RunConfig& cfg, const io::TensorStore& fixtures) {
  const auto& image = fixtures.get("image").values;
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw io::InputError("image", "shape " + shape_str(image.shape()) + ", expected [H x W x 3]");
  }
  if (image.dim(0) != cfg.height) {
    throw io::InputError("height", "config " + std::to_string(cfg.height) + ", fixture image " +
                                       std::to_string(image.dim(0)));
  }
  if (image.dim(1) != cfg.width) {
    throw io::InputError("width", "config " + std::to_string(cfg.width) + ", fixture image " +
                                      std::to_string(image.dim(1)));
  }
  const ModelParams<T> params = load_params<T>(fixtures, cfg);
  const Targets<T> targets = load_targets<T>(fixtures);
  if (targets.points.rank() != 3 || targets.points.dim(1) != cfg.num_points) {
    throw io::InputError("num_points", "fixture targets have shape " +
                                           shape_str(targets.points.shape()));
  }
  if (targets.count() > cfg.num_proposals) {
    throw io::InputError("num_proposals", std::to_string(targets.count()) +
                                              " fixture targets exceed the proposal count");
  }

  const DetectorResult<T> r = model_forward(cast<T>(image), params, cfg);
  const auto& d = r.decoder;
  const LossResult<T> loss = composite_loss(d, targets, cfg.weights());

  io::TensorStore out;
  out.seed = fixtures.seed;
  out.add("scores", d.proposals.scores);
  NdArray<T> indices({d.proposals.source_indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i)
    indices[i] = static_cast<T>(d.proposals.source_indices[i]);
  out.add("source_indices", indices);
  out.add("masks", d.mask_i);
  out.add("priors", d.priors);
  const std::size_t layers = d.control_points.size();
  const Shape per = d.control_points.front().shape();
  NdArray<T> cps({layers, per[0], per[1], per[2]});
  for (std::size_t l = 0; l < layers; ++l) {
    std::copy(d.control_points[l].vec().begin(), d.control_points[l].vec().end(),
              cps.vec().begin() + l * d.control_points[l].size());
  }
  out.add("control_points", cps);
  const auto& c = loss.components;
  out.add("loss", NdArray<T>({4}, {static_cast<T>(c.cls), static_cast<T>(c.seg),
                                   static_cast<T>(c.reg), static_cast<T>(c.total)}));
  NdArray<T> assignment({loss.assignment.size()});
  for (std::size_t i = 0; i < assignment.size(); ++i)
    assignment[i] = static_cast<T>(loss.assignment[i]);
  out.add("assignment", assignment);
  out.add("score_gt", token_score_targets(r.enhanced.level_shapes, targets.points));
  return out;
}

}  // namespace

io::TensorStore run_forward(const RunConfig& cfg, const io::TensorStore& fixtures) {
  cfg.validate();
  return cfg.dtype == "f32" ? run_typed<float>(cfg, fixtures) : run_typed<double>(cfg, fixtures);
}

template NdArray<float> rectangle_polygon(double, double, double, double, std::size_t);
template NdArray<double> rectangle_polygon(double, double, double, double, std::size_t);
template NdArray<float> rectangle_mask(double, double, double, double, std::size_t, std::size_t);
template NdArray<double> rectangle_mask(double, double, double, double, std::size_t, std::size_t);
template ModelParams<float> load_params(const io::TensorStore&, const RunConfig&);
template ModelParams<double> load_params(const io::TensorStore&, const RunConfig&);
template Targets<float> load_targets(const io::TensorStore&);
template Targets<double> load_targets(const io::TensorStore&);

}  // namespace textmamba
