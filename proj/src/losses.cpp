#include "textmamba/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace textmamba {

LossComponents combine(double cls, double seg, double reg, const LossWeights& w) {
  LossComponents c;
  c.cls = cls;
  c.seg = seg;
  c.reg = reg;
  c.total = w.cls * cls + w.seg * seg + w.reg * reg;
  return c;
}

template <typename T>
double focal_loss(const NdArray<T>& scores, const NdArray<T>& targets, double alpha, double gamma,
                  NdArray<T>* dscores, double scale) {
  scores.require_same_shape(targets, "focal_loss");
  if (scores.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double raw = static_cast<double>(scores[i]);
    const double p = std::clamp(raw, kFocalClamp, 1.0 - kFocalClamp);
    const bool positive = targets[i] > T{0.5};
    const double pt = positive ? p : 1.0 - p;
    const double at = positive ? alpha : 1.0 - alpha;
    const double q = 1.0 - pt;
    sum += -at * std::pow(q, gamma) * std::log(pt);
    if (dscores && raw > kFocalClamp && raw < 1.0 - kFocalClamp) {
      // d/dpt of -at q^gamma log(pt)
      double dpt = -at * std::pow(q, gamma) / pt;
      if (gamma != 0.0) dpt += at * gamma * std::pow(q, gamma - 1.0) * std::log(pt);
      (*dscores)[i] += static_cast<T>(scale * inv * (positive ? dpt : -dpt));
    }
  }
  return sum * inv;
}

template <typename T>
double dice_loss(const NdArray<T>& pred, const NdArray<T>& gt, NdArray<T>* dpred, double scale) {
  pred.require_same_shape(gt, "dice_loss");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += static_cast<double>(pred[i]) * static_cast<double>(gt[i]);
    sp += static_cast<double>(pred[i]);
    sg += static_cast<double>(gt[i]);
  }
  const double num = 2.0 * inter + kDiceSmooth;
  const double den = sp + sg + kDiceSmooth;
  if (dpred) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double g = -(2.0 * static_cast<double>(gt[i]) * den - num) / (den * den);
      (*dpred)[i] += static_cast<T>(scale * g);
    }
  }
  return 1.0 - num / den;
}

template <typename T>
double l1_loss(const NdArray<T>& a, const NdArray<T>& b, NdArray<T>* da, double scale) {
  a.require_same_shape(b, "l1_loss");
  if (a.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(a.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += std::abs(d);
    if (da && d != 0.0) (*da)[i] += static_cast<T>(scale * inv * (d > 0 ? 1.0 : -1.0));
  }
  return sum * inv;
}

template <typename T>
void Targets<T>::validate(std::size_t num_points, std::size_t h, std::size_t w) const {
  const std::size_t t = count();
  if (points.rank() != 3 || points.dim(1) != num_points || points.dim(2) != 2) {
    throw ShapeError("targets: points " + shape_str(points.shape()) + ", expected [T x " +
                     std::to_string(num_points) + " x 2]");
  }
  if (masks.rank() != 3 || masks.dim(0) != t || masks.dim(1) != h || masks.dim(2) != w) {
    throw ShapeError("targets: masks " + shape_str(masks.shape()) + ", expected [" +
                     std::to_string(t) + " x " + std::to_string(h) + " x " + std::to_string(w) +
                     "]");
  }
}

namespace {

template <typename T>
double mean_abs_diff(const T* a, const T* b, std::size_t count) {
  double s = 0.0;
  for (std::size_t i = 0; i < count; ++i)
    s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return s / static_cast<double>(count);
}

// Cost with a secondary key: equal primary costs fall back to the column
// index, so the solver is deterministic under ties.
struct LexCost {
  double primary = 0.0;
  double secondary = 0.0;

  LexCost operator+(const LexCost& o) const { return {primary + o.primary, secondary + o.secondary}; }
  LexCost operator-(const LexCost& o) const { return {primary - o.primary, secondary - o.secondary}; }
  LexCost& operator+=(const LexCost& o) { return *this = *this + o; }
  LexCost& operator-=(const LexCost& o) { return *this = *this - o; }
  bool operator<(const LexCost& o) const {
    return primary < o.primary || (primary == o.primary && secondary < o.secondary);
  }
};

}  // namespace

template <typename T>
NdArray<double> matching_cost(const NdArray<T>& scores, const NdArray<T>& points,
                              const NdArray<T>& gt_points, const LossWeights& w) {
  if (points.rank() != 3 || gt_points.rank() != 3 || points.dim(0) != scores.size() ||
      points.dim(1) != gt_points.dim(1) || points.dim(2) != gt_points.dim(2)) {
    throw ShapeError("matching_cost: scores " + shape_str(scores.shape()) + ", points " +
                     shape_str(points.shape()) + ", targets " + shape_str(gt_points.shape()));
  }
  const std::size_t nt = gt_points.dim(0), kk = points.dim(0);
  const std::size_t per = points.dim(1) * points.dim(2);
  NdArray<double> cost({nt, kk});
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t k = 0; k < kk; ++k)
      cost(t, k) = w.cls * (1.0 - static_cast<double>(scores[k])) +
                   w.reg * mean_abs_diff(points.ptr() + k * per, gt_points.ptr() + t * per, per);
  return cost;
}

Assignment solve_assignment(const NdArray<double>& cost) {
  if (cost.rank() != 2) throw ShapeError("solve_assignment: cost " + shape_str(cost.shape()));
  const std::size_t rows = cost.dim(0), cols = cost.dim(1);
  if (rows > cols) {
    throw std::invalid_argument("solve_assignment: " + std::to_string(rows) +
                                " targets but only " + std::to_string(cols) + " proposals");
  }
  if (rows == 0) return {};
  const LexCost inf{std::numeric_limits<double>::infinity(), 0.0};
  auto at = [&](std::size_t i, std::size_t j) {
    return LexCost{cost(i - 1, j - 1), static_cast<double>(j - 1)};
  };
  // Shortest augmenting path with potentials; indices are 1-based, column 0 is a sentinel.
  std::vector<LexCost> u(rows + 1), v(cols + 1);
  std::vector<std::size_t> match(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<LexCost> minv(cols + 1, inf);
    std::vector<bool> used(cols + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      LexCost delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const LexCost cur = at(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment out(rows);
  for (std::size_t j = 1; j <= cols; ++j)
    if (match[j] != 0) out[match[j] - 1] = j - 1;
  return out;
}

template <typename T>
Assignment match_predictions(const NdArray<T>& scores, const NdArray<T>& points,
                             const Targets<T>& targets, const LossWeights& w) {
  if (targets.count() > scores.size()) {
    throw std::invalid_argument("match_predictions: " + std::to_string(targets.count()) +
                                " targets exceed " + std::to_string(scores.size()) + " proposals");
  }
  if (targets.count() == 0) return {};
  return solve_assignment(matching_cost(scores, points, targets.points, w));
}

template <typename T>
NdArray<T> token_score_targets(const std::vector<std::pair<std::size_t, std::size_t>>& level_shapes,
                               const NdArray<T>& gt_points) {
  std::size_t len = 0;
  for (const auto& [h, w] : level_shapes) len += h * w;
  NdArray<T> out({len});
  const std::size_t nt = gt_points.rank() == 3 ? gt_points.dim(0) : 0;
  std::vector<std::array<double, 4>> boxes(nt);  // x0, y0, x1, y1
  for (std::size_t t = 0; t < nt; ++t) {
    auto& b = boxes[t];
    b = {1.0, 1.0, 0.0, 0.0};
    for (std::size_t j = 0; j < gt_points.dim(1); ++j) {
      const double x = static_cast<double>(gt_points(t, j, 0));
      const double y = static_cast<double>(gt_points(t, j, 1));
      b[0] = std::min(b[0], x);
      b[1] = std::min(b[1], y);
      b[2] = std::max(b[2], x);
      b[3] = std::max(b[3], y);
    }
  }
  std::size_t offset = 0;
  for (const auto& [h, w] : level_shapes) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(w);
        const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(h);
        for (const auto& b : boxes) {
          if (x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3]) {
            out[offset + i * w + j] = T{1};
            break;
          }
        }
      }
    }
    offset += h * w;
  }
  return out;
}

template <typename T>
LossResult<T> composite_loss(const DecoderOutputs<T>& out, const Targets<T>& targets,
                             const LossWeights& w, DecoderUpstream<T>* up) {
  const std::size_t kk = out.proposals.scores.size();
  const std::size_t layers = out.control_points.size();
  if (layers == 0) throw std::invalid_argument("composite_loss: decoder produced no layers");
  const std::size_t n = out.control_points.back().dim(1);
  const std::size_t h = out.mask_i.dim(1), wd = out.mask_i.dim(2);
  const std::size_t nt = targets.count();
  if (nt > kk) {
    throw std::invalid_argument("composite_loss: " + std::to_string(nt) + " targets exceed " +
                                std::to_string(kk) + " proposals");
  }
  if (nt > 0) targets.validate(n, h, wd);

  LossResult<T> r;
  if (nt > 0) r.assignment = match_predictions(out.proposals.scores, out.control_points.back(), targets, w);
  if (up) {
    up->dscores = NdArray<T>({kk});
    up->dmask_i = NdArray<T>::zeros_like(out.mask_i);
    up->dpoints.assign(layers, NdArray<T>(out.control_points.back().shape()));
  }

  NdArray<T> cls_targets({kk});
  for (std::size_t k : r.assignment) cls_targets[k] = T{1};
  const double cls = focal_loss(out.proposals.scores, cls_targets, kFocalAlpha, kFocalGamma,
                                up ? &up->dscores : nullptr, w.cls);

  double seg = 0.0;
  const std::size_t cells = h * wd;
  for (std::size_t t = 0; t < nt; ++t) {
    const std::size_t k = r.assignment[t];
    NdArray<T> prob({h, wd});
    for (std::size_t p = 0; p < cells; ++p) prob[p] = ops::sigmoid(out.mask_i[k * cells + p]);
    NdArray<T> gt({h, wd}, std::vector<T>(targets.masks.ptr() + t * cells,
                                           targets.masks.ptr() + (t + 1) * cells));
    NdArray<T> dprob({h, wd});
    seg += dice_loss(prob, gt, up ? &dprob : nullptr, w.seg / static_cast<double>(nt));
    if (up) {
      for (std::size_t p = 0; p < cells; ++p)
        up->dmask_i[k * cells + p] += dprob[p] * prob[p] * (T{1} - prob[p]);
    }
  }
  if (nt > 0) seg /= static_cast<double>(nt);

  double reg = 0.0;
  const std::size_t per = n * 2;
  for (std::size_t l = 0; l < layers; ++l) {
    double layer_reg = 0.0;
    for (std::size_t t = 0; t < nt; ++t) {
      const std::size_t k = r.assignment[t];
      NdArray<T> pred({n, 2}, std::vector<T>(out.control_points[l].ptr() + k * per,
                                             out.control_points[l].ptr() + (k + 1) * per));
      NdArray<T> gt({n, 2}, std::vector<T>(targets.points.ptr() + t * per,
                                           targets.points.ptr() + (t + 1) * per));
      NdArray<T> dpred({n, 2});
      layer_reg += l1_loss(pred, gt, up ? &dpred : nullptr, w.reg / static_cast<double>(nt));
      if (up) {
        for (std::size_t i = 0; i < per; ++i) up->dpoints[l][k * per + i] += dpred[i];
      }
    }
    if (nt > 0) layer_reg /= static_cast<double>(nt);
    r.per_layer_reg.push_back(layer_reg);
    reg += layer_reg;
  }
  r.components = combine(cls, seg, reg, w);
  return r;
}

#define TEXTMAMBA_INSTANTIATE(T)                                                                 \
  template double focal_loss(const NdArray<T>&, const NdArray<T>&, double, double, NdArray<T>*,   \
                             double);                                                             \
  template double dice_loss(const NdArray<T>&, const NdArray<T>&, NdArray<T>*, double);           \
  template double l1_loss(const NdArray<T>&, const NdArray<T>&, NdArray<T>*, double);             \
  template struct Targets<T>;                                                                     \
  template NdArray<double> matching_cost(const NdArray<T>&, const NdArray<T>&, const NdArray<T>&, \
                                         const LossWeights&);                                     \
  template Assignment match_predictions(const NdArray<T>&, const NdArray<T>&, const Targets<T>&,  \
                                        const LossWeights&);                                      \
  template NdArray<T> token_score_targets(                                                        \
      const std::vector<std::pair<std::size_t, std::size_t>>&, const NdArray<T>&);                \
  template LossResult<T> composite_loss(const DecoderOutputs<T>&, const Targets<T>&,              \
                                        const LossWeights&, DecoderUpstream<T>*);

TEXTMAMBA_INSTANTIATE(float)
TEXTMAMBA_INSTANTIATE(double)
#undef TEXTMAMBA_INSTANTIATE

}  // namespace textmamba
