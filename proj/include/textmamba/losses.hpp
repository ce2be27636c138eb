#pragma once

// Training objective: focal loss on proposal scores, dice on matched masks,
// mean L1 on matched control points summed over decoder layers, and the
// one-to-one matcher that pairs proposals with targets.

#include <cstddef>
#include <utility>
#include <vector>

#include "textmamba/decoder.hpp"
#include "textmamba/ndarray.hpp"

namespace textmamba {

inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kFocalClamp = 1e-7;
inline constexpr double kDiceSmooth = 1.0;

struct LossWeights {
  double cls = 2.0;
  double seg = 5.0;
  double reg = 5.0;
};

struct LossComponents {
  double cls = 0.0;
  double seg = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

/// total = w.cls * cls + w.seg * seg + w.reg * reg.
LossComponents combine(double cls, double seg, double reg, const LossWeights& w);

/// Mean over elements of -alpha_t (1 - p_t)^gamma log(p_t). When dscores is
/// given it receives d(loss)/d(score) scaled by `scale` (accumulated).
template <typename T>
double focal_loss(const NdArray<T>& scores, const NdArray<T>& targets, double alpha = kFocalAlpha,
                  double gamma = kFocalGamma, NdArray<T>* dscores = nullptr, double scale = 1.0);

/// 1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s) with s = 1.
template <typename T>
double dice_loss(const NdArray<T>& pred, const NdArray<T>& gt, NdArray<T>* dpred = nullptr,
                 double scale = 1.0);

/// Mean absolute difference.
template <typename T>
double l1_loss(const NdArray<T>& a, const NdArray<T>& b, NdArray<T>* da = nullptr,
               double scale = 1.0);

template <typename T>
struct Targets {
  NdArray<T> points;  // [T x n x 2], normalised
  NdArray<T> masks;   // [T x h x w] in {0, 1}

  std::size_t count() const { return points.rank() == 3 ? points.dim(0) : 0; }
  void validate(std::size_t num_points, std::size_t h, std::size_t w) const;
};

/// Proposal index assigned to each target.
using Assignment = std::vector<std::size_t>;

/// cost(t, k) = w.cls * (1 - score_k) + w.reg * mean|points_k - gt_t|.
template <typename T>
NdArray<double> matching_cost(const NdArray<T>& scores, const NdArray<T>& points,
                              const NdArray<T>& gt_points, const LossWeights& w);

/// Exact minimum-cost one-to-one assignment of rows (targets) to columns
/// (proposals), rows <= cols. Among equal-cost assignments the one with the
/// smallest sum of column indices wins.
Assignment solve_assignment(const NdArray<double>& cost);

template <typename T>
Assignment match_predictions(const NdArray<T>& scores, const NdArray<T>& points,
                             const Targets<T>& targets, const LossWeights& w = {});

/// Token-level positives: a token is positive when its pixel centre at its
/// level's resolution lies inside some target polygon's bounding box.
template <typename T>
NdArray<T> token_score_targets(const std::vector<std::pair<std::size_t, std::size_t>>& level_shapes,
                               const NdArray<T>& gt_points);

template <typename T>
struct LossResult {
  LossComponents components;
  Assignment assignment;
  std::vector<double> per_layer_reg;
};

/// Matches with the last decoder layer's points, then evaluates the weighted
/// objective. When `up` is given it receives the gradients of the total with
/// respect to the scores, mask logits and every layer's points.
template <typename T>
LossResult<T> composite_loss(const DecoderOutputs<T>& out, const Targets<T>& targets,
                             const LossWeights& w = {}, DecoderUpstream<T>* up = nullptr);

}  // namespace textmamba
