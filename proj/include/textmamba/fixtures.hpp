#pragma once

// Seeded synthetic inputs for the harness: an image, axis-aligned text boxes
// as polygons with rasterised 1/8-scale masks, and parameters for every module.

#include <cstdint>

#include "textmamba/io.hpp"
#include "textmamba/losses.hpp"
#include "textmamba/model.hpp"

namespace textmamba {

inline constexpr std::size_t kFixtureTargets = 3;
inline constexpr const char* kParamPrefix = "param.";

/// n points evenly spaced along the perimeter of [x0, x1] x [y0, y1],
/// clockwise from the top-left corner -> [n x 2].
template <typename T>
NdArray<T> rectangle_polygon(double x0, double y0, double x1, double y1, std::size_t n);

/// 1 where a cell centre of an h x w grid lies inside the rectangle.
template <typename T>
NdArray<T> rectangle_mask(double x0, double y0, double x1, double y1, std::size_t h,
                          std::size_t w);

/// Image, targets and a parameter superset covering every switch of the
/// default configuration (both feed-forward variants, SS2D, EPEM).
io::TensorStore generate_fixtures(std::uint64_t seed, const RunConfig& cfg = {});

/// Parameters for `cfg`, read by name from the fixture store. Throws
/// io::InputError naming the first missing or mis-shaped tensor.
template <typename T>
ModelParams<T> load_params(const io::TensorStore& store, const RunConfig& cfg);

template <typename T>
Targets<T> load_targets(const io::TensorStore& store);

/// Runs the whole pipeline on the fixture image and returns scores, masks,
/// per-layer control points, priors and the loss against the fixture targets.
io::TensorStore run_forward(const RunConfig& cfg, const io::TensorStore& fixtures);

}  // namespace textmamba
