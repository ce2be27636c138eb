#include "textmamba/backbone.hpp"

#include <stdexcept>

#include "textmamba/ops.hpp"

namespace textmamba {

template <typename T>
BackboneParams<T> BackboneParams<T>::init(std::size_t channels, Rng& rng) {
  BackboneParams p;
  p.stages[0] = SeparableConvParams<T>::init(3, channels, rng);
  for (std::size_t i = 1; i < kBackboneStages; ++i) {
    p.stages[i] = SeparableConvParams<T>::init(channels, channels, rng);
  }
  return p;
}

template <typename T>
PyramidFeatures<T> stub_forward(const NdArray<T>& image, const BackboneParams<T>& params) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ShapeError("stub_forward: image " + shape_str(image.shape()) + ", expected [H x W x 3]");
  }
  if (image.dim(0) == 0 || image.dim(1) == 0 || image.dim(0) % kInputMultiple != 0 ||
      image.dim(1) % kInputMultiple != 0) {
    throw std::invalid_argument("stub_forward: image extents " + std::to_string(image.dim(0)) +
                                "x" + std::to_string(image.dim(1)) +
                                " must be multiples of " + std::to_string(kInputMultiple));
  }
  PyramidFeatures<T> out;
  NdArray<T> x = image;
  for (std::size_t i = 0; i < kBackboneStages; ++i) {
    const auto& s = params.stages[i];
    x = ops::relu(ops::separable_conv2d(x, s.depthwise, s.pointwise, s.bias, 2));
    if (i >= 1) out.maps.push_back(x);
  }
  return out;
}

template struct BackboneParams<float>;
template struct BackboneParams<double>;
template PyramidFeatures<float> stub_forward(const NdArray<float>&, const BackboneParams<float>&);
template PyramidFeatures<double> stub_forward(const NdArray<double>&,
                                              const BackboneParams<double>&);

}  // namespace textmamba
