#pragma once

// Stand-in feature extractor: five stride-2 separable convolutions with ReLU.
// Stages 2..5 give the pyramid at strides 4, 8, 16 and 32.

#include <array>
#include <cstddef>
#include <string>

#include "textmamba/epem.hpp"
#include "textmamba/ndarray.hpp"
#include "textmamba/rng.hpp"

namespace textmamba {

inline constexpr std::size_t kBackboneStages = 5;
inline constexpr std::size_t kInputMultiple = 32;

template <typename T>
struct BackboneParams {
  std::array<SeparableConvParams<T>, kBackboneStages> stages;  // 3 -> C, then C -> C

  static BackboneParams init(std::size_t channels, Rng& rng);

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
    for (std::size_t i = 0; i < kBackboneStages; ++i) {
      auto sub = prefixed("stage" + std::to_string(i), f);
      s.stages[i].visit(sub);
    }
  }
};

/// image [H x W x 3] with H, W multiples of 32.
template <typename T>
PyramidFeatures<T> stub_forward(const NdArray<T>& image, const BackboneParams<T>& params);

}  // namespace textmamba
