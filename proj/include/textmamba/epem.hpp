#pragma once

// Embedding pyramid enhancement: sequence -> per-level maps, add the backbone
// pyramid, one FPEM pass (up-scale then down-scale enhancement with separable
// convolutions), re-flatten. The enhanced 1/8 level feeds the mask head.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "textmamba/encoder.hpp"
#include "textmamba/ndarray.hpp"
#include "textmamba/ops.hpp"
#include "textmamba/params.hpp"
#include "textmamba/rng.hpp"

namespace textmamba {

/// Four maps at strides 4, 8, 16, 32 (index 0 is the largest).
template <typename T>
struct PyramidFeatures {
  std::vector<NdArray<T>> maps;

  std::size_t levels() const { return maps.size(); }
  void validate() const;
};

template <typename T>
struct SeparableConvParams {
  NdArray<T> depthwise;  // [3 x 3 x C]
  NdArray<T> pointwise;  // [C x Cout]
  NdArray<T> bias;       // [Cout]

  static SeparableConvParams init(std::size_t cin, std::size_t cout, Rng& rng);
  /// Centre-tap depthwise, identity pointwise, zero bias.
  static SeparableConvParams identity(std::size_t channels);
  static SeparableConvParams zero(std::size_t channels);

  template <typename F>
  void visit(F&& f) {
    f("depthwise", depthwise);
    f("pointwise", pointwise);
    f("bias", bias);
  }
  template <typename F>
  void visit(F&& f) const {
    f("depthwise", depthwise);
    f("pointwise", pointwise);
    f("bias", bias);
  }
};

/// up[i] smooths level i after the top-down add (i = 2, 1, 0 in execution
/// order); down_stride[i] reduces level i to level i + 1's extents and
/// down_smooth[i] smooths level i + 1 after the bottom-up add.
template <typename T>
struct FpemParams {
  std::array<SeparableConvParams<T>, 3> up;
  std::array<SeparableConvParams<T>, 3> down_stride;
  std::array<SeparableConvParams<T>, 3> down_smooth;

  static FpemParams init(std::size_t channels, Rng& rng);
  /// Stride-1 convolutions are identities and the stride-2 ones are zero.
  static FpemParams identity(std::size_t channels);

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
    for (std::size_t i = 0; i < 3; ++i) {
      auto a = prefixed("up" + std::to_string(i), f);
      s.up[i].visit(a);
    }
    for (std::size_t i = 0; i < 3; ++i) {
      auto a = prefixed("down_stride" + std::to_string(i), f);
      s.down_stride[i].visit(a);
      auto b = prefixed("down_smooth" + std::to_string(i), f);
      s.down_smooth[i].visit(b);
    }
  }
};

template <typename T>
PyramidFeatures<T> reconstruct_maps(const EmbeddingSequence<T>& seq);

template <typename T>
EmbeddingSequence<T> flatten_pyramid(const PyramidFeatures<T>& pyramid);

template <typename T>
PyramidFeatures<T> fuse_add(const PyramidFeatures<T>& reconstructed,
                            const PyramidFeatures<T>& backbone);

template <typename T>
struct FpemCache {
  std::array<ops::SeparableConvCache<T>, 3> up, down_stride, down_smooth;
  std::vector<NdArray<T>> after_up;  // level maps after the up-scale phase
  bool valid = false;
};

template <typename T>
PyramidFeatures<T> fpem(const PyramidFeatures<T>& features, const FpemParams<T>& params,
                        FpemCache<T>* cache = nullptr);

template <typename T>
void fpem_backward(const std::vector<NdArray<T>>& dout, const FpemParams<T>& params,
                   const FpemCache<T>& cache, FpemParams<T>& grads, std::vector<NdArray<T>>& dinput);

template <typename T>
struct EpemResult {
  EmbeddingSequence<T> seq;
  NdArray<T> f3_prime;  // [H/8 x W/8 x C]
};

template <typename T>
EpemResult<T> epem_forward(const EmbeddingSequence<T>& seq, const PyramidFeatures<T>& backbone,
                           const FpemParams<T>& params, FpemCache<T>* cache = nullptr);

/// dseq: upstream on the flattened output; df3: upstream on f3_prime (may be
/// empty). Accumulates into dtokens and (optionally) dbackbone.
template <typename T>
void epem_backward(const NdArray<T>& dseq, const NdArray<T>& df3, const EmbeddingSequence<T>& seq,
                   const FpemParams<T>& params, const FpemCache<T>& cache, FpemParams<T>& grads,
                   NdArray<T>& dtokens, std::vector<NdArray<T>>* dbackbone = nullptr);

}  // namespace textmamba
