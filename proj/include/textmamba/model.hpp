#pragma once

// Full pipeline: backbone stub -> Mix-SSM encoder -> EPEM -> decoder, plus the
// run configuration and per-module parameter counts.

#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <optional>
#include <string>
#include <utility>

#include "textmamba/backbone.hpp"
#include "textmamba/decoder.hpp"
#include "textmamba/encoder.hpp"
#include "textmamba/epem.hpp"
#include "textmamba/losses.hpp"

namespace textmamba {

inline constexpr std::size_t kPyramidLevels = 4;

/// Invalid or inconsistent configuration value; `field` names the key.
struct ConfigError : std::invalid_argument {
  std::string field;
  ConfigError(std::string f, const std::string& what)
      : std::invalid_argument(f + ": " + what), field(std::move(f)) {}
};

struct RunConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 16;
  std::size_t num_blocks = 6;
  std::size_t heads = 4;
  std::size_t points = 4;
  std::size_t state_dim = kDefaultStateDim;
  std::size_t k = 0;  // 0 -> default
  bool renormalize = false;
  std::size_t num_proposals = kDefaultProposals;
  std::size_t num_points = kDefaultControlPoints;
  std::size_t decoder_layers = kDefaultDecoderLayers;
  double lambda_cls = 2.0;
  double lambda_seg = 5.0;
  double lambda_reg = 5.0;
  std::string dtype = "f64";
  std::uint64_t seed = 0;
  bool enable_ss2d = true;
  bool enable_dsffn = true;
  bool enable_epem = true;
  bool enable_topk = true;
  bool share_scan_params = false;
  ScanKernel scan_kernel = ScanKernel::parallel;

  MixSsmConfig encoder() const;
  DecoderConfig decoder() const;
  LossWeights weights() const;
  void validate() const;
};

/// Everything downstream of the backbone; this is what training would update.
template <typename T>
struct DetectorParams {
  EncoderParams<T> encoder;
  std::optional<FpemParams<T>> epem;
  DecoderParams<T> decoder;

  static DetectorParams init(const RunConfig& cfg, Rng& rng);

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
    auto enc = prefixed("encoder", f);
    s.encoder.visit(enc);
    if (s.epem) {
      auto sub = prefixed("epem", f);
      s.epem->visit(sub);
    }
    auto dec = prefixed("decoder", f);
    s.decoder.visit(dec);
  }
};

template <typename T>
struct ModelParams {
  BackboneParams<T> backbone;
  DetectorParams<T> detector;

  static ModelParams init(const RunConfig& cfg, Rng& rng);

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
    auto bb = prefixed("backbone", f);
    s.backbone.visit(bb);
    s.detector.visit(f);
  }
};

template <typename T>
struct DetectorResult {
  EmbeddingSequence<T> input;     // flattened backbone pyramid
  EmbeddingSequence<T> encoded;   // encoder output
  EmbeddingSequence<T> enhanced;  // after EPEM, or `encoded` when it is off
  NdArray<T> f3_prime;
  DecoderOutputs<T> decoder;
};

template <typename T>
struct DetectorCache {
  EncoderCache<T> encoder;
  FpemCache<T> epem;
  DecoderCache<T> decoder;
};

template <typename T>
DetectorResult<T> detector_forward(const PyramidFeatures<T>& backbone,
                                   const DetectorParams<T>& params, const RunConfig& cfg,
                                   DetectorCache<T>* cache = nullptr);

template <typename T>
void detector_backward(const DecoderUpstream<T>& up, const DetectorResult<T>& result,
                       const DetectorParams<T>& params, const RunConfig& cfg,
                       const DetectorCache<T>& cache, DetectorParams<T>& grads);

template <typename T>
DetectorResult<T> model_forward(const NdArray<T>& image, const ModelParams<T>& params,
                                const RunConfig& cfg);

/// Scalar counts keyed by module ("backbone", "encoder.attn", "encoder.ss2d",
/// "encoder.ffn", "encoder.norm", "epem", "decoder") plus "total".
std::map<std::string, std::size_t> parameter_counts(const RunConfig& cfg);

}  // namespace textmamba
