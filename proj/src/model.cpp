#include "textmamba/model.hpp"

#include <string>

namespace textmamba {

MixSsmConfig RunConfig::encoder() const {
  MixSsmConfig c;
  c.num_blocks = num_blocks;
  c.heads = heads;
  c.points = points;
  c.state_dim = state_dim;
  c.k = k;
  c.renormalize = renormalize;
  c.enable_ss2d = enable_ss2d;
  c.enable_dsffn = enable_dsffn;
  c.enable_topk = enable_topk;
  c.share_scan_params = share_scan_params;
  c.scan_kernel = scan_kernel;
  return c;
}

DecoderConfig RunConfig::decoder() const {
  DecoderConfig c;
  c.num_proposals = num_proposals;
  c.num_points = num_points;
  c.num_layers = decoder_layers;
  return c;
}

LossWeights RunConfig::weights() const { return {lambda_cls, lambda_seg, lambda_reg}; }

void RunConfig::validate() const {
  auto positive = [](const char* field, std::size_t v) {
    if (v == 0) throw ConfigError(field, "must be positive");
  };
  positive("height", height);
  positive("width", width);
  if (height % kInputMultiple != 0) {
    throw ConfigError("height", std::to_string(height) + " is not a multiple of " +
                                    std::to_string(kInputMultiple));
  }
  if (width % kInputMultiple != 0) {
    throw ConfigError("width", std::to_string(width) + " is not a multiple of " +
                                   std::to_string(kInputMultiple));
  }
  positive("channels", channels);
  positive("num_blocks", num_blocks);
  positive("heads", heads);
  positive("points", points);
  positive("state_dim", state_dim);
  positive("num_proposals", num_proposals);
  positive("num_points", num_points);
  positive("decoder_layers", decoder_layers);
  if (channels % heads != 0) {
    throw ConfigError("heads", std::to_string(channels) + " channels do not split into " +
                                   std::to_string(heads) + " heads");
  }
  if (k > kPyramidLevels * points) {
    throw ConfigError("k", std::to_string(k) + " exceeds the " +
                               std::to_string(kPyramidLevels * points) + " samples per head");
  }
  std::size_t len = 0;
  for (std::size_t s = 4; s <= 32; s *= 2) len += (height / s) * (width / s);
  if (num_proposals > len) {
    throw ConfigError("num_proposals", std::to_string(num_proposals) + " exceeds the " +
                                           std::to_string(len) + " tokens of the sequence");
  }
  if (dtype != "f32" && dtype != "f64") {
    throw ConfigError("dtype", "'" + dtype + "' is not one of f32, f64");
  }
}

template <typename T>
DetectorParams<T> DetectorParams<T>::init(const RunConfig& cfg, Rng& rng) {
  DetectorParams p;
  p.encoder = EncoderParams<T>::init(cfg.channels, kPyramidLevels, cfg.encoder(), rng);
  if (cfg.enable_epem) p.epem = FpemParams<T>::init(cfg.channels, rng);
  p.decoder = DecoderParams<T>::init(cfg.channels, cfg.decoder(), rng);
  return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const RunConfig& cfg, Rng& rng) {
  ModelParams p;
  p.backbone = BackboneParams<T>::init(cfg.channels, rng);
  p.detector = DetectorParams<T>::init(cfg, rng);
  return p;
}

template <typename T>
DetectorResult<T> detector_forward(const PyramidFeatures<T>& backbone,
                                   const DetectorParams<T>& params, const RunConfig& cfg,
                                   DetectorCache<T>* cache) {
  if (cfg.enable_epem != params.epem.has_value()) {
    throw ConfigError("enable_epem", "parameters do not match the switch");
  }
  DetectorResult<T> r;
  r.input = EmbeddingSequence<T>::flatten(backbone.maps);
  r.encoded = encoder_forward(r.input, params.encoder, cfg.encoder(),
                              cache ? &cache->encoder : nullptr);
  if (params.epem) {
    EpemResult<T> e = epem_forward(r.encoded, backbone, *params.epem,
                                   cache ? &cache->epem : nullptr);
    r.enhanced = std::move(e.seq);
    r.f3_prime = std::move(e.f3_prime);
  } else {
    r.enhanced = r.encoded;
    r.f3_prime = r.encoded.level_map(1);
  }
  r.decoder = decoder_forward(r.enhanced.tokens, r.f3_prime, params.decoder, cfg.decoder(),
                              cache ? &cache->decoder : nullptr);
  return r;
}

template <typename T>
void detector_backward(const DecoderUpstream<T>& up, const DetectorResult<T>& result,
                       const DetectorParams<T>& params, const RunConfig& cfg,
                       const DetectorCache<T>& cache, DetectorParams<T>& grads) {
  NdArray<T> dtokens = NdArray<T>::zeros_like(result.enhanced.tokens);
  NdArray<T> df3 = NdArray<T>::zeros_like(result.f3_prime);
  decoder_backward(up, result.enhanced.tokens, result.decoder, params.decoder, cache.decoder,
                   grads.decoder, dtokens, df3);
  NdArray<T> dencoded = NdArray<T>::zeros_like(result.encoded.tokens);
  if (params.epem) {
    epem_backward(dtokens, df3, result.encoded, *params.epem, cache.epem, *grads.epem, dencoded);
  } else {
    EmbeddingSequence<T> g(std::move(dtokens), result.encoded.level_shapes);
    g.set_level_map(1, g.level_map(1) + df3);
    dencoded = std::move(g.tokens);
  }
  NdArray<T> dinput = NdArray<T>::zeros_like(result.input.tokens);
  encoder_backward(dencoded, params.encoder, cfg.encoder(), cache.encoder, grads.encoder, dinput);
}

template <typename T>
DetectorResult<T> model_forward(const NdArray<T>& image, const ModelParams<T>& params,
                                const RunConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.height || image.dim(1) != cfg.width) {
    throw ConfigError("height", "image " + shape_str(image.shape()) + " does not match " +
                                    std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  }
  return detector_forward(stub_forward(image, params.backbone), params.detector, cfg);
}

std::map<std::string, std::size_t> parameter_counts(const RunConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const ModelParams<double> p = ModelParams<double>::init(cfg, rng);
  std::map<std::string, std::size_t> counts = {
      {"backbone", 0},     {"encoder.attn", 0}, {"encoder.ss2d", 0}, {"encoder.ffn", 0},
      {"encoder.norm", 0}, {"encoder", 0},      {"epem", 0},         {"decoder", 0},
      {"total", 0}};
  p.visit([&](const std::string& name, const auto& t) {
    const std::size_t n = t.size();
    counts["total"] += n;
    const std::string top = name.substr(0, name.find('.'));
    if (top != "encoder") {
      counts[top] += n;
      return;
    }
    counts["encoder"] += n;
    if (name.find(".attn.") != std::string::npos) {
      counts["encoder.attn"] += n;
    } else if (name.find(".ss2d.") != std::string::npos) {
      counts["encoder.ss2d"] += n;
    } else if (name.find("ffn.") != std::string::npos) {
      counts["encoder.ffn"] += n;
    } else {
      counts["encoder.norm"] += n;
    }
  });
  return counts;
}

#define TEXTMAMBA_INSTANTIATE(T)                                                                \
  template struct DetectorParams<T>;                                                             \
  template struct ModelParams<T>;                                                                \
  template DetectorResult<T> detector_forward(const PyramidFeatures<T>&, const DetectorParams<T>&, \
                                              const RunConfig&, DetectorCache<T>*);              \
  template void detector_backward(const DecoderUpstream<T>&, const DetectorResult<T>&,           \
                                  const DetectorParams<T>&, const RunConfig&,                    \
                                  const DetectorCache<T>&, DetectorParams<T>&);                  \
  template DetectorResult<T> model_forward(const NdArray<T>&, const ModelParams<T>&,             \
                                           const RunConfig&);

TEXTMAMBA_INSTANTIATE(float)
TEXTMAMBA_INSTANTIATE(double)
#undef TEXTMAMBA_INSTANTIATE

}  // namespace textmamba
