#include "doctest.h"
#include "support.hpp"
#include "textmamba/encoder.hpp"
#include "textmamba/ops.hpp"

using namespace textmamba;
using tmt::Gen;

namespace {

EmbeddingSequence<double> random_sequence(Gen& g, std::vector<LevelShape> shapes, std::size_t c) {
  std::size_t len = 0;
  for (const auto& [h, w] : shapes) len += h * w;
  return EmbeddingSequence<double>(g.normal({len, c}), std::move(shapes));
}

}  // namespace

TEST_CASE("dual-scale feed-forward") {
  Gen g(51);
  const std::size_t c = 6;
  auto p = DsffnParams<double>::init(c, g.rng());
  p.norm_gamma = g.uniform({c}, 0.5, 1.5);
  p.norm_beta = g.normal({c}, 0.2);
  const auto x = g.normal({5, c}, 2.0);
  const auto l_in = ops::layer_norm(x, p.norm_gamma, p.norm_beta, kLayerNormEps);

  SUBCASE("zero branches leave the normalised input") {
    for (auto* t : {&p.e1_w, &p.e1_b, &p.r1_w, &p.r1_b, &p.e2_w, &p.e2_b, &p.r2_w, &p.r2_b})
      t->fill(0);
    CHECK(dsffn_forward(x, p) == l_in);
  }
  SUBCASE("constructed branch reproducing its input doubles it") {
    // relu(L) - relu(-L) = L through the 2C-wide branch; the 4C branch is off.
    p.e1_w.fill(0);
    p.r1_w.fill(0);
    for (std::size_t i = 0; i < c; ++i) {
      p.e1_w(i, i) = 1;
      p.e1_w(i, c + i) = -1;
      p.r1_w(i, i) = 1;
      p.r1_w(c + i, i) = -1;
    }
    for (auto* t : {&p.e1_b, &p.r1_b, &p.e2_w, &p.e2_b, &p.r2_w, &p.r2_b}) t->fill(0);
    CHECK(tmt::max_abs_diff(dsffn_forward(x, p), l_in * 2.0) <= 1e-6);
  }
  SUBCASE("widths") {
    CHECK(p.e1_w.shape() == Shape{c, 2 * c});
    CHECK(p.e2_w.shape() == Shape{c, 4 * c});
    CHECK(p.r1_w.shape() == Shape{2 * c, c});
    CHECK(p.r2_w.shape() == Shape{4 * c, c});
  }
}

TEST_CASE("embedding sequence bookkeeping") {
  Gen g(52);
  const auto seq = random_sequence(g, {{4, 4}, {2, 2}, {1, 1}}, 3);
  CHECK(seq.level_offsets == std::vector<std::size_t>{0, 16, 20});
  std::vector<NdArray<double>> maps;
  for (std::size_t l = 0; l < seq.levels(); ++l) maps.push_back(seq.level_map(l));
  CHECK(EmbeddingSequence<double>::flatten(maps).tokens == seq.tokens);
  const auto ref = seq.reference_points();
  CHECK(ref(0, 0) == 0.125);
  CHECK(ref(16, 1) == 0.25);
  CHECK(ref(20, 0) == 0.5);
  CHECK_THROWS_AS(EmbeddingSequence<double>(g.normal({5, 3}), {{2, 2}}), ShapeError);
}

TEST_CASE("mix-ssm block with only attention is a deformable encoder layer") {
  Gen g(53);
  const std::size_t c = 8;
  MixSsmConfig cfg;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.enable_ss2d = false;
  cfg.enable_dsffn = false;
  cfg.enable_topk = false;
  const auto seq = random_sequence(g, {{4, 4}, {2, 2}}, c);
  const auto p = MixSsmBlockParams<double>::init(c, 2, cfg, g.rng());
  CHECK_FALSE(p.ss2d.has_value());
  CHECK_FALSE(p.dsffn.has_value());
  REQUIRE(p.ffn.has_value());

  std::vector<NdArray<double>> maps = {seq.level_map(0), seq.level_map(1)};
  AttnOptions dense;
  dense.sparsify = false;
  auto x1 = deformable_attention(seq.tokens, maps, seq.reference_points(), p.attn, dense);
  x1 += seq.tokens;
  x1 = ops::layer_norm(x1, p.norm1_gamma, p.norm1_beta, kLayerNormEps);
  CHECK(mix_ssm_block(seq, p, cfg).tokens == ffn_forward(x1, *p.ffn));

  SUBCASE("disabling Top_k equals k = Lv * P") {
    MixSsmConfig full = cfg;
    full.enable_topk = true;
    full.k = 4;
    CHECK(mix_ssm_block(seq, p, full).tokens == mix_ssm_block(seq, p, cfg).tokens);
  }
}

TEST_CASE("mix-ssm block with silent attention and scan reduces to the feed-forward") {
  Gen g(54);
  const std::size_t c = 8;
  MixSsmConfig cfg;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.state_dim = 4;
  const auto seq = random_sequence(g, {{4, 4}, {2, 2}}, c);
  auto p = MixSsmBlockParams<double>::init(c, 2, cfg, g.rng());
  p.attn.out_w.fill(0);
  p.attn.out_b.fill(0);
  for (auto& path : p.ss2d->paths) {
    path.b_proj.fill(0);
    path.d.fill(0);
  }
  p.ss2d->out_w = g.normal({c, c});
  const auto normed = ops::layer_norm(seq.tokens, p.norm1_gamma, p.norm1_beta, kLayerNormEps);
  const auto out = mix_ssm_block(seq, p, cfg).tokens;
  CHECK(tmt::max_abs_diff(out, dsffn_forward(normed, *p.dsffn)) <= 1e-4);

  SUBCASE("stages are exposed in order") {
    const auto st = mix_ssm_block_stages(seq, p, cfg);
    CHECK(st.stage1 == normed);
    CHECK(st.output == out);
  }
}

TEST_CASE("fresh blocks start with a silent scan branch") {
  Gen g(55);
  MixSsmConfig cfg;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.state_dim = 4;
  const auto seq = random_sequence(g, {{4, 4}, {2, 2}}, 8);
  const auto p = MixSsmBlockParams<double>::init(8, 2, cfg, g.rng());
  REQUIRE(p.ss2d.has_value());
  CHECK(tmt::max_abs(p.ss2d->out_w) == 0.0);
}

TEST_CASE("encoder") {
  Gen g(56);
  MixSsmConfig cfg;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.state_dim = 4;
  cfg.num_blocks = 1;
  const auto seq = random_sequence(g, {{4, 4}, {2, 2}}, 8);
  auto enc = EncoderParams<double>::init(8, 2, cfg, g.rng());
  REQUIRE(enc.blocks.size() == 1);
  enc.blocks[0].ss2d->out_w = g.normal({8, 8}, 0.3);
  CHECK(encoder_forward(seq, enc, cfg).tokens == mix_ssm_block(seq, enc.blocks[0], cfg).tokens);

  cfg.num_blocks = 3;
  const auto deep = EncoderParams<double>::init(8, 2, cfg, g.rng());
  const auto y = encoder_forward(seq, deep, cfg);
  CHECK(y.tokens.shape() == seq.tokens.shape());
  CHECK(y.level_shapes == seq.level_shapes);
  auto chained = seq;
  for (const auto& b : deep.blocks) chained = mix_ssm_block(chained, b, cfg);
  CHECK(chained.tokens == y.tokens);

  SUBCASE("scan kernels give the same encoder output") {
    MixSsmConfig seq_cfg = cfg;
    seq_cfg.scan_kernel = ScanKernel::sequential;
    auto live = deep;
    for (auto& b : live.blocks) b.ss2d->out_w = g.normal({8, 8}, 0.3);
    CHECK(tmt::normwise_rel_diff(encoder_forward(seq, live, cfg).tokens,
                                 encoder_forward(seq, live, seq_cfg).tokens) <= 1e-10);
  }
}
