#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "textmamba/decoder.hpp"

using namespace textmamba;
using tmt::Gen;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

TEST_CASE("topk_indices") {
  Gen g(71);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t len = g.size(1, 40);
    const auto v = g.tie_heavy<double>({len}, 4);
    const std::size_t k = g.size(1, len);
    auto expect = tmt::sorted_order(v.ptr(), len);
    expect.resize(k);
    CHECK(topk_indices(v, k) == expect);
  }
  const NdArray<double> v({5}, {0.3, 0.9, 0.3, 0.1, 0.9});
  CHECK(topk_indices(v, 5) == std::vector<std::size_t>{1, 4, 0, 2, 3});
  CHECK(topk_indices(v, 9).size() == 5);
}

TEST_CASE("select_proposals") {
  Gen g(72);
  const std::size_t len = 12, c = 4, n = 3;
  const auto tokens = g.normal({len, c});
  const auto cls_w = g.normal({c, 1});
  const NdArray<double> cls_b({1}, {0.2});
  SUBCASE("zero control embeddings copy the source token") {
    const auto p = select_proposals(tokens, cls_w, cls_b, NdArray<double>({n, c}), 5);
    REQUIRE(p.source_indices.size() == 5);
    for (std::size_t k = 0; k < 5; ++k) {
      const std::size_t src = p.source_indices[k];
      double logit_v = 0.2;
      for (std::size_t ch = 0; ch < c; ++ch) logit_v += tokens(src, ch) * cls_w(ch, 0);
      CHECK(p.scores[k] == doctest::Approx(sigmoid(logit_v)).epsilon(1e-14));
      if (k > 0) CHECK(p.scores[k - 1] >= p.scores[k]);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t ch = 0; ch < c; ++ch) CHECK(p.embeddings(k, j, ch) == tokens(src, ch));
    }
  }
  SUBCASE("control embeddings are added per point") {
    const auto e = g.normal({n, c});
    const auto p = select_proposals(tokens, cls_w, cls_b, e, 2);
    CHECK(p.embeddings(1, 2, 3) == tokens(p.source_indices[1], 3) + e(2, 3));
  }
  SUBCASE("proposal count bounds") {
    CHECK_THROWS_AS(select_proposals(tokens, cls_w, cls_b, NdArray<double>({n, c}), 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(select_proposals(tokens, cls_w, cls_b, NdArray<double>({n, c}), len + 1),
                    std::invalid_argument);
  }
}

TEST_CASE("mask head") {
  Gen g(73);
  const std::size_t kk = 3, n = 4, c = 5;
  auto p = MaskHeadParams<double>::init(c, n, c, g.rng());
  const auto q = g.normal({kk, n, c});
  const auto f3 = g.normal({6, 7, c});
  SUBCASE("shapes") {
    const auto out = mask_head(q, f3, p);
    CHECK(out.mask_e.shape() == Shape{kk, 1, c});
    CHECK(out.mask_i.shape() == Shape{kk, 6, 7});
  }
  SUBCASE("silent embedding MLP gives zero logits") {
    p.mlp2_w.fill(0);
    p.mlp2_b.fill(0);
    CHECK(tmt::max_abs(mask_head(q, f3, p).mask_i) == 0.0);
  }
  SUBCASE("single-point queries: closed form") {
    // n = 1: the summation weight is 1 and the pooled conv branch sees one position.
    auto p1 = MaskHeadParams<double>::init(c, 1, c, g.rng());
    const auto q1 = g.normal({kk, 1, c});
    const auto out = mask_head(q1, f3, p1);
    // Only the centre tap of the 9-wide kernel touches the single position.
    NdArray<double> c9({kk, c}), me({kk, c});
    for (std::size_t k = 0; k < kk; ++k)
      for (std::size_t o = 0; o < c; ++o) {
        double s = p1.conv9_b[o];
        for (std::size_t i = 0; i < c; ++i) s += q1(k, 0, i) * p1.conv9_w(4, i, o);
        c9(k, o) = s;
      }
    for (std::size_t k = 0; k < kk; ++k)
      for (std::size_t o = 0; o < c; ++o) {
        double s = p1.conv1_b[o];
        for (std::size_t i = 0; i < c; ++i) s += c9(k, i) * p1.conv1_w(0, i, o);
        me(k, o) = sigmoid(s) + q1(k, 0, o);
      }
    for (std::size_t k = 0; k < kk; ++k)
      CHECK(out.mask_e(k, 0, 2) == doctest::Approx(me(k, 2)).epsilon(1e-12));
    const auto hidden = ops::relu(tmt::naive_linear(me, p1.mlp1_w, p1.mlp1_b));
    const auto embed = tmt::naive_linear(hidden, p1.mlp2_w, p1.mlp2_b);
    const auto pix = tmt::naive_linear(f3.reshaped({42, c}), p1.proj_w, p1.proj_b);
    double worst = 0;
    for (std::size_t k = 0; k < kk; ++k)
      for (std::size_t px = 0; px < 42; ++px) {
        double s = 0;
        for (std::size_t o = 0; o < c; ++o) s += embed(k, o) * pix(px, o);
        worst = std::max(worst, std::abs(s - out.mask_i(k, px / 7, px % 7)));
      }
    CHECK(worst <= 1e-12);
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(mask_head(q, g.normal({6, 7, c + 1}), p), ShapeError);
  }
}

TEST_CASE("anchor priors") {
  Gen g(74);
  SUBCASE("uniform mask sits at the centre") {
    for (const auto& [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{{8, 8}, {3, 5}, {1, 1}}) {
      const auto pr = anchor_priors(NdArray<double>({2, h, w}, 0.7));
      for (std::size_t k = 0; k < 2; ++k) {
        CHECK(std::abs(pr(k, 0) - 0.5) <= 1e-6);
        CHECK(std::abs(pr(k, 1) - 0.5) <= 1e-6);
      }
    }
  }
  SUBCASE("dominant logit picks its cell") {
    NdArray<double> m({1, 5, 5});
    m(0, 1, 3) = 60.0;
    const auto pr = anchor_priors(m);
    CHECK(pr(0, 0) == doctest::Approx(0.75));
    CHECK(pr(0, 1) == doctest::Approx(0.25));
  }
  SUBCASE("weighted-sum oracle") {
    const std::size_t h = 4, w = 6;
    const auto m = g.normal({3, h, w}, 2.0);
    const auto pr = anchor_priors(m);
    for (std::size_t k = 0; k < 3; ++k) {
      double mx = -1e300, z = 0, ex = 0, ey = 0;
      for (std::size_t i = 0; i < h * w; ++i) mx = std::max(mx, m[k * h * w + i]);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double e = std::exp(m(k, i, j) - mx);
          z += e;
          ex += e * static_cast<double>(j) / static_cast<double>(w - 1);
          ey += e * static_cast<double>(i) / static_cast<double>(h - 1);
        }
      CHECK(std::abs(pr(k, 0) - ex / z) <= 1e-14);
      CHECK(std::abs(pr(k, 1) - ey / z) <= 1e-14);
      CHECK(pr(k, 0) >= 0.0);
      CHECK(pr(k, 1) <= 1.0);
    }
  }
}

TEST_CASE("control point refinement") {
  Gen g(75);
  const std::size_t kk = 3, n = 4, c = 6;
  const auto q = g.normal({kk, n, c});
  const auto priors = g.uniform({kk, 2}, 0.1, 0.9);
  SUBCASE("zero offset heads keep every point at its prior") {
    std::vector<RefineLayerParams<double>> layers;
    for (int l = 0; l < 3; ++l) layers.push_back(RefineLayerParams<double>::init(c, g.rng(), true));
    const auto pts = refine_control_points(q, priors, layers);
    REQUIRE(pts.size() == 3);
    for (const auto& p : pts) {
      CHECK(p.shape() == Shape{kk, n, 2});
      for (std::size_t k = 0; k < kk; ++k)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t d = 0; d < 2; ++d) CHECK(std::abs(p(k, j, d) - priors(k, d)) <= 1e-14);
    }
  }
  SUBCASE("constant offsets accumulate in logit space") {
    const double dx = 0.3, dy = -0.7;
    std::vector<RefineLayerParams<double>> layers;
    for (int l = 0; l < 2; ++l) {
      auto p = RefineLayerParams<double>::init(c, g.rng(), true);
      p.off2_b = NdArray<double>({2}, {dx, dy});
      layers.push_back(p);
    }
    const auto pts = refine_control_points(q, priors, layers);
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t k = 0; k < kk; ++k)
        for (std::size_t j = 0; j < n; ++j) {
          const double steps = static_cast<double>(l + 1);
          CHECK(std::abs(pts[l](k, j, 0) - sigmoid(logit(priors(k, 0)) + steps * dx)) <= 1e-14);
          CHECK(std::abs(pts[l](k, j, 1) - sigmoid(logit(priors(k, 1)) + steps * dy)) <= 1e-14);
        }
  }
  SUBCASE("live layers stay inside the unit square") {
    std::vector<RefineLayerParams<double>> layers;
    for (int l = 0; l < 4; ++l) {
      auto p = RefineLayerParams<double>::init(c, g.rng(), false);
      p.off2_w = g.normal({c, 2}, 3.0);
      layers.push_back(p);
    }
    for (const auto& p : refine_control_points(q, priors, layers))
      for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(p[i] >= 0.0);
        CHECK(p[i] <= 1.0);
      }
  }
}

TEST_CASE("decoder shapes") {
  Gen g(76);
  DecoderConfig cfg;
  cfg.num_proposals = 8;
  cfg.num_points = 16;
  cfg.num_layers = 4;
  const std::size_t c = 16;
  const auto p = DecoderParams<double>::init(c, cfg, g.rng());
  const auto out = decoder_forward(g.normal({340, c}), g.normal({8, 8, c}), p, cfg);
  CHECK(out.proposals.scores.shape() == Shape{8});
  CHECK(out.mask_i.shape() == Shape{8, 8, 8});
  CHECK(out.priors.shape() == Shape{8, 2});
  REQUIRE(out.control_points.size() == 4);
  for (const auto& cp : out.control_points) CHECK(cp.shape() == Shape{8, 16, 2});

  DecoderConfig wrong = cfg;
  wrong.num_layers = 3;
  CHECK_THROWS_AS(decoder_forward(g.normal({340, c}), g.normal({8, 8, c}), p, wrong), ShapeError);
}
