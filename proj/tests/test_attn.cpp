#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "textmamba/deform_attn.hpp"
#include "textmamba/ops.hpp"

using namespace textmamba;
using tmt::Gen;

namespace {

// Zero-padded bilinear read of one channel, pixel centres at (j + 0.5) / w.
double bilinear_ref(const NdArray<double>& map, std::size_t ch, double x, double y) {
  const long h = long(map.dim(0)), w = long(map.dim(1));
  const double px = x * double(w) - 0.5, py = y * double(h) - 0.5;
  const long x0 = long(std::floor(px)), y0 = long(std::floor(py));
  double s = 0;
  for (long dy = 0; dy <= 1; ++dy)
    for (long dx = 0; dx <= 1; ++dx) {
      const long xi = x0 + dx, yi = y0 + dy;
      if (xi < 0 || yi < 0 || xi >= w || yi >= h) continue;
      const double wx = dx ? px - double(x0) : 1 - (px - double(x0));
      const double wy = dy ? py - double(y0) : 1 - (py - double(y0));
      s += wx * wy * map(std::size_t(yi), std::size_t(xi), ch);
    }
  return s;
}

// Unfused reference: materialise every sample, then weight and sum.
NdArray<double> attention_ref(const NdArray<double>& q, const std::vector<NdArray<double>>& maps,
                              const NdArray<double>& ref, const DeformAttnParams<double>& p,
                              std::size_t k) {
  const std::size_t nq = q.dim(0), c = p.channels(), m_heads = p.heads, lv = p.levels,
                    pts = p.points, hd = c / m_heads, per = lv * pts;
  const auto off = tmt::naive_linear(q, p.offset_w, p.offset_b);
  const auto logit = tmt::naive_linear(q, p.weight_w, p.weight_b);
  std::vector<NdArray<double>> vals;
  for (const auto& m : maps) {
    const auto flat = tmt::naive_linear(m.reshaped({m.dim(0) * m.dim(1), c}), p.value_w, p.value_b);
    vals.push_back(flat.reshaped({m.dim(0), m.dim(1), c}));
  }
  NdArray<double> heads({nq, c});
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t m = 0; m < m_heads; ++m) {
      std::vector<double> w(per);
      double mx = -1e300, z = 0;
      for (std::size_t s = 0; s < per; ++s) mx = std::max(mx, logit(i, m * per + s));
      for (std::size_t s = 0; s < per; ++s) z += w[s] = std::exp(logit(i, m * per + s) - mx);
      for (auto& v : w) v /= z;
      const auto order = tmt::sorted_order(w.data(), per);
      std::vector<char> keep(per, 0);
      for (std::size_t r = 0; r < std::min(k, per); ++r) keep[order[r]] = 1;
      std::vector<std::vector<double>> samples(per, std::vector<double>(hd));
      for (std::size_t l = 0; l < lv; ++l)
        for (std::size_t pt = 0; pt < pts; ++pt) {
          const std::size_t s = (m * lv + l) * pts + pt;
          const double x = ref(i, 0) + off(i, 2 * s) / double(maps[l].dim(1));
          const double y = ref(i, 1) + off(i, 2 * s + 1) / double(maps[l].dim(0));
          for (std::size_t d = 0; d < hd; ++d)
            samples[l * pts + pt][d] = bilinear_ref(vals[l], m * hd + d, x, y);
        }
      for (std::size_t s = 0; s < per; ++s)
        if (keep[s])
          for (std::size_t d = 0; d < hd; ++d) heads(i, m * hd + d) += w[s] * samples[s][d];
    }
  return tmt::naive_linear(heads, p.out_w, p.out_b);
}

}  // namespace

TEST_CASE("topk_sparsify") {
  SUBCASE("k at least the row length is the identity") {
    Gen g(41);
    const auto w = g.uniform({3, 5}, 0, 1);
    CHECK(topk_sparsify(w, 5) == w);
    CHECK(topk_sparsify(w, 9) == w);
  }
  SUBCASE("three-element row") {
    const auto r = topk_sparsify(NdArray<double>({1, 3}, {0.1, 0.5, 0.4}), 2);
    CHECK(r == NdArray<double>({1, 3}, {0, 0.5, 0.4}));
  }
  SUBCASE("sort oracle and idempotence") {
    Gen g(42);
    for (int trial = 0; trial < 200; ++trial) {
      const auto w = trial % 2 ? g.uniform({1, 16}, 0, 1) : g.tie_heavy({1, 16}, 4);
      const auto t = topk_sparsify(w, 4);
      const auto order = tmt::sorted_order(w.ptr(), 16);
      std::vector<char> expect(16, 0);
      for (std::size_t r = 0; r < 4; ++r) expect[order[r]] = 1;
      const auto mask = topk_mask(w.ptr(), 16, 4);
      for (std::size_t i = 0; i < 16; ++i) {
        CHECK(bool(mask[i]) == bool(expect[i]));
        CHECK(t[i] == (expect[i] ? w[i] : 0.0));
      }
      CHECK(topk_sparsify(t, 4) == t);
    }
  }
  SUBCASE("renormalised rows sum to one") {
    Gen g(43);
    const auto w = ops::softmax(g.normal({6, 8}), 1);
    const auto t = topk_sparsify(w, 3, true);
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0;
      std::size_t nz = 0;
      for (std::size_t i = 0; i < 8; ++i) {
        s += t(r, i);
        nz += t(r, i) != 0;
      }
      CHECK(s == doctest::Approx(1).epsilon(1e-12));
      CHECK(nz == 3);
    }
  }
}

TEST_CASE("deformable attention degenerate cases") {
  Gen g(44);
  const std::size_t c = 4;
  SUBCASE("no offsets, one level, one point") {
    auto p = DeformAttnParams<double>::init(c, 1, 1, 1, g.rng());
    p.offset_w.fill(0);
    p.offset_b.fill(0);
    const auto map = g.normal({3, 5, c});
    const auto q = g.normal({4, c});
    const auto ref = g.uniform({4, 2}, 0.1, 0.9);
    AttnOptions opt;
    opt.k = 1;
    const auto y = deformable_attention(q, {map}, ref, p, opt);
    const auto values = ops::linear(map.reshaped({15, c}), p.value_w, p.value_b).reshaped({3, 5, c});
    const auto expect = ops::linear(ops::bilinear_sample(values, ref), p.out_w, p.out_b);
    CHECK(tmt::max_abs_diff(y, expect) <= 1e-14);
  }
  SUBCASE("constant logits, dense: plain average of the samples") {
    auto p = DeformAttnParams<double>::init(c, 2, 2, 3, g.rng());
    p.weight_w.fill(0);
    p.weight_b.fill(0.7);
    const std::vector<NdArray<double>> maps = {g.normal({4, 4, c}), g.normal({2, 2, c})};
    const auto q = g.normal({5, c});
    const auto ref = g.uniform({5, 2}, 0, 1);
    AttnOptions opt;
    opt.k = 6;
    DeformAttnCache<double> cache;
    deformable_attention(q, maps, ref, p, opt, &cache);
    for (std::size_t i = 0; i < cache.weights.size(); ++i)
      CHECK(cache.weights[i] == doctest::Approx(1.0 / 6).epsilon(1e-14));
    CHECK(tmt::max_abs_diff(deformable_attention(q, maps, ref, p, opt),
                            attention_ref(q, maps, ref, p, 6)) <= 1e-12);
  }
}

TEST_CASE("deformable attention matches the unfused oracle") {
  Gen g(45);
  const std::size_t c = 8;
  auto p = DeformAttnParams<double>::init(c, 2, 2, 4, g.rng());
  p.offset_w = g.normal({c, 32}, 0.5);
  p.offset_b = g.normal({32}, 1.0);
  p.weight_w = g.normal({c, 16});
  p.value_b = g.normal({c}, 0.1);
  p.out_b = g.normal({c}, 0.1);
  const std::vector<NdArray<double>> maps = {g.normal({4, 4, c}), g.normal({2, 2, c})};
  const auto q = g.normal({3, c});
  const auto ref = g.uniform({3, 2}, 0, 1);
  for (std::size_t k : {1u, 3u, 8u}) {
    AttnOptions opt;
    opt.k = k;
    DeformAttnCache<double> cache;
    const auto y = deformable_attention(q, maps, ref, p, opt, &cache);
    CHECK(tmt::max_abs_diff(y, attention_ref(q, maps, ref, p, k)) <= 1e-6);
    // Softmax rows sum to one before sparsification; at most k survive after.
    for (std::size_t r = 0; r < 3 * 2; ++r) {
      double s = 0;
      std::size_t nz = 0;
      for (std::size_t i = 0; i < 8; ++i) {
        s += cache.probs[r * 8 + i];
        nz += cache.weights[r * 8 + i] != 0;
      }
      CHECK(std::abs(s - 1) <= 1e-6);
      CHECK(nz <= k);
    }
  }
  SUBCASE("dense k equals the unsparsified path bit for bit") {
    AttnOptions dense;
    dense.sparsify = false;
    AttnOptions full;
    full.k = 8;
    CHECK(deformable_attention(q, maps, ref, p, dense) == deformable_attention(q, maps, ref, p, full));
  }
}

TEST_CASE("attention rejects bad inputs") {
  Gen g(46);
  auto p = DeformAttnParams<double>::init(4, 2, 1, 2, g.rng());
  const std::vector<NdArray<double>> maps = {g.normal({2, 2, 4})};
  AttnOptions opt;
  CHECK_THROWS_AS(deformable_attention(g.normal({2, 3}), maps, NdArray<double>({2, 2}), p, opt),
                  ShapeError);
  CHECK_THROWS_AS(deformable_attention(g.normal({1, 4}), maps, NdArray<double>({1, 2}, 1.5), p, opt),
                  std::invalid_argument);
  opt.k = 0;
  CHECK_THROWS_AS(deformable_attention(g.normal({1, 4}), maps, NdArray<double>({1, 2}, 0.5), p, opt),
                  std::invalid_argument);
  CHECK_THROWS_AS(DeformAttnParams<double>::init(6, 4, 1, 1, g.rng()), std::invalid_argument);
}

TEST_CASE("attention backward: zero upstream") {
  Gen g(47);
  auto p = DeformAttnParams<double>::init(4, 2, 2, 2, g.rng());
  const std::vector<NdArray<double>> maps = {g.normal({3, 3, 4}), g.normal({2, 2, 4})};
  const auto q = g.normal({5, 4});
  AttnOptions opt;
  opt.k = 2;
  DeformAttnCache<double> cache;
  deformable_attention(q, maps, g.uniform({5, 2}, 0, 1), p, opt, &cache);
  auto grads = zeros_like_params(p);
  NdArray<double> dq(q.shape());
  std::vector<NdArray<double>> dmaps = {NdArray<double>({3, 3, 4}), NdArray<double>({2, 2, 4})};
  attn_backward(NdArray<double>({5, 4}), p, cache, grads, dq, dmaps);
  CHECK(tmt::max_abs(dq) == 0.0);
  for (const auto& d : dmaps) CHECK(tmt::max_abs(d) == 0.0);
  grads.visit([](const std::string&, const NdArray<double>& t) { CHECK(tmt::max_abs(t) == 0.0); });
}

TEST_CASE("default Top_k arity") {
  CHECK(default_topk(4, 4) == 8);
  CHECK(default_topk(1, 1) == 1);
  CHECK(default_topk(3, 3) == 5);
}
