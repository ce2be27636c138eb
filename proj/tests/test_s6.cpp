#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "textmamba/ops.hpp"
#include "textmamba/params.hpp"
#include "textmamba/s6.hpp"

using namespace textmamba;
using tmt::Gen;

TEST_CASE("discretize") {
  SUBCASE("vanishing step: Abar -> 1, Bbar -> 0") {
    NdArray<double> delta({1, 2}, 1e-12);
    NdArray<double> a({2, 3}, {-1, -2, -3, -4, -5, -6});
    NdArray<double> b({1, 3}, {1, 2, 3});
    const auto [abar, bbar] = discretize(delta, a, b);
    for (std::size_t i = 0; i < abar.size(); ++i) {
      CHECK(std::abs(abar[i] - 1) <= 1e-10);
      CHECK(std::abs(bbar[i]) <= 1e-10);
    }
  }
  SUBCASE("delta = ln 2, A = -1 gives one half") {
    const auto [abar, bbar] = discretize(NdArray<double>({1, 1}, std::log(2.0)),
                                         NdArray<double>({1, 1}, -1.0), NdArray<double>({1, 1}, 1.0));
    CHECK(abar[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(bbar[0] == std::log(2.0));
  }
  SUBCASE("per-element oracle") {
    Gen g(21);
    const auto delta = g.uniform({4, 3}, 0.01, 2.0);
    const auto a = g.uniform({3, 5}, -4.0, -0.1);
    const auto b = g.normal({4, 5});
    const auto [abar, bbar] = discretize(delta, a, b);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t n = 0; n < 5; ++n) {
          CHECK(abar(t, c, n) == std::exp(delta(t, c) * a(c, n)));
          CHECK(bbar(t, c, n) == delta(t, c) * b(t, n));
        }
  }
  SUBCASE("non-positive steps are rejected") {
    CHECK_THROWS_AS(discretize(NdArray<double>({1, 1}, 0.0), NdArray<double>({1, 1}, -1.0),
                               NdArray<double>({1, 1}, 1.0)),
                    std::invalid_argument);
  }
}

TEST_CASE("scan_discretized degenerations") {
  Gen g(22);
  const std::size_t steps = 9, channels = 3;
  const auto x = g.normal({steps, channels});
  SUBCASE("unit coefficients give prefix sums") {
    NdArray<double> ones({steps, channels, 1}, 1.0);
    NdArray<double> cmat({steps, 1}, 1.0);
    for (auto kernel : {ScanKernel::sequential, ScanKernel::parallel}) {
      const auto y = scan_discretized(ones, ones, cmat, x, NdArray<double>({channels}), kernel);
      for (std::size_t c = 0; c < channels; ++c) {
        double s = 0;
        for (std::size_t t = 0; t < steps; ++t) {
          s += x(t, c);
          CHECK(y(t, c) == doctest::Approx(s).epsilon(1e-14));
        }
      }
    }
  }
}

TEST_CASE("selective scan: zero input projection is a pure skip") {
  Gen g(23);
  auto p = S6Params<double>::init(4, 3, g.rng());
  p.b_proj.fill(0);
  p.d.fill(1);
  const auto x = g.normal({11, 4});
  CHECK(selective_scan_sequential(x, p) == x);
  CHECK(selective_scan_parallel(x, p) == x);
}

TEST_CASE("selective scan matches a hand-unrolled recurrence") {
  Gen g(24);
  const std::size_t steps = 5, c = 3, n = 2;
  auto p = S6Params<double>::init(c, n, g.rng());
  p.delta_b = g.uniform({c}, -1.0, 1.0);
  p.d = g.normal({c});
  const auto x = g.normal({steps, c});
  const auto y = selective_scan_sequential(x, p);

  const auto raw = tmt::naive_linear(x, p.delta_w, p.delta_b);
  const auto bm = tmt::naive_linear(x, p.b_proj, NdArray<double>());
  const auto cm = tmt::naive_linear(x, p.c_proj, NdArray<double>());
  NdArray<double> ref({steps, c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double h[2] = {0, 0};
    for (std::size_t t = 0; t < steps; ++t) {
      const double dt = ops::softplus(raw(t, ch));
      double acc = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const double a = -std::exp(p.a_log(ch, k));
        h[k] = std::exp(dt * a) * h[k] + (dt * bm(t, k)) * x(t, ch);
        acc += cm(t, k) * h[k];
      }
      ref(t, ch) = acc + p.d[ch] * x(t, ch);
    }
  }
  CHECK(y == ref);
}

TEST_CASE("parallel scan agrees with the sequential scan") {
  Gen g(25);
  for (std::size_t len : {1u, 2u, 3u, 7u, 64u, 300u}) {
    auto p = S6Params<double>::init(6, 4, g.rng());
    p.delta_b = g.uniform({6}, -2.0, 1.0);
    const auto x = g.normal({len, 6});
    const auto seq = selective_scan_sequential(x, p);
    const auto par = selective_scan_parallel(x, p);
    if (len == 1) {
      CHECK(seq == par);
    }
    CHECK(tmt::normwise_rel_diff(par, seq) <= 1e-10);
  }
  SUBCASE("float") {
    auto p = S6Params<float>::init(32, 16, g.rng());
    const auto x = g.normal<float>({4096, 32});
    CHECK(tmt::normwise_rel_diff(selective_scan_parallel(x, p), selective_scan_sequential(x, p)) <=
          1e-5);
  }
}

TEST_CASE("s6_backward") {
  Gen g(26);
  auto p = S6Params<double>::init(3, 2, g.rng());
  const auto x = g.normal({6, 3});
  S6Cache<double> cache;
  selective_scan(x, p, ScanKernel::parallel, &cache);
  SUBCASE("zero upstream gives zero gradients") {
    auto grads = zeros_like_params(p);
    NdArray<double> dx(x.shape());
    s6_backward(NdArray<double>(x.shape()), p, cache, grads, dx);
    grads.visit([](const std::string&, const NdArray<double>& t) { CHECK(tmt::max_abs(t) == 0.0); });
    CHECK(tmt::max_abs(dx) == 0.0);
  }
  SUBCASE("skip gradient in closed form") {
    const auto dy = g.normal({6, 3});
    auto grads = zeros_like_params(p);
    NdArray<double> dx(x.shape());
    s6_backward(dy, p, cache, grads, dx);
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t t = 0; t < 6; ++t) s += dy(t, c) * x(t, c);
      CHECK(grads.d[c] == doctest::Approx(s).epsilon(1e-13));
    }
  }
  SUBCASE("an unfilled cache is refused") {
    auto grads = zeros_like_params(p);
    NdArray<double> dx(x.shape());
    CHECK_THROWS_AS(s6_backward(x, p, S6Cache<double>{}, grads, dx), std::logic_error);
  }
}

TEST_CASE("decay stays inside the unit interval") {
  Gen g(27);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = S6Params<double>::init(4, 5, g.rng());
    p.a_log = g.normal({4, 5}, 2.0);
    p.delta_b = g.normal({4}, 3.0);
    S6Cache<double> cache;
    selective_scan(g.normal({8, 4}), p, ScanKernel::sequential, &cache);
    for (std::size_t i = 0; i < cache.abar.size(); ++i) {
      CHECK(cache.abar[i] >= 0.0);
      CHECK(cache.abar[i] < 1.0);
    }
  }
}
