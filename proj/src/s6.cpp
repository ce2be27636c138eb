#include "textmamba/s6.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "textmamba/kernels.hpp"
#include "textmamba/ops.hpp"

namespace textmamba {

namespace {

template <typename T>
void check_input(const NdArray<T>& x, const S6Params<T>& p) {
  if (x.rank() != 2 || x.dim(1) != p.channels() || x.dim(0) == 0) {
    throw ShapeError("selective scan: input " + shape_str(x.shape()) + " vs " +
                     std::to_string(p.channels()) + " channels (need L >= 1)");
  }
}

template <typename T>
struct Projections {
  NdArray<T> raw, delta, bmat, cmat;
};

template <typename T>
Projections<T> project(const NdArray<T>& x, const S6Params<T>& p) {
  Projections<T> out;
  out.raw = ops::linear(x, p.delta_w, p.delta_b);
  out.delta = NdArray<T>(out.raw.shape());
  for (std::size_t i = 0; i < out.raw.size(); ++i) out.delta[i] = ops::softplus(out.raw[i]);
  const NdArray<T> none;
  out.bmat = ops::linear(x, p.b_proj, none);
  out.cmat = ops::linear(x, p.c_proj, none);
  return out;
}

// y_t = <C_t, h_t> + D x_t, shared by both kernels so only h can differ.
template <typename T>
NdArray<T> readout(const NdArray<T>& h, const NdArray<T>& cmat, const NdArray<T>& x,
                   const NdArray<T>& d) {
  const std::size_t steps = x.dim(0), channels = x.dim(1), state = cmat.dim(1);
  NdArray<T> y({steps, channels});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T* ht = h.ptr() + (t * channels + c) * state;
      const T* ct = cmat.ptr() + t * state;
      T acc{0};
      for (std::size_t n = 0; n < state; ++n) acc += ct[n] * ht[n];
      y(t, c) = acc + d[c] * x(t, c);
    }
  }
  return y;
}

}  // namespace

template <typename T>
NdArray<T> S6Params<T>::a() const {
  NdArray<T> out(a_log.shape());
  for (std::size_t i = 0; i < a_log.size(); ++i) out[i] = -std::exp(a_log[i]);
  return out;
}

template <typename T>
S6Params<T> S6Params<T>::init(std::size_t channels, std::size_t state_dim, Rng& rng) {
  S6Params p;
  const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
  p.a_log = NdArray<T>({channels, state_dim});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t n = 0; n < state_dim; ++n)
      p.a_log(c, n) = static_cast<T>(std::log(static_cast<double>(n + 1)));
  p.delta_w = rng.uniform_array<T>({channels, channels}, -scale, scale);
  p.delta_b = NdArray<T>({channels});
  for (std::size_t c = 0; c < channels; ++c) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    p.delta_b[c] = static_cast<T>(dt + std::log(-std::expm1(-dt)));  // softplus^-1
  }
  p.b_proj = rng.uniform_array<T>({channels, state_dim}, -scale, scale);
  p.c_proj = rng.uniform_array<T>({channels, state_dim}, -scale, scale);
  p.d = NdArray<T>({channels}, T{1});
  return p;
}

template <typename T>
std::pair<NdArray<T>, NdArray<T>> discretize(const NdArray<T>& delta, const NdArray<T>& a,
                                             const NdArray<T>& b) {
  if (delta.rank() != 2 || a.rank() != 2 || b.rank() != 2 || delta.dim(1) != a.dim(0) ||
      b.dim(0) != delta.dim(0) || b.dim(1) != a.dim(1)) {
    throw ShapeError("discretize: delta " + shape_str(delta.shape()) + ", A " +
                     shape_str(a.shape()) + ", B " + shape_str(b.shape()));
  }
  const std::size_t steps = delta.dim(0), channels = a.dim(0), state = a.dim(1);
  for (std::size_t i = 0; i < delta.size(); ++i) {
    if (!(delta[i] > T{0})) {
      throw std::invalid_argument("discretize: step size must be positive, got " +
                                  std::to_string(static_cast<double>(delta[i])) + " at index " +
                                  std::to_string(i));
    }
  }
  NdArray<T> abar({steps, channels, state});
  NdArray<T> bbar({steps, channels, state});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T dt = delta(t, c);
      for (std::size_t n = 0; n < state; ++n) {
        abar(t, c, n) = std::exp(dt * a(c, n));
        bbar(t, c, n) = dt * b(t, n);
      }
    }
  }
  return {std::move(abar), std::move(bbar)};
}

template <typename T>
NdArray<T> scan_discretized(const NdArray<T>& abar, const NdArray<T>& bbar,
                            const NdArray<T>& cmat, const NdArray<T>& x, const NdArray<T>& d,
                            ScanKernel kernel, NdArray<T>* h_out) {
  abar.require_same_shape(bbar, "scan_discretized");
  if (abar.rank() != 3 || x.rank() != 2 || x.dim(0) != abar.dim(0) || x.dim(1) != abar.dim(1) ||
      cmat.shape() != Shape{abar.dim(0), abar.dim(2)} || d.size() != x.dim(1)) {
    throw ShapeError("scan_discretized: Abar " + shape_str(abar.shape()) + ", C " +
                     shape_str(cmat.shape()) + ", x " + shape_str(x.shape()) + ", D " +
                     shape_str(d.shape()));
  }
  const std::size_t steps = abar.dim(0), channels = abar.dim(1), state = abar.dim(2);
  const std::size_t lanes = channels * state;
  NdArray<T> bu(abar.shape());
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t n = 0; n < state; ++n) bu(t, c, n) = bbar(t, c, n) * x(t, c);
  NdArray<T> h(abar.shape());
  if (kernel == ScanKernel::sequential) {
    kernels::linear_recurrence_serial<T>(abar.data(), bu.data(), h.data(), steps, lanes);
  } else {
    kernels::linear_recurrence_parallel<T>(abar.data(), bu.data(), h.data(), steps, lanes);
  }
  NdArray<T> y = readout(h, cmat, x, d);
  if (h_out) *h_out = std::move(h);
  return y;
}

template <typename T>
NdArray<T> selective_scan_sequential(const NdArray<T>& x, const S6Params<T>& params,
                                     S6Cache<T>* cache) {
  check_input(x, params);
  if (cache) {
    // Training path: materialise Abar and h for the reverse scan.
    auto proj = project(x, params);
    auto [abar, bbar] = discretize(proj.delta, params.a(), proj.bmat);
    NdArray<T> h;
    NdArray<T> y = scan_discretized(abar, bbar, proj.cmat, x, params.d, ScanKernel::sequential, &h);
    cache->x = x;
    cache->raw = std::move(proj.raw);
    cache->delta = std::move(proj.delta);
    cache->bmat = std::move(proj.bmat);
    cache->cmat = std::move(proj.cmat);
    cache->abar = std::move(abar);
    cache->h = std::move(h);
    cache->valid = true;
    return y;
  }
  // Inference path: discretise on the fly, O(C N) state.
  auto proj = project(x, params);
  const NdArray<T> a = params.a();
  const std::size_t steps = x.dim(0), channels = x.dim(1), state = params.state_dim();
  NdArray<T> h({channels, state});
  NdArray<T> y({steps, channels});
  for (std::size_t t = 0; t < steps; ++t) {
    const T* bt = proj.bmat.ptr() + t * state;
    const T* ct = proj.cmat.ptr() + t * state;
    for (std::size_t c = 0; c < channels; ++c) {
      const T xv = x(t, c);
      const T dt = proj.delta(t, c);
      const T* ac = a.ptr() + c * state;
      T* hc = h.ptr() + c * state;
      T acc{0};
      for (std::size_t n = 0; n < state; ++n) {
        hc[n] = std::exp(dt * ac[n]) * hc[n] + (dt * bt[n]) * xv;
        acc += ct[n] * hc[n];
      }
      y(t, c) = acc + params.d[c] * xv;
    }
  }
  return y;
}

template <typename T>
NdArray<T> selective_scan_parallel(const NdArray<T>& x, const S6Params<T>& params,
                                   S6Cache<T>* cache) {
  check_input(x, params);
  auto proj = project(x, params);
  auto [abar, bbar] = discretize(proj.delta, params.a(), proj.bmat);
  NdArray<T> h;
  NdArray<T> y = scan_discretized(abar, bbar, proj.cmat, x, params.d, ScanKernel::parallel, &h);
  if (cache) {
    cache->x = x;
    cache->raw = std::move(proj.raw);
    cache->delta = std::move(proj.delta);
    cache->bmat = std::move(proj.bmat);
    cache->cmat = std::move(proj.cmat);
    cache->abar = std::move(abar);
    cache->h = std::move(h);
    cache->valid = true;
  }
  return y;
}

template <typename T>
NdArray<T> selective_scan(const NdArray<T>& x, const S6Params<T>& params, ScanKernel kernel,
                          S6Cache<T>* cache) {
  return kernel == ScanKernel::sequential ? selective_scan_sequential(x, params, cache)
                                          : selective_scan_parallel(x, params, cache);
}

template <typename T>
void s6_backward(const NdArray<T>& dy, const S6Params<T>& params, const S6Cache<T>& cache,
                 S6Params<T>& grads, NdArray<T>& dx) {
  if (!cache.valid) {
    throw std::logic_error("s6_backward: forward was run without saving activations");
  }
  dy.require_same_shape(cache.x, "s6_backward upstream");
  const NdArray<T>& x = cache.x;
  const std::size_t steps = x.dim(0), channels = x.dim(1), state = params.state_dim();
  const NdArray<T> a = params.a();

  NdArray<T> ddelta({steps, channels});
  NdArray<T> db({steps, state});
  NdArray<T> dc({steps, state});
  NdArray<T> da({channels, state});
  std::vector<T> carry(channels * state, T{0});  // dh_{t+1} * Abar_{t+1}

  for (std::size_t tt = steps; tt-- > 0;) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T g = dy(tt, c);
      const T xv = x(tt, c);
      const T dt = cache.delta(tt, c);
      T dx_acc{0};
      T ddt{0};
      for (std::size_t n = 0; n < state; ++n) {
        const std::size_t k = c * state + n;
        const T h = cache.h(tt, c, n);
        const T ab = cache.abar(tt, c, n);
        const T hprev = tt > 0 ? cache.h(tt - 1, c, n) : T{0};
        const T dh = carry[k] + cache.cmat(tt, n) * g;
        dc(tt, n) += g * h;
        const T dab = dh * hprev;
        // Bu = delta * B * x
        dx_acc += dh * dt * cache.bmat(tt, n);
        ddt += dh * cache.bmat(tt, n) * xv + dab * ab * a(c, n);
        db(tt, n) += dh * dt * xv;
        da(c, n) += dab * ab * dt;
        carry[k] = dh * ab;
      }
      dx(tt, c) += dx_acc + params.d[c] * g;
      grads.d[c] += g * xv;
      ddelta(tt, c) = ddt;
    }
  }

  NdArray<T> draw({steps, channels});
  for (std::size_t i = 0; i < draw.size(); ++i) draw[i] = ddelta[i] * ops::sigmoid(cache.raw[i]);
  ops::linear_backward(draw, x, params.delta_w, &dx, &grads.delta_w, &grads.delta_b);
  ops::linear_backward(db, x, params.b_proj, &dx, &grads.b_proj, static_cast<NdArray<T>*>(nullptr));
  ops::linear_backward(dc, x, params.c_proj, &dx, &grads.c_proj, static_cast<NdArray<T>*>(nullptr));
  for (std::size_t i = 0; i < da.size(); ++i) grads.a_log[i] += da[i] * a[i];
}

#define TEXTMAMBA_INSTANTIATE(T)                                                               \
  template struct S6Params<T>;                                                                  \
  template std::pair<NdArray<T>, NdArray<T>> discretize(const NdArray<T>&, const NdArray<T>&,   \
                                                        const NdArray<T>&);                     \
  template NdArray<T> scan_discretized(const NdArray<T>&, const NdArray<T>&, const NdArray<T>&, \
                                       const NdArray<T>&, const NdArray<T>&, ScanKernel,        \
                                       NdArray<T>*);                                            \
  template NdArray<T> selective_scan_sequential(const NdArray<T>&, const S6Params<T>&,          \
                                                S6Cache<T>*);                                   \
  template NdArray<T> selective_scan_parallel(const NdArray<T>&, const S6Params<T>&,            \
                                              S6Cache<T>*);                                     \
  template NdArray<T> selective_scan(const NdArray<T>&, const S6Params<T>&, ScanKernel,         \
                                     S6Cache<T>*);                                              \
  template void s6_backward(const NdArray<T>&, const S6Params<T>&, const S6Cache<T>&,           \
                            S6Params<T>&, NdArray<T>&);

TEXTMAMBA_INSTANTIATE(float)
TEXTMAMBA_INSTANTIATE(double)
#undef TEXTMAMBA_INSTANTIATE

}  // namespace textmamba
