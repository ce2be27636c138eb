#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "textmamba/ndarray.hpp"

namespace textmamba {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::map<std::string, double> per_parameter_errors;
  double epsilon = 0.0;
  std::size_t scalars_checked = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;  // flat index inside worst_parameter
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t refined_slots = 0;  // scalars re-differenced with a smaller step
  bool all_finite = true;

  bool passed(double tol) const { return all_finite && max_relative_error <= tol; }
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Kink guard: a step is trusted when the forward and backward one-sided
/// slopes agree and the central differences at h and h/2 agree, both within
/// `kink_tol` (relative, floored at `slope_floor`) or within the roundoff
/// bound `roundoff * DBL_EPSILON * max(1, |f|) / h`. Otherwise the step straddles
/// a non-smooth point (ReLU, |x|, bilinear cell edge, Top-k swap) and is
/// divided by 8, at most `max_refinements` times. The decision never looks at
/// the analytic value.
struct KinkGuard {
  int max_refinements = 0;
  double kink_tol = 1e-3;
  double slope_floor = 1e-6;
  double roundoff = 1e3;
};

/// Central-difference oracle. Perturbs every scalar reachable through
/// `params.visit`, evaluates `loss`, and compares against the matching scalar of
/// `analytic` (same struct layout). Parameters are perturbed on per-thread
/// copies, so `loss` must be a pure function of its argument.
template <typename P>
GradCheckReport finite_diff_grad(const std::function<double(const P&)>& loss, const P& params,
                                 const P& analytic, double eps = 1e-4, KinkGuard guard = {}) {
  struct Slot {
    std::size_t tensor;
    std::size_t index;
  };
  std::vector<std::string> names;
  std::vector<std::vector<double>> expected;
  std::vector<Slot> slots;
  analytic.visit([&](const std::string& name, const auto& t) {
    names.push_back(name);
    std::vector<double> values(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      values[i] = static_cast<double>(t[i]);
      slots.push_back({names.size() - 1, i});
    }
    expected.push_back(std::move(values));
  });

  std::vector<double> errors(slots.size(), 0.0);
  std::vector<double> numerics(slots.size(), 0.0);
  std::vector<char> finite(slots.size(), 1);
  std::vector<char> refined(slots.size(), 0);
  const double f0 = guard.max_refinements > 0 ? loss(params) : 0.0;
  const auto total = static_cast<std::ptrdiff_t>(slots.size());

#pragma omp parallel
  {
    P local = params;
    std::vector<void*> tensors;
    local.visit([&](const std::string&, auto& t) { tensors.push_back(&t); });
#pragma omp for schedule(dynamic, 16)
    for (std::ptrdiff_t s = 0; s < total; ++s) {
      const Slot slot = slots[static_cast<std::size_t>(s)];
      auto& t = *static_cast<NdArray<double>*>(tensors[slot.tensor]);
      const double saved = t[slot.index];
      double h = eps, numeric = 0.0;
      auto central = [&](double step, double& up, double& down) {
        t[slot.index] = saved + step;
        up = loss(local);
        t[slot.index] = saved - step;
        down = loss(local);
        t[slot.index] = saved;
        return (up - down) / (2.0 * step);
      };
      for (int level = 0;; ++level) {
        double up, down, up2, down2;
        numeric = central(h, up, down);
        if (level >= guard.max_refinements) break;
        const double half = central(h / 2.0, up2, down2);
        const double sp = (up - f0) / h, sm = (f0 - down) / h;
        const double scale = std::max({std::abs(sp), std::abs(sm), guard.slope_floor});
        const double noise = guard.roundoff * std::numeric_limits<double>::epsilon() *
                             std::max(1.0, std::abs(f0)) / h;
        const double allowed = std::max(guard.kink_tol * scale, noise);
        if (std::abs(sp - sm) <= allowed && std::abs(numeric - half) <= allowed) {
          break;
        }
        refined[static_cast<std::size_t>(s)] = 1;
        h /= 8.0;
      }
      numerics[static_cast<std::size_t>(s)] = numeric;
      if (!std::isfinite(numeric)) {
        finite[static_cast<std::size_t>(s)] = 0;
        errors[static_cast<std::size_t>(s)] = INFINITY;
        continue;
      }
      errors[static_cast<std::size_t>(s)] =
          relative_error(expected[slot.tensor][slot.index], numeric);
    }
  }

  GradCheckReport report;
  report.epsilon = eps;
  report.scalars_checked = slots.size();
  for (const auto& name : names) report.per_parameter_errors[name] = 0.0;
  for (std::size_t s = 0; s < slots.size(); ++s) {
    double& worst = report.per_parameter_errors[names[slots[s].tensor]];
    worst = std::max(worst, errors[s]);
    if (!finite[s]) report.all_finite = false;
    if (refined[s]) ++report.refined_slots;
    if (errors[s] > report.max_relative_error || s == 0) {
      report.max_relative_error = errors[s];
      report.worst_parameter = names[slots[s].tensor];
      report.worst_index = slots[s].index;
      report.worst_analytic = expected[slots[s].tensor][slots[s].index];
      report.worst_numeric = numerics[s];
    }
  }
  return report;
}

}  // namespace textmamba
