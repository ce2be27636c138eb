#pragma once

// Parameter structs expose `visit(f)` calling f(name, tensor) for each learnable
// tensor in a fixed order. Counting, serialisation, zeroing gradients and the
// finite-difference oracle are all written once against that protocol.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "textmamba/ndarray.hpp"

namespace textmamba {

/// Wraps a visitor so that nested structs report dotted names.
template <typename F>
auto prefixed(const std::string& prefix, F& f) {
  return [prefix, &f](const std::string& name, auto& tensor) { f(prefix + "." + name, tensor); };
}

template <typename P>
P zeros_like_params(P p) {
  p.visit([](const std::string&, auto& t) { t.fill(0); });
  return p;
}

template <typename P>
std::size_t count_params(const P& p) {
  std::size_t n = 0;
  p.visit([&n](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

/// Loose bag of named tensors; handy for ad-hoc gradient checks.
template <typename T>
struct NamedTensors {
  std::vector<std::pair<std::string, NdArray<T>>> items;

  NdArray<T>& add(std::string name, NdArray<T> t) {
    items.emplace_back(std::move(name), std::move(t));
    return items.back().second;
  }
  NdArray<T>& operator[](std::size_t i) { return items[i].second; }
  const NdArray<T>& operator[](std::size_t i) const { return items[i].second; }

  template <typename F>
  void visit(F&& f) {
    for (auto& [name, t] : items) f(name, t);
  }
  template <typename F>
  void visit(F&& f) const {
    for (const auto& [name, t] : items) f(name, t);
  }
};

}  // namespace textmamba
