#pragma once

#include <vector>

#include "mgml/random.hpp"
#include "mgml/tensor.hpp"

namespace mgml::test {

template <class T = double>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(uniform(rng, lo, hi));
  return Tensor<T>(std::move(shape), std::move(v));
}

/// Owning copy of a tensor's values, safe to iterate when `t` is a temporary.
template <class T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace mgml::test
