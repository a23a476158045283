#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "mgml/random.hpp"
#include "mgml/tensor.hpp"

namespace mgml {

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Largest |analytic − central difference| / max(1, |analytic|) over the
/// checked coordinates of every input. With `max_coords` > 0 only that many
/// coordinates per input are checked, drawn from `seed`.
inline double grad_check(const GradFn& f, const std::vector<Tensor<double>>& points, double eps,
                         std::size_t max_coords = 0, std::uint64_t seed = 0) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw DomainError("grad_check: eps must lie in [1e-6, 1e-3]");

  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Tensor<double>> leaves;
    for (const auto& p : points) leaves.push_back(tape.leaf(p.detach()));
    const Tensor<double> loss = f(leaves);
    if (loss.numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
    if (loss.requires_grad()) {
      const auto grads = tape.backward(loss);
      for (const auto& l : leaves) analytic.push_back(grads.of(l));
    } else {
      for (const auto& p : points) analytic.emplace_back(p.shape());
    }
  }

  auto eval = [&](std::vector<Tensor<double>>& pts) {
    const double v = f(pts).item();
    if (!std::isfinite(v)) throw DomainError("grad_check: non-finite function value at a perturbed point");
    return v;
  };

  Rng rng(seed);
  double worst = 0;
  std::vector<Tensor<double>> pts;
  for (const auto& p : points) pts.push_back(p.detach().clone());
  for (std::size_t k = 0; k < pts.size(); ++k) {
    std::vector<std::size_t> coords(pts[k].numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords > 0 && coords.size() > max_coords) {
      for (std::size_t i = 0; i < max_coords; ++i) {
        std::swap(coords[i], coords[i + uniform_index(rng, coords.size() - i)]);
      }
      coords.resize(max_coords);
    }
    for (auto i : coords) {
      const double orig = pts[k][i];
      pts[k].mutable_data()[i] = orig + eps;
      const double up = eval(pts);
      pts[k].mutable_data()[i] = orig - eps;
      const double down = eval(pts);
      pts[k].mutable_data()[i] = orig;
      const double fd = (up - down) / (2 * eps);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - fd) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& point,
                         double eps) {
  return grad_check([&](const std::vector<Tensor<double>>& in) { return f(in[0]); }, {point}, eps);
}

}  // namespace mgml
