#pragma once

#include <cmath>
#include <vector>

#include "mgml/modality.hpp"
#include "mgml/ops.hpp"
#include "mgml/random.hpp"

namespace mgml {

struct MaskPolicy {
  double base_ratio = 0.3;           // ρ₀
  double confidence_exponent = 1.0;

  void validate() const {
    if (!(base_ratio >= 0.0 && base_ratio < 1.0)) throw Error("mask policy: base_ratio must lie in [0, 1)");
    if (!(confidence_exponent >= 0.0)) throw Error("mask policy: confidence_exponent must be nonnegative");
  }
};

/// Binary keep mask over voxels; 0 marks a dropped voxel.
struct VoxelMask {
  Shape shape;                      // [D,H,W]
  std::vector<std::uint8_t> keep;
  std::size_t kept = 0;
  double kept_fraction = 1.0;
  std::uint64_t seed = 0;

  static VoxelMask all(Shape shape) {
    VoxelMask m;
    m.shape = std::move(shape);
    m.keep.assign(numel_of(m.shape), 1);
    m.kept = m.keep.size();
    return m;
  }

  template <std::floating_point T>
  Tensor<T> as_tensor() const {
    std::vector<T> v(keep.begin(), keep.end());
    return Tensor<T>(shape, std::move(v));
  }
};

/// Drop probability p(v) = ρ₀·(1 − w_f)·(1 − conf(v))^exponent, conf(v) being
/// the largest class probability of softmax(S_meta) at v.
template <std::floating_point T>
VoxelMask gen_mask(const Tensor<T>& s_meta, double w_f, const MaskPolicy& policy, std::uint64_t seed) {
  policy.validate();
  if (!(w_f >= 0.0 && w_f <= 1.0)) throw DomainError("gen_mask: w_f outside [0, 1]");
  if (s_meta.rank() < 2) throw ShapeError("gen_mask: expected [C, spatial...], got " + shape_str(s_meta.shape()));
  const auto probs = ops::softmax(s_meta.detach(), 0);
  const std::size_t c = s_meta.extent(0), v = s_meta.numel() / c;
  VoxelMask m;
  m.shape.assign(s_meta.shape().begin() + 1, s_meta.shape().end());
  m.keep.assign(v, 1);
  m.seed = seed;
  Rng rng(seed);
  const double factor = policy.base_ratio * (1.0 - w_f);
  const T* pv = probs.raw();
  for (std::size_t i = 0; i < v; ++i) {
    T conf = 0;
    for (std::size_t k = 0; k < c; ++k) conf = std::max(conf, pv[k * v + i]);
    const double p = std::clamp(factor * std::pow(1.0 - static_cast<double>(conf), policy.confidence_exponent), 0.0, 1.0);
    const double u = uniform01(rng);
    if (u < p) m.keep[i] = 0;
  }
  for (auto k : m.keep) m.kept += k;
  m.kept_fraction = static_cast<double>(m.kept) / static_cast<double>(v);
  return m;
}

enum class DistillDirection { printed, standard };

/// Class weights w_c = 1 − Σ_kept p̃_c / Σ_j Σ_kept p̃_j, as a [C] tensor.
template <std::floating_point T>
Tensor<T> wce_class_weights(const Tensor<T>& p_masked_flat) {
  const auto mass = ops::reduce_sum(p_masked_flat, 1);
  return ops::scale(ops::div(mass, ops::reduce_sum(mass)), T{-1}, T{1});
}

/// Masked weighted cross-entropy between temperature-softened prediction and
/// soft label. Printed direction: −(1/|kept|) Σ_c w_c Σ_v p̃_c ln S̃_c; standard
/// direction swaps the roles inside the sum (−S̃ ln p̃) with the same w_c.
template <std::floating_point T>
Tensor<T> wce(const Tensor<T>& pred_logits, const Tensor<T>& soft_logits, const VoxelMask& mask, T tau,
              DistillDirection dir = DistillDirection::printed) {
  if (!(tau > 0)) throw DomainError("wce: tau must be positive");
  if (pred_logits.shape() != soft_logits.shape()) {
    throw ShapeError("wce: shape mismatch " + shape_str(pred_logits.shape()) + " vs " + shape_str(soft_logits.shape()));
  }
  const std::size_t c = pred_logits.extent(0), v = pred_logits.numel() / c;
  if (mask.keep.size() != v) throw ShapeError("wce: mask does not match the spatial extent");
  if (mask.kept == 0) throw DomainError("wce: every voxel is masked out");
  const Shape flat{c, v};
  const auto mt = mask.as_tensor<T>().reshaped(Shape{v});
  auto masked = [&](const Tensor<T>& x) { return ops::elementwise_mask(ops::reshape(x, flat), mt); };

  const auto p = ops::softmax(pred_logits, 0, tau);
  const auto w = wce_class_weights(masked(p));
  Tensor<T> cross;
  if (dir == DistillDirection::printed) {
    cross = masked(ops::mul(p, ops::log_softmax(soft_logits, 0, tau)));
  } else {
    cross = masked(ops::mul(ops::softmax(soft_logits, 0, tau), ops::log_softmax(pred_logits, 0, tau)));
  }
  const auto per_class = ops::reduce_sum(cross, 1);
  return ops::scale(ops::reduce_sum(ops::mul(w, per_class)), T{-1} / static_cast<T>(mask.kept));
}

/// L_SL = mean over present modalities of wce(L_i, S_meta). One mask serves
/// every term; `trace`, when given, receives the mask address used per term.
template <std::floating_point T>
Tensor<T> soft_label_loss(const std::vector<Tensor<T>>& logits, ModalitySet present, const Tensor<T>& s_meta,
                          const VoxelMask& mask, T tau, DistillDirection dir = DistillDirection::printed,
                          std::vector<const VoxelMask*>* trace = nullptr) {
  if (present.empty()) throw Error("soft_label_loss: no modality present");
  Tensor<T> sum;
  bool first = true;
  for (auto i : present.indices()) {
    if (trace) trace->push_back(&mask);
    auto term = wce(logits.at(i), s_meta, mask, tau, dir);
    sum = first ? term : ops::add(sum, term);
    first = false;
  }
  return ops::scale(sum, T{1} / static_cast<T>(present.count()));
}

}  // namespace mgml
