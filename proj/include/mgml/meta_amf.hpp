#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mgml/modality.hpp"
#include "mgml/ops.hpp"
#include "mgml/params.hpp"

namespace mgml {

struct Range {
  double lo, hi;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

struct MetaNetConfig {
  std::size_t hidden = 16;
  Range beta{1.0, 100.0};
  Range alpha{1.0, 100.0};
  Range w_f{0.0, 1.0};
  Range t{0.5, 5.0};
  /// Divide logits by t1 before Smooth Max and by t2 before Smooth Min.
  bool apply_temperatures = false;

  void validate() const {
    for (const Range* r : {&beta, &alpha, &w_f, &t}) {
      if (!(r->lo < r->hi)) throw Error("meta config: every lower bound must be below its upper bound");
    }
    if (!(beta.lo > 0 && alpha.lo > 0)) throw Error("meta config: beta and alpha lower bounds must be positive");
    if (!(t.lo > 0)) throw Error("meta config: temperature lower bound must be positive");
    if (hidden == 0) throw Error("meta config: hidden width must be positive");
  }
};

/// The five meta-parameters as scalar tensors (differentiable in adaptive mode).
template <std::floating_point T>
struct MetaParams {
  Tensor<T> t1, t2, w_f, beta, alpha;

  struct Values {
    double t1, t2, w_f, beta, alpha;
  };
  Values values() const { return {t1.item(), t2.item(), w_f.item(), beta.item(), alpha.item()}; }

  static MetaParams constant(double t1, double t2, double w_f, double beta, double alpha) {
    auto s = [](double v) { return Tensor<T>::scalar(static_cast<T>(v)); };
    return {s(t1), s(t2), s(w_f), s(beta), s(alpha)};
  }
  /// Fixed-parameter soft-label distillation setting.
  static MetaParams fpsld() { return constant(1.0, 1.0, 0.5, 100.0, 100.0); }
};

/// σ(p)·(hi − lo) + lo
template <std::floating_point T>
Tensor<T> map_range(const Tensor<T>& raw, Range r) {
  return ops::scale(ops::sigmoid(raw), static_cast<T>(r.hi - r.lo), static_cast<T>(r.lo));
}

/// z: per-modality spatial means of each class probability, concatenated to [1, M·C].
template <std::floating_point T>
Tensor<T> meta_pool(const std::vector<Tensor<T>>& probs) {
  if (probs.empty()) throw Error("meta_pool: no probability maps");
  std::vector<Tensor<T>> pooled;
  for (const auto& p : probs) {
    if (p.shape() != probs[0].shape()) {
      throw ShapeError("meta_pool: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(probs[0].shape()));
    }
    pooled.push_back(ops::global_avg_pool(p));
  }
  auto z = ops::concat(pooled, 0);
  return ops::reshape(z, Shape{1, z.numel()});
}

/// Two affine layers with a relu between, five range-mapped heads
/// (t1, t2, w_f, beta, alpha).
template <std::floating_point T>
class MetaNetwork {
 public:
  static constexpr std::size_t kHeads = 5;

  MetaNetwork(std::size_t input_width, MetaNetConfig cfg = {}, std::uint64_t seed = 1024)
      : cfg_(cfg), input_width_(input_width) {
    cfg_.validate();
    if (input_width == 0) throw Error("meta network: input width must be positive");
    Rng rng(mix_seed(seed, 0x3E7A));
    params_.add("meta.fc1.weight", kaiming_normal<T>({input_width, cfg_.hidden}, input_width, rng));
    params_.add("meta.fc1.bias", Tensor<T>(Shape{1, cfg_.hidden}));
    params_.add("meta.fc2.weight", kaiming_normal<T>({cfg_.hidden, kHeads}, cfg_.hidden, rng));
    params_.add("meta.fc2.bias", Tensor<T>(Shape{1, kHeads}));
  }

  const MetaNetConfig& config() const { return cfg_; }
  std::size_t input_width() const { return input_width_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  std::size_t param_count() const { return params_.count(); }

  /// Unmapped head activations [1, 5].
  Tensor<T> raw_heads(Binder<T>& b, const Tensor<T>& z) const {
    if (z.numel() != input_width_) {
      throw ShapeError("meta_forward: expected z of length " + std::to_string(input_width_) + ", got " +
                       shape_str(z.shape()));
    }
    const auto zz = ops::reshape(z, Shape{1, input_width_});
    const auto h = ops::relu(ops::add(ops::matmul(zz, b(*params_.find("meta.fc1.weight"))),
                                      b(*params_.find("meta.fc1.bias"))));
    return ops::add(ops::matmul(h, b(*params_.find("meta.fc2.weight"))), b(*params_.find("meta.fc2.bias")));
  }

  MetaParams<T> map_heads(const Tensor<T>& raw) const {
    auto head = [&](std::size_t k, Range r) { return ops::reshape(map_range(ops::slice(raw, 1, k, k + 1), r), Shape{}); };
    return {head(0, cfg_.t), head(1, cfg_.t), head(2, cfg_.w_f), head(3, cfg_.beta), head(4, cfg_.alpha)};
  }

  MetaParams<T> forward(Binder<T>& b, const Tensor<T>& z) const { return map_heads(raw_heads(b, z)); }

 private:
  MetaNetConfig cfg_;
  std::size_t input_width_;
  ParameterSet<T> params_;
};

/// H = (1/β) ln Σ_i exp(β L_i) over axis 0 of stacked logits [M, ...].
template <std::floating_point T>
Tensor<T> smooth_max(const Tensor<T>& stacked, const Tensor<T>& beta) {
  if (!(beta.item() > 0)) throw DomainError("smooth_max: beta must be positive");
  return ops::log_sum_exp(stacked, 0, beta);
}

/// C = −(1/α) ln Σ_i exp(−α L_i) over axis 0.
template <std::floating_point T>
Tensor<T> smooth_min(const Tensor<T>& stacked, const Tensor<T>& alpha) {
  if (!(alpha.item() > 0)) throw DomainError("smooth_min: alpha must be positive");
  return ops::negate(ops::log_sum_exp(ops::negate(stacked), 0, alpha));
}

/// S = w_f·H + (1 − w_f)·C, evaluated as C + w_f·(H − C) so that H == C
/// gives C exactly.
template <std::floating_point T>
Tensor<T> weighted_fuse(const Tensor<T>& h, const Tensor<T>& c, const Tensor<T>& w_f) {
  const double w = w_f.item();
  if (!(w >= 0.0 && w <= 1.0)) throw DomainError("weighted_fuse: w_f outside [0, 1]");
  if (h.shape() != c.shape()) throw ShapeError("weighted_fuse: shape mismatch " + shape_str(h.shape()) + " vs " + shape_str(c.shape()));
  return ops::add(c, ops::mul(w_f, ops::sub(h, c)));
}

template <std::floating_point T>
struct MetaAmfResult {
  Tensor<T> s_meta;
  MetaParams<T> params;
  Tensor<T> z;
};

/// Soft label from per-modality logits. `probs` holds softmax(L_i) for all M
/// modalities (absent ones from zero-filled inputs) and feeds the meta network;
/// fusion runs over present modalities only. With `fixed` set the meta network
/// is bypassed and the given constants are used.
template <std::floating_point T>
MetaAmfResult<T> meta_amf(Binder<T>& b, const MetaNetwork<T>* net, const std::vector<Tensor<T>>& logits,
                          const std::vector<Tensor<T>>& probs, ModalitySet present,
                          const std::optional<MetaParams<T>>& fixed = std::nullopt) {
  if (present.empty()) throw Error("meta_amf: no modality present");
  MetaAmfResult<T> out;
  bool temperatures = false;
  if (fixed) {
    out.params = *fixed;
  } else {
    if (!net) throw Error("meta_amf: adaptive mode needs a meta network");
    out.z = meta_pool(probs);
    out.params = net->forward(b, out.z);
    temperatures = net->config().apply_temperatures;
  }
  std::vector<Tensor<T>> sel;
  for (auto i : present.indices()) sel.push_back(logits.at(i));
  const auto stacked = ops::stack(sel, 0);
  const auto hi_in = temperatures ? ops::div(stacked, out.params.t1) : stacked;
  const auto lo_in = temperatures ? ops::div(stacked, out.params.t2) : stacked;
  const auto h = smooth_max(hi_in, out.params.beta);
  const auto c = smooth_min(lo_in, out.params.alpha);
  out.s_meta = weighted_fuse(h, c, out.params.w_f);
  return out;
}

}  // namespace mgml
