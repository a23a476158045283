#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "mgml/backbone.hpp"
#include "mgml/consistency.hpp"
#include "mgml/distill.hpp"
#include "mgml/gradcheck.hpp"
#include "mgml/meta_amf.hpp"
#include "mgml/train.hpp"

namespace mgml {

/// Differentiable operations covered by the gradient suite.
inline const std::vector<std::string>& grad_suite_modules() {
  static const std::vector<std::string> names{"smooth_max",      "smooth_min",       "weighted_fuse",
                                              "meta_forward",    "wce",              "soft_label_loss",
                                              "consistency_loss", "seg_loss",        "backbone"};
  return names;
}

struct GradSuiteEntry {
  std::string module;
  std::size_t points = 0;
  double max_rel_error = 0;
  double seconds = 0;
};

namespace detail {

using TD = Tensor<double>;

inline TD rand_tensor(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return TD(std::move(shape), std::move(v));
}

inline TD probe_dot(const TD& x, const TD& probe) { return ops::reduce_sum(ops::mul(x, probe)); }

inline VoxelMask rand_mask(Rng& rng, const Shape& spatial, double keep_p) {
  auto m = VoxelMask::all(spatial);
  m.kept = 0;
  for (auto& k : m.keep) m.kept += (k = bernoulli(rng, keep_p) ? 1 : 0);
  if (m.kept == 0) m.keep[0] = 1, m.kept = 1;
  m.kept_fraction = static_cast<double>(m.kept) / static_cast<double>(m.keep.size());
  return m;
}

inline ModalitySet rand_subset(Rng& rng) { return ModalitySet(static_cast<std::uint32_t>(1 + uniform_index(rng, 15)), 4); }

/// Points `copy`'s parameters at `in` (from `offset`), binding them as leaves
/// when the inputs live on a tape.
template <class Module>
Binder<double> bind_params(Module& copy, const std::vector<TD>& in, std::size_t offset) {
  Tape<double>* tape = in[offset].tape();
  Binder<double> b = tape ? Binder<double>(*tape) : Binder<double>();
  std::size_t k = offset;
  for (auto& p : copy.params()) {
    p.value = in[k];
    if (tape) b.bind(p, in[k]);
    ++k;
  }
  return b;
}

inline double grad_point(const std::string& module, std::uint64_t seed) {
  Rng rng(mix_seed(0x6772616473756974ULL, seed));
  constexpr double eps = 1e-6;
  if (module == "smooth_max" || module == "smooth_min") {
    const std::size_t m = 1 + uniform_index(rng, 4);
    const auto l = rand_tensor(rng, {m, 5}, -2, 2);
    const auto scale = TD::scalar(uniform(rng, 1, 10));
    const auto probe = rand_tensor(rng, {5}, -1, 1);
    const bool is_max = module == "smooth_max";
    return grad_check(
        [&](const std::vector<TD>& in) {
          return probe_dot(is_max ? smooth_max(in[0], in[1]) : smooth_min(in[0], in[1]), probe);
        },
        {l, scale}, eps);
  }
  if (module == "weighted_fuse") {
    const auto h = rand_tensor(rng, {4, 2, 2, 2}, 0, 3), c = rand_tensor(rng, {4, 2, 2, 2}, -3, 0);
    const auto w = TD::scalar(uniform(rng, 0.05, 0.95));
    const auto probe = rand_tensor(rng, {4, 2, 2, 2}, -1, 1);
    return grad_check([&](const std::vector<TD>& in) { return probe_dot(weighted_fuse(in[0], in[1], in[2]), probe); },
                      {h, c, w}, eps);
  }
  if (module == "meta_forward") {
    const MetaNetwork<double> net(16, {}, seed);
    std::vector<TD> pts{rand_tensor(rng, {1, 16}, 0, 1)};
    for (const auto& p : net.params()) pts.push_back(p.value);
    const auto probe = rand_tensor(rng, {5}, -1, 1);
    return grad_check(
        [&](const std::vector<TD>& in) {
          MetaNetwork<double> copy = net;
          auto b = bind_params(copy, in, 1);
          const auto mp = copy.forward(b, in[0]);
          return probe_dot(ops::stack(std::vector<TD>{mp.t1, mp.t2, mp.w_f, mp.beta, mp.alpha}, 0), probe);
        },
        pts, eps);
  }
  if (module == "wce") {
    const auto pred = rand_tensor(rng, {4, 3, 3, 3}, -2, 2), soft = rand_tensor(rng, {4, 3, 3, 3}, -2, 2);
    const auto mask = rand_mask(rng, {3, 3, 3}, 0.7);
    const double tau = uniform(rng, 1, 6);
    const auto dir = seed % 2 ? DistillDirection::standard : DistillDirection::printed;
    return grad_check([&](const std::vector<TD>& in) { return wce(in[0], in[1], mask, tau, dir); }, {pred, soft}, eps);
  }
  if (module == "soft_label_loss") {
    // prediction logits plus the meta network that builds the soft label
    const MetaNetwork<double> net(16, {}, seed);
    std::vector<TD> logits;
    for (int i = 0; i < 4; ++i) logits.push_back(rand_tensor(rng, {4, 3, 3, 3}, -2, 2));
    const auto present = rand_subset(rng);
    const auto mask = rand_mask(rng, {3, 3, 3}, 0.7);
    const double tau = uniform(rng, 1, 6);
    std::vector<TD> pts = logits;
    for (const auto& p : net.params()) pts.push_back(p.value);
    return grad_check(
        [&](const std::vector<TD>& in) {
          MetaNetwork<double> copy = net;
          auto b = bind_params(copy, in, 4);
          std::vector<TD> l(in.begin(), in.begin() + 4), probs;
          for (const auto& x : l) probs.push_back(ops::softmax(x, 0));
          const auto amf = meta_amf(b, &copy, l, probs, present);
          return soft_label_loss(l, present, amf.s_meta, mask, tau);
        },
        pts, eps, 24, seed);
  }
  if (module == "consistency_loss") {
    const auto ys = rand_tensor(rng, {4, 3, 3, 3}, -3, 3), yt = rand_tensor(rng, {4, 3, 3, 3}, -3, 3);
    const double tau = uniform(rng, 1, 8);
    return grad_check([&](const std::vector<TD>& in) { return consistency_loss(in[0], yt, tau); }, {ys}, eps);
  }
  if (module == "seg_loss") {
    std::vector<TD> pts;
    for (int i = 0; i < 5; ++i) pts.push_back(rand_tensor(rng, {4, 2, 2, 2}, -2, 2));
    std::vector<std::uint8_t> labels(8);
    for (auto& l : labels) l = static_cast<std::uint8_t>(uniform_index(rng, 4));
    const auto target = one_hot<double>(labels, 4, 2);
    const auto present = rand_subset(rng);
    return grad_check(
        [&](const std::vector<TD>& in) {
          return seg_loss(in[0], std::vector<TD>(in.begin() + 1, in.end()), present, target);
        },
        pts, eps);
  }
  if (module == "backbone") {
    // every parameter tensor of a 6³ network, 3 random coordinates each
    BackboneConfig bc;
    bc.base_channels = 2;
    bc.depth = 2;
    bc.input_extent = 6;
    Backbone<double> net(bc, seed);
    for (auto& p : net.params())
      if (p.name.ends_with(".bias") || p.name == "fusion.gate")
        for (double& v : p.value.mutable_data()) v = uniform(rng, -0.2, 0.2);
    std::vector<TD> vols;
    for (int i = 0; i < 4; ++i) vols.push_back(rand_tensor(rng, {1, 6, 6, 6}, 0, 1));
    const auto present = rand_subset(rng);
    const auto probe = rand_tensor(rng, {4, 6, 6, 6}, -1, 1);
    std::vector<TD> pts;
    for (const auto& p : net.params()) pts.push_back(p.value);
    return grad_check(
        [&](const std::vector<TD>& in) {
          Backbone<double> copy = net;
          auto b = bind_params(copy, in, 0);
          return probe_dot(copy.forward(b, vols, present).fused, probe);
        },
        pts, eps, 3, seed);
  }
  throw Error("gradcheck: unknown module '" + module + "'");
}

}  // namespace detail

/// Autodiff against central differences in double precision, `points`
/// random points per module.
inline GradSuiteEntry run_grad_check(const std::string& module, std::size_t points = 20) {
  GradSuiteEntry e{module, points, 0, 0};
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < points; ++i) e.max_rel_error = std::max(e.max_rel_error, detail::grad_point(module, i));
  e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return e;
}

}  // namespace mgml
