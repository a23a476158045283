#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mgml/distill.hpp"
#include "mgml/gradcheck.hpp"
#include "mgml/meta_amf.hpp"
#include "test_util.hpp"

namespace mgml {
namespace {

using test::random_tensor;
using TD = Tensor<double>;

VoxelMask random_mask(Rng& rng, Shape shape, double keep_p) {
  auto m = VoxelMask::all(std::move(shape));
  m.kept = 0;
  for (auto& k : m.keep) {
    k = bernoulli(rng, keep_p) ? 1 : 0;
    m.kept += k;
  }
  if (m.kept == 0) m.keep[0] = 1, m.kept = 1;
  m.kept_fraction = static_cast<double>(m.kept) / static_cast<double>(m.keep.size());
  return m;
}

// Straight-loop evaluation of the masked weighted cross-entropy in long double.
long double ref_wce(const TD& pred, const TD& soft, const VoxelMask& mask, double tau, bool printed) {
  const std::size_t c = pred.extent(0), v = pred.numel() / c;
  auto sm = [&](const TD& x, std::size_t i, std::size_t k) {
    long double mx = -1e300L, z = 0;
    for (std::size_t j = 0; j < c; ++j) mx = std::max<long double>(mx, x[j * v + i] / tau);
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j * v + i] / tau - mx);
    return std::exp(x[k * v + i] / tau - mx) / z;
  };
  std::vector<long double> mass(c, 0);
  long double total = 0;
  for (std::size_t i = 0; i < v; ++i)
    if (mask.keep[i])
      for (std::size_t k = 0; k < c; ++k) mass[k] += sm(pred, i, k), total += sm(pred, i, k);
  long double loss = 0;
  for (std::size_t k = 0; k < c; ++k) {
    const long double w = 1 - mass[k] / total;
    long double acc = 0;
    for (std::size_t i = 0; i < v; ++i) {
      if (!mask.keep[i]) continue;
      acc += printed ? sm(pred, i, k) * std::log(sm(soft, i, k)) : sm(soft, i, k) * std::log(sm(pred, i, k));
    }
    loss += w * acc;
  }
  return -loss / static_cast<long double>(mask.kept);
}

TEST(GenMask, FullConfidenceWeightKeepsEverything) {
  Rng rng(1);
  const auto s = random_tensor(rng, {4, 8, 8, 8}, -2, 2);
  const auto m = gen_mask(s, 1.0, MaskPolicy{0.3, 1.0}, 5);
  EXPECT_EQ(m.kept, 512u);
  EXPECT_EQ(m.kept_fraction, 1.0);
}

TEST(GenMask, ZeroBaseRatioKeepsEverything) {
  Rng rng(2);
  const auto s = random_tensor(rng, {4, 8, 8, 8}, -2, 2);
  const auto m = gen_mask(s, 0.0, MaskPolicy{0.0, 1.0}, 6);
  EXPECT_EQ(m.kept, 512u);
}

TEST(GenMask, UniformConfidenceDropRate) {
  const TD s(Shape{4, 32, 32, 32});
  const auto m = gen_mask(s, 0.0, MaskPolicy{0.3, 1.0}, 1024);
  EXPECT_NEAR(1.0 - m.kept_fraction, 0.3 * 0.75, 0.01);
  std::size_t ones = 0;
  for (auto k : m.keep) ones += k;
  EXPECT_EQ(ones, m.kept);
  EXPECT_EQ(m.kept_fraction, static_cast<double>(ones) / m.keep.size());
  EXPECT_EQ(m.shape, (Shape{32, 32, 32}));
}

TEST(GenMask, LowConfidenceVoxelsDropMoreOften) {
  // half the volume confident, half uniform
  TD s(Shape{4, 16, 16, 16});
  const std::size_t v = 16 * 16 * 16;
  auto d = s.mutable_data();
  for (std::size_t i = 0; i < v / 2; ++i) d[i] = 20.0;
  const auto m = gen_mask(s, 0.2, MaskPolicy{0.9, 1.0}, 3);
  std::size_t drop_conf = 0, drop_unc = 0;
  for (std::size_t i = 0; i < v; ++i) (i < v / 2 ? drop_conf : drop_unc) += m.keep[i] == 0;
  EXPECT_EQ(drop_conf, 0u);
  EXPECT_GT(drop_unc, 0u);
}

TEST(GenMask, SeedDeterminesMaskAndResamplingDiffers) {
  const TD s(Shape{4, 8, 8, 8});
  const auto a = gen_mask(s, 0.0, {}, 11), b = gen_mask(s, 0.0, {}, 11), c = gen_mask(s, 0.0, {}, 12);
  EXPECT_EQ(a.keep, b.keep);
  EXPECT_NE(a.keep, c.keep);
  EXPECT_EQ(a.seed, 11u);
}

TEST(GenMask, RejectsInvalidInputs) {
  const TD s(Shape{4, 2, 2, 2});
  EXPECT_THROW(gen_mask(s, 1.5, {}, 0), DomainError);
  EXPECT_THROW(gen_mask(s, 0.5, MaskPolicy{1.0, 1.0}, 0), Error);
}

TEST(Wce, UniformTwoClassValue) {
  const TD p(Shape{2, 4, 4, 4}), s(Shape{2, 4, 4, 4});
  const auto loss = wce(p, s, VoxelMask::all({4, 4, 4}), 1.0);
  EXPECT_NEAR(loss.item(), 0.5 * std::numbers::ln2, 1e-12);
}

TEST(Wce, UniformClassWeights) {
  for (std::size_t c : {2u, 3u, 4u, 7u}) {
    const auto p = ops::softmax(TD(Shape{c, 5}), 0);
    const auto w = wce_class_weights(p);
    for (double x : w.data()) EXPECT_NEAR(x, 1.0 - 1.0 / c, 1e-15);
  }
}

TEST(Wce, ClassWeightsSumToCMinusOne) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t c = 2 + uniform_index(rng, 5);
    const auto p = ops::softmax(random_tensor(rng, {c, 20}, -4, 4), 0);
    const auto w = wce_class_weights(p);
    double sum = 0;
    for (double x : w.data()) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
      sum += x;
    }
    EXPECT_NEAR(sum, static_cast<double>(c) - 1.0, 1e-12);
  }
}

TEST(Wce, MaskingHalfAConstantFieldKeepsTheLoss) {
  TD p(Shape{3, 4, 4, 4}), s(Shape{3, 4, 4, 4});
  const std::size_t v = 64;
  for (std::size_t i = 0; i < v; ++i) {
    p.mutable_data()[i] = 0.7, p.mutable_data()[2 * v + i] = -0.3;
    s.mutable_data()[v + i] = 1.1;
  }
  auto half = VoxelMask::all({4, 4, 4});
  for (std::size_t i = 0; i < v; i += 2) half.keep[i] = 0;
  half.kept = v / 2;
  const double full = wce(p, s, VoxelMask::all({4, 4, 4}), 2.0).item();
  EXPECT_NEAR(wce(p, s, half, 2.0).item(), full, 1e-12);
}

TEST(Wce, MatchesStraightLoopReference) {
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const auto p = random_tensor(rng, {4, 3, 3, 3}, -3, 3), s = random_tensor(rng, {4, 3, 3, 3}, -3, 3);
    const auto m = random_mask(rng, {3, 3, 3}, 0.7);
    const double tau = uniform(rng, 0.5, 8);
    for (auto dir : {DistillDirection::printed, DistillDirection::standard}) {
      const double ref = static_cast<double>(ref_wce(p, s, m, tau, dir == DistillDirection::printed));
      EXPECT_NEAR(wce(p, s, m, tau, dir).item(), ref, 1e-12);
    }
  }
}

TEST(Wce, AllMaskedIsAnError) {
  const TD p(Shape{2, 2, 2, 2});
  auto m = VoxelMask::all({2, 2, 2});
  std::fill(m.keep.begin(), m.keep.end(), 0);
  m.kept = 0;
  EXPECT_THROW(wce(p, p, m, 1.0), DomainError);
  EXPECT_THROW(wce(p, p, VoxelMask::all({2, 2, 2}), 0.0), DomainError);
  EXPECT_THROW(wce(p, TD(Shape{3, 2, 2, 2}), VoxelMask::all({2, 2, 2}), 1.0), ShapeError);
}

TEST(SoftLabelLoss, SingletonEqualsWceAgainstItself) {
  Rng rng(5);
  std::vector<TD> logits;
  for (int i = 0; i < 4; ++i) logits.push_back(random_tensor(rng, {4, 3, 3, 3}, -2, 2));
  const auto mask = VoxelMask::all({3, 3, 3});
  const auto present = ModalitySet::of({2}, 4);
  const auto l = soft_label_loss(logits, present, logits[2], mask, 6.0);
  EXPECT_EQ(l.item(), wce(logits[2], logits[2], mask, 6.0).item());
}

TEST(SoftLabelLoss, PermutationInvariantAndNonnegative) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    std::vector<TD> logits;
    for (int i = 0; i < 4; ++i) logits.push_back(random_tensor(rng, {4, 3, 3, 3}, -5, 5));
    const auto s = random_tensor(rng, {4, 3, 3, 3}, -5, 5);
    const auto mask = random_mask(rng, {3, 3, 3}, 0.6);
    const auto a = soft_label_loss(logits, ModalitySet::of({0, 1, 3}, 4), s, mask, 2.0).item();
    std::vector<TD> perm{logits[1], logits[3], logits[2], logits[0]};
    const auto b = soft_label_loss(perm, ModalitySet::of({0, 1, 3}, 4), s, mask, 2.0).item();
    EXPECT_NEAR(a, b, 1e-14);
    EXPECT_GE(a, 0.0);
    for (auto dir : {DistillDirection::printed, DistillDirection::standard})
      EXPECT_GE(soft_label_loss(logits, ModalitySet::full(4), s, mask, 1.0, dir).item(), 0.0);
  }
}

TEST(SoftLabelLoss, SameMaskInstanceServesEveryTerm) {
  Rng rng(7);
  std::vector<TD> logits;
  for (int i = 0; i < 4; ++i) logits.push_back(random_tensor(rng, {4, 3, 3, 3}));
  const auto s = random_tensor(rng, {4, 3, 3, 3});
  const auto mask = gen_mask(s, 0.2, {}, 9);
  std::vector<const VoxelMask*> trace;
  soft_label_loss(logits, ModalitySet::of({0, 2, 3}, 4), s, mask, 6.0, DistillDirection::printed, &trace);
  ASSERT_EQ(trace.size(), 3u);
  for (auto* m : trace) EXPECT_EQ(m, &mask);
}

TEST(SoftLabelLoss, FixedAndAdaptiveModesDifferOnlyThroughTheSoftLabel) {
  Rng rng(8);
  std::vector<TD> logits, probs;
  for (int i = 0; i < 4; ++i) {
    logits.push_back(random_tensor(rng, {4, 3, 3, 3}, -3, 3));
    probs.push_back(ops::softmax(logits.back(), 0));
  }
  const MetaNetwork<double> net(16, {}, 2);
  const auto present = ModalitySet::of({0, 1, 2}, 4);
  const auto mask = VoxelMask::all({3, 3, 3});
  Binder<double> b;
  const auto adaptive = meta_amf(b, &net, logits, probs, present);
  const auto v = adaptive.params.values();
  const auto pinned =
      meta_amf<double>(b, nullptr, logits, probs, present, MetaParams<double>::constant(v.t1, v.t2, v.w_f, v.beta, v.alpha));
  EXPECT_LT(test::max_abs_diff(adaptive.s_meta, pinned.s_meta), 1e-12);
  EXPECT_NEAR(soft_label_loss(logits, present, adaptive.s_meta, mask, 6.0).item(),
              soft_label_loss(logits, present, pinned.s_meta, mask, 6.0).item(), 1e-12);
  const auto fixed = meta_amf<double>(b, nullptr, logits, probs, present, MetaParams<double>::fpsld());
  EXPECT_NE(soft_label_loss(logits, present, fixed.s_meta, mask, 6.0).item(),
            soft_label_loss(logits, present, adaptive.s_meta, mask, 6.0).item());
}

TEST(SoftLabelLoss, DroppedVoxelsCarryNoGradient) {
  Rng rng(9);
  std::vector<TD> logits;
  for (int i = 0; i < 4; ++i) logits.push_back(random_tensor(rng, {4, 4, 4, 4}, -2, 2));
  const auto s0 = random_tensor(rng, {4, 4, 4, 4}, -2, 2);
  const auto mask = random_mask(rng, {4, 4, 4}, 0.5);
  const auto present = ModalitySet::full(4);
  Tape<double> tape;
  std::vector<TD> leaves;
  for (const auto& l : logits) leaves.push_back(tape.leaf(l));
  const auto s = tape.leaf(s0);
  const auto loss = soft_label_loss(leaves, present, s, mask, 6.0);
  const auto g = tape.backward(loss);
  const std::size_t v = 64;
  for (std::size_t i = 0; i < v; ++i) {
    if (mask.keep[i]) continue;
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(g.of(s)[k * v + i], 0.0);
      for (const auto& l : leaves) EXPECT_EQ(g.of(l)[k * v + i], 0.0);
    }
  }
  // perturbing dropped voxels leaves the loss value unchanged
  auto pert = logits;
  auto sp = s0.clone();
  for (std::size_t i = 0; i < v; ++i) {
    if (mask.keep[i]) continue;
    for (std::size_t k = 0; k < 4; ++k) {
      sp.mutable_data()[k * v + i] += 3.0;
      for (auto& l : pert) l.mutable_data()[k * v + i] -= 2.0;
    }
  }
  EXPECT_EQ(soft_label_loss(pert, present, sp, mask, 6.0).item(), loss.item());
}

TEST(SoftLabelLossGradients, PredictionSoftLabelAndMetaNetwork) {
  Rng rng(10);
  const MetaNetwork<double> net(16, {}, 3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TD> logits;
    for (int i = 0; i < 4; ++i) logits.push_back(random_tensor(rng, {4, 4, 4, 4}, -2, 2));
    const auto present = ModalitySet(static_cast<std::uint32_t>(1 + uniform_index(rng, 15)), 4);
    const auto mask = random_mask(rng, {4, 4, 4}, 0.7);
    const double tau = uniform(rng, 1, 6);
    const auto dir = trial % 2 ? DistillDirection::standard : DistillDirection::printed;

    // prediction and soft-label inputs
    const auto soft = random_tensor(rng, {4, 4, 4, 4}, -2, 2);
    const double e1 = grad_check(
        [&](const std::vector<TD>& in) {
          std::vector<TD> l(in.begin(), in.begin() + 4);
          return soft_label_loss(l, present, in[4], mask, tau, dir);
        },
        {logits[0], logits[1], logits[2], logits[3], soft}, 1e-6, 40, trial);
    EXPECT_LT(e1, 1e-4);

    // meta-network weights through the soft label
    std::vector<TD> points;
    for (const auto& p : net.params()) points.push_back(p.value);
    const double e2 = grad_check(
        [&](const std::vector<TD>& in) {
          MetaNetwork<double> copy = net;
          Binder<double> b = in[0].tape() ? Binder<double>(*in[0].tape()) : Binder<double>();
          std::size_t k = 0;
          for (auto& p : copy.params()) {
            p.value = in[k];
            if (in[k].tape()) b.bind(p, in[k]);
            ++k;
          }
          std::vector<TD> probs;
          for (const auto& l : logits) probs.push_back(ops::softmax(l, 0));
          const auto amf = meta_amf(b, &copy, logits, probs, present);
          return soft_label_loss(logits, present, amf.s_meta, mask, tau, dir);
        },
        points, 1e-6, 30, trial);
    EXPECT_LT(e2, 1e-4);
  }
}

TEST(SoftLabelLossGradients, TauSquaredScalingKeepsGradientMagnitudeComparable) {
  Rng rng(11);
  const auto pred = random_tensor(rng, {4, 6, 6, 6}, -3, 3);
  const auto soft = random_tensor(rng, {4, 6, 6, 6}, -3, 3);
  const auto mask = VoxelMask::all({6, 6, 6});
  for (auto dir : {DistillDirection::printed, DistillDirection::standard}) {
    std::vector<double> norms;
    for (double tau : {2.0, 6.0, 10.0}) {
      Tape<double> tape;
      const auto p = tape.leaf(pred);
      const double lambda2 = 0.3 * tau * tau / 10.0;
      const auto g = tape.backward(ops::scale(wce(p, soft, mask, tau, dir), lambda2)).of(p);
      double n = 0;
      for (double x : g.data()) n += x * x;
      norms.push_back(std::sqrt(n));
    }
    const auto [lo, hi] = std::minmax_element(norms.begin(), norms.end());
    EXPECT_LT(*hi / *lo, 2.0) << (dir == DistillDirection::printed ? "printed" : "standard") << ' ' << norms[0] << ' '
                              << norms[1] << ' ' << norms[2];
  }
}

}  // namespace
}  // namespace mgml
