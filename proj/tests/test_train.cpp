#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "mgml/experiment.hpp"
#include "mgml/gradcheck.hpp"
#include "mgml/gradsuite.hpp"
#include "mgml/train.hpp"
#include "test_util.hpp"

namespace mgml {
namespace {

using test::random_tensor;
using TD = Tensor<double>;
namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<VolumeSample> tiny_data(std::size_t n = 4, std::uint64_t seed = 77) {
  SynthConfig c;
  c.extent = 8;
  c.wt_radius_min = 1.5;
  c.wt_radius_max = 2.5;
  return generate_dataset(c, seed, n);
}

TrainConfig tiny_config(Arm arm) {
  TrainConfig c;
  c.arm = arm;
  c.base_channels = 2;
  c.depth = 2;
  c.epochs = 2;
  c.iters_per_epoch = 3;
  c.lr_init = 1e-3;
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mgml_train_test_" + name);
  fs::remove_all(p);
  return p;
}

TEST(Optim, FirstAdamStepOnAQuadratic) {
  Parameter<double> x{"x", TD({1}, {1.0})};
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  Adam<double> adam({&x}, cfg);
  adam.step({TD({1}, {2.0 * x.value[0]})}, 0.1);
  EXPECT_NEAR(x.value[0], 0.9, 1e-4);
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(Optim, CoupledWeightDecayAndAmsgrad) {
  // zero loss gradient: coupled decay alone drives the step
  Parameter<double> x{"x", TD({1}, {2.0})};
  Adam<double> adam({&x}, AdamConfig{0.9, 0.999, 1e-8, 0.5, true});
  adam.step({TD({1}, {0.0})}, 0.01);
  EXPECT_NEAR(x.value[0], 2.0 - 0.01, 1e-9);
  EXPECT_THROW(adam.step({}, 0.1), Error);
}

TEST(Optim, PolyScheduleEndpointsAndMonotonicity) {
  EXPECT_DOUBLE_EQ(poly_lr(2e-4, 0, 60), 2e-4);
  EXPECT_EQ(poly_lr(2e-4, 60, 60), 0.0);
  double prev = 1;
  for (std::size_t e = 0; e <= 60; ++e) {
    const double lr = poly_lr(2e-4, e, 60);
    EXPECT_NEAR(lr, 2e-4 * std::pow(1.0 - e / 60.0, 0.9), 1e-12);
    EXPECT_LT(lr, prev);
    prev = lr;
  }
  EXPECT_THROW(poly_lr(1, 61, 60), Error);
  EXPECT_THROW(poly_lr(1, 0, 0), Error);
}

TEST(Config, DefaultsAndDerivedLambda2) {
  const TrainConfig c;
  EXPECT_EQ(c.lambda1, 1.0);
  EXPECT_EQ(c.tau, 6.0);
  EXPECT_EQ(c.lambda3, 0.01);
  EXPECT_EQ(c.lr_init, 2e-4);
  EXPECT_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.seed, 1024u);
  EXPECT_EQ(c.epochs, 60u);
  EXPECT_EQ(c.iters_per_epoch, 50u);
  EXPECT_FALSE(c.amsgrad);
  EXPECT_NEAR(c.lambda2(), 1.08, 1e-15);
}

TEST(Config, ParsesEveryFieldAndRoundTrips) {
  const auto c = parse_config(
      "# comment\narm = fpsld\ntau = 4 # inline\nlambda3=0.1\nepochs = 3\namsgrad = true\n"
      "distill_direction = standard\nseg_supervision = fused\nteacher_augment = none\ndata = /tmp/x\n");
  EXPECT_EQ(c.arm, Arm::fpsld);
  EXPECT_EQ(c.tau, 4.0);
  EXPECT_NEAR(c.lambda2(), 0.48, 1e-15);
  EXPECT_EQ(c.lambda3, 0.1);
  EXPECT_EQ(c.epochs, 3u);
  EXPECT_TRUE(c.amsgrad);
  EXPECT_EQ(c.distill_direction, DistillDirection::standard);
  EXPECT_EQ(c.seg_supervision, SegSupervision::fused);
  EXPECT_EQ(c.teacher_augment, AugmentStrength::none);
  EXPECT_EQ(c.data, "/tmp/x");
  EXPECT_EQ(parse_config(c.to_text()).to_text(), c.to_text());
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("lambda2 = 1.0"), Error);
  EXPECT_THROW(parse_config("nonsense = 1"), Error);
  EXPECT_THROW(parse_config("tau = abc"), Error);
  EXPECT_THROW(parse_config("tau = -1"), Error);
  EXPECT_THROW(parse_config("arm = best"), Error);
  EXPECT_THROW(parse_config("epochs = 1.5"), Error);
  try {
    parse_config("tau = 1\n\njunk line");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(Losses, UniformLogitsCrossEntropyIsLnC) {
  std::vector<std::uint8_t> labels(27);
  for (std::size_t i = 0; i < 27; ++i) labels[i] = static_cast<std::uint8_t>(i % 4);
  const auto target = one_hot<double>(labels, 4, 3);
  EXPECT_NEAR(cross_entropy(TD(Shape{4, 3, 3, 3}), target).item(), std::log(4.0), 1e-12);
}

TEST(Losses, PerfectPredictionIsNearZero) {
  std::vector<std::uint8_t> labels(27);
  for (std::size_t i = 0; i < 27; ++i) labels[i] = static_cast<std::uint8_t>((i * 7) % 4);
  const auto target = one_hot<double>(labels, 4, 3);
  const auto logits = ops::scale(target, 40.0);
  EXPECT_LT(cross_entropy(logits, target).item(), 1e-12);
  EXPECT_LT(soft_dice_loss(logits, target).item(), 1e-6);
}

TEST(Losses, SegLossSingleModalityTerm) {
  Rng rng(1);
  std::vector<TD> logits;
  for (int i = 0; i < 4; ++i) logits.push_back(random_tensor(rng, {4, 3, 3, 3}, -2, 2));
  const auto fused = random_tensor(rng, {4, 3, 3, 3}, -2, 2);
  std::vector<std::uint8_t> labels(27);
  for (auto& l : labels) l = static_cast<std::uint8_t>(uniform_index(rng, 4));
  const auto target = one_hot<double>(labels, 4, 3);
  const auto present = ModalitySet::of({2}, 4);
  auto term = [&](const TD& l) { return cross_entropy(l, target).item() + soft_dice_loss(l, target).item(); };
  EXPECT_NEAR(seg_loss(fused, logits, present, target).item(), term(fused) + term(logits[2]), 1e-12);
  EXPECT_NEAR(seg_loss(fused, logits, present, target, SegSupervision::fused).item(), term(fused), 1e-12);
}

TEST(Losses, SoftDiceMatchesDirectFormula) {
  Rng rng(2);
  const auto logits = random_tensor(rng, {4, 2, 2, 2}, -2, 2);
  std::vector<std::uint8_t> labels(8);
  for (auto& l : labels) l = static_cast<std::uint8_t>(uniform_index(rng, 4));
  const auto target = one_hot<double>(labels, 4, 2);
  const auto p = ops::softmax(logits, 0);
  double sum = 0;
  for (std::size_t c = 1; c < 4; ++c) {
    double inter = 0, ps = 0, gs = 0;
    for (std::size_t i = 0; i < 8; ++i) inter += p[c * 8 + i] * target[c * 8 + i], ps += p[c * 8 + i], gs += target[c * 8 + i];
    sum += 2 * inter / (ps + gs + 1e-5);
  }
  EXPECT_NEAR(soft_dice_loss(logits, target).item(), 1.0 - sum / 3.0, 1e-12);
}

TEST(Losses, SegLossGradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    std::vector<TD> pts;
    for (int i = 0; i < 5; ++i) pts.push_back(random_tensor(rng, {4, 2, 2, 2}, -2, 2));
    std::vector<std::uint8_t> labels(8);
    for (auto& l : labels) l = static_cast<std::uint8_t>(uniform_index(rng, 4));
    const auto target = one_hot<double>(labels, 4, 2);
    const auto present = ModalitySet(static_cast<std::uint32_t>(1 + uniform_index(rng, 15)), 4);
    const double err = grad_check(
        [&](const std::vector<TD>& in) {
          return seg_loss(in[0], std::vector<TD>(in.begin() + 1, in.end()), present, target);
        },
        pts, 1e-6);
    EXPECT_LT(err, 1e-4);
  }
}

TEST(Losses, TotalLossGatingAndArithmetic) {
  TrainConfig c;
  const LossBreakdown parts{1.0, 1.0, 1.0, 0.0};
  c.arm = Arm::mgml;
  EXPECT_NEAR(total_loss(parts, c), 2.09, 1e-12);
  c.arm = Arm::baseline;
  EXPECT_EQ(total_loss(parts, c), 1.0);
  c.arm = Arm::cr;
  EXPECT_NEAR(total_loss(parts, c), 1.01, 1e-12);
  c.arm = Arm::meta_amf;
  EXPECT_NEAR(total_loss(parts, c), 2.08, 1e-12);
  c.arm = Arm::fpsld;
  EXPECT_NEAR(total_loss(parts, c), 2.09, 1e-12);
}

TEST(SubsetSampling, UniformOverNonemptySubsets) {
  Rng rng(1024);
  std::map<std::uint32_t, std::size_t> freq;
  const std::size_t n = 100000;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = sample_modality_subset(rng);
    ASSERT_FALSE(s.empty());
    ++freq[s.bits()];
  }
  EXPECT_EQ(freq.size(), 15u);
  for (auto [bits, count] : freq) EXPECT_NEAR(static_cast<double>(count) / n, 1.0 / 15.0, 0.01) << bits;
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_modality_subset(a).bits(), sample_modality_subset(b).bits());
}

TEST(Arms, NamesAndGating) {
  for (auto a : kAllArms) EXPECT_EQ(parse_arm(arm_name(a)), a);
  EXPECT_FALSE(uses_soft_labels(Arm::baseline) || uses_consistency(Arm::baseline));
  EXPECT_TRUE(uses_consistency(Arm::cr) && !uses_soft_labels(Arm::cr));
  EXPECT_TRUE(uses_soft_labels(Arm::meta_amf) && !uses_consistency(Arm::meta_amf));
  EXPECT_TRUE(uses_soft_labels(Arm::mgml) && uses_consistency(Arm::mgml) && uses_meta_network(Arm::mgml));
  EXPECT_TRUE(uses_soft_labels(Arm::fpsld) && uses_consistency(Arm::fpsld) && !uses_meta_network(Arm::fpsld));
}

TEST(Training, TwoRunsWithOneSeedAreByteIdentical) {
  const auto data = tiny_data();
  const auto cfg = tiny_config(Arm::mgml);
  const auto a = scratch("det_a"), b = scratch("det_b");
  train(cfg, data, {a});
  train(cfg, data, {b});
  for (const char* f : {"train_log.csv", "meta_params.csv", "model.mgc", "config.txt"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Training, LogsFollowTheScheduleAndArmContract) {
  const auto data = tiny_data();
  const auto cfg = tiny_config(Arm::mgml);
  const auto out = scratch("log");
  const auto res = train(cfg, data, {out});
  ASSERT_EQ(res.log.size(), 6u);
  const auto mc = cfg.meta_config();
  for (const auto& r : res.log) {
    EXPECT_EQ(r.lambda2, 0.3 * cfg.tau * cfg.tau / 10.0);
    EXPECT_EQ(r.lr, poly_lr(cfg.lr_init, r.epoch, cfg.epochs));
    EXPECT_TRUE(r.teacher_set.is_full());
    EXPECT_FALSE(r.student_set.empty());
    ASSERT_TRUE(r.meta.has_value());
    EXPECT_TRUE(mc.w_f.contains(r.meta->w_f) && mc.beta.contains(r.meta->beta) && mc.alpha.contains(r.meta->alpha));
    EXPECT_TRUE(mc.t.contains(r.meta->t1) && mc.t.contains(r.meta->t2));
    EXPECT_NEAR(r.loss.total,
                cfg.lambda1 * r.loss.l_seg + r.lambda2 * r.loss.l_sl + cfg.lambda3 * r.loss.l_cr,
                1e-6 * std::max(1.0, r.loss.total));
  }
  std::istringstream log(slurp(out / "train_log.csv"));
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "iter,lr,l_seg,l_sl,l_cr,total");
  std::istringstream meta(slurp(out / "meta_params.csv"));
  std::getline(meta, line);
  EXPECT_EQ(line, "iter,t1,t2,w_f,beta,alpha");
  std::size_t rows = 0;
  while (std::getline(meta, line)) ++rows;
  EXPECT_EQ(rows, 6u);
  fs::remove_all(out);
}

TEST(Training, BaselineArmNeverTouchesTheMetaNetwork) {
  const auto data = tiny_data();
  auto cfg = tiny_config(Arm::baseline);
  const auto res = train(cfg, data);
  const MetaNetwork<float> fresh(16, cfg.meta_config(), cfg.seed);
  for (const auto& p : fresh.params()) EXPECT_TRUE(p.value.same_values(res.model.meta.params().find(p.name)->value));
  for (const auto& r : res.log) {
    EXPECT_EQ(r.loss.l_sl, 0.0);
    EXPECT_EQ(r.loss.l_cr, 0.0);
    EXPECT_FALSE(r.meta.has_value());
  }
}

TEST(Training, FixedArmReportsPinnedParameters) {
  const auto res = train(tiny_config(Arm::fpsld), tiny_data());
  for (const auto& r : res.log) {
    ASSERT_TRUE(r.meta.has_value());
    EXPECT_EQ(r.meta->beta, 100.0);
    EXPECT_EQ(r.meta->alpha, 100.0);
    EXPECT_EQ(r.meta->w_f, 0.5);
  }
}

TEST(Training, NonFiniteLossAbortsWithDiagnostics) {
  auto data = tiny_data(1);
  data[0].modalities[0].mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  auto cfg = tiny_config(Arm::mgml);
  cfg.student_augment = AugmentStrength::none;
  try {
    train(cfg, data);
    FAIL() << "expected a training error";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("iteration"), std::string::npos);
    EXPECT_NE(msg.find("l_seg"), std::string::npos);
  }
}

TEST(Training, CheckpointRoundTripReproducesTheEvaluation) {
  const auto data = tiny_data();
  const auto out = scratch("ckpt");
  const auto res = train(tiny_config(Arm::mgml), data, {out});
  const auto before = evaluate_combinations(res.model.backbone, data);
  const auto model = Model<float>::from_checkpoint(load_checkpoint(out / "model.mgc"));
  const auto after = evaluate_combinations(model.backbone, data);
  EXPECT_EQ(before.to_csv(), after.to_csv());
  for (std::size_t i = 0; i < 15; ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(before.rows[i].dice[k], after.rows[i].dice[k]);
  fs::remove_all(out);
}

TEST(Training, ConfigFileRoundTrip) {
  const auto out = scratch("cfg");
  auto cfg = tiny_config(Arm::cr);
  cfg.tau = 3.5;
  train(cfg, tiny_data(2), {out});
  const auto back = load_config(out / "config.txt");
  EXPECT_EQ(back.to_text(), cfg.to_text());
  fs::remove_all(out);
}

TEST(Ablation, ReportStructureAndSweepGrid) {
  const auto data = tiny_data(3);
  auto cfg = tiny_config(Arm::mgml);
  cfg.epochs = 1;
  cfg.iters_per_epoch = 1;
  AblationOptions opts;
  opts.seeds = 1;
  opts.sweep_tau = true;
  opts.sweep_lambda3 = true;
  opts.out_dir = scratch("ablate");
  const auto r = ablate(cfg, data, data, opts);
  EXPECT_EQ(r.runs.size(), 5u);
  ASSERT_EQ(r.sweeps.size(), 8u);
  const std::vector<double> taus{2, 4, 6, 8, 10}, l3{0.001, 0.01, 0.1};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(r.sweeps[i].value, taus[i]);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.sweeps[5 + i].value, l3[i]);
  std::istringstream in(slurp(opts.out_dir / "ablation.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "arm,seed,avg_wt,avg_tc,avg_et,avg_mean");
  std::size_t medians = 0;
  while (std::getline(in, line)) medians += line.find(",median,") != std::string::npos;
  EXPECT_EQ(medians, 5u);
  EXPECT_TRUE(fs::exists(opts.out_dir / "sweeps.csv"));
  for (const auto& run : r.runs) {
    EXPECT_TRUE(fs::exists(run.dir / "eval_table.csv")) << run.dir;
    EXPECT_EQ(fs::exists(run.dir / "meta_params.csv"), uses_soft_labels(run.arm)) << run.dir;
  }
  // the sweep point at the base settings reuses the mgml run
  EXPECT_EQ(r.sweeps[2].dir, r.runs[3].dir);
  EXPECT_EQ(r.sweeps[2].table.to_csv(), r.runs[3].table.to_csv());
  fs::remove_all(opts.out_dir);
}

TEST(Experiment, SplitsAreDisjointAndRoundTrip) {
  SynthConfig c;
  c.extent = 8;
  c.wt_radius_min = 1.5;
  c.wt_radius_max = 2.5;
  const auto s = generate_splits(c, 5, {3, 2, 2});
  EXPECT_EQ(s.train.size(), 3u);
  EXPECT_EQ(s.val[0].sample_seed, 5 + kValSeedOffset);
  EXPECT_EQ(s.test[1].sample_seed, 6 + kTestSeedOffset);
  const auto dir = scratch("splits");
  write_splits(s, dir);
  const auto back = read_splits(dir);
  ASSERT_EQ(back.test.size(), 2u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(back.train[i] == s.train[i]);
  EXPECT_TRUE(back.val[1] == s.val[1]);
  fs::remove_all(dir);
}

TEST(Experiment, RunWritesTheEvaluationTable) {
  const auto data = tiny_data(3);
  const auto out = scratch("run");
  const auto r = run_experiment(tiny_config(Arm::cr), data, data, out);
  EXPECT_EQ(slurp(out / "eval_table.csv"), r.table.to_csv());
  EXPECT_FALSE(fs::exists(out / "meta_params.csv"));
  fs::remove_all(out);
}

TEST(MetaPlot, ParsesChecksRangesAndRenders) {
  const std::string csv = "iter,t1,t2,w_f,beta,alpha\n0,2.75,2.75,0.5,50.5,50.5\n1,2.7,2.8,0.4,60,40\n";
  const auto t = parse_meta_csv(csv);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.series[3][1], 60.0);
  EXPECT_EQ(meta_range_violations(t, {}), 0u);
  const auto svg = render_meta_svg(t, {});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  std::size_t lines = 0;
  for (auto p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
  EXPECT_EQ(lines, 5u);

  EXPECT_EQ(meta_range_violations(parse_meta_csv("iter,t1,t2,w_f,beta,alpha\n0,2,2,0.5,150,50\n"), {}), 1u);
  EXPECT_EQ(meta_range_violations(parse_meta_csv("iter,t1,t2,w_f,beta,alpha\n0,2,2,nan,50,50\n"), {}), 1u);
  EXPECT_THROW(parse_meta_csv("iter,beta\n0,1\n"), Error);
  EXPECT_THROW(parse_meta_csv("iter,t1,t2,w_f,beta,alpha\n0,1,2\n"), Error);
  EXPECT_THROW(parse_meta_csv("iter,t1,t2,w_f,beta,alpha\n0,x,2,0.5,1,1\n"), Error);
  EXPECT_THROW(render_meta_svg(MetaTrajectory{}, {}), Error);
}

TEST(MetaPlot, RendersFromATrainingRun) {
  const auto out = scratch("plot");
  train(tiny_config(Arm::mgml), tiny_data(2), {out});
  plot_meta(out / "meta_params.csv", out / "meta.svg");
  EXPECT_GT(fs::file_size(out / "meta.svg"), 500u);
  EXPECT_EQ(meta_range_violations(read_meta_csv(out / "meta_params.csv"), tiny_config(Arm::mgml).meta_config()), 0u);
  fs::remove_all(out);
}

TEST(GradSuite, EveryModuleRunsAndUnknownNamesAreRejected) {
  for (const auto& m : grad_suite_modules()) {
    if (m == "backbone") continue;  // covered by the backbone suite
    EXPECT_LT(run_grad_check(m, 2).max_rel_error, 1e-4) << m;
  }
  EXPECT_THROW(run_grad_check("nope", 1), Error);
}

TEST(Training, LossDecreasesOverEpochsSoftCheck) {
  // Smoke expectation, reported rather than enforced: first-epoch versus
  // last-epoch mean loss, median over three seeds.
  auto cfg = tiny_config(Arm::mgml);
  cfg.epochs = 5;
  cfg.iters_per_epoch = 10;
  cfg.lr_init = 5e-3;
  const auto data = tiny_data(6);
  std::vector<double> ratios;
  for (std::uint64_t s = 0; s < 3; ++s) {
    cfg.seed = 1024 + s;
    const auto res = train(cfg, data);
    double first = 0, last = 0;
    for (const auto& r : res.log) {
      if (r.epoch == 0) first += r.loss.total;
      if (r.epoch == 4) last += r.loss.total;
    }
    ratios.push_back(last / first);
  }
  std::sort(ratios.begin(), ratios.end());
  RecordProperty("median_last_over_first_epoch_loss", std::to_string(ratios[1]));
  if (ratios[1] >= 1.0) std::cout << "note: median loss did not decrease (ratio " << ratios[1] << ")\n";
  SUCCEED();
}

}  // namespace
}  // namespace mgml
