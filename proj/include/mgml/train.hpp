#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mgml/backbone.hpp"
#include "mgml/checkpoint.hpp"
#include "mgml/consistency.hpp"
#include "mgml/data.hpp"
#include "mgml/distill.hpp"
#include "mgml/meta_amf.hpp"
#include "mgml/metrics.hpp"
#include "mgml/optim.hpp"

namespace mgml {

enum class Arm { baseline, cr, meta_amf, mgml, fpsld };
inline constexpr std::array<Arm, 5> kAllArms{Arm::baseline, Arm::cr, Arm::meta_amf, Arm::mgml, Arm::fpsld};

inline const char* arm_name(Arm a) {
  switch (a) {
    case Arm::baseline: return "baseline";
    case Arm::cr: return "cr";
    case Arm::meta_amf: return "meta_amf";
    case Arm::mgml: return "mgml";
    default: return "fpsld";
  }
}

inline Arm parse_arm(const std::string& s) {
  for (auto a : kAllArms)
    if (s == arm_name(a)) return a;
  throw Error("unknown arm '" + s + "' (expected baseline, cr, meta_amf, mgml or fpsld)");
}

/// Soft-label distillation term present.
inline bool uses_soft_labels(Arm a) { return a == Arm::meta_amf || a == Arm::mgml || a == Arm::fpsld; }
/// Consistency term present.
inline bool uses_consistency(Arm a) { return a == Arm::cr || a == Arm::mgml || a == Arm::fpsld; }
/// Meta-parameters produced by the meta network (not fixed).
inline bool uses_meta_network(Arm a) { return a == Arm::meta_amf || a == Arm::mgml; }

enum class SegSupervision { fused, fused_per_modality };

struct TrainConfig {
  Arm arm = Arm::mgml;
  double lambda1 = 1.0;
  double tau = 6.0;
  double lambda3 = 0.01;
  double lr_init = 2e-4;
  double weight_decay = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool amsgrad = false;
  std::size_t epochs = 60;
  std::size_t iters_per_epoch = 50;
  std::size_t batch_size = 1;
  std::uint64_t seed = 1024;
  std::size_t base_channels = 8;
  std::size_t depth = 3;
  std::size_t meta_hidden = 16;
  double beta_min = 1.0, beta_max = 100.0;
  double alpha_min = 1.0, alpha_max = 100.0;
  double t_min = 0.5, t_max = 5.0;
  bool apply_temperatures = false;
  double mask_ratio = 0.3;
  double mask_exponent = 1.0;
  DistillDirection distill_direction = DistillDirection::printed;
  SegSupervision seg_supervision = SegSupervision::fused_per_modality;
  AugmentStrength teacher_augment = AugmentStrength::strong;
  AugmentStrength student_augment = AugmentStrength::weak;
  std::string data;  // dataset directory holding train.mgv / val.mgv / test.mgv

  /// Always derived from tau.
  double lambda2() const { return 0.3 * tau * tau / 10.0; }

  MetaNetConfig meta_config() const {
    MetaNetConfig m;
    m.hidden = meta_hidden;
    m.beta = {beta_min, beta_max};
    m.alpha = {alpha_min, alpha_max};
    m.t = {t_min, t_max};
    m.apply_temperatures = apply_temperatures;
    return m;
  }

  MaskPolicy mask_policy() const { return {mask_ratio, mask_exponent}; }

  AdamConfig adam() const { return {adam_beta1, adam_beta2, adam_eps, weight_decay, amsgrad}; }

  void validate() const {
    if (!(tau > 0)) throw Error("config: tau must be positive");
    if (!(lambda1 >= 0 && lambda3 >= 0)) throw Error("config: loss weights must be nonnegative");
    if (!(lr_init > 0)) throw Error("config: lr_init must be positive");
    if (epochs == 0 || iters_per_epoch == 0) throw Error("config: epochs and iters_per_epoch must be positive");
    if (batch_size != 1) throw Error("config: only batch_size = 1 is supported");
    meta_config().validate();
    mask_policy().validate();
  }

  /// Assigns one `key = value` entry.
  void set(const std::string& key, const std::string& value) {
    auto num = [&] {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != value.size() || !std::isfinite(v)) throw Error("config: '" + key + "' expects a number, got '" + value + "'");
      return v;
    };
    auto count = [&]() -> std::size_t {
      const double v = num();
      if (v < 0 || v != std::floor(v)) throw Error("config: '" + key + "' expects a nonnegative integer");
      return static_cast<std::size_t>(v);
    };
    auto flag = [&] {
      if (value == "true" || value == "1" || value == "on") return true;
      if (value == "false" || value == "0" || value == "off") return false;
      throw Error("config: '" + key + "' expects true or false, got '" + value + "'");
    };
    if (key == "arm") arm = parse_arm(value);
    else if (key == "lambda1") lambda1 = num();
    else if (key == "tau") tau = num();
    else if (key == "lambda2") throw Error("config: lambda2 is derived from tau (0.3·tau²/10) and cannot be set");
    else if (key == "lambda3") lambda3 = num();
    else if (key == "lr_init") lr_init = num();
    else if (key == "weight_decay") weight_decay = num();
    else if (key == "adam_beta1") adam_beta1 = num();
    else if (key == "adam_beta2") adam_beta2 = num();
    else if (key == "adam_eps") adam_eps = num();
    else if (key == "amsgrad") amsgrad = flag();
    else if (key == "epochs") epochs = count();
    else if (key == "iters_per_epoch") iters_per_epoch = count();
    else if (key == "batch_size") batch_size = count();
    else if (key == "seed") seed = count();
    else if (key == "base_channels") base_channels = count();
    else if (key == "depth") depth = count();
    else if (key == "meta_hidden") meta_hidden = count();
    else if (key == "beta_min") beta_min = num();
    else if (key == "beta_max") beta_max = num();
    else if (key == "alpha_min") alpha_min = num();
    else if (key == "alpha_max") alpha_max = num();
    else if (key == "t_min") t_min = num();
    else if (key == "t_max") t_max = num();
    else if (key == "apply_temperatures") apply_temperatures = flag();
    else if (key == "mask_ratio") mask_ratio = num();
    else if (key == "mask_exponent") mask_exponent = num();
    else if (key == "distill_direction") {
      if (value == "printed") distill_direction = DistillDirection::printed;
      else if (value == "standard") distill_direction = DistillDirection::standard;
      else throw Error("config: distill_direction must be printed or standard");
    } else if (key == "seg_supervision") {
      if (value == "fused") seg_supervision = SegSupervision::fused;
      else if (value == "fused+per_modality") seg_supervision = SegSupervision::fused_per_modality;
      else throw Error("config: seg_supervision must be fused or fused+per_modality");
    } else if (key == "teacher_augment") teacher_augment = parse_strength(value);
    else if (key == "student_augment") student_augment = parse_strength(value);
    else if (key == "data") data = value;
    else throw Error("config: unknown key '" + key + "'");
  }

  std::string to_text() const {
    std::ostringstream o;
    o.precision(17);
    o << "arm = " << arm_name(arm) << "\nlambda1 = " << lambda1 << "\ntau = " << tau << "\nlambda3 = " << lambda3
      << "\nlr_init = " << lr_init << "\nweight_decay = " << weight_decay << "\nadam_beta1 = " << adam_beta1
      << "\nadam_beta2 = " << adam_beta2 << "\nadam_eps = " << adam_eps << "\namsgrad = " << (amsgrad ? "true" : "false")
      << "\nepochs = " << epochs << "\niters_per_epoch = " << iters_per_epoch << "\nbatch_size = " << batch_size
      << "\nseed = " << seed << "\nbase_channels = " << base_channels << "\ndepth = " << depth
      << "\nmeta_hidden = " << meta_hidden << "\nbeta_min = " << beta_min << "\nbeta_max = " << beta_max
      << "\nalpha_min = " << alpha_min << "\nalpha_max = " << alpha_max << "\nt_min = " << t_min
      << "\nt_max = " << t_max << "\napply_temperatures = " << (apply_temperatures ? "true" : "false")
      << "\nmask_ratio = " << mask_ratio << "\nmask_exponent = " << mask_exponent << "\ndistill_direction = "
      << (distill_direction == DistillDirection::printed ? "printed" : "standard") << "\nseg_supervision = "
      << (seg_supervision == SegSupervision::fused ? "fused" : "fused+per_modality")
      << "\nteacher_augment = " << strength_name(teacher_augment)
      << "\nstudent_augment = " << strength_name(student_augment) << "\n";
    if (!data.empty()) o << "data = " << data << "\n";
    return o.str();
  }
};

/// Parses a flat `key = value` document; '#' starts a comment.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = TrainConfig{}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = TrainConfig{}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

// ---------------------------------------------------------------------------
// Losses

/// [C, D, H, W] one-hot encoding of class ids.
template <std::floating_point T>
Tensor<T> one_hot(const std::vector<std::uint8_t>& labels, std::size_t classes, std::size_t extent) {
  const std::size_t v = labels.size();
  if (v != extent * extent * extent) throw ShapeError("one_hot: label count does not match extent");
  std::vector<T> out(classes * v, T{0});
  for (std::size_t i = 0; i < v; ++i) {
    if (labels[i] >= classes) throw Error("one_hot: class id out of range");
    out[labels[i] * v + i] = T{1};
  }
  return Tensor<T>(Shape{classes, extent, extent, extent}, std::move(out));
}

/// Mean over voxels of −log softmax(logits)[label].
template <std::floating_point T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const Tensor<T>& target) {
  const std::size_t v = logits.numel() / logits.extent(0);
  return ops::scale(ops::reduce_sum(ops::mul(ops::log_softmax(logits, 0), target)), T{-1} / static_cast<T>(v));
}

/// 1 − mean over foreground classes of 2Σpg / (Σp + Σg + ε).
template <std::floating_point T>
Tensor<T> soft_dice_loss(const Tensor<T>& logits, const Tensor<T>& target, double eps = 1e-5) {
  const std::size_t c = logits.extent(0), v = logits.numel() / c;
  const Shape flat{c, v};
  const auto p = ops::reshape(ops::softmax(logits, 0), flat);
  const auto g = target.reshaped(flat);
  const auto inter = ops::reduce_sum(ops::mul(p, g), 1);
  std::vector<T> gsum(c);
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0;
    for (std::size_t i = 0; i < v; ++i) s += g[k * v + i];
    gsum[k] = static_cast<T>(s + eps);
  }
  const auto den = ops::add(ops::reduce_sum(p, 1), Tensor<T>(Shape{c}, std::move(gsum)));
  const auto d = ops::div(ops::scale(inter, T{2}), den);
  return ops::scale(ops::reduce_mean(ops::slice(d, 0, 1, c)), T{-1}, T{1});
}

/// CE + soft Dice on the fused logits plus, with per-modality supervision,
/// the mean of the same over present modalities.
template <std::floating_point T>
Tensor<T> seg_loss(const Tensor<T>& fused, const std::vector<Tensor<T>>& logits, ModalitySet present,
                   const Tensor<T>& target, SegSupervision sup = SegSupervision::fused_per_modality) {
  auto term = [&](const Tensor<T>& l) { return ops::add(cross_entropy(l, target), soft_dice_loss(l, target)); };
  auto loss = term(fused);
  if (sup == SegSupervision::fused) return loss;
  if (present.empty()) throw Error("seg_loss: no modality present");
  Tensor<T> sum;
  bool first = true;
  for (auto i : present.indices()) {
    auto t = term(logits.at(i));
    sum = first ? t : ops::add(sum, t);
    first = false;
  }
  return ops::add(loss, ops::scale(sum, T{1} / static_cast<T>(present.count())));
}

struct LossBreakdown {
  double l_seg = 0, l_sl = 0, l_cr = 0, total = 0;
};

/// λ₁·l_seg + λ₂·l_sl + λ₃·l_cr with terms gated by the arm.
inline double total_loss(const LossBreakdown& parts, const TrainConfig& cfg) {
  double t = cfg.lambda1 * parts.l_seg;
  if (uses_soft_labels(cfg.arm)) t += cfg.lambda2() * parts.l_sl;
  if (uses_consistency(cfg.arm)) t += cfg.lambda3 * parts.l_cr;
  return t;
}

/// Uniform over the 2^M − 1 nonempty subsets.
inline ModalitySet sample_modality_subset(Rng& rng, std::size_t modalities = 4) {
  const std::uint64_t n = (std::uint64_t{1} << modalities) - 1;
  return {static_cast<std::uint32_t>(1 + uniform_index(rng, n)), modalities};
}

// ---------------------------------------------------------------------------
// Training

template <std::floating_point T>
struct Model {
  Backbone<T> backbone;
  MetaNetwork<T> meta;

  Model(const BackboneConfig& bc, const MetaNetConfig& mc, std::uint64_t seed)
      : backbone(bc, seed), meta(bc.modalities * bc.classes, mc, seed) {}

  static Model from_checkpoint(const Checkpoint& c, MetaNetConfig mc = {}) {
    mc.hidden = c.meta_hidden;
    Model m(c.backbone, mc, 0);
    restore(m.backbone.params(), c);
    restore(m.meta.params(), c);
    return m;
  }
};

struct IterationRecord {
  std::size_t iter = 0, epoch = 0;
  double lr = 0;
  double lambda2 = 0;
  LossBreakdown loss;
  std::optional<MetaParams<double>::Values> meta;
  ModalitySet student_set, teacher_set;
  std::size_t sample = 0;
  double kept_fraction = 1.0;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline std::string describe_failure(const IterationRecord& rec, const std::string& what) {
  std::ostringstream msg;
  msg << what << " at iteration " << rec.iter << ": l_seg=" << rec.loss.l_seg << " l_sl=" << rec.loss.l_sl
      << " l_cr=" << rec.loss.l_cr << " total=" << rec.loss.total;
  if (rec.meta) {
    msg << " meta(t1=" << rec.meta->t1 << " t2=" << rec.meta->t2 << " w_f=" << rec.meta->w_f
        << " beta=" << rec.meta->beta << " alpha=" << rec.meta->alpha << ")";
  }
  return msg.str();
}
}  // namespace detail

struct TrainResult {
  Model<float> model;
  std::vector<IterationRecord> log;
};

/// Writes CSV rows with fixed formatting.
inline std::string fmt_g(double v, int digits = 9) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::function<void(const IterationRecord&)> on_iteration;
  std::size_t max_iterations = 0;  // nonzero: stop early (timing probes)
};

inline TrainResult train(const TrainConfig& cfg, const std::vector<VolumeSample>& train_set,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  if (train_set.empty()) throw Error("train: empty training set");
  const std::size_t m_count = train_set.front().modalities.size();
  BackboneConfig bc;
  bc.modalities = m_count;
  bc.classes = kNumClasses;
  bc.base_channels = cfg.base_channels;
  bc.depth = cfg.depth;
  bc.input_extent = train_set.front().extent;
  TrainResult result{Model<float>(bc, cfg.meta_config(), cfg.seed), {}};
  auto& net = result.model.backbone;
  auto& meta = result.model.meta;

  std::vector<Parameter<float>*> trainable;
  for (auto& p : net.params()) trainable.push_back(&p);
  if (uses_meta_network(cfg.arm))
    for (auto& p : meta.params()) trainable.push_back(&p);
  Adam<float> adam(trainable, cfg.adam());

  std::ofstream log_csv, meta_csv;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log_csv.open(opts.out_dir / "train_log.csv", std::ios::trunc);
    log_csv << "iter,lr,l_seg,l_sl,l_cr,total\n";
    if (uses_soft_labels(cfg.arm)) {
      meta_csv.open(opts.out_dir / "meta_params.csv", std::ios::trunc);
      meta_csv << "iter,t1,t2,w_f,beta,alpha\n";
    }
    std::ofstream(opts.out_dir / "config.txt", std::ios::trunc) << cfg.to_text();
  }

  const float tau = static_cast<float>(cfg.tau);
  const auto full = ModalitySet::full(m_count);
  const std::size_t total_iters = cfg.epochs * cfg.iters_per_epoch;
  for (std::size_t it = 0; it < total_iters; ++it) {
    if (opts.max_iterations && it >= opts.max_iterations) break;
    const std::size_t epoch = it / cfg.iters_per_epoch;
    Rng rng(mix_seed(cfg.seed, it + 1));
    IterationRecord rec;
    rec.iter = it;
    rec.epoch = epoch;
    rec.lr = poly_lr(cfg.lr_init, epoch, cfg.epochs);
    rec.lambda2 = cfg.lambda2();
    rec.sample = uniform_index(rng, train_set.size());
    rec.student_set = sample_modality_subset(rng, m_count);
    const std::uint64_t aug_seed = rng();
    const std::uint64_t mask_seed = rng();
    Rng ra(aug_seed), rb(aug_seed);
    const auto student_plan = draw_augment(cfg.student_augment, m_count, ra);
    const auto teacher_plan = draw_augment(cfg.teacher_augment, m_count, rb);

    const auto& raw = train_set[rec.sample];
    const auto student = apply_augment(raw, student_plan);
    const auto target = one_hot<float>(student.labels, kNumClasses, student.extent);

    Tape<float> tape;
    Binder<float> b(tape);
    Tensor<float> total;
    try {
      const auto branches = uses_meta_network(cfg.arm) ? Branches::all : Branches::present_only;
      const auto out = net.forward(b, student.volumes<float>(), rec.student_set, branches);
      const auto l_seg = seg_loss(out.fused, out.logits, rec.student_set, target, cfg.seg_supervision);
      total = ops::scale(l_seg, static_cast<float>(cfg.lambda1));
      rec.loss.l_seg = l_seg.item();

      if (uses_soft_labels(cfg.arm)) {
        const auto fixed = cfg.arm == Arm::fpsld ? std::optional(MetaParams<float>::fpsld()) : std::nullopt;
        const auto amf = meta_amf(b, &meta, out.logits, out.probs, rec.student_set, fixed);
        const auto mv = amf.params.values();
        rec.meta = MetaParams<double>::Values{mv.t1, mv.t2, mv.w_f, mv.beta, mv.alpha};
        const auto mask = gen_mask(amf.s_meta, mv.w_f, cfg.mask_policy(), mask_seed);
        rec.kept_fraction = mask.kept_fraction;
        const auto l_sl = soft_label_loss(out.logits, rec.student_set, amf.s_meta, mask, tau, cfg.distill_direction);
        rec.loss.l_sl = l_sl.item();
        total = ops::add(total, ops::scale(l_sl, static_cast<float>(rec.lambda2)));
      }
      if (uses_consistency(cfg.arm)) {
        const auto teacher = apply_augment(raw, teacher_plan);
        rec.teacher_set = full;
        const auto yt = realign(teacher_forward(net, teacher.volumes<float>()), teacher_plan, student_plan);
        const auto l_cr = consistency_loss(out.fused, yt, tau);
        rec.loss.l_cr = l_cr.item();
        total = ops::add(total, ops::scale(l_cr, static_cast<float>(cfg.lambda3)));
      }
      rec.loss.total = total.item();
    } catch (const DomainError& e) {
      throw TrainingError(detail::describe_failure(rec, "numeric failure (" + std::string(e.what()) + ")"));
    }
    if (!std::isfinite(rec.loss.total)) throw TrainingError(detail::describe_failure(rec, "non-finite loss"));

    const auto grads = tape.backward(total);
    std::vector<Tensor<float>> g;
    g.reserve(trainable.size());
    for (auto* p : trainable) g.push_back(b.grad(grads, *p));
    adam.step(g, rec.lr);

    if (log_csv.is_open()) {
      log_csv << it << ',' << fmt_g(rec.lr, 12) << ',' << fmt_g(rec.loss.l_seg) << ',' << fmt_g(rec.loss.l_sl) << ','
              << fmt_g(rec.loss.l_cr) << ',' << fmt_g(rec.loss.total) << '\n';
    }
    if (meta_csv.is_open() && rec.meta) {
      meta_csv << it << ',' << fmt_g(rec.meta->t1) << ',' << fmt_g(rec.meta->t2) << ',' << fmt_g(rec.meta->w_f) << ','
               << fmt_g(rec.meta->beta) << ',' << fmt_g(rec.meta->alpha) << '\n';
    }
    if (opts.on_iteration) opts.on_iteration(rec);
    result.log.push_back(rec);
  }

  if (!opts.out_dir.empty()) save_checkpoint(make_checkpoint(net, meta), opts.out_dir / "model.mgc");
  return result;
}

// ---------------------------------------------------------------------------
// Dataset directories and ablation

inline std::vector<VolumeSample> load_split(const std::filesystem::path& dir, const std::string& split) {
  return read_dataset(dir / (split + ".mgv"));
}

struct AblationRun {
  Arm arm;
  std::uint64_t seed;
  EvalTable table;
  std::filesystem::path dir;  // run artifacts; empty when nothing was written
};

struct SweepRun {
  std::string param;
  double value;
  EvalTable table;
  std::filesystem::path dir;
};

struct AblationReport {
  std::vector<AblationRun> runs;
  std::vector<SweepRun> sweeps;

  /// Median over seeds of the region-averaged AVG Dice (points) for one arm.
  double median_points(Arm arm) const {
    std::vector<double> v;
    for (const auto& r : runs)
      if (r.arm == arm) v.push_back(r.table.region_mean_points());
    if (v.empty()) throw Error("ablation: no runs for arm " + std::string(arm_name(arm)));
    std::sort(v.begin(), v.end());
    return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  }

  std::string ablation_csv() const {
    std::ostringstream o;
    o << "arm,seed,avg_wt,avg_tc,avg_et,avg_mean\n";
    auto row = [&](const std::string& a, const std::string& s, const std::array<double, 3>& avg, double mean) {
      o << a << ',' << s;
      for (auto x : avg) o << ',' << fmt_g(100.0 * x, 6);
      o << ',' << fmt_g(mean, 6) << '\n';
    };
    for (const auto& r : runs) row(arm_name(r.arm), std::to_string(r.seed), r.table.avg, r.table.region_mean_points());
    for (auto a : kAllArms) {
      bool any = false;
      for (const auto& r : runs) any |= r.arm == a;
      if (!any) continue;
      std::array<double, 3> med{};
      for (std::size_t k = 0; k < 3; ++k) {
        std::vector<double> v;
        for (const auto& r : runs)
          if (r.arm == a) v.push_back(r.table.avg[k]);
        std::sort(v.begin(), v.end());
        med[k] = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
      }
      row(arm_name(a), "median", med, median_points(a));
    }
    return o.str();
  }

  std::string sweep_csv() const {
    std::ostringstream o;
    o << "param,value,avg_wt,avg_tc,avg_et,avg_mean\n";
    for (const auto& s : sweeps) {
      o << s.param << ',' << fmt_g(s.value, 6);
      for (auto x : s.table.avg) o << ',' << fmt_g(100.0 * x, 6);
      o << ',' << fmt_g(s.table.region_mean_points(), 6) << '\n';
    }
    return o.str();
  }
};

inline constexpr std::array<double, 5> kTauSweep{2, 4, 6, 8, 10};
inline constexpr std::array<double, 3> kLambda3Sweep{0.001, 0.01, 0.1};

struct AblationOptions {
  std::vector<Arm> arms{kAllArms.begin(), kAllArms.end()};
  std::size_t seeds = 3;
  bool sweep_tau = false;
  bool sweep_lambda3 = false;
  std::filesystem::path out_dir;
  std::function<void(const std::string&)> progress;
};

/// Trains each arm for `seeds` consecutive seeds starting at cfg.seed and
/// evaluates it on `test_set`; optional sweeps run the mgml arm at cfg.seed.
inline AblationReport ablate(const TrainConfig& base, const std::vector<VolumeSample>& train_set,
                             const std::vector<VolumeSample>& test_set, const AblationOptions& opts = {}) {
  AblationReport report;
  // Each run trains, evaluates on the test set and, with an output
  // directory, keeps its logs, checkpoint and eval_table.csv under runs/.
  auto run = [&](TrainConfig cfg, const std::string& name) {
    if (opts.progress) opts.progress("training " + name);
    const auto dir = opts.out_dir.empty() ? std::filesystem::path{} : opts.out_dir / "runs" / name;
    auto res = train(cfg, train_set, {dir});
    auto table = evaluate_combinations(res.model.backbone, test_set);
    if (!dir.empty()) table.write_csv(dir / "eval_table.csv");
    return std::pair{std::move(table), dir};
  };
  for (auto arm : opts.arms) {
    for (std::size_t s = 0; s < opts.seeds; ++s) {
      TrainConfig cfg = base;
      cfg.arm = arm;
      cfg.seed = base.seed + s;
      auto [table, dir] = run(cfg, std::string(arm_name(arm)) + "_seed" + std::to_string(cfg.seed));
      report.runs.push_back({arm, cfg.seed, std::move(table), dir});
    }
  }
  auto reuse = [&](const TrainConfig& cfg) -> const AblationRun* {
    if (cfg.tau != base.tau || cfg.lambda3 != base.lambda3) return nullptr;
    for (const auto& r : report.runs)
      if (r.arm == Arm::mgml && r.seed == base.seed) return &r;
    return nullptr;
  };
  auto sweep = [&](const std::string& param, double value) {
    TrainConfig cfg = base;
    cfg.arm = Arm::mgml;
    (param == "tau" ? cfg.tau : cfg.lambda3) = value;
    if (const auto* r = reuse(cfg)) {
      report.sweeps.push_back({param, value, r->table, r->dir});
      return;
    }
    auto [table, dir] = run(cfg, "mgml_" + param + "_" + fmt_g(value, 6));
    report.sweeps.push_back({param, value, std::move(table), dir});
  };
  if (opts.sweep_tau)
    for (double t : kTauSweep) sweep("tau", t);
  if (opts.sweep_lambda3)
    for (double l : kLambda3Sweep) sweep("lambda3", l);

  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    std::ofstream(opts.out_dir / "ablation.csv", std::ios::trunc) << report.ablation_csv();
    if (!report.sweeps.empty()) std::ofstream(opts.out_dir / "sweeps.csv", std::ios::trunc) << report.sweep_csv();
  }
  return report;
}

}  // namespace mgml
