// Command-line front end: dataset generation, training, evaluation,
// ablation, gradient checks, parameter accounting and meta-parameter plots.

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>

#include "mgml/mgml.hpp"

namespace fs = std::filesystem;
using namespace mgml;

namespace {

TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& overrides) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_config(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

fs::path data_dir(const TrainConfig& cfg, const std::string& flag) {
  const std::string d = flag.empty() ? cfg.data : flag;
  if (d.empty()) throw Error("no dataset directory: pass --data or set 'data' in the config");
  return d;
}

void print_loss(const IterationRecord& r, std::size_t total) {
  std::cout << "iter " << r.iter + 1 << "/" << total << "  lr " << fmt_g(r.lr, 4) << "  l_seg " << fmt_g(r.loss.l_seg, 5)
            << "  l_sl " << fmt_g(r.loss.l_sl, 5) << "  l_cr " << fmt_g(r.loss.l_cr, 5) << "  total "
            << fmt_g(r.loss.total, 5) << '\n';
}

void write_slices(const Backbone<float>& net, const std::vector<VolumeSample>& data, const fs::path& dir) {
  fs::create_directories(dir);
  const auto predict = model_predictor(net);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    const std::string stem = "subject" + std::to_string(i);
    for (std::size_t m = 0; m < s.modalities.size(); ++m)
      write_pgm_slice(s.modalities[m], dir / (stem + "_" + modality_name(m) + ".pgm"));
    write_ppm_labels(s.labels, s.extent, dir / (stem + "_truth.ppm"));
    write_ppm_labels(predict(s, ModalitySet::full(s.modalities.size())), s.extent, dir / (stem + "_pred.ppm"));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-guided multimodal learning toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate synthetic train/val/test splits");
  std::string gen_out;
  std::uint64_t gen_seed = 1024;
  SplitSizes sizes;
  SynthConfig synth;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Global seed");
  gen->add_option("--train", sizes.train, "Training volumes");
  gen->add_option("--val", sizes.val, "Validation volumes");
  gen->add_option("--test", sizes.test, "Test volumes");
  gen->add_option("--extent", synth.extent, "Cubic volume extent");
  gen->add_option("--noise", synth.noise_sigma, "Gaussian noise sigma");

  // train
  auto* tr = app.add_subcommand("train", "Train one arm and write its artifacts");
  std::string tr_config, tr_arm, tr_out, tr_data;
  std::vector<std::string> tr_set;
  bool tr_quiet = false;
  tr->add_option("--config", tr_config, "Config file (key = value)");
  tr->add_option("--arm", tr_arm, "baseline, cr, meta_amf, mgml or fpsld");
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--data", tr_data, "Dataset directory (overrides the config)");
  tr->add_option("--set", tr_set, "Extra key=value overrides");
  tr->add_flag("--quiet", tr_quiet, "Only print the summary");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on all 15 modality combinations");
  std::string ev_ckpt, ev_data, ev_out = "eval_table.csv", ev_slices, ev_split = "test";
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--split", ev_split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--out", ev_out, "Output CSV");
  ev->add_option("--slices", ev_slices, "Directory for mid-axial slice images");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train every arm over several seeds, plus optional sweeps");
  std::string ab_config, ab_data, ab_out = "ablation", ab_sweeps;
  std::size_t ab_seeds = 3;
  std::vector<std::string> ab_set;
  ab->add_option("--config", ab_config, "Base config file");
  ab->add_option("--data", ab_data, "Dataset directory (overrides the config)");
  ab->add_option("--out", ab_out, "Output directory");
  ab->add_option("--seeds", ab_seeds, "Seeds per arm");
  ab->add_option("--sweeps", ab_sweeps, "Comma-separated sweeps: tau, lambda3");
  ab->add_option("--set", ab_set, "Extra key=value overrides");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Compare autodiff with central differences");
  std::string gc_module = "all";
  std::size_t gc_points = 20;
  gc->add_option("--module", gc_module, "Operation name or 'all'");
  gc->add_option("--points", gc_points, "Random points per operation");

  // params
  auto* pa = app.add_subcommand("params", "Print parameter counts and the meta-network overhead");
  std::string pa_ckpt, pa_config;
  pa->add_option("--checkpoint", pa_ckpt, "Checkpoint file");
  pa->add_option("--config", pa_config, "Config file (used when no checkpoint is given)");

  // plot-meta
  auto* pm = app.add_subcommand("plot-meta", "Render meta_params.csv as an SVG line plot");
  std::string pm_csv, pm_out, pm_config;
  pm->add_option("--csv", pm_csv, "meta_params.csv")->required()->check(CLI::ExistingFile);
  pm->add_option("--out", pm_out, "Output SVG")->required();
  pm->add_option("--config", pm_config, "Config file giving the parameter ranges");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto splits = generate_splits(synth, gen_seed, sizes);
      write_splits(splits, gen_out);
      std::cout << "wrote " << splits.train.size() << " train, " << splits.val.size() << " val, " << splits.test.size()
                << " test volumes (" << synth.extent << "^3) to " << gen_out << '\n';
    } else if (*tr) {
      if (!tr_arm.empty()) tr_set.push_back("arm=" + tr_arm);
      const auto cfg = load_train_config(tr_config, tr_set);
      const auto data = read_splits(data_dir(cfg, tr_data));
      const std::size_t total = cfg.epochs * cfg.iters_per_epoch;
      TrainOptions opts{tr_out, {}, 0};
      if (!tr_quiet) opts.on_iteration = [&](const IterationRecord& r) {
        if ((r.iter + 1) % cfg.iters_per_epoch == 0) print_loss(r, total);
      };
      const auto res = train(cfg, data.train, opts);
      std::cout << "trained arm " << arm_name(cfg.arm) << " for " << res.log.size() << " iterations; artifacts in "
                << tr_out << '\n';
      if (!data.test.empty()) {
        const auto table = evaluate_combinations(res.model.backbone, data.test);
        table.write_csv(fs::path(tr_out) / "eval_table.csv");
        std::cout << "test AVG Dice WT " << std::fixed << std::setprecision(2) << 100 * table.avg[0] << "  TC "
                  << 100 * table.avg[1] << "  ET " << 100 * table.avg[2] << '\n';
      }
    } else if (*ev) {
      const auto model = Model<float>::from_checkpoint(load_checkpoint(ev_ckpt));
      const auto data = load_split(ev_data, ev_split);
      const auto table = evaluate_combinations(model.backbone, data);
      table.write_csv(ev_out);
      std::cout << table.to_csv();
      if (!ev_slices.empty()) write_slices(model.backbone, data, ev_slices);
    } else if (*ab) {
      const auto cfg = load_train_config(ab_config, ab_set);
      const auto data = read_splits(data_dir(cfg, ab_data));
      if (data.test.empty()) throw Error("ablate: dataset has no test split");
      AblationOptions opts;
      opts.seeds = ab_seeds;
      opts.out_dir = ab_out;
      opts.progress = [](const std::string& s) { std::cout << s << std::endl; };
      std::stringstream list(ab_sweeps);
      for (std::string item; std::getline(list, item, ',');) {
        if (item == "tau") opts.sweep_tau = true;
        else if (item == "lambda3") opts.sweep_lambda3 = true;
        else if (!item.empty()) throw Error("unknown sweep '" + item + "' (expected tau or lambda3)");
      }
      const auto report = ablate(cfg, data.train, data.test, opts);
      std::cout << report.ablation_csv();
      if (!report.sweeps.empty()) std::cout << report.sweep_csv();
    } else if (*gc) {
      std::vector<std::string> modules;
      if (gc_module == "all") modules = grad_suite_modules();
      else modules.push_back(gc_module);
      bool ok = true;
      for (const auto& m : modules) {
        const auto e = run_grad_check(m, gc_points);
        const bool pass = e.max_rel_error < 1e-4;
        ok &= pass;
        std::cout << std::left << std::setw(18) << m << " max rel error " << std::scientific << std::setprecision(2)
                  << e.max_rel_error << "  (" << std::fixed << std::setprecision(2) << e.seconds << " s)  "
                  << (pass ? "ok" : "FAIL") << '\n';
      }
      return ok ? 0 : 1;
    } else if (*pa) {
      BackboneConfig bc;
      MetaNetConfig mc;
      if (!pa_ckpt.empty()) {
        const auto c = load_checkpoint(pa_ckpt);
        bc = c.backbone;
        mc.hidden = c.meta_hidden;
      } else {
        const auto cfg = load_train_config(pa_config, {});
        bc.base_channels = cfg.base_channels;
        bc.depth = cfg.depth;
        mc = cfg.meta_config();
      }
      const Backbone<float> net(bc);
      const MetaNetwork<float> meta(bc.modalities * bc.classes, mc);
      for (std::size_t m = 0; m < bc.modalities; ++m)
        std::cout << "encoder " << modality_name(m) << ": " << net.encoder_param_count(m) << '\n';
      std::cout << "decoder: " << net.decoder_param_count() << "\nfusion: " << net.fusion_param_count()
                << "\nbackbone total: " << net.param_count() << "\nmeta network: " << meta.param_count() << '\n';
      const double overhead = 100.0 * static_cast<double>(meta.param_count()) / static_cast<double>(net.param_count());
      const bool ok = meta.param_count() < 5000 && overhead < 0.01;
      std::cout << "overhead: " << std::fixed << std::setprecision(4) << overhead << "% of backbone ("
                << (ok ? "within" : "exceeds") << " the 0.01% budget)\n";
      return ok ? 0 : 1;
    } else if (*pm) {
      MetaNetConfig mc = pm_config.empty() ? MetaNetConfig{} : load_config(pm_config).meta_config();
      plot_meta(pm_csv, pm_out, mc);
      std::cout << "wrote " << pm_out << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
