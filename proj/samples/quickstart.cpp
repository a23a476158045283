// Generates a small synthetic dataset, trains the full method for a few
// epochs, evaluates every modality combination and plots the meta-parameters.

#include <iostream>

#include "mgml/mgml.hpp"

int main() {
  using namespace mgml;
  namespace fs = std::filesystem;

  SynthConfig synth;
  synth.extent = 16;
  const auto data = generate_splits(synth, 7, {12, 0, 6});

  TrainConfig cfg;
  cfg.arm = Arm::mgml;
  cfg.base_channels = 4;
  cfg.epochs = 4;
  cfg.iters_per_epoch = 25;
  cfg.lr_init = 1e-3;

  const fs::path out = fs::temp_directory_path() / "mgml_quickstart";
  const auto run = run_experiment(cfg, data.train, data.test, out);

  const auto& last = run.train.log.back();
  std::cout << "final loss " << last.loss.total << " (seg " << last.loss.l_seg << ", soft label " << last.loss.l_sl
            << ", consistency " << last.loss.l_cr << ")\n"
            << "meta-parameters: beta " << last.meta->beta << ", alpha " << last.meta->alpha << ", w_f "
            << last.meta->w_f << "\n\n"
            << run.table.to_csv();

  plot_meta(out / "meta_params.csv", out / "meta_params.svg", cfg.meta_config());
  std::cout << "\nartifacts in " << out.string() << '\n';
}
