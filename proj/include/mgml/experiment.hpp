#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mgml/train.hpp"

namespace mgml {

struct SplitSizes {
  std::size_t train = 40, val = 10, test = 20;
};

struct DatasetSplits {
  std::vector<VolumeSample> train, val, test;
};

/// Seed offsets keep the three splits disjoint for up to 10⁶ samples each.
inline constexpr std::uint64_t kValSeedOffset = 1'000'000;
inline constexpr std::uint64_t kTestSeedOffset = 2'000'000;

inline DatasetSplits generate_splits(const SynthConfig& cfg, std::uint64_t seed, const SplitSizes& n) {
  DatasetSplits s;
  s.train = generate_dataset(cfg, seed, n.train);
  if (n.val) s.val = generate_dataset(cfg, seed + kValSeedOffset, n.val);
  if (n.test) s.test = generate_dataset(cfg, seed + kTestSeedOffset, n.test);
  return s;
}

/// Writes train.mgv, val.mgv and test.mgv (empty splits are skipped).
inline void write_splits(const DatasetSplits& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_dataset(s.train, dir / "train.mgv");
  if (!s.val.empty()) write_dataset(s.val, dir / "val.mgv");
  if (!s.test.empty()) write_dataset(s.test, dir / "test.mgv");
}

inline DatasetSplits read_splits(const std::filesystem::path& dir) {
  DatasetSplits s;
  s.train = load_split(dir, "train");
  if (std::filesystem::exists(dir / "val.mgv")) s.val = load_split(dir, "val");
  if (std::filesystem::exists(dir / "test.mgv")) s.test = load_split(dir, "test");
  return s;
}

struct RunResult {
  TrainResult train;
  EvalTable table;
};

/// Trains, evaluates on `test_set` and, with an output directory, writes the
/// training artifacts plus eval_table.csv.
inline RunResult run_experiment(const TrainConfig& cfg, const std::vector<VolumeSample>& train_set,
                                const std::vector<VolumeSample>& test_set, const std::filesystem::path& out_dir = {}) {
  RunResult r{train(cfg, train_set, {out_dir}), {}};
  r.table = evaluate_combinations(r.train.model.backbone, test_set);
  if (!out_dir.empty()) r.table.write_csv(out_dir / "eval_table.csv");
  return r;
}

// ---------------------------------------------------------------------------
// Meta-parameter trajectories

inline constexpr std::array<const char*, 5> kMetaSeries{"t1", "t2", "w_f", "beta", "alpha"};

struct MetaTrajectory {
  std::vector<std::size_t> iter;
  std::array<std::vector<double>, 5> series;  // ordered as kMetaSeries

  std::size_t size() const { return iter.size(); }
};

inline MetaTrajectory parse_meta_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "iter,t1,t2,w_f,beta,alpha")
    throw Error("meta_params.csv: missing or unexpected header");
  MetaTrajectory t;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(row, cell, ',')) {
      std::size_t used = 0;
      double x = 0;
      try {
        x = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cell.size())
        throw Error("meta_params.csv line " + std::to_string(lineno) + ": bad number '" + cell + "'");
      v.push_back(x);
    }
    if (v.size() != 6) throw Error("meta_params.csv line " + std::to_string(lineno) + ": expected 6 columns");
    t.iter.push_back(static_cast<std::size_t>(v[0]));
    for (std::size_t k = 0; k < 5; ++k) t.series[k].push_back(v[k + 1]);
  }
  return t;
}

inline MetaTrajectory read_meta_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_meta_csv(ss.str());
}

/// Number of rows with a non-finite value or a value outside its configured range.
inline std::size_t meta_range_violations(const MetaTrajectory& t, const MetaNetConfig& cfg) {
  const std::array<Range, 5> ranges{cfg.t, cfg.t, cfg.w_f, cfg.beta, cfg.alpha};
  std::size_t bad = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    bool ok = true;
    for (std::size_t k = 0; k < 5; ++k) ok &= std::isfinite(t.series[k][i]) && ranges[k].contains(t.series[k][i]);
    bad += !ok;
  }
  return bad;
}

/// Five stacked line panels (one per meta-parameter) over iterations, each
/// scaled to its configured range.
inline std::string render_meta_svg(const MetaTrajectory& t, const MetaNetConfig& cfg) {
  if (t.size() == 0) throw Error("plot: empty meta-parameter trajectory");
  const std::array<Range, 5> ranges{cfg.t, cfg.t, cfg.w_f, cfg.beta, cfg.alpha};
  const double width = 640, panel = 110, left = 60, right = 20, top = 30;
  const double plot_w = width - left - right, plot_h = panel - 30;
  const double x0 = static_cast<double>(t.iter.front()), x1 = static_cast<double>(t.iter.back());
  const double xs = x1 > x0 ? plot_w / (x1 - x0) : 0.0;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + 5 * panel
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">Meta-parameter trajectories (iterations "
    << t.iter.front() << "-" << t.iter.back() << ")</text>\n";
  for (std::size_t k = 0; k < 5; ++k) {
    const double py = top + k * panel + 10;
    const Range r = ranges[k];
    o << "<rect x=\"" << left << "\" y=\"" << py << "\" width=\"" << plot_w << "\" height=\"" << plot_h
      << "\" fill=\"none\" stroke=\"#888\"/>\n";
    o << "<text x=\"8\" y=\"" << py + plot_h / 2 + 4 << "\">" << kMetaSeries[k] << "</text>\n";
    o << "<text x=\"" << left - 4 << "\" y=\"" << py + 10 << "\" text-anchor=\"end\">" << fmt_g(r.hi, 4) << "</text>\n";
    o << "<text x=\"" << left - 4 << "\" y=\"" << py + plot_h << "\" text-anchor=\"end\">" << fmt_g(r.lo, 4)
      << "</text>\n";
    o << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.2\" points=\"";
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double v = std::clamp(t.series[k][i], r.lo, r.hi);
      const double x = left + (static_cast<double>(t.iter[i]) - x0) * xs;
      const double y = py + plot_h * (1.0 - (v - r.lo) / (r.hi - r.lo));
      o << fmt_g(x, 6) << ',' << fmt_g(y, 6) << (i + 1 < t.size() ? " " : "");
    }
    o << "\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Reads `csv` and writes the SVG plot to `svg`.
inline void plot_meta(const std::filesystem::path& csv, const std::filesystem::path& svg, const MetaNetConfig& cfg = {}) {
  const auto text = render_meta_svg(read_meta_csv(csv), cfg);
  std::ofstream out(svg, std::ios::trunc);
  if (!out) throw Error("cannot open '" + svg.string() + "' for writing");
  out << text;
}

}  // namespace mgml
