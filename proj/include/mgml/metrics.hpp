#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mgml/backbone.hpp"
#include "mgml/data.hpp"
#include "mgml/modality.hpp"
#include "mgml/parallel.hpp"

namespace mgml {

enum Region : std::size_t { kWT = 0, kTC = 1, kET_region = 2 };
inline constexpr std::array<const char*, 3> kRegionNames{"wt", "tc", "et"};

using BinaryVolume = std::vector<std::uint8_t>;

struct RegionMasks {
  std::array<BinaryVolume, 3> masks;  // WT, TC, ET
};

/// WT = NCR ∪ ED ∪ ET, TC = NCR ∪ ET, ET = ET.
inline RegionMasks region_masks(const std::vector<std::uint8_t>& labels) {
  RegionMasks r;
  for (auto& m : r.masks) m.assign(labels.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = labels[i];
    if (c >= kNumClasses) throw Error("region_masks: class id " + std::to_string(c) + " out of range");
    r.masks[kWT][i] = c != kBG;
    r.masks[kTC][i] = c == kNCR || c == kET;
    r.masks[kET_region][i] = c == kET;
  }
  return r;
}

/// 2|A∩B| / (|A| + |B|); 1 when both are empty.
inline double dice(const BinaryVolume& pred, const BinaryVolume& gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("dice: size mismatch " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
  }
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    a += p;
    b += g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

/// Per-voxel argmax over the class axis of [C, D, H, W] logits.
template <std::floating_point T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& logits) {
  const std::size_t c = logits.extent(0), v = logits.numel() / c;
  std::vector<std::uint8_t> out(v);
  const T* x = logits.raw();
  for (std::size_t i = 0; i < v; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (x[k * v + i] > x[best * v + i]) best = k;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

struct EvalRow {
  ModalitySet combo;
  std::array<double, 3> dice{};  // fractions in [0, 1]
};

struct EvalTable {
  std::vector<EvalRow> rows;
  std::array<double, 3> avg{};

  void recompute_avg() {
    avg = {0, 0, 0};
    for (const auto& r : rows)
      for (std::size_t k = 0; k < 3; ++k) avg[k] += r.dice[k];
    for (auto& a : avg) a /= static_cast<double>(rows.size());
  }

  /// Mean of the three region averages, in Dice points (×100).
  double region_mean_points() const { return 100.0 * (avg[0] + avg[1] + avg[2]) / 3.0; }

  std::string to_csv() const {
    std::ostringstream o;
    o << "combo,flair,t1ce,t1,t2,dice_wt,dice_tc,dice_et\n";
    char buf[64];
    auto pct = [&](double d) {
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * d);
      return std::string(buf);
    };
    for (const auto& r : rows) {
      o << r.combo.name();
      for (std::size_t m = 0; m < 4; ++m) o << ',' << (r.combo.contains(m) ? 1 : 0);
      for (auto d : r.dice) o << ',' << pct(d);
      o << '\n';
    }
    o << "AVG,,,,";
    for (auto a : avg) o << ',' << pct(a);
    o << '\n';
    return o.str();
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out << to_csv();
  }
};

/// Predicted class volume for one sample and one modality subset.
using Predictor = std::function<std::vector<std::uint8_t>(const VolumeSample&, ModalitySet)>;

/// Dice per region averaged over subjects for each of the 15 combinations,
/// parallel over (combination, subject) pairs.
inline EvalTable evaluate_combinations(const Predictor& predict, const std::vector<VolumeSample>& dataset) {
  if (dataset.empty()) throw Error("evaluate: empty dataset");
  const auto& combos = evaluation_combinations();
  const std::size_t n = dataset.size();
  std::vector<std::array<double, 3>> cell(combos.size() * n);
  std::vector<RegionMasks> truth(n);
  parallel_for(n, [&](std::size_t s) { truth[s] = region_masks(dataset[s].labels); });
  parallel_for(cell.size(), [&](std::size_t job) {
    const std::size_t ci = job / n, s = job % n;
    const auto pred = region_masks(predict(dataset[s], combos[ci]));
    for (std::size_t k = 0; k < 3; ++k) cell[job][k] = dice(pred.masks[k], truth[s].masks[k]);
  });
  EvalTable t;
  for (std::size_t ci = 0; ci < combos.size(); ++ci) {
    EvalRow row{combos[ci], {0, 0, 0}};
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < 3; ++k) row.dice[k] += cell[ci * n + s][k];
    for (auto& d : row.dice) d /= static_cast<double>(n);
    t.rows.push_back(row);
  }
  t.recompute_avg();
  return t;
}

/// Fused-logit argmax of `model` with absent inputs zero-filled.
template <std::floating_point T>
Predictor model_predictor(const Backbone<T>& model) {
  return [&model](const VolumeSample& s, ModalitySet present) {
    Binder<T> constants;
    const auto out = model.forward(constants, s.volumes<T>(), present, Branches::present_only);
    return argmax_labels(out.fused);
  };
}

template <std::floating_point T>
EvalTable evaluate_combinations(const Backbone<T>& model, const std::vector<VolumeSample>& dataset) {
  return evaluate_combinations(model_predictor(model), dataset);
}

// ---------------------------------------------------------------------------
// Slice export

/// Mid-axial slice of a [D,H,W] float volume as an 8-bit PGM, min–max scaled.
inline void write_pgm_slice(const Tensor<float>& vol, const std::filesystem::path& path) {
  const std::size_t e = vol.extent(0), z = e / 2;
  const float* s = vol.raw() + z * e * e;
  float lo = s[0], hi = s[0];
  for (std::size_t i = 0; i < e * e; ++i) lo = std::min(lo, s[i]), hi = std::max(hi, s[i]);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "P5\n" << e << ' ' << e << "\n255\n";
  for (std::size_t i = 0; i < e * e; ++i) {
    const double t = hi > lo ? (s[i] - lo) / (hi - lo) : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
}

/// Mid-axial slice of a label volume as a colour PPM (BG black, NCR red,
/// ED green, ET yellow).
inline void write_ppm_labels(const std::vector<std::uint8_t>& labels, std::size_t e,
                             const std::filesystem::path& path) {
  static constexpr unsigned char palette[4][3] = {{0, 0, 0}, {220, 40, 40}, {40, 200, 60}, {250, 220, 30}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "P6\n" << e << ' ' << e << "\n255\n";
  const std::size_t z = e / 2;
  for (std::size_t i = 0; i < e * e; ++i) {
    const auto c = std::min<std::uint8_t>(labels[z * e * e + i], 3);
    out.write(reinterpret_cast<const char*>(palette[c]), 3);
  }
}

}  // namespace mgml
