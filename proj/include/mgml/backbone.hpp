#pragma once

#include <string>
#include <vector>

#include "mgml/modality.hpp"
#include "mgml/ops.hpp"
#include "mgml/params.hpp"

namespace mgml {

struct BackboneConfig {
  std::size_t modalities = 4;
  std::size_t classes = 4;
  std::size_t base_channels = 8;
  std::size_t depth = 3;
  std::size_t input_extent = 32;

  std::size_t channels(std::size_t level) const { return base_channels << level; }

  void validate() const {
    if (modalities < 1 || modalities > kMaxModalities) throw Error("backbone: modalities must lie in [1, 8]");
    if (classes < 2) throw Error("backbone: need at least 2 classes");
    if (base_channels < 1 || depth < 1) throw Error("backbone: base_channels and depth must be positive");
    const std::size_t div = std::size_t{1} << (depth - 1);
    if (input_extent == 0 || input_extent % div != 0) {
      throw Error("backbone: input_extent " + std::to_string(input_extent) + " not divisible by " +
                  std::to_string(div));
    }
  }
};

template <std::floating_point T>
struct ForwardOutputs {
  std::vector<Tensor<T>> logits;  // L_i, [C,D,H,W]; empty tensor when not computed
  std::vector<Tensor<T>> probs;   // softmax of L_i over the class axis
  std::vector<bool> computed;
  ModalitySet present;
  Tensor<T> fused;  // S_out
};

enum class Branches { all, present_only };

/// Per-modality convolutional encoders, one shared decoder that maps each
/// modality's features to logits, and softplus-gated logit averaging.
template <std::floating_point T>
class Backbone {
 public:
  explicit Backbone(BackboneConfig cfg, std::uint64_t seed = 1024) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0xB0));
    for (std::size_t m = 0; m < cfg_.modalities; ++m) {
      for (std::size_t k = 0; k < cfg_.depth; ++k) {
        const std::size_t cin = k == 0 ? 1 : cfg_.channels(k - 1), c = cfg_.channels(k);
        conv(enc_name(m, k, 0), cin, c, rng);
        conv(enc_name(m, k, 1), c, c, rng);
      }
    }
    for (std::size_t k = cfg_.depth - 1; k-- > 0;) {
      const std::size_t c = cfg_.channels(k);
      conv(dec_name(k, "reduce"), cfg_.channels(k + 1), c, rng);
      conv(dec_name(k, "merge"), 2 * c, c, rng);
    }
    params_.add("dec.head.weight", kaiming_normal<T>({cfg_.classes, cfg_.channels(0)}, cfg_.channels(0), rng));
    params_.add("dec.head.bias", Tensor<T>(Shape{cfg_.classes, 1}));
    params_.add("fusion.gate", Tensor<T>(Shape{cfg_.modalities}));
  }

  const BackboneConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  std::size_t encoder_param_count(std::size_t m) const { return params_.count("enc" + std::to_string(m) + "."); }
  std::size_t decoder_param_count() const { return params_.count("dec."); }
  std::size_t fusion_param_count() const { return params_.count("fusion."); }
  std::size_t param_count() const { return params_.count(); }

  /// Feature maps per level for modality `m`; level k is [base·2^k, E/2^k, ...].
  std::vector<Tensor<T>> encode_modality(Binder<T>& b, const Tensor<T>& volume, std::size_t m) const {
    if (m >= cfg_.modalities) throw Error("encode_modality: modality index out of range");
    const std::size_t e = cfg_.input_extent;
    Tensor<T> x = volume;
    if (x.rank() == 3) x = ops::reshape(x, Shape{1, x.extent(0), x.extent(1), x.extent(2)});
    if (x.shape() != Shape{1, e, e, e}) {
      throw ShapeError("encode_modality: expected volume [1," + std::to_string(e) + "," + std::to_string(e) + "," +
                       std::to_string(e) + "], got " + shape_str(volume.shape()));
    }
    std::vector<Tensor<T>> feats;
    for (std::size_t k = 0; k < cfg_.depth; ++k) {
      x = apply_conv(b, enc_name(m, k, 0), x, k == 0 ? 1 : 2);
      x = apply_conv(b, enc_name(m, k, 1), x, 1);
      feats.push_back(x);
    }
    return feats;
  }

  /// Logits [C,D,H,W] from one modality's feature pyramid.
  Tensor<T> decode(Binder<T>& b, const std::vector<Tensor<T>>& feats) const {
    if (feats.size() != cfg_.depth) {
      throw Error("decode_shared: expected " + std::to_string(cfg_.depth) + " feature levels, got " +
                  std::to_string(feats.size()));
    }
    Tensor<T> x = feats.back();
    for (std::size_t k = cfg_.depth - 1; k-- > 0;) {
      x = apply_conv(b, dec_name(k, "reduce"), x, 1);
      x = ops::upsample3d(x);
      x = ops::concat(std::vector<Tensor<T>>{x, feats[k]}, 0);
      x = apply_conv(b, dec_name(k, "merge"), x, 1);
    }
    const std::size_t e = cfg_.input_extent, v = e * e * e;
    const auto flat = ops::reshape(x, Shape{cfg_.channels(0), v});
    const auto ones = Tensor<T>::full(Shape{1, v}, T{1});
    auto logits = ops::add(ops::matmul(b(*params_.find("dec.head.weight")), flat),
                           ops::matmul(b(*params_.find("dec.head.bias")), ones));
    return ops::reshape(logits, Shape{cfg_.classes, e, e, e});
  }

  std::vector<Tensor<T>> decode_shared(Binder<T>& b, const std::vector<std::vector<Tensor<T>>>& feats) const {
    std::vector<Tensor<T>> out;
    for (const auto& f : feats) out.push_back(decode(b, f));
    return out;
  }

  /// S_out = Σ g_i L_i / Σ g_i over present modalities, g = softplus(gate).
  Tensor<T> baseline_fuse(Binder<T>& b, const std::vector<Tensor<T>>& logits, ModalitySet present) const {
    if (present.empty()) throw Error("baseline_fuse: no modality present");
    const auto idx = present.indices();
    std::vector<Tensor<T>> selected;
    for (auto i : idx) selected.push_back(logits.at(i));
    const auto g = ops::softplus(b(*params_.find("fusion.gate")));
    std::vector<Tensor<T>> gates;
    for (auto i : idx) gates.push_back(ops::slice(g, 0, i, i + 1));
    return gated_average(selected, gates);
  }

  /// Normalized weighted sum Σ (g_i/Σg) L_i; a single term reduces to L_1.
  static Tensor<T> gated_average(const std::vector<Tensor<T>>& logits, const std::vector<Tensor<T>>& gates) {
    if (logits.empty() || logits.size() != gates.size()) throw Error("gated_average: mismatched inputs");
    Tensor<T> denom = gates[0];
    for (std::size_t i = 1; i < gates.size(); ++i) denom = ops::add(denom, gates[i]);
    Tensor<T> s;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      auto term = ops::mul(ops::div(gates[i], denom), logits[i]);
      s = i == 0 ? term : ops::add(s, term);
    }
    return s;
  }

  /// Absent modalities are encoded from zero volumes. With
  /// Branches::present_only their branches are skipped entirely.
  ForwardOutputs<T> forward(Binder<T>& b, const std::vector<Tensor<T>>& volumes, ModalitySet present,
                            Branches branches = Branches::all) const {
    if (volumes.size() != cfg_.modalities) {
      throw Error("forward: expected " + std::to_string(cfg_.modalities) + " modality volumes, got " +
                  std::to_string(volumes.size()));
    }
    if (present.universe() != cfg_.modalities) throw Error("forward: modality set universe mismatch");
    ForwardOutputs<T> out;
    out.present = present;
    out.logits.resize(cfg_.modalities);
    out.probs.resize(cfg_.modalities);
    out.computed.assign(cfg_.modalities, false);
    for (std::size_t m = 0; m < cfg_.modalities; ++m) {
      const bool here = present.contains(m);
      if (!here && branches == Branches::present_only) continue;
      const Tensor<T> input = here ? volumes[m] : Tensor<T>(volumes[m].shape());
      out.logits[m] = decode(b, encode_modality(b, input, m));
      out.probs[m] = ops::softmax(out.logits[m], 0);
      out.computed[m] = true;
    }
    out.fused = baseline_fuse(b, out.logits, present);
    return out;
  }

 private:
  static std::string enc_name(std::size_t m, std::size_t k, std::size_t j) {
    return "enc" + std::to_string(m) + ".l" + std::to_string(k) + ".conv" + std::to_string(j);
  }
  static std::string dec_name(std::size_t k, const char* what) {
    return "dec.l" + std::to_string(k) + "." + what;
  }

  void conv(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng) {
    params_.add(name + ".weight", kaiming_normal<T>({cout, cin, 3, 3, 3}, cin * 27, rng));
    params_.add(name + ".bias", Tensor<T>(Shape{cout}));
  }

  Tensor<T> apply_conv(Binder<T>& b, const std::string& name, const Tensor<T>& x, std::size_t stride) const {
    const auto& w = b(*params_.find(name + ".weight"));
    const auto& bias = b(*params_.find(name + ".bias"));
    return ops::relu(ops::conv3d(x, w, bias, stride));
  }

  BackboneConfig cfg_;
  ParameterSet<T> params_;
};

}  // namespace mgml
