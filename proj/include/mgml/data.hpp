#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "mgml/parallel.hpp"
#include "mgml/random.hpp"
#include "mgml/tensor.hpp"

namespace mgml {

enum Label : std::uint8_t { kBG = 0, kNCR = 1, kED = 2, kET = 3 };
inline constexpr std::size_t kNumClasses = 4;

/// Malformed input; `offset` is the byte position of the problem.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

struct VolumeSample {
  std::size_t extent = 0;                   // cubic D = H = W
  std::vector<Tensor<float>> modalities;    // M volumes [D,H,W]
  std::vector<std::uint8_t> labels;         // D·H·W class ids
  std::uint64_t sample_seed = 0;

  std::size_t voxels() const { return extent * extent * extent; }

  /// Modality volumes as [1,D,H,W] tensors of precision T.
  template <std::floating_point T>
  std::vector<Tensor<T>> volumes() const {
    std::vector<Tensor<T>> out;
    for (const auto& m : modalities) {
      std::vector<T> v(m.data().begin(), m.data().end());
      out.emplace_back(Shape{1, extent, extent, extent}, std::move(v));
    }
    return out;
  }

  bool operator==(const VolumeSample& o) const {
    if (extent != o.extent || labels != o.labels || sample_seed != o.sample_seed ||
        modalities.size() != o.modalities.size())
      return false;
    for (std::size_t i = 0; i < modalities.size(); ++i) {
      if (std::memcmp(modalities[i].raw(), o.modalities[i].raw(), modalities[i].numel() * sizeof(float)) != 0)
        return false;
    }
    return true;
  }
};

struct SynthConfig {
  std::size_t extent = 32;
  std::size_t lesions_min = 1, lesions_max = 3;
  /// WT semi-axis range in voxels at extent 32; scaled linearly with extent.
  double wt_radius_min = 5.0, wt_radius_max = 9.0;
  double tc_ratio_min = 0.45, tc_ratio_max = 0.7;  // TC radius / WT radius
  double et_ratio_min = 0.4, et_ratio_max = 0.7;   // ET radius / TC radius
  double anisotropy_min = 0.8, anisotropy_max = 1.2;
  double et_probability = 0.85;
  double noise_sigma = 0.05;
  /// Mean intensity per class (BG, NCR, ED, ET) for FLAIR, T1ce, T1, T2.
  std::array<std::array<double, kNumClasses>, 4> contrast{{
      {0.2, 0.5, 0.9, 0.6},
      {0.3, 0.25, 0.35, 1.0},
      {0.4, 0.3, 0.35, 0.45},
      {0.25, 0.6, 0.85, 0.55},
  }};

  double radius_scale() const { return static_cast<double>(extent) / 32.0; }

  void validate() const {
    if (extent < 4) throw Error("synth: extent must be at least 4");
    if (lesions_min < 1 || lesions_min > lesions_max) throw Error("synth: invalid lesion count range");
    if (!(wt_radius_min > 0 && wt_radius_min <= wt_radius_max)) throw Error("synth: invalid WT radius range");
    if (!(tc_ratio_min > 0 && tc_ratio_min <= tc_ratio_max && tc_ratio_max < 1)) throw Error("synth: TC ratio must lie in (0, 1)");
    if (!(et_ratio_min > 0 && et_ratio_min <= et_ratio_max && et_ratio_max < 1)) throw Error("synth: ET ratio must lie in (0, 1)");
    if (!(anisotropy_min > 0 && anisotropy_min <= anisotropy_max)) throw Error("synth: invalid anisotropy range");
    if (!(noise_sigma >= 0)) throw Error("synth: noise sigma must be nonnegative");
    const double reach = wt_radius_max * radius_scale() * anisotropy_max;
    if (2.0 * reach + 2.0 > static_cast<double>(extent)) {
      throw Error("synth: lesion radii exceed the volume extent");
    }
  }
};

namespace detail {

inline int label_priority(std::uint8_t c) {
  switch (c) {
    case kET: return 3;
    case kNCR: return 2;
    case kED: return 1;
    default: return 0;
  }
}

struct Ellipsoid {
  std::array<double, 3> center, radii;
  bool contains(double z, double y, double x) const {
    const double a = (z - center[0]) / radii[0], b = (y - center[1]) / radii[1], c = (x - center[2]) / radii[2];
    return a * a + b * b + c * c <= 1.0;
  }
};

}  // namespace detail

/// Nested ellipsoid lesions (WT ⊃ TC ⊃ ET) rendered as class-mean intensity
/// plus Gaussian noise per modality.
inline VolumeSample generate_volume(const SynthConfig& cfg, std::uint64_t sample_seed) {
  cfg.validate();
  Rng rng(mix_seed(sample_seed, 0xDA7A));
  const std::size_t e = cfg.extent, v = e * e * e;
  VolumeSample s;
  s.extent = e;
  s.sample_seed = sample_seed;
  s.labels.assign(v, kBG);

  const std::size_t lesions = cfg.lesions_min + uniform_index(rng, cfg.lesions_max - cfg.lesions_min + 1);
  for (std::size_t l = 0; l < lesions; ++l) {
    const double wt = uniform(rng, cfg.wt_radius_min, cfg.wt_radius_max) * cfg.radius_scale();
    const double tc = wt * uniform(rng, cfg.tc_ratio_min, cfg.tc_ratio_max);
    const double et = tc * uniform(rng, cfg.et_ratio_min, cfg.et_ratio_max);
    const bool has_et = bernoulli(rng, cfg.et_probability);
    std::array<double, 3> aniso;
    for (auto& a : aniso) a = uniform(rng, cfg.anisotropy_min, cfg.anisotropy_max);
    const double reach = wt * cfg.anisotropy_max;
    std::array<double, 3> center;
    for (auto& c : center) c = uniform(rng, reach, static_cast<double>(e - 1) - reach);
    auto ell = [&](double r) {
      return detail::Ellipsoid{center, {r * aniso[0], r * aniso[1], r * aniso[2]}};
    };
    const auto e_wt = ell(wt), e_tc = ell(tc), e_et = ell(et);
    for (std::size_t z = 0; z < e; ++z)
      for (std::size_t y = 0; y < e; ++y)
        for (std::size_t x = 0; x < e; ++x) {
          const double fz = static_cast<double>(z), fy = static_cast<double>(y), fx = static_cast<double>(x);
          if (!e_wt.contains(fz, fy, fx)) continue;
          std::uint8_t c = kED;
          if (e_tc.contains(fz, fy, fx)) c = (has_et && e_et.contains(fz, fy, fx)) ? kET : kNCR;
          auto& dst = s.labels[(z * e + y) * e + x];
          if (detail::label_priority(c) > detail::label_priority(dst)) dst = c;
        }
  }

  for (std::size_t m = 0; m < cfg.contrast.size(); ++m) {
    std::vector<float> vol(v);
    for (std::size_t i = 0; i < v; ++i) {
      const double mean = cfg.contrast[m][s.labels[i]];
      vol[i] = static_cast<float>(mean + (cfg.noise_sigma > 0 ? cfg.noise_sigma * normal(rng) : 0.0));
    }
    s.modalities.emplace_back(Shape{e, e, e}, std::move(vol));
  }
  return s;
}

/// Samples with seeds `global_seed + index`, generated in parallel.
inline std::vector<VolumeSample> generate_dataset(const SynthConfig& cfg, std::uint64_t global_seed,
                                                  std::size_t count) {
  std::vector<VolumeSample> out(count);
  parallel_for(count, [&](std::size_t i) { out[i] = generate_volume(cfg, global_seed + i); });
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class AugmentStrength { none, weak, strong };

inline AugmentStrength parse_strength(const std::string& s) {
  if (s == "none") return AugmentStrength::none;
  if (s == "weak") return AugmentStrength::weak;
  if (s == "strong") return AugmentStrength::strong;
  throw Error("unknown augmentation strength '" + s + "'");
}

inline const char* strength_name(AugmentStrength s) {
  switch (s) {
    case AugmentStrength::none: return "none";
    case AugmentStrength::weak: return "weak";
    default: return "strong";
  }
}

struct AugmentPlan {
  std::array<bool, 3> flip{false, false, false};  // per spatial axis (D, H, W)
  std::size_t rotation_axis = 0;
  double angle = 0.0;                              // radians
  std::vector<double> gain, shift;                 // per-modality intensity jitter

  bool has_rotation() const { return angle != 0.0; }
};

inline constexpr double kMaxRotation = 10.0 * std::numbers::pi / 180.0;
inline constexpr double kIntensityJitter = 0.1;

/// Draws one plan. Flips are drawn first for every strength above none, so a
/// weak and a strong plan drawn from equal generator states share their flips.
inline AugmentPlan draw_augment(AugmentStrength strength, std::size_t modalities, Rng& rng) {
  AugmentPlan p;
  if (strength == AugmentStrength::none) return p;
  for (auto& f : p.flip) f = bernoulli(rng, 0.5);
  if (strength == AugmentStrength::strong) {
    p.rotation_axis = uniform_index(rng, 3);
    p.angle = uniform(rng, -kMaxRotation, kMaxRotation);
    for (std::size_t m = 0; m < modalities; ++m) {
      p.gain.push_back(1.0 + uniform(rng, -kIntensityJitter, kIntensityJitter));
      p.shift.push_back(uniform(rng, -kIntensityJitter, kIntensityJitter));
    }
  }
  return p;
}

namespace detail {

/// Source index for output voxel (z,y,x) under rotation by `angle` about the
/// volume centre in the plane orthogonal to `axis`, nearest neighbour with
/// edge clamping.
inline std::size_t rotated_source(std::size_t e, std::size_t axis, double cs, double sn, std::size_t z, std::size_t y,
                                  std::size_t x) {
  const double c = (static_cast<double>(e) - 1.0) / 2.0;
  std::array<double, 3> p{static_cast<double>(z) - c, static_cast<double>(y) - c, static_cast<double>(x) - c};
  const std::size_t a = (axis + 1) % 3, b = (axis + 2) % 3;
  const double pa = cs * p[a] + sn * p[b], pb = -sn * p[a] + cs * p[b];
  p[a] = pa;
  p[b] = pb;
  std::array<std::size_t, 3> q;
  for (std::size_t i = 0; i < 3; ++i) {
    const double r = std::nearbyint(p[i] + c);
    q[i] = static_cast<std::size_t>(std::clamp(r, 0.0, static_cast<double>(e - 1)));
  }
  return (q[0] * e + q[1]) * e + q[2];
}

/// Output-to-source voxel map for a plan's geometric part (rotation, then flips).
inline std::vector<std::size_t> geometry_map(const AugmentPlan& p, std::size_t e, bool inverse = false) {
  const std::size_t v = e * e * e;
  std::vector<std::size_t> map(v);
  const double ang = inverse ? -p.angle : p.angle;
  const double cs = std::cos(ang), sn = std::sin(ang);
  for (std::size_t z = 0; z < e; ++z)
    for (std::size_t y = 0; y < e; ++y)
      for (std::size_t x = 0; x < e; ++x) {
        std::size_t fz = p.flip[0] ? e - 1 - z : z, fy = p.flip[1] ? e - 1 - y : y, fx = p.flip[2] ? e - 1 - x : x;
        const std::size_t src = p.has_rotation() ? rotated_source(e, p.rotation_axis, cs, sn, fz, fy, fx)
                                                 : (fz * e + fy) * e + fx;
        map[(z * e + y) * e + x] = src;
      }
  return map;
}

}  // namespace detail

inline VolumeSample apply_augment(const VolumeSample& s, const AugmentPlan& p) {
  const bool geometric = p.flip[0] || p.flip[1] || p.flip[2] || p.has_rotation();
  if (!geometric && p.gain.empty()) return s;
  VolumeSample out = s;
  const std::size_t v = s.voxels();
  if (geometric) {
    const auto map = detail::geometry_map(p, s.extent);
    for (std::size_t i = 0; i < v; ++i) out.labels[i] = s.labels[map[i]];
    for (std::size_t m = 0; m < s.modalities.size(); ++m) {
      auto dst = out.modalities[m].mutable_data();
      const float* src = s.modalities[m].raw();
      for (std::size_t i = 0; i < v; ++i) dst[i] = src[map[i]];
    }
  }
  for (std::size_t m = 0; m < p.gain.size() && m < out.modalities.size(); ++m) {
    auto dst = out.modalities[m].mutable_data();
    for (auto& x : dst) x = static_cast<float>(x * p.gain[m] + p.shift[m]);
  }
  return out;
}

inline VolumeSample augment(const VolumeSample& s, AugmentStrength strength, Rng& rng) {
  return apply_augment(s, draw_augment(strength, s.modalities.size(), rng));
}

/// Maps [C,D,H,W] values computed in the frame of plan `from` into the frame
/// of plan `to`, both plans having been applied to the same sample. Nearest
/// neighbour; identical geometry returns `x` unchanged.
template <std::floating_point T>
Tensor<T> realign(const Tensor<T>& x, const AugmentPlan& from, const AugmentPlan& to) {
  if (from.flip == to.flip && from.angle == to.angle && from.rotation_axis == to.rotation_axis) return x;
  const std::size_t c = x.extent(0), e = x.extent(1), v = e * e * e;
  if (x.rank() != 4 || x.extent(2) != e || x.extent(3) != e) throw ShapeError("realign: expected [C,E,E,E]");
  const auto to_src = detail::geometry_map(to, e);
  const double cs = std::cos(-from.angle), sn = std::sin(-from.angle);
  auto flip = [&](std::size_t i) {
    const std::size_t z = i / (e * e), y = (i / e) % e, xx = i % e;
    return ((from.flip[0] ? e - 1 - z : z) * e + (from.flip[1] ? e - 1 - y : y)) * e + (from.flip[2] ? e - 1 - xx : xx);
  };
  std::vector<T> out(x.numel());
  const T* xv = x.raw();
  for (std::size_t q = 0; q < v; ++q) {
    // original voxel u sits at F(R⁻¹(u)) in the `from` frame
    const std::size_t u = to_src[q];
    const std::size_t w = from.has_rotation()
                              ? detail::rotated_source(e, from.rotation_axis, cs, sn, u / (e * e), (u / e) % e, u % e)
                              : u;
    const std::size_t src = flip(w);
    for (std::size_t k = 0; k < c; ++k) out[k * v + q] = xv[k * v + src];
  }
  return Tensor<T>(x.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Dataset file

namespace detail {

inline constexpr char kDatasetMagic[4] = {'M', 'G', 'V', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class U>
  void le(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    bytes(b, sizeof(U));
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> buf) : buf_(std::move(buf)) {}
  template <class U>
  U le(const char* what) {
    need(sizeof(U), what);
    unsigned char b[sizeof(U)];
    std::memcpy(b, buf_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }
  void bytes(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) throw ParseError(std::string("truncated input while reading ") + what, pos_);
  }
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

}  // namespace detail

inline std::vector<char> encode_dataset(const std::vector<VolumeSample>& samples) {
  if (samples.empty()) throw Error("write_dataset: refusing to write an empty sample list");
  const auto& first = samples.front();
  for (const auto& s : samples) {
    if (s.extent != first.extent || s.modalities.size() != first.modalities.size()) {
      throw Error("write_dataset: samples differ in extent or modality count");
    }
  }
  const auto e = static_cast<std::uint32_t>(first.extent);
  detail::ByteWriter w;
  w.bytes(detail::kDatasetMagic, 4);
  w.le<std::uint32_t>(detail::kDatasetVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(first.modalities.size()));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(kNumClasses));
  for (int i = 0; i < 3; ++i) w.le<std::uint32_t>(e);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    w.le<std::uint64_t>(s.sample_seed);
    for (const auto& m : s.modalities)
      for (float x : m.data()) w.le<float>(x);
    w.bytes(s.labels.data(), s.labels.size());
  }
  return w.data();
}

inline std::vector<VolumeSample> decode_dataset(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes));
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, detail::kDatasetMagic, 4) != 0) throw ParseError("bad dataset magic", 0);
  const auto version = r.le<std::uint32_t>("version");
  if (version != detail::kDatasetVersion) {
    throw ParseError("unsupported dataset version " + std::to_string(version), 4);
  }
  const auto m = r.le<std::uint32_t>("modality count");
  const auto c = r.le<std::uint32_t>("class count");
  const auto d = r.le<std::uint32_t>("depth");
  const auto h = r.le<std::uint32_t>("height");
  const auto wd = r.le<std::uint32_t>("width");
  const std::size_t header_dims = 12;
  if (m == 0 || m > 8) throw ParseError("invalid modality count", header_dims - 4);
  if (c != kNumClasses) throw ParseError("unsupported class count", header_dims);
  if (d == 0 || d != h || d != wd) throw ParseError("volumes must be nonempty cubes", header_dims + 4);
  const auto count = r.le<std::uint32_t>("sample count");
  if (count == 0) throw ParseError("dataset holds no samples", r.pos() - 4);
  const std::size_t v = static_cast<std::size_t>(d) * d * d;
  const std::size_t per_sample = 8 + m * v * 4 + v;
  if (r.remaining() / per_sample < count) {
    throw ParseError("truncated input: " + std::to_string(count) + " samples declared", r.pos() + r.remaining());
  }
  std::vector<VolumeSample> out(count);
  for (auto& s : out) {
    s.extent = d;
    s.sample_seed = r.le<std::uint64_t>("sample seed");
    for (std::uint32_t k = 0; k < m; ++k) {
      std::vector<float> vol(v);
      for (auto& x : vol) x = r.le<float>("intensities");
      s.modalities.emplace_back(Shape{d, d, d}, std::move(vol));
    }
    s.labels.resize(v);
    const std::size_t at = r.pos();
    r.bytes(s.labels.data(), v, "labels");
    for (std::size_t i = 0; i < v; ++i) {
      if (s.labels[i] >= kNumClasses) throw ParseError("label out of range", at + i);
    }
  }
  if (r.remaining() != 0) throw ParseError("trailing bytes after the last sample", r.pos());
  return out;
}

inline void write_dataset(const std::vector<VolumeSample>& samples, const std::filesystem::path& path) {
  detail::write_file(path, encode_dataset(samples));
}

inline std::vector<VolumeSample> read_dataset(const std::filesystem::path& path) {
  return decode_dataset(detail::read_file(path));
}

}  // namespace mgml
