#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mgml/backbone.hpp"
#include "mgml/data.hpp"
#include "mgml/meta_amf.hpp"

namespace mgml {

/// Contents of a checkpoint file.
///
/// Layout (little-endian): "MGC1", version u32, six u32 config values
/// (modalities, classes, base_channels, depth, input_extent, meta_hidden),
/// tensor count u32, then per tensor: name length u32, UTF-8 name, rank u32,
/// dims u32×rank, f32 data.
struct Checkpoint {
  BackboneConfig backbone;
  std::size_t meta_hidden = 16;
  std::vector<Parameter<float>> tensors;

  const Parameter<float>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline Checkpoint make_checkpoint(const Backbone<float>& net, const MetaNetwork<float>& meta) {
  Checkpoint c{net.config(), meta.config().hidden, {}};
  for (const auto& p : net.params()) c.tensors.push_back(p);
  for (const auto& p : meta.params()) c.tensors.push_back(p);
  return c;
}

inline std::vector<char> encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.bytes("MGC1", 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  for (std::size_t v : {c.backbone.modalities, c.backbone.classes, c.backbone.base_channels, c.backbone.depth,
                        c.backbone.input_extent, c.meta_hidden})
    w.le<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float x : t.value.data()) w.le<float>(x);
  }
  return w.data();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes));
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::string_view(magic, 4) != "MGC1") throw ParseError("bad checkpoint magic", 0);
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  Checkpoint c;
  c.backbone.modalities = r.le<std::uint32_t>("config");
  c.backbone.classes = r.le<std::uint32_t>("config");
  c.backbone.base_channels = r.le<std::uint32_t>("config");
  c.backbone.depth = r.le<std::uint32_t>("config");
  c.backbone.input_extent = r.le<std::uint32_t>("config");
  c.meta_hidden = r.le<std::uint32_t>("config");
  try {
    c.backbone.validate();
  } catch (const Error& e) {
    throw ParseError(std::string("invalid config block: ") + e.what(), 8);
  }
  const auto count = r.le<std::uint32_t>("tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t at = r.pos();
    const auto len = r.le<std::uint32_t>("name length");
    if (len == 0 || len > 4096) throw ParseError("invalid tensor name length", at);
    std::string name(len, '\0');
    r.bytes(name.data(), len, "name");
    const std::size_t rank_at = r.pos();
    const auto rank = r.le<std::uint32_t>("rank");
    if (rank > 8) throw ParseError("tensor rank too large", rank_at);
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::size_t dim_at = r.pos();
      const auto d = r.le<std::uint32_t>("dims");
      if (d == 0) throw ParseError("zero tensor extent", dim_at);
      shape.push_back(d);
      n *= d;
    }
    if (r.remaining() / 4 < n) throw ParseError("truncated input while reading tensor data", r.pos());
    std::vector<float> v(n);
    for (auto& x : v) x = r.le<float>("tensor data");
    c.tensors.push_back({std::move(name), Tensor<float>(std::move(shape), std::move(v))});
  }
  if (r.remaining() != 0) throw ParseError("trailing bytes after the last tensor", r.pos());
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

/// Copies checkpoint tensors into `set`; every parameter must be present
/// with a matching shape.
template <std::floating_point T>
void restore(ParameterSet<T>& set, const Checkpoint& c) {
  ParameterSet<float> src;
  for (const auto& t : c.tensors)
    if (set.find(t.name)) src.add(t.name, t.value);
  set.assign_from(src);
}

}  // namespace mgml
