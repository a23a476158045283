#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mgml/tensor.hpp"

namespace mgml {

inline constexpr std::size_t kMaxModalities = 8;
inline constexpr std::array<const char*, 4> kModalityNames{"flair", "t1ce", "t1", "t2"};

inline std::string modality_name(std::size_t i) {
  return i < kModalityNames.size() ? kModalityNames[i] : "m" + std::to_string(i);
}

/// Subset of the M input modalities available to one forward pass.
class ModalitySet {
 public:
  ModalitySet() = default;
  ModalitySet(std::uint32_t bits, std::size_t universe) : bits_(bits), universe_(universe) {
    if (universe == 0 || universe > kMaxModalities) throw Error("ModalitySet: universe size out of range");
    if (bits >> universe) throw Error("ModalitySet: bit outside the modality universe");
  }

  static ModalitySet full(std::size_t universe) { return {(1u << universe) - 1u, universe}; }
  static ModalitySet of(std::initializer_list<std::size_t> members, std::size_t universe) {
    std::uint32_t b = 0;
    for (auto m : members) b |= 1u << m;
    return {b, universe};
  }

  bool contains(std::size_t i) const { return i < universe_ && ((bits_ >> i) & 1u); }
  bool empty() const { return bits_ == 0; }
  bool is_full() const { return bits_ == (1u << universe_) - 1u; }
  std::size_t universe() const { return universe_; }
  std::uint32_t bits() const { return bits_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < universe_; ++i) n += contains(i);
    return n;
  }

  /// Members in ascending modality order.
  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < universe_; ++i)
      if (contains(i)) out.push_back(i);
    return out;
  }

  std::string name() const {
    std::string s;
    for (auto i : indices()) s += (s.empty() ? "" : "+") + modality_name(i);
    return s.empty() ? "none" : s;
  }

  bool operator==(const ModalitySet&) const = default;

 private:
  std::uint32_t bits_ = 0;
  std::size_t universe_ = 4;
};

/// The 15 nonempty subsets of {FLAIR, T1ce, T1, T2} in the column order of the
/// standard incomplete-modality evaluation table: singles, pairs, triples, all.
inline const std::vector<ModalitySet>& evaluation_combinations() {
  static const std::vector<ModalitySet> combos = [] {
    std::vector<ModalitySet> c;
    for (std::uint32_t b : {1u, 2u, 4u, 8u, 3u, 5u, 9u, 6u, 10u, 12u, 7u, 11u, 13u, 14u, 15u}) c.emplace_back(b, 4);
    return c;
  }();
  return combos;
}

}  // namespace mgml

