#pragma once

#include <deque>
#include <string>
#include <unordered_map>

#include "mgml/random.hpp"
#include "mgml/tensor.hpp"

namespace mgml {

template <std::floating_point T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

/// Named trainable tensors with stable addresses.
template <std::floating_point T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw Error("parameter '" + name + "' registered twice");
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(value)});
    return params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<T>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw Error("no parameter named '" + name + "'");
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Scalar count over parameters whose name starts with `prefix`.
  std::size_t count(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.name.starts_with(prefix)) n += p.value.numel();
    return n;
  }

  /// Copies values from `other`, converting precision. Names and shapes must match.
  template <class U>
  void assign_from(const ParameterSet<U>& other) {
    for (auto& p : params_) {
      const auto* q = other.find(p.name);
      if (!q) throw Error("assign: missing parameter '" + p.name + "'");
      if (q->value.shape() != p.value.shape()) {
        throw ShapeError("assign: parameter '" + p.name + "' has shape " + shape_str(q->value.shape()) +
                         ", expected " + shape_str(p.value.shape()));
      }
      std::vector<T> v(q->value.numel());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(q->value[i]);
      p.value = Tensor<T>(p.value.shape(), std::move(v));
    }
  }

 private:
  std::deque<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Maps parameters to tensors for one forward pass. With a tape, each
/// parameter becomes a leaf the first time it is used; without one,
/// parameters enter as constants.
template <std::floating_point T>
class Binder {
 public:
  Binder() = default;
  explicit Binder(Tape<T>& tape) : tape_(&tape) {}

  const Tensor<T>& operator()(const Parameter<T>& p) {
    if (!tape_) return p.value;
    auto it = bound_.find(&p);
    if (it == bound_.end()) it = bound_.emplace(&p, tape_->leaf(p.value)).first;
    return it->second;
  }

  /// Uses `value` (typically an existing leaf) for `p` from now on.
  void bind(const Parameter<T>& p, const Tensor<T>& value) { bound_.insert_or_assign(&p, value); }

  Tape<T>* tape() const { return tape_; }
  bool is_bound(const Parameter<T>& p) const { return bound_.count(&p) > 0; }

  /// Gradient for `p`, zeros when it was never used.
  Tensor<T> grad(const Gradients<T>& g, const Parameter<T>& p) const {
    auto it = bound_.find(&p);
    return it == bound_.end() ? Tensor<T>(p.value.shape()) : g.of(it->second);
  }

 private:
  Tape<T>* tape_ = nullptr;
  std::unordered_map<const Parameter<T>*, Tensor<T>> bound_;
};

/// He-normal weights: std = sqrt(2 / fan_in).
template <std::floating_point T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(normal(rng) * sd);
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace mgml
