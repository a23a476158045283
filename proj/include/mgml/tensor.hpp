#pragma once

#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mgml {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a primitive receives operands whose shapes violate its rule.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised for values outside a primitive's domain (log of nonpositive, β ≤ 0, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <std::floating_point T>
class Tape;

/// Dense row-major tensor. Storage is shared between copies and treated as
/// immutable once the tensor is on a tape; `mutable_data` detaches it first.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(std::make_shared<std::vector<T>>(1, T{0})) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(numel_of(shape_), T{0})) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    check_extents();
    if (numel_of(shape_) != data_->size()) {
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_->size()) + " values");
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor full(Shape shape, T v) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_->size(); }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  const T* raw() const { return data_->data(); }
  T operator[](std::size_t i) const { return (*data_)[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape_) + " is not scalar-shaped");
    return (*data_)[0];
  }

  /// Writable view. Copies the storage when it is shared, so other handles keep
  /// their values.
  std::span<T> mutable_data() {
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<T>>(*data_);
    return {data_->data(), data_->size()};
  }

  bool requires_grad() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  /// Same values, no tape attachment.
  Tensor detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = 0;
    return t;
  }

  Tensor clone() const { return Tensor(shape_, *data_); }

  Tensor reshaped(Shape shape) const {
    if (numel_of(shape) != numel()) {
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
    }
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && *data_ == *other.data_;
  }

 private:
  friend class Tape<T>;

  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  std::size_t node_ = 0;
};

template <std::floating_point T>
class Gradients;

/// Reverse-mode gradient tape. Nodes are appended in evaluation order, so the
/// node list is topologically sorted by construction. Single owner, not
/// thread-safe.
template <std::floating_point T>
class Tape {
 public:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  /// Hands out the gradient buffer of input `k` of the node being reversed, or
  /// an empty span when that input is a constant.
  class GradSink {
   public:
    GradSink(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}
    std::span<T> operator()(std::size_t k) const { return tape_.input_grad(node_, k); }
    bool wants(std::size_t k) const { return tape_.nodes_[node_].inputs.at(k) != kNone; }

   private:
    Tape& tape_;
    std::size_t node_;
  };

  using BackwardFn = std::function<void(std::span<const T> grad_out, const GradSink& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable leaf.
  Tensor<T> leaf(const Tensor<T>& value) {
    if (value.requires_grad()) throw Error("leaf: tensor is already on a tape");
    Tensor<T> t = value;
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(Node{"leaf", {}, value.numel(), nullptr});
    return t;
  }

  /// Appends a primitive application. `inputs` are the operands in argument
  /// order; constants are recorded as kNone.
  Tensor<T> record(std::string_view op, std::span<const Tensor<T>* const> inputs, Tensor<T> out,
                   BackwardFn backward) {
    Node n{op, {}, out.numel(), std::move(backward)};
    n.inputs.reserve(inputs.size());
    for (const auto* in : inputs) {
      if (in->tape_ == nullptr) {
        n.inputs.push_back(kNone);
      } else {
        if (in->tape_ != this) throw Error(std::string(op) + ": operands belong to different tapes");
        n.inputs.push_back(in->node_);
      }
    }
    out.tape_ = this;
    out.node_ = nodes_.size();
    nodes_.push_back(std::move(n));
    return out;
  }

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t node) const { return nodes_.at(node).op; }
  const std::vector<std::size_t>& inputs_of(std::size_t node) const { return nodes_.at(node).inputs; }

  Gradients<T> backward(const Tensor<T>& loss);

 private:
  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    std::size_t numel;
    BackwardFn backward;
  };

  std::span<T> input_grad(std::size_t node, std::size_t k) {
    const auto id = nodes_[node].inputs.at(k);
    if (id == kNone) return {};
    auto& g = grads_[id];
    if (g.empty()) g.assign(nodes_[id].numel, T{0});
    return {g.data(), g.size()};
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
};

/// Leaf gradients produced by one backward pass, keyed by node id.
template <std::floating_point T>
class Gradients {
 public:
  /// dLoss/dx for a leaf `x` of the same tape. Leaves with no path to the
  /// loss get zeros.
  Tensor<T> of(const Tensor<T>& leaf) const {
    if (!leaf.requires_grad()) throw Error("gradients: tensor is not on the tape");
    auto it = grads_.find(leaf.node());
    if (it == grads_.end()) return Tensor<T>(leaf.shape());
    return Tensor<T>(leaf.shape(), it->second);
  }

  bool has(const Tensor<T>& leaf) const { return leaf.requires_grad() && grads_.count(leaf.node()) > 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape<T>;
  std::unordered_map<std::size_t, std::vector<T>> grads_;
};

template <std::floating_point T>
Gradients<T> Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss " + shape_str(loss.shape()) + " is not scalar");
  if (loss.tape_ != this) throw Error("backward: loss is not on this tape");

  grads_.assign(nodes_.size(), {});
  grads_[loss.node_].assign(1, T{1});

  Gradients<T> out;
  for (std::size_t i = loss.node_ + 1; i-- > 0;) {
    auto& g = grads_[i];
    if (g.empty()) continue;
    auto& node = nodes_[i];
    if (node.backward) {
      node.backward(std::span<const T>(g.data(), g.size()), GradSink(*this, i));
      node.backward = nullptr;
      std::vector<T>().swap(g);
    } else if (node.inputs.empty()) {
      out.grads_.emplace(i, std::move(g));
    }
  }
  grads_.clear();
  return out;
}

}  // namespace mgml

