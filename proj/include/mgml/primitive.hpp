#pragma once

#include <map>
#include <string>
#include <vector>

#include "mgml/ops.hpp"

namespace mgml {

using Attrs = std::map<std::string, double>;

/// Name-keyed entry point over the primitive set, for callers that build
/// graphs from data (the gradient-check CLI, tests). Typed callers should use
/// mgml::ops directly.
template <class T>
Tensor<T> apply_primitive(const std::string& name, const std::vector<Tensor<T>>& in, const Attrs& attrs = {}) {
  auto attr = [&](const char* key, double fallback) {
    auto it = attrs.find(key);
    return it == attrs.end() ? fallback : it->second;
  };
  auto axis = [&](double fallback = 0) { return static_cast<std::size_t>(attr("axis", fallback)); };
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw Error(name + ": expected " + std::to_string(n) + " operands, got " + std::to_string(in.size()));
    }
  };

  if (name == "add") return arity(2), ops::add(in[0], in[1]);
  if (name == "sub") return arity(2), ops::sub(in[0], in[1]);
  if (name == "mul") return arity(2), ops::mul(in[0], in[1]);
  if (name == "div") return arity(2), ops::div(in[0], in[1]);
  if (name == "scale") {
    arity(1);
    return ops::scale(in[0], static_cast<T>(attr("factor", 1)), static_cast<T>(attr("offset", 0)));
  }
  if (name == "negate") return arity(1), ops::negate(in[0]);
  if (name == "matmul") return arity(2), ops::matmul(in[0], in[1]);
  if (name == "conv3d") {
    arity(3);
    return ops::conv3d(in[0], in[1], in[2], static_cast<std::size_t>(attr("stride", 1)));
  }
  if (name == "transposed_upsample3d") return arity(1), ops::upsample3d(in[0]);
  if (name == "relu") return arity(1), ops::relu(in[0]);
  if (name == "sigmoid") return arity(1), ops::sigmoid(in[0]);
  if (name == "softplus") return arity(1), ops::softplus(in[0]);
  if (name == "exp") return arity(1), ops::exp(in[0]);
  if (name == "log") return arity(1), ops::log(in[0]);
  if (name == "softmax") return arity(1), ops::softmax(in[0], axis(), static_cast<T>(attr("temperature", 1)));
  if (name == "log_softmax") {
    arity(1);
    return ops::log_softmax(in[0], axis(), static_cast<T>(attr("temperature", 1)));
  }
  if (name == "log_sum_exp") {
    if (in.size() == 2) return ops::log_sum_exp(in[0], axis(), in[1]);
    arity(1);
    return ops::log_sum_exp(in[0], axis(), static_cast<T>(attr("scale", 1)));
  }
  if (name == "global_avg_pool") return arity(1), ops::global_avg_pool(in[0]);
  if (name == "concat") return ops::concat(in, axis());
  if (name == "stack") return ops::stack(in, axis());
  if (name == "slice") {
    arity(1);
    return ops::slice(in[0], axis(), static_cast<std::size_t>(attr("begin", 0)),
                      static_cast<std::size_t>(attr("end", 1)));
  }
  if (name == "elementwise_mask") return arity(2), ops::elementwise_mask(in[0], in[1]);
  if (name == "reduce_sum") {
    arity(1);
    return attrs.count("axis") ? ops::reduce_sum(in[0], axis()) : ops::reduce_sum(in[0]);
  }
  if (name == "reduce_mean") {
    arity(1);
    return attrs.count("axis") ? ops::reduce_mean(in[0], axis()) : ops::reduce_mean(in[0]);
  }
  if (name == "kl_div") {
    arity(2);
    return ops::kl_div(in[0], in[1], axis(), static_cast<T>(attr("temperature", 1)));
  }
  throw Error("apply_primitive: unknown primitive '" + name + "'");
}

}  // namespace mgml
