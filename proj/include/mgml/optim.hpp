#pragma once

#include <cmath>
#include <vector>

#include "mgml/params.hpp"

namespace mgml {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // coupled L2: added to the gradient
  bool amsgrad = false;
};

/// Adam with coupled L2 weight decay and optional AMSGrad. Moment state is
/// kept in double.
template <std::floating_point T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.numel(), 0.0);
      v_.emplace_back(p->value.numel(), 0.0);
      if (cfg_.amsgrad) vmax_.emplace_back(p->value.numel(), 0.0);
    }
  }

  /// One update; `grads[k]` belongs to the k-th registered parameter.
  void step(const std::vector<Tensor<T>>& grads, double lr) {
    if (grads.size() != params_.size()) throw Error("adam: gradient count does not match parameter count");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k]->value;
      if (grads[k].numel() != p.numel()) throw ShapeError("adam: gradient shape mismatch for " + params_[k]->name);
      auto x = p.mutable_data();
      const T* g = grads[k].raw();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double gi = static_cast<double>(g[i]) + cfg_.weight_decay * static_cast<double>(x[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        double vi = v[i];
        if (cfg_.amsgrad) vi = vmax_[k][i] = std::max(vmax_[k][i], v[i]);
        const double mhat = m[i] / bc1, vhat = vi / bc2;
        x[i] = static_cast<T>(static_cast<double>(x[i]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  std::size_t steps() const { return t_; }
  const std::vector<Parameter<T>*>& params() const { return params_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_, vmax_;
  std::size_t t_ = 0;
};

/// lr_init · (1 − epoch / max_epoch)^0.9, with a 0-based epoch.
inline double poly_lr(double lr_init, std::size_t epoch, std::size_t max_epoch) {
  if (max_epoch == 0) throw Error("poly_lr: max_epoch must be positive");
  if (epoch > max_epoch) throw Error("poly_lr: epoch beyond max_epoch");
  return lr_init * std::pow(1.0 - static_cast<double>(epoch) / static_cast<double>(max_epoch), 0.9);
}

}  // namespace mgml
