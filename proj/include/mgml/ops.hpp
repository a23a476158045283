#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "mgml/parallel.hpp"
#include "mgml/tensor.hpp"

/// Differentiable primitives. Every function computes its forward value
/// eagerly and, when any operand is on a tape, appends one node whose reverse
/// rule adds into the operands' gradient buffers in a fixed order.
namespace mgml::ops {

namespace detail {

template <class T>
Tensor<T> finish(std::string_view op, std::span<const Tensor<T>* const> inputs, Tensor<T> out,
                 typename Tape<T>::BackwardFn backward) {
  for (const auto* in : inputs) {
    if (in->tape() != nullptr) return in->tape()->record(op, inputs, std::move(out), std::move(backward));
  }
  return out;
}

template <class T>
Tensor<T> finish(std::string_view op, std::initializer_list<const Tensor<T>*> inputs, Tensor<T> out,
                 typename Tape<T>::BackwardFn backward) {
  return finish<T>(op, std::span<const Tensor<T>* const>(inputs.begin(), inputs.size()), std::move(out),
                   std::move(backward));
}

inline std::string shapes2(const Shape& a, const Shape& b) { return shape_str(a) + " and " + shape_str(b); }

/// Operand layout for binary elementwise primitives: equal shapes, or one side
/// holding a single element that is broadcast.
struct Broadcast {
  bool a_scalar = false;
  bool b_scalar = false;
  Shape shape;
};

inline Broadcast broadcast_rule(std::string_view op, const Shape& a, const Shape& b) {
  if (a == b) return {false, false, a};
  if (numel_of(b) == 1) return {false, true, a};
  if (numel_of(a) == 1) return {true, false, b};
  throw ShapeError(std::string(op) + ": incompatible shapes " + shapes2(a, b));
}

/// (outer, n, inner) view of a shape around `axis`.
struct AxisLayout {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisLayout axis_layout(std::string_view op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

inline Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape s = shape;
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  return s;
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(std::string_view op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> y(x.numel());
  const T* xv = x.raw();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xv[i]);
  Tensor<T> out(x.shape(), std::move(y));
  if (!x.requires_grad()) return out;
  return finish<T>(op, {&x}, out, [x, out, deriv](std::span<const T> g, const auto& sink) {
    auto gx = sink(0);
    const T* xv = x.raw();
    const T* yv = out.raw();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto bc = detail::broadcast_rule("add", a.shape(), b.shape());
  const std::size_t n = numel_of(bc.shape);
  std::vector<T> y(n);
  const T *av = a.raw(), *bv = b.raw();
  for (std::size_t i = 0; i < n; ++i) y[i] = av[bc.a_scalar ? 0 : i] + bv[bc.b_scalar ? 0 : i];
  return detail::finish<T>("add", {&a, &b}, Tensor<T>(bc.shape, std::move(y)),
                           [bc](std::span<const T> g, const auto& sink) {
                             for (std::size_t k = 0; k < 2; ++k) {
                               auto gi = sink(k);
                               if (gi.empty()) continue;
                               if ((k == 0 && bc.a_scalar) || (k == 1 && bc.b_scalar)) {
                                 double s = 0;
                                 for (auto v : g) s += v;
                                 gi[0] += static_cast<T>(s);
                               } else {
                                 for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                               }
                             }
                           });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const auto bc = detail::broadcast_rule("sub", a.shape(), b.shape());
  const std::size_t n = numel_of(bc.shape);
  std::vector<T> y(n);
  const T *av = a.raw(), *bv = b.raw();
  for (std::size_t i = 0; i < n; ++i) y[i] = av[bc.a_scalar ? 0 : i] - bv[bc.b_scalar ? 0 : i];
  return detail::finish<T>("sub", {&a, &b}, Tensor<T>(bc.shape, std::move(y)),
                           [bc](std::span<const T> g, const auto& sink) {
                             for (std::size_t k = 0; k < 2; ++k) {
                               auto gi = sink(k);
                               if (gi.empty()) continue;
                               const T sign = k == 0 ? T{1} : T{-1};
                               if ((k == 0 && bc.a_scalar) || (k == 1 && bc.b_scalar)) {
                                 double s = 0;
                                 for (auto v : g) s += v;
                                 gi[0] += sign * static_cast<T>(s);
                               } else {
                                 for (std::size_t i = 0; i < g.size(); ++i) gi[i] += sign * g[i];
                               }
                             }
                           });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto bc = detail::broadcast_rule("mul", a.shape(), b.shape());
  const std::size_t n = numel_of(bc.shape);
  std::vector<T> y(n);
  const T *av = a.raw(), *bv = b.raw();
  for (std::size_t i = 0; i < n; ++i) y[i] = av[bc.a_scalar ? 0 : i] * bv[bc.b_scalar ? 0 : i];
  return detail::finish<T>(
      "mul", {&a, &b}, Tensor<T>(bc.shape, std::move(y)), [a, b, bc](std::span<const T> g, const auto& sink) {
        const T *av = a.raw(), *bv = b.raw();
        if (auto ga = sink(0); !ga.empty()) {
          if (bc.a_scalar) {
            double s = 0;
            for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * bv[i];
            ga[0] += static_cast<T>(s);
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[bc.b_scalar ? 0 : i];
          }
        }
        if (auto gb = sink(1); !gb.empty()) {
          if (bc.b_scalar) {
            double s = 0;
            for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * av[i];
            gb[0] += static_cast<T>(s);
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[bc.a_scalar ? 0 : i];
          }
        }
      });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  const auto bc = detail::broadcast_rule("div", a.shape(), b.shape());
  const std::size_t n = numel_of(bc.shape);
  std::vector<T> y(n);
  const T *av = a.raw(), *bv = b.raw();
  for (std::size_t i = 0; i < n; ++i) {
    const T d = bv[bc.b_scalar ? 0 : i];
    if (d == T{0}) throw DomainError("div: division by zero");
    y[i] = av[bc.a_scalar ? 0 : i] / d;
  }
  Tensor<T> out(bc.shape, std::move(y));
  return detail::finish<T>("div", {&a, &b}, out, [b, out, bc](std::span<const T> g, const auto& sink) {
    const T *bv = b.raw(), *yv = out.raw();
    if (auto ga = sink(0); !ga.empty()) {
      if (bc.a_scalar) {
        double s = 0;
        for (std::size_t i = 0; i < g.size(); ++i) s += g[i] / bv[i];
        ga[0] += static_cast<T>(s);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[bc.b_scalar ? 0 : i];
      }
    }
    if (auto gb = sink(1); !gb.empty()) {
      // d(a/b)/db = -y/b
      if (bc.b_scalar) {
        double s = 0;
        for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * yv[i];
        gb[0] += static_cast<T>(-s / bv[0]);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * yv[i] / bv[i];
      }
    }
  });
}

/// y = factor·x + offset
template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor, T offset = T{0}) {
  return detail::unary<T>(
      "scale", x, [=](T v) { return factor * v + offset; }, [=](T, T) { return factor; });
}

template <class T>
Tensor<T> negate(const Tensor<T>& x) {
  return detail::unary<T>(
      "negate", x, [](T v) { return -v; }, [](T, T) { return T{-1}; });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > 0 || v != v ? v : T{0}; }, [](T v, T) { return v > 0 ? T{1} : T{0}; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return detail::stable_sigmoid(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary<T>(
      "softplus", x, [](T v) { return std::max(v, T{0}) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) { return detail::stable_sigmoid(v); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  for (auto v : x.data()) {
    if (!(v > 0)) throw DomainError("log: nonpositive input " + std::to_string(static_cast<double>(v)));
  }
  return detail::unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

// ---------------------------------------------------------------------------
// Axis-wise normalizations

/// softmax(x/τ) along `axis`, max-shifted.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis, T temperature = T{1}) {
  if (!(temperature > 0)) throw DomainError("softmax: temperature must be positive");
  const auto l = detail::axis_layout("softmax", x.shape(), axis);
  std::vector<T> y(x.numel());
  const T* xv = x.raw();
  const T inv_t = T{1} / temperature;
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < l.n; ++i) m = std::max(m, xv[base + i * l.inner] * inv_t);
      T s = 0;
      for (std::size_t i = 0; i < l.n; ++i) {
        const T e = std::exp(xv[base + i * l.inner] * inv_t - m);
        y[base + i * l.inner] = e;
        s += e;
      }
      for (std::size_t i = 0; i < l.n; ++i) y[base + i * l.inner] /= s;
    }
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (!x.requires_grad()) return out;
  return detail::finish<T>("softmax", {&x}, out, [out, l, inv_t](std::span<const T> g, const auto& sink) {
    auto gx = sink(0);
    const T* yv = out.raw();
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t in = 0; in < l.inner; ++in) {
        const std::size_t base = o * l.n * l.inner + in;
        T dot = 0;
        for (std::size_t i = 0; i < l.n; ++i) dot += g[base + i * l.inner] * yv[base + i * l.inner];
        for (std::size_t i = 0; i < l.n; ++i) {
          const std::size_t k = base + i * l.inner;
          gx[k] += inv_t * yv[k] * (g[k] - dot);
        }
      }
    }
  });
}

/// log softmax(x/τ) along `axis`.
template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis, T temperature = T{1}) {
  if (!(temperature > 0)) throw DomainError("log_softmax: temperature must be positive");
  const auto l = detail::axis_layout("log_softmax", x.shape(), axis);
  std::vector<T> y(x.numel());
  const T* xv = x.raw();
  const T inv_t = T{1} / temperature;
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < l.n; ++i) m = std::max(m, xv[base + i * l.inner] * inv_t);
      T s = 0;
      for (std::size_t i = 0; i < l.n; ++i) s += std::exp(xv[base + i * l.inner] * inv_t - m);
      const T lse = m + std::log(s);
      for (std::size_t i = 0; i < l.n; ++i) y[base + i * l.inner] = xv[base + i * l.inner] * inv_t - lse;
    }
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (!x.requires_grad()) return out;
  return detail::finish<T>("log_softmax", {&x}, out, [out, l, inv_t](std::span<const T> g, const auto& sink) {
    auto gx = sink(0);
    const T* yv = out.raw();
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t in = 0; in < l.inner; ++in) {
        const std::size_t base = o * l.n * l.inner + in;
        T gs = 0;
        for (std::size_t i = 0; i < l.n; ++i) gs += g[base + i * l.inner];
        for (std::size_t i = 0; i < l.n; ++i) {
          const std::size_t k = base + i * l.inner;
          gx[k] += inv_t * (g[k] - std::exp(yv[k]) * gs);
        }
      }
    }
  });
}

/// (1/β)·ln Σ exp(β·x) along `axis`, with β a scalar tensor that may itself be
/// differentiable. Shift-stabilized by the axis maximum.
template <class T>
Tensor<T> log_sum_exp(const Tensor<T>& x, std::size_t axis, const Tensor<T>& scale) {
  if (scale.numel() != 1) throw ShapeError("log_sum_exp: scale must be scalar-shaped, got " + shape_str(scale.shape()));
  const T beta = scale[0];
  if (!(beta > 0)) throw DomainError("log_sum_exp: scale must be positive");
  const auto l = detail::axis_layout("log_sum_exp", x.shape(), axis);
  const Shape out_shape = detail::drop_axis(x.shape(), axis);
  std::vector<T> y(l.outer * l.inner);
  const T* xv = x.raw();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < l.n; ++i) m = std::max(m, xv[base + i * l.inner]);
      T s = 0;
      for (std::size_t i = 0; i < l.n; ++i) s += std::exp(beta * (xv[base + i * l.inner] - m));
      y[o * l.inner + in] = m + std::log(s) / beta;
    }
  }
  Tensor<T> out(out_shape, std::move(y));
  return detail::finish<T>("log_sum_exp", {&x, &scale}, out,
                           [x, out, l, beta](std::span<const T> g, const auto& sink) {
                             auto gx = sink(0);
                             auto gs = sink(1);
                             const T* xv = x.raw();
                             const T* yv = out.raw();
                             double gbeta = 0;
                             for (std::size_t o = 0; o < l.outer; ++o) {
                               for (std::size_t in = 0; in < l.inner; ++in) {
                                 const std::size_t base = o * l.n * l.inner + in;
                                 const std::size_t oi = o * l.inner + in;
                                 // weights softmax(β·x) = exp(β·(x - H))
                                 T wx = 0;
                                 for (std::size_t i = 0; i < l.n; ++i) {
                                   const std::size_t k = base + i * l.inner;
                                   const T w = std::exp(beta * (xv[k] - yv[oi]));
                                   if (!gx.empty()) gx[k] += g[oi] * w;
                                   wx += w * xv[k];
                                 }
                                 gbeta += static_cast<double>(g[oi]) * (wx - yv[oi]) / beta;
                               }
                             }
                             if (!gs.empty()) gs[0] += static_cast<T>(gbeta);
                           });
}

template <class T>
Tensor<T> log_sum_exp(const Tensor<T>& x, std::size_t axis, T scale) {
  return log_sum_exp(x, axis, Tensor<T>::scalar(scale));
}

/// Per-position KL(softmax(t/τ) ‖ softmax(s/τ)) along `axis`; the axis is
/// reduced away.
template <class T>
Tensor<T> kl_div(const Tensor<T>& teacher, const Tensor<T>& student, std::size_t axis, T temperature = T{1}) {
  if (teacher.shape() != student.shape()) {
    throw ShapeError("kl_div: shape mismatch " + detail::shapes2(teacher.shape(), student.shape()));
  }
  if (!(temperature > 0)) throw DomainError("kl_div: temperature must be positive");
  const auto lp = log_softmax(teacher.detach(), axis, temperature);
  const auto lq = log_softmax(student.detach(), axis, temperature);
  const auto l = detail::axis_layout("kl_div", teacher.shape(), axis);
  std::vector<T> y(l.outer * l.inner);
  const T *pv = lp.raw(), *qv = lq.raw();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      T s = 0;
      for (std::size_t i = 0; i < l.n; ++i) {
        const std::size_t k = base + i * l.inner;
        s += std::exp(pv[k]) * (pv[k] - qv[k]);
      }
      y[o * l.inner + in] = std::max(s, T{0});
    }
  }
  const T inv_t = T{1} / temperature;
  return detail::finish<T>(
      "kl_div", {&teacher, &student}, Tensor<T>(detail::drop_axis(teacher.shape(), axis), std::move(y)),
      [lp, lq, l, inv_t](std::span<const T> g, const auto& sink) {
        auto gt = sink(0);
        auto gs = sink(1);
        const T *pv = lp.raw(), *qv = lq.raw();
        for (std::size_t o = 0; o < l.outer; ++o) {
          for (std::size_t in = 0; in < l.inner; ++in) {
            const std::size_t base = o * l.n * l.inner + in;
            const T go = g[o * l.inner + in];
            T mean_a = 0;
            for (std::size_t i = 0; i < l.n; ++i) {
              const std::size_t k = base + i * l.inner;
              mean_a += std::exp(pv[k]) * (pv[k] - qv[k]);
            }
            for (std::size_t i = 0; i < l.n; ++i) {
              const std::size_t k = base + i * l.inner;
              const T p = std::exp(pv[k]);
              if (!gt.empty()) gt[k] += go * inv_t * p * ((pv[k] - qv[k]) - mean_a);
              if (!gs.empty()) gs[k] += go * inv_t * (std::exp(qv[k]) - p);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  double s = 0;
  for (auto v : x.data()) s += v;
  return detail::finish<T>("reduce_sum", {&x}, Tensor<T>::scalar(static_cast<T>(s)),
                           [](std::span<const T> g, const auto& sink) {
                             auto gx = sink(0);
                             for (auto& v : gx) v += g[0];
                           });
}

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::size_t axis) {
  const auto l = detail::axis_layout("reduce_sum", x.shape(), axis);
  std::vector<T> y(l.outer * l.inner);
  const T* xv = x.raw();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      double s = 0;
      for (std::size_t i = 0; i < l.n; ++i) s += xv[(o * l.n + i) * l.inner + in];
      y[o * l.inner + in] = static_cast<T>(s);
    }
  }
  return detail::finish<T>("reduce_sum", {&x}, Tensor<T>(detail::drop_axis(x.shape(), axis), std::move(y)),
                           [l](std::span<const T> g, const auto& sink) {
                             auto gx = sink(0);
                             for (std::size_t o = 0; o < l.outer; ++o)
                               for (std::size_t i = 0; i < l.n; ++i)
                                 for (std::size_t in = 0; in < l.inner; ++in)
                                   gx[(o * l.n + i) * l.inner + in] += g[o * l.inner + in];
                           });
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
  return scale(reduce_sum(x), T{1} / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::size_t axis) {
  return scale(reduce_sum(x, axis), T{1} / static_cast<T>(x.extent(axis)));
}

/// Mean over every axis but the first: [C, ...] -> [C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("global_avg_pool: expected [C, spatial...], got " + shape_str(x.shape()));
  const std::size_t c = x.extent(0), v = x.numel() / c;
  std::vector<T> y(c);
  const T* xv = x.raw();
  for (std::size_t i = 0; i < c; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < v; ++k) s += xv[i * v + k];
    y[i] = static_cast<T>(s / static_cast<double>(v));
  }
  return detail::finish<T>("global_avg_pool", {&x}, Tensor<T>(Shape{c}, std::move(y)),
                           [c, v](std::span<const T> g, const auto& sink) {
                             auto gx = sink(0);
                             const T inv = T{1} / static_cast<T>(v);
                             for (std::size_t i = 0; i < c; ++i)
                               for (std::size_t k = 0; k < v; ++k) gx[i * v + k] += g[i] * inv;
                           });
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  return x.reshaped(std::move(shape));
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no operands");
  const Shape& ref = xs.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) throw ShapeError("concat: operand shapes " + detail::shapes2(ref, s) + " differ off the concat axis");
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<T> y(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t n = t.extent(axis);
    const T* src = t.raw();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * n * inner, src + (o + 1) * n * inner, y.data() + (o * total + off) * inner);
    off += n;
  }
  std::vector<const Tensor<T>*> ptrs;
  std::vector<std::size_t> sizes;
  for (const auto& t : xs) {
    ptrs.push_back(&t);
    sizes.push_back(t.extent(axis));
  }
  return detail::finish<T>("concat", std::span<const Tensor<T>* const>(ptrs), Tensor<T>(out_shape, std::move(y)),
                           [outer, inner, total, offsets, sizes](std::span<const T> g, const auto& sink) {
                             for (std::size_t k = 0; k < sizes.size(); ++k) {
                               auto gk = sink(k);
                               if (gk.empty()) continue;
                               const std::size_t n = sizes[k];
                               for (std::size_t o = 0; o < outer; ++o) {
                                 const T* src = g.data() + (o * total + offsets[k]) * inner;
                                 T* dst = gk.data() + o * n * inner;
                                 for (std::size_t i = 0; i < n * inner; ++i) dst[i] += src[i];
                               }
                             }
                           });
}

/// Stacks equally shaped tensors along a new axis.
template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("stack: no operands");
  const Shape& ref = xs.front().shape();
  if (axis > ref.size()) throw ShapeError("stack: axis out of range for " + shape_str(ref));
  std::vector<Tensor<T>> expanded;
  expanded.reserve(xs.size());
  for (const auto& t : xs) {
    if (t.shape() != ref) throw ShapeError("stack: operand shapes " + detail::shapes2(ref, t.shape()) + " differ");
    Shape s = ref;
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
    expanded.push_back(t.reshaped(s));
  }
  return concat(expanded, axis);
}

/// Half-open range [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto l = detail::axis_layout("slice", x.shape(), axis);
  if (begin >= end || end > l.n) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_str(x.shape()));
  }
  const std::size_t n = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = n;
  std::vector<T> y(l.outer * n * l.inner);
  const T* xv = x.raw();
  for (std::size_t o = 0; o < l.outer; ++o)
    std::copy(xv + (o * l.n + begin) * l.inner, xv + (o * l.n + end) * l.inner, y.data() + o * n * l.inner);
  return detail::finish<T>("slice", {&x}, Tensor<T>(out_shape, std::move(y)),
                           [l, n, begin](std::span<const T> g, const auto& sink) {
                             auto gx = sink(0);
                             for (std::size_t o = 0; o < l.outer; ++o)
                               for (std::size_t i = 0; i < n * l.inner; ++i)
                                 gx[(o * l.n + begin) * l.inner + i] += g[o * n * l.inner + i];
                           });
}

/// Multiplies x by a constant 0/1 (or real) mask whose shape matches x's
/// trailing axes; the mask is broadcast over the leading ones.
template <class T>
Tensor<T> elementwise_mask(const Tensor<T>& x, const Tensor<T>& mask) {
  if (mask.requires_grad()) throw Error("elementwise_mask: mask must be a constant tensor");
  const Shape& xs = x.shape();
  const Shape& ms = mask.shape();
  bool ok = ms.size() <= xs.size();
  for (std::size_t i = 0; ok && i < ms.size(); ++i) ok = ms[ms.size() - 1 - i] == xs[xs.size() - 1 - i];
  if (!ok) throw ShapeError("elementwise_mask: mask " + shape_str(ms) + " does not match trailing axes of " + shape_str(xs));
  const std::size_t v = mask.numel(), reps = x.numel() / v;
  std::vector<T> y(x.numel());
  const T *xv = x.raw(), *mv = mask.raw();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < v; ++i) y[r * v + i] = xv[r * v + i] * mv[i];
  return detail::finish<T>("elementwise_mask", {&x}, Tensor<T>(xs, std::move(y)),
                           [mask, v, reps](std::span<const T> g, const auto& sink) {
                             auto gx = sink(0);
                             const T* mv = mask.raw();
                             for (std::size_t r = 0; r < reps; ++r)
                               for (std::size_t i = 0; i < v; ++i) gx[r * v + i] += g[r * v + i] * mv[i];
                           });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + detail::shapes2(a.shape(), b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<T> y(m * n, T{0});
  const T *av = a.raw(), *bv = b.raw();
  parallel_for(m, [&](std::size_t i) {
    T* row = y.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      const T* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  });
  return detail::finish<T>("matmul", {&a, &b}, Tensor<T>(Shape{m, n}, std::move(y)),
                           [a, b, m, k, n](std::span<const T> g, const auto& sink) {
                             const T *av = a.raw(), *bv = b.raw();
                             if (auto ga = sink(0); !ga.empty()) {
                               parallel_for(m, [&](std::size_t i) {
                                 for (std::size_t p = 0; p < k; ++p) {
                                   T s = 0;
                                   for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
                                   ga[i * k + p] += s;
                                 }
                               });
                             }
                             if (auto gb = sink(1); !gb.empty()) {
                               parallel_for(k, [&](std::size_t p) {
                                 T* row = gb.data() + p * n;
                                 for (std::size_t i = 0; i < m; ++i) {
                                   const T aip = av[i * k + p];
                                   const T* grow = g.data() + i * n;
                                   for (std::size_t j = 0; j < n; ++j) row[j] += aip * grow[j];
                                 }
                               });
                             }
                           });
}

// ---------------------------------------------------------------------------
// Volumetric

namespace detail {

struct ConvGeom {
  std::size_t cin, cout, d, h, w, od, oh, ow, stride;
};

/// Valid output range [lo, hi) along one axis for kernel tap k (pad 1).
inline void tap_range(std::size_t k, std::size_t in, std::size_t out, std::size_t s, std::size_t& lo,
                      std::size_t& hi) {
  lo = k == 0 ? 1 : 0;
  hi = in < k ? 0 : std::min(out, (in - k) / s + 1);
  if (hi < lo) hi = lo;
}

/// y[j] += a·x[j]
template <class T>
inline void axpy(T a, const T* __restrict x, T* __restrict y, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) y[j] += a * x[j];
}

/// Four rows updated from one shared x row.
template <class T>
inline void axpy4(T a0, T a1, T a2, T a3, const T* __restrict x, T* __restrict y0, T* __restrict y1,
                  T* __restrict y2, T* __restrict y3, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    const T xj = x[j];
    y0[j] += a0 * xj;
    y1[j] += a1 * xj;
    y2[j] += a2 * xj;
    y3[j] += a3 * xj;
  }
}

/// Σ a[j]·b[j] with 16 fixed lane accumulators, lanes summed in order.
template <class T>
inline double lane_dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  constexpr std::size_t L = 16;
  T acc[L] = {};
  std::size_t j = 0;
  for (; j + L <= n; j += L)
    for (std::size_t l = 0; l < L; ++l) acc[l] += a[j + l] * b[j + l];
  for (std::size_t l = 0; j < n; ++j, ++l) acc[l] += a[j] * b[j];
  double sum = 0;
  for (std::size_t l = 0; l < L; ++l) sum += acc[l];
  return sum;
}

/// Patch matrix of output plane `oz`: row (ci,kz,ky,kx), column (oy,ox).
template <class T>
void im2col_plane(const ConvGeom& c, const T* in, std::size_t oz, T* patch) {
  const std::size_t n = c.oh * c.ow, s = c.stride;
  for (std::size_t ci = 0; ci < c.cin; ++ci)
    for (std::size_t kz = 0; kz < 3; ++kz)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx) {
          T* row = patch + (((ci * 3 + kz) * 3 + ky) * 3 + kx) * n;
          std::fill(row, row + n, T{0});
          const std::size_t iz = oz * s + kz;
          if (iz == 0 || iz > c.d) continue;
          std::size_t ylo, yhi, xlo, xhi;
          tap_range(ky, c.h, c.oh, s, ylo, yhi);
          tap_range(kx, c.w, c.ow, s, xlo, xhi);
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const T* src = in + ((ci * c.d + iz - 1) * c.h + oy * s + ky - 1) * c.w + kx - 1;
            T* dst = row + oy * c.ow;
            if (s == 1) {
              std::copy(src + xlo, src + xhi, dst + xlo);
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * s];
            }
          }
        }
}

/// out[co, oz, :] = bias[co] + Σ_k W[co, k] · patch[k, :]
template <class T>
void conv_forward(const ConvGeom& c, const T* in, const T* wt, const T* bias, T* out) {
  const std::size_t n = c.oh * c.ow, K = c.cin * 27;
  parallel_for(c.od, [&](std::size_t oz) {
    std::vector<T> patch(K * n);
    im2col_plane(c, in, oz, patch.data());
    std::size_t co = 0;
    for (; co + 4 <= c.cout; co += 4) {
      T* o0 = out + ((co + 0) * c.od + oz) * n;
      T* o1 = out + ((co + 1) * c.od + oz) * n;
      T* o2 = out + ((co + 2) * c.od + oz) * n;
      T* o3 = out + ((co + 3) * c.od + oz) * n;
      std::fill(o0, o0 + n, bias[co]);
      std::fill(o1, o1 + n, bias[co + 1]);
      std::fill(o2, o2 + n, bias[co + 2]);
      std::fill(o3, o3 + n, bias[co + 3]);
      for (std::size_t k = 0; k < K; ++k) {
        axpy4(wt[(co + 0) * K + k], wt[(co + 1) * K + k], wt[(co + 2) * K + k], wt[(co + 3) * K + k],
              patch.data() + k * n, o0, o1, o2, o3, n);
      }
    }
    for (; co < c.cout; ++co) {
      T* o = out + (co * c.od + oz) * n;
      std::fill(o, o + n, bias[co]);
      for (std::size_t k = 0; k < K; ++k) axpy(wt[co * K + k], patch.data() + k * n, o, n);
    }
  });
}

/// Adjoint of the forward map w.r.t. the input: per input channel, the patch
/// gradient W^T·gout is scattered back along the im2col pattern.
template <class T>
void conv_backward_input(const ConvGeom& c, const T* gout, const T* wt, T* gin) {
  const std::size_t n = c.oh * c.ow, K = c.cin * 27, s = c.stride;
  parallel_for(c.cin, [&](std::size_t ci) {
    std::vector<T> gp(27 * n);
    for (std::size_t oz = 0; oz < c.od; ++oz) {
      std::fill(gp.begin(), gp.end(), T{0});
      for (std::size_t co = 0; co < c.cout; ++co) {
        const T* g = gout + (co * c.od + oz) * n;
        for (std::size_t t = 0; t < 27; ++t) axpy(wt[co * K + ci * 27 + t], g, gp.data() + t * n, n);
      }
      for (std::size_t kz = 0; kz < 3; ++kz) {
        const std::size_t iz = oz * s + kz;
        if (iz == 0 || iz > c.d) continue;
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const T* row = gp.data() + ((kz * 3 + ky) * 3 + kx) * n;
            std::size_t ylo, yhi, xlo, xhi;
            tap_range(ky, c.h, c.oh, s, ylo, yhi);
            tap_range(kx, c.w, c.ow, s, xlo, xhi);
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              T* dst = gin + ((ci * c.d + iz - 1) * c.h + oy * s + ky - 1) * c.w + kx - 1;
              const T* src = row + oy * c.ow;
              for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * s] += src[ox];
            }
          }
      }
    }
  });
}

/// gw[co, k] = Σ gout[co, :] · patch[k, :] and gb[co] = Σ gout[co, :]. Each
/// plane's dot products use fixed 16-lane partial sums; planes are combined
/// in order in double.
template <class T>
void conv_backward_weight(const ConvGeom& c, const T* gout, const T* in, T* gw, T* gb) {
  const std::size_t n = c.oh * c.ow, K = c.cin * 27;
  if (gw) {
    std::vector<double> partial(c.od * c.cout * K);
    parallel_for(c.od, [&](std::size_t oz) {
      std::vector<T> patch(K * n);
      im2col_plane(c, in, oz, patch.data());
      double* part = partial.data() + oz * c.cout * K;
      for (std::size_t co = 0; co < c.cout; ++co) {
        const T* g = gout + (co * c.od + oz) * n;
        for (std::size_t k = 0; k < K; ++k) part[co * K + k] = lane_dot(g, patch.data() + k * n, n);
      }
    });
    for (std::size_t i = 0; i < c.cout * K; ++i) {
      double sum = 0;
      for (std::size_t oz = 0; oz < c.od; ++oz) sum += partial[oz * c.cout * K + i];
      gw[i] += static_cast<T>(sum);
    }
  }
  if (gb) {
    const std::size_t v = c.od * n;
    for (std::size_t co = 0; co < c.cout; ++co) {
      double sum = 0;
      for (std::size_t i = 0; i < v; ++i) sum += gout[co * v + i];
      gb[co] += static_cast<T>(sum);
    }
  }
}

}  // namespace detail

/// 3×3×3 convolution with zero padding 1.
/// x: [Cin,D,H,W], weight: [Cout,Cin,3,3,3], bias: [Cout]; stride 1 or 2.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (stride != 1 && stride != 2) throw ShapeError("conv3d: stride must be 1 or 2, got " + std::to_string(stride));
  if (xs.size() != 4 || ws.size() != 5 || ws[1] != xs[0] || ws[2] != 3 || ws[3] != 3 || ws[4] != 3) {
    throw ShapeError("conv3d: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
  }
  if (bias.shape() != Shape{ws[0]}) {
    throw ShapeError("conv3d: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(ws));
  }
  detail::ConvGeom g{xs[0], ws[0], xs[1], xs[2], xs[3], 0, 0, 0, stride};
  g.od = (g.d - 1) / stride + 1;
  g.oh = (g.h - 1) / stride + 1;
  g.ow = (g.w - 1) / stride + 1;
  std::vector<T> y(g.cout * g.od * g.oh * g.ow);
  detail::conv_forward(g, x.raw(), weight.raw(), bias.raw(), y.data());
  return detail::finish<T>("conv3d", {&x, &weight, &bias}, Tensor<T>(Shape{g.cout, g.od, g.oh, g.ow}, std::move(y)),
                           [x, weight, g](std::span<const T> gout, const auto& sink) {
                             if (auto gx = sink(0); !gx.empty()) {
                               detail::conv_backward_input(g, gout.data(), weight.raw(), gx.data());
                             }
                             auto gw = sink(1);
                             auto gb = sink(2);
                             T* gwp = gw.empty() ? nullptr : gw.data();
                             T* gbp = gb.empty() ? nullptr : gb.data();
                             if (!gwp && !gbp) return;
                             detail::conv_backward_weight(g, gout.data(), x.raw(), gwp, gbp);
                           });
}

/// Nearest-neighbour ×2 upsampling of [C,D,H,W]; its reverse rule is the
/// transposed operator (2×2×2 sum pooling).
template <class T>
Tensor<T> upsample3d(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("transposed_upsample3d: expected [C,D,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.extent(0), d = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t D = 2 * d, H = 2 * h, W = 2 * w;
  std::vector<T> y(c * D * H * W);
  const T* xv = x.raw();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t yy = 0; yy < H; ++yy) {
        const T* src = xv + ((ch * d + z / 2) * h + yy / 2) * w;
        T* dst = y.data() + ((ch * D + z) * H + yy) * W;
        for (std::size_t xx = 0; xx < W; ++xx) dst[xx] = src[xx / 2];
      }
  return detail::finish<T>("transposed_upsample3d", {&x}, Tensor<T>(Shape{c, D, H, W}, std::move(y)),
                           [c, d, h, w](std::span<const T> g, const auto& sink) {
                             auto gx = sink(0);
                             const std::size_t D = 2 * d, H = 2 * h, W = 2 * w;
                             for (std::size_t ch = 0; ch < c; ++ch)
                               for (std::size_t z = 0; z < D; ++z)
                                 for (std::size_t yy = 0; yy < H; ++yy) {
                                   const T* src = g.data() + ((ch * D + z) * H + yy) * W;
                                   T* dst = gx.data() + ((ch * d + z / 2) * h + yy / 2) * w;
                                   for (std::size_t xx = 0; xx < W; ++xx) dst[xx / 2] += src[xx];
                                 }
                           });
}

}  // namespace mgml::ops
