#pragma once

// Reverse-mode autodiff over a per-step tape. Ops append nodes in execution
// order; Tape::backward walks them once in reverse, accumulating gradients
// additively into every input that feeds more than one consumer.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "odenet/kernels.hpp"
#include "odenet/tensor.hpp"

namespace odenet {

using kernels::BatchNormConfig;
using kernels::Mode;

/// Learnable (or tracked, non-trainable) state plus its optimizer buffer.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> momentum;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Tensor<T> v, bool is_trainable = true)
      : value(std::move(v)), grad(value.shape()), momentum(value.shape()), trainable(is_trainable) {}

  const Shape& shape() const { return value.shape(); }
  void zero_grad() { grad = Tensor<T>(value.shape()); }
  void reset_momentum() { momentum = Tensor<T>(value.shape()); }

  /// Value and trainability only; optimizer state is compared elsewhere.
  bool same_value(const Parameter& o) const { return trainable == o.trainable && value == o.value; }
};

struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}, "constant"); }

  /// Leaf bound to a parameter; backward accumulates into param.grad.
  Var param(Parameter<T>& p) {
    Var v = push(p.value, p.trainable, {}, "param");
    nodes_[v.id].param = &p;
    return v;
  }

  Var record(Tensor<T> value, bool needs_grad, BackwardFn backward, const char* op) {
    return push(std::move(value), needs_grad, std::move(backward), op);
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }
  /// Gradient of the last backward pass w.r.t. a leaf (empty for interior nodes).
  const Tensor<T>& grad(Var v) const { return node(v).grad; }
  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t i) const { return nodes_.at(i).op; }

  /// Gradient buffer for v, allocated as zeros on first use.
  Tensor<T>& grad_buffer(Var v) {
    auto& n = node(v);
    if (n.grad.empty() && n.value.size() != 0) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Seeds d(loss)/d(loss)=1 and propagates. Each recorded op runs once, in
  /// reverse order. Interior gradients are freed after use.
  void backward(Var loss) {
    auto& root = node(loss);
    if (root.value.size() != 1) throw std::invalid_argument("backward expects a scalar loss");
    grad_buffer(loss).fill(T(1));
    visit_order_.clear();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) {
        visit_order_.push_back(i);
        n.backward(*this, n.grad);
        n.grad = Tensor<T>();
      } else if (n.param) {
        Tensor<T>& pg = n.param->grad;
        if (pg.shape() != n.grad.shape()) pg = Tensor<T>(n.value.shape());
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  /// Node indices whose backward ran during the last backward(), in call order.
  const std::vector<std::size_t>& last_visit_order() const { return visit_order_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    const char* op = "";
  };

  Var push(Tensor<T> value, bool needs_grad, BackwardFn fn, const char* op) {
    nodes_.push_back(Node{std::move(value), {}, needs_grad ? std::move(fn) : BackwardFn{}, nullptr, needs_grad, op});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("tape variable out of range");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("tape variable out of range");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
};

// ---------------------------------------------------------------------------
// Differentiable operators

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var kernel, std::size_t stride, std::size_t pad) {
  Tensor<T> y = kernels::conv2d_forward(tape.value(x), tape.value(kernel), stride, pad);
  const bool ng = tape.needs_grad(x) || tape.needs_grad(kernel);
  return tape.record(std::move(y), ng, [x, kernel, stride, pad](Tape<T>& t, const Tensor<T>& gy) {
    Tensor<T>* dx = t.needs_grad(x) ? &t.grad_buffer(x) : nullptr;
    Tensor<T>* dw = t.needs_grad(kernel) ? &t.grad_buffer(kernel) : nullptr;
    kernels::conv2d_backward(t.value(x), t.value(kernel), gy, stride, pad, dx, dw);
  }, "conv2d");
}

/// Batch normalization. Running statistics are updated in place in train mode.
template <typename T>
Var batchnorm(Tape<T>& tape, Var x, Var gamma, Var beta, Tensor<T>& running_mean, Tensor<T>& running_var,
              Mode mode, const BatchNormConfig& cfg = {}) {
  kernels::BatchNormSaved<T> saved;
  Tensor<T> y = kernels::batchnorm_forward(tape.value(x), tape.value(gamma), tape.value(beta), running_mean,
                                           running_var, mode, cfg, saved);
  const bool ng = tape.needs_grad(x) || tape.needs_grad(gamma) || tape.needs_grad(beta);
  return tape.record(std::move(y), ng, [x, gamma, beta, mode, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& gy) {
    kernels::batchnorm_backward(t.value(x), t.value(gamma), gy, mode, saved,
                                t.needs_grad(x) ? &t.grad_buffer(x) : nullptr,
                                t.needs_grad(gamma) ? &t.grad_buffer(gamma) : nullptr,
                                t.needs_grad(beta) ? &t.grad_buffer(beta) : nullptr);
  }, "batchnorm");
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  return tape.record(std::move(y), tape.needs_grad(x), [x](Tape<T>& t, const Tensor<T>& gy) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += xv[i] > T(0) ? gy[i] : T(0);
  }, "relu");
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (av.shape() != bv.shape()) throw ShapeError("add: " + av.shape().str() + " vs " + bv.shape().str());
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return tape.record(std::move(y), tape.needs_grad(a) || tape.needs_grad(b), [a, b](Tape<T>& t, const Tensor<T>& gy) {
    for (Var v : {a, b}) {
      if (!t.needs_grad(v)) continue;
      Tensor<T>& g = t.grad_buffer(v);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  }, "add");
}

/// Multiplication by a constant; carries the explicit step size h.
template <typename T>
Var scale(Tape<T>& tape, Var x, T c) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = c * xv[i];
  return tape.record(std::move(y), tape.needs_grad(x), [x, c](Tape<T>& t, const Tensor<T>& gy) {
    Tensor<T>& g = t.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i) g[i] += c * gy[i];
  }, "scale");
}

/// (N,C,H,W) -> (N,C)
template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.rank() != 4) throw ShapeError("global_avg_pool expects (N,C,H,W), got " + xv.shape().str());
  const std::size_t N = xv.dim(0), C = xv.dim(1), S = xv.dim(2) * xv.dim(3);
  Tensor<T> y(Shape{N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    T s = 0;
    for (std::size_t k = 0; k < S; ++k) s += xv[i * S + k];
    y[i] = s / static_cast<T>(S);
  }
  return tape.record(std::move(y), tape.needs_grad(x), [x, S](Tape<T>& t, const Tensor<T>& gy) {
    Tensor<T>& g = t.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const T v = gy[i] / static_cast<T>(S);
      for (std::size_t k = 0; k < S; ++k) g[i * S + k] += v;
    }
  }, "global_avg_pool");
}

/// y = x W^T + b with x (N,D), W (C,D), b (C).
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& wv = tape.value(weight);
  const Tensor<T>& bv = tape.value(bias);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1) || bv.size() != wv.dim(0))
    throw ShapeError("linear: input " + xv.shape().str() + ", weight " + wv.shape().str() + ", bias " +
                     bv.shape().str());
  const std::size_t N = xv.dim(0), D = xv.dim(1), C = wv.dim(0);
  Tensor<T> y(Shape{N, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      T s = 0;
      for (std::size_t d = 0; d < D; ++d) s += xv[n * D + d] * wv[c * D + d];
      y[n * C + c] = s + bv[c];
    }
  const bool ng = tape.needs_grad(x) || tape.needs_grad(weight) || tape.needs_grad(bias);
  return tape.record(std::move(y), ng, [x, weight, bias, N, D, C](Tape<T>& t, const Tensor<T>& gy) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(weight);
    if (t.needs_grad(x)) {
      Tensor<T>& gx = t.grad_buffer(x);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t d = 0; d < D; ++d) gx[n * D + d] += gy[n * C + c] * wv[c * D + d];
    }
    if (t.needs_grad(weight)) {
      Tensor<T>& gw = t.grad_buffer(weight);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t d = 0; d < D; ++d) gw[c * D + d] += gy[n * C + c] * xv[n * D + d];
    }
    if (t.needs_grad(bias)) {
      Tensor<T>& gb = t.grad_buffer(bias);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) gb[c] += gy[n * C + c];
    }
  }, "linear");
}

/// Mean softmax cross-entropy over the batch; returns a scalar node.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels) {
  const Tensor<T>& z = tape.value(logits);
  if (z.rank() != 2 || z.dim(0) != labels.size())
    throw ShapeError("softmax_cross_entropy: logits " + z.shape().str() + " with " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t N = z.dim(0), C = z.dim(1);
  Tensor<T> prob(z.shape());
  T loss = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= C)
      throw std::out_of_range("label " + std::to_string(labels[n]) + " out of range for " + std::to_string(C) +
                              " classes");
    const T* row = z.data() + n * C;
    T mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    T se = 0;
    for (std::size_t c = 0; c < C; ++c) se += std::exp(row[c] - mx);
    const T lse = mx + std::log(se);
    for (std::size_t c = 0; c < C; ++c) prob[n * C + c] = std::exp(row[c] - lse);
    loss += lse - row[labels[n]];
  }
  loss /= static_cast<T>(N);
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record(Tensor<T>(Shape{1}, std::vector<T>{loss}), tape.needs_grad(logits),
                     [logits, prob = std::move(prob), lab = std::move(lab), N, C](Tape<T>& t, const Tensor<T>& gy) {
                       Tensor<T>& g = t.grad_buffer(logits);
                       const T s = gy[0] / static_cast<T>(N);
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t c = 0; c < C; ++c)
                           g[n * C + c] += s * (prob[n * C + c] - (static_cast<int>(c) == lab[n] ? T(1) : T(0)));
                     }, "softmax_cross_entropy");
}

template <typename T>
Var pool_pad(Tape<T>& tape, Var x, std::size_t out_channels) {
  Tensor<T> y = kernels::pool_pad_forward(tape.value(x), out_channels);
  return tape.record(std::move(y), tape.needs_grad(x), [x](Tape<T>& t, const Tensor<T>& gy) {
    kernels::pool_pad_backward(t.value(x), gy, t.grad_buffer(x));
  }, "pool_pad");
}

}  // namespace odenet
