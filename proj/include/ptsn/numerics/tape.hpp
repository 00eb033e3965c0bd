#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ptsn/errors.hpp"
#include "ptsn/numerics/tensor.hpp"

namespace ptsn {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Reverse-mode recording of primitive operations.
///
/// Nodes are appended in evaluation order; backward() walks them in reverse,
/// handing each node its accumulated output gradient. Parameter leaves
/// accumulate straight into Parameter::grad. A tape is used by one thread.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push("constant", std::move(v), false, nullptr, nullptr); }

  /// Leaf whose gradient is kept on the tape (read via grad()).
  Var<T> variable(Tensor<T> v) { return push("variable", std::move(v), true, nullptr, nullptr); }

  /// Leaf bound to a Parameter. The node refers to the parameter's storage,
  /// which must not change while the tape is alive. Frozen parameters record
  /// as constants.
  Var<T> param(Parameter<T>& p) {
    if (checked_mode() && !p.value.all_finite()) throw NumericalError("non-finite parameter " + p.name);
    if (p.frozen) return push_ref(&p.value, false, nullptr);
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
    return push_ref(&p.value, true, &p);
  }

  Var<T> record(const char* op, Tensor<T> value, bool requires_grad, Backward fn) {
    return push(op, std::move(value), requires_grad, std::move(fn), nullptr);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref != nullptr ? *n.ref : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer for node `id`; allocated (zero) on first use.
  Tensor<T>& grad_of(std::size_t id) {
    auto& g = grads_[id];
    if (g.empty()) g = Tensor<T>(value(id).shape());
    return g;
  }

  /// Gradient of the last backward() with respect to a recorded value.
  /// Returns zeros when the value did not influence the loss.
  Tensor<T> grad(Var<T> v) const {
    if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
    return Tensor<T>(value(v.id).shape());
  }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw ConfigError("backward: variable belongs to a different tape");
    if (value(loss.id).size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()));
    grads_.assign(nodes_.size(), Tensor<T>());
    if (!nodes_[loss.id].requires_grad) return;
    grad_of(loss.id)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || grads_[i].empty()) continue;
      if (n.param != nullptr) {
        auto& pg = n.param->grad.storage();
        const auto& g = grads_[i].storage();
        for (std::size_t k = 0; k < g.size(); ++k) pg[k] += g[k];
      } else if (n.backward) {
        n.backward(*this, i, grads_[i]);
      }
    }
  }

 private:
  struct Node {
    const char* op;
    Tensor<T> value;
    bool requires_grad;
    Backward backward;
    Parameter<T>* param;
    const Tensor<T>* ref = nullptr;
  };

  Var<T> push(const char* op, Tensor<T> value, bool requires_grad, Backward fn, Parameter<T>* p) {
    if (checked_mode() && !value.all_finite())
      throw NumericalError(std::string("non-finite value produced by ") + op);
    nodes_.push_back(Node{op, std::move(value), requires_grad, std::move(fn), p, nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> push_ref(const Tensor<T>* ref, bool requires_grad, Parameter<T>* p) {
    nodes_.push_back(Node{"param", Tensor<T>(), requires_grad, nullptr, p, ref});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
};

}  // namespace ptsn
