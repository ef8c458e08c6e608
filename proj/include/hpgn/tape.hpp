#pragma once

// Reverse-mode differentiation record.
//
// A Tape owns every value produced during one forward pass. Primitives
// append nodes in execution order, so record order is a topological order
// and backward() simply walks it in reverse. Nodes whose inputs are all
// constants carry no backward closure.

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "hpgn/errors.hpp"
#include "hpgn/tensor.hpp"

namespace hpgn {

template <class T>
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor<T> value, bool decay = true)
      : name(std::move(name)), value(std::move(value)), decay(decay) {}

  std::string name;
  Tensor<T> value;
  bool decay = true;  // participates in weight decay
};

template <class T>
class Tape;

template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = std::numeric_limits<std::size_t>::max();
};

template <class T>
class Gradients {
 public:
  // Gradient of the loss with respect to v; zeros if v did not participate.
  Tensor<T> of(Var<T> v) const {
    if (v.id() >= grads_.size()) throw InvalidHandleError("gradient lookup: handle not on tape");
    if (!has_[v.id()]) return Tensor<T>(shapes_[v.id()]);
    return grads_[v.id()];
  }

  // Sum over every tape leaf bound to p; zeros if p was never used.
  Tensor<T> of(const Parameter<T>& p) const {
    Tensor<T> total(p.value.shape());
    for (std::size_t id = 0; id < params_.size(); ++id) {
      if (params_[id] != &p || !has_[id]) continue;
      const auto& g = grads_[id];
      for (std::size_t k = 0; k < total.size(); ++k) total[k] += g[k];
    }
    return total;
  }

 private:
  friend class Tape<T>;
  std::vector<Tensor<T>> grads_;
  std::vector<bool> has_;
  std::vector<Shape> shapes_;
  std::vector<const Parameter<T>*> params_;
};

template <class T>
class Tape {
 public:
  // Called with the node's output gradient; accumulates into inputs via
  // grad(). Only invoked when the output gradient was actually reached.
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), nullptr, false, nullptr); }
  Var<T> variable(Tensor<T> value) { return push(std::move(value), nullptr, true, nullptr); }
  Var<T> param(Parameter<T>& p) { return push(p.value, nullptr, true, &p); }

  // Appends the result of a primitive. The closure is dropped when no input
  // requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) {
      check(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs ? std::move(fn) : BackwardFn{}, needs, nullptr);
  }

  const Tensor<T>& value(Var<T> v) const {
    check(v);
    return nodes_[v.id()].value;
  }
  bool requires_grad(Var<T> v) const {
    check(v);
    return nodes_[v.id()].requires_grad;
  }
  std::size_t size() const { return nodes_.size(); }

  // Gradient accumulator of an input during backward(); nullptr when the
  // input does not need one.
  Tensor<T>* grad(Var<T> v) {
    const std::size_t id = v.id();
    if (!nodes_[id].requires_grad) return nullptr;
    if (!has_[id]) {
      grads_[id] = Tensor<T>(nodes_[id].value.shape());
      has_[id] = true;
    }
    return &grads_[id];
  }

  Gradients<T> backward(Var<T> loss) {
    if (loss.tape() != this || loss.id() >= nodes_.size())
      throw InvalidHandleError("backward: loss is not a node of this tape");
    if (nodes_[loss.id()].value.size() != 1)
      throw ShapeError("backward: loss must be a scalar, got shape " +
                       shape_str(nodes_[loss.id()].value.shape()));
    const std::size_t n = nodes_.size();
    grads_.assign(n, Tensor<T>());
    has_.assign(n, false);
    if (nodes_[loss.id()].requires_grad) {
      grads_[loss.id()] = Tensor<T>(nodes_[loss.id()].value.shape(), T(1));
      has_[loss.id()] = true;
    }
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      if (!has_[id] || !nodes_[id].fn) continue;
      nodes_[id].fn(grads_[id], *this);
    }
    Gradients<T> out;
    out.grads_ = std::move(grads_);
    out.has_ = std::move(has_);
    out.shapes_.reserve(n);
    out.params_.reserve(n);
    for (const auto& node : nodes_) {
      out.shapes_.push_back(node.value.shape());
      out.params_.push_back(node.param);
    }
    grads_.clear();
    has_.clear();
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    BackwardFn fn;
    bool requires_grad = false;
    const Parameter<T>* param = nullptr;
  };

  void check(Var<T> v) const {
    if (v.tape() != this || v.id() >= nodes_.size())
      throw InvalidHandleError("variable handle does not belong to this tape");
  }

  Var<T> push(Tensor<T> value, BackwardFn fn, bool requires_grad, const Parameter<T>* p) {
    nodes_.push_back(Node{std::move(value), std::move(fn), requires_grad, p});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // deque: value() references survive later pushes
  std::vector<Tensor<T>> grads_;
  std::vector<bool> has_;
};

}  // namespace hpgn
