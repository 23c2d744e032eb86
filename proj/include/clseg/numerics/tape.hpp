// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "clseg/numerics/tensor.hpp"

namespace clseg {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode recorder. Every differentiable op appends one node holding its
/// output and a closure that pushes the output gradient into its inputs.
///
/// Parameters are registered by pointer; after backward() their gradients are
/// added into Tensor::grad() of the registered tensor. Constants never receive
/// gradients and ops whose inputs are all constant skip their backward pass.
template <typename Scalar_>
class Tape {
 public:
  using Scalar = Scalar_;
  using TensorT = Tensor<Scalar>;
  using Buffer = typename TensorT::Buffer;
  using BackwardFn = std::function<void(Tape&, const Buffer& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(TensorT value) { return push(std::move(value), false, nullptr, {}); }

  /// Registers a trainable tensor. The tape copies its values; gradients flow
  /// back into `param.grad()` when backward() runs.
  Var parameter(TensorT& param) { return push(TensorT(param.shape(), param.values()), true, &param, {}); }

  /// Appends an op output. `op` names the op for diagnostics.
  Var record(const char* op, TensorT value, std::initializer_list<Var> inputs, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite output from ") + op);
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(backward) : BackwardFn{});
  }

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator of `v`, allocated on first use. Only valid during backward.
  Buffer& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.size() != n.value.size()) n.grad = Buffer::Zero(n.value.size());
    return n.grad;
  }

  /// Number of backward closures executed by the last backward() call.
  std::size_t backward_visits() const { return visits_; }

  void backward(Var loss) {
    Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw UsageError("backward requires a scalar loss, got shape " + shape_str(root.value.shape()));
    }
    for (Node& n : nodes_) n.grad.resize(0);
    visits_ = 0;
    if (!root.requires_grad) return;
    grad(loss).setOnes();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) {
        // The closure may grow other nodes' grads; keep our own buffer alive.
        Buffer g = std::move(n.grad);
        n.backward(*this, g);
        ++visits_;
      } else if (n.param != nullptr) {
        if (!n.grad.allFinite()) throw NumericError("non-finite gradient reached a parameter");
        n.param->grad() += n.grad;
      }
    }
  }

 private:
  struct Node {
    TensorT value;
    bool requires_grad = false;
    TensorT* param = nullptr;
    BackwardFn backward;
    Buffer grad;
  };

  Var push(TensorT value, bool requires_grad, TensorT* param, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), requires_grad, param, std::move(backward), {}});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

}  // namespace clseg
