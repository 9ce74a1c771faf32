#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "comalign/error.hpp"
#include "comalign/numerics/tensor.hpp"

namespace comalign::num {

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// node list backwards is a reverse topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }
  Var parameter(Tensor value) { return push(std::move(value), true, nullptr); }

  Var push(Tensor value, bool needs_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Tensor{}, needs_grad, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient accumulator for a node; allocated as zeros on first touch.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }
  Tensor& grad_buffer(Var v) { return grad_buffer(v.id); }
  const Tensor& value_at(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad_at(std::size_t id) const { return nodes_[id].needs_grad; }

  void backward(Var loss) {
    if (nodes_.at(loss.id).value.size() != 1) {
      throw DimensionError("backward: seed must be a scalar, got " +
                           Tensor::shape_string(nodes_[loss.id].value.shape()));
    }
    grad_buffer(loss)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.backward || n.grad.size() != n.value.size()) continue;
      n.backward(*this, i);
    }
    backward_done_ = true;
  }

  // Gradient of a node after backward(); unreachable nodes report zeros.
  Tensor grad(Var v) {
    if (!backward_done_) throw Error("tape: gradient requested before backward()");
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() != n.value.size()) return Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace comalign::num
