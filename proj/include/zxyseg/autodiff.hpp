#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "zxyseg/tensor.hpp"

namespace zxyseg::ad {

// Handle into a Tape's node list.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Define-by-run reverse-mode tape. Nodes are appended in topological order,
// so the backward sweep is a single reverse pass over the node list.
// Gradients are allocated lazily; nodes no gradient reached are skipped.
template <typename S>
class Tape {
public:
  Var input(Tensor<S> value, bool needs_grad = false) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var node(Tensor<S> value, bool needs_grad) { return input(std::move(value), needs_grad); }

  void set_backprop(Var v, std::function<void(Tape&)> fn) {
    nodes_[static_cast<size_t>(v.id)].backprop = std::move(fn);
  }

  const Tensor<S>& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }

  Tensor<S>& grad(Var v) {
    Node& n = nodes_[static_cast<size_t>(v.id)];
    if (n.grad.size() == 0) n.grad = Tensor<S>::zeros(n.value.shape);
    return n.grad;
  }

  bool has_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad.size() > 0; }
  bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

  // Seeds d(root)=1 and runs the reverse sweep. Root must be scalar.
  void backward(Var root) {
    require(val(root).size() == 1, "autodiff.root", "backward root must be a scalar");
    grad(root).data[0] = S(1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.needs_grad || !n.backprop || n.grad.size() == 0) continue;
      n.backprop(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    std::function<void(Tape&)> backprop;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
};

}  // namespace zxyseg::ad
