#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <vector>

#include "meg/tensor.hpp"

namespace meg {

// Handle to a node recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so the
// reverse of insertion order is a valid topological order for backward.
// A tape is single-threaded; separate tapes are independent.
template <class Real>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<Real>& grad_out)>;

  Var constant(Tensor<Real> value);
  // Leaf that receives a gradient.
  Var variable(Tensor<Real> value);
  // Records an op output. fn is kept only when some parent needs a gradient.
  Var record(Tensor<Real> value, std::initializer_list<Var> parents, BackwardFn fn);

  const Tensor<Real>& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  bool any_needs_grad(std::initializer_list<Var> vars) const;

  // Zero-initialised accumulator for v; only valid for nodes that need grad.
  Tensor<Real>& grad_accumulator(Var v);
  // Gradient reached by the last backward pass, or nullptr.
  const Tensor<Real>* grad(Var v) const;

  // Seeds d(root)/d(root) = 1 and propagates to every leaf variable.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool needs_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace meg
