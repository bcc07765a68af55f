#include "meg/tape.hpp"

#include <cmath>
#include <sstream>

namespace meg {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class Real>
bool all_finite(const Tensor<Real>& t) {
  for (auto v : t.values)
    if (!std::isfinite(v)) return false;
  return true;
}

template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);

template <class Real>
Var Tape<Real>::constant(Tensor<Real> value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class Real>
Var Tape<Real>::variable(Tensor<Real> value) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = true;
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class Real>
bool Tape<Real>::any_needs_grad(std::initializer_list<Var> vars) const {
  for (auto v : vars)
    if (nodes_[v.id].needs_grad) return true;
  return false;
}

template <class Real>
Var Tape<Real>::record(Tensor<Real> value, std::initializer_list<Var> parents, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = any_needs_grad(parents);
  if (node.needs_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class Real>
Tensor<Real>& Tape<Real>::grad_accumulator(Var v) {
  Node& node = nodes_[v.id];
  if (!node.has_grad) {
    node.grad = Tensor<Real>(node.value.shape);
    node.has_grad = true;
  }
  return node.grad;
}

template <class Real>
const Tensor<Real>* Tape<Real>::grad(Var v) const {
  const Node& node = nodes_[v.id];
  return node.has_grad ? &node.grad : nullptr;
}

template <class Real>
void Tape<Real>::backward(Var root) {
  for (auto& node : nodes_) {
    node.has_grad = false;
    node.grad = Tensor<Real>();
  }
  if (!nodes_[root.id].needs_grad) return;
  Tensor<Real>& seed = grad_accumulator(root);
  std::fill(seed.values.begin(), seed.values.end(), Real(1));
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.backward) continue;
    // The callback may grow other nodes' gradients but never this one.
    node.backward(*this, node.grad);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace meg
