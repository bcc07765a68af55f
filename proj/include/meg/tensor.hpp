#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "meg/errors.hpp"

namespace meg {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor. The value vector always holds exactly
// shape_size(shape) elements.
template <class Real>
struct Tensor {
  Shape shape;
  std::vector<Real> values;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, Real fill = Real(0)) : shape(std::move(s)), values(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<Real> v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != shape_size(shape)) {
      throw DimensionError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    }
  }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  // Extent of the last axis; 1 for scalars.
  std::size_t last() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return shape.empty() ? 1 : size() / last(); }

  Real* data() { return values.data(); }
  const Real* data() const { return values.data(); }
  std::span<Real> span() { return values; }
  std::span<const Real> span() const { return values; }

  Real& operator[](std::size_t i) { return values[i]; }
  const Real& operator[](std::size_t i) const { return values[i]; }

  Real& at(std::size_t i, std::size_t j) { return values[i * last() + j]; }
  const Real& at(std::size_t i, std::size_t j) const { return values[i * last() + j]; }

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }
};

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out(t.shape);
  for (std::size_t i = 0; i < t.size(); ++i) out.values[i] = static_cast<To>(t.values[i]);
  out.requires_grad = t.requires_grad;
  return out;
}

template <class Real>
bool all_finite(const Tensor<Real>& t);

}  // namespace meg
