#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "meg/tape.hpp"

namespace meg {

// Ordered collection of named parameter tensors. Order is insertion order and
// defines the checkpoint block order.
template <class Real>
class ParamSet {
 public:
  void add(std::string name, Tensor<Real> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    value.requires_grad = trainable;
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<Real>& get(const std::string& name) { return tensors_[index(name)]; }
  const Tensor<Real>& get(const std::string& name) const { return tensors_[index(name)]; }

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<Real>& at(std::size_t i) { return tensors_[i]; }
  const Tensor<Real>& at(std::size_t i) const { return tensors_[i]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  template <class To>
  ParamSet<To> cast() const {
    ParamSet<To> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensor_cast<To>(tensors_[i]), tensors_[i].requires_grad);
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<Real>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// A ParamSet placed on a tape. Trainable tensors become variables, the rest
// constants.
template <class Real>
class Bound {
 public:
  Bound(Tape<Real>& tape, const ParamSet<Real>& params) : params_(&params) {
    vars_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& t = params.at(i);
      vars_.push_back(t.requires_grad ? tape.variable(t) : tape.constant(t));
    }
  }

  Var operator[](const std::string& name) const { return vars_[params_->index(name)]; }
  bool contains(const std::string& name) const { return params_->contains(name); }

  // Gradients after tape.backward, aligned with the ParamSet. Frozen entries
  // are left empty; trainable entries the loss did not reach are zero.
  std::vector<Tensor<Real>> gradients(const Tape<Real>& tape) const {
    std::vector<Tensor<Real>> out(vars_.size());
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      if (!params_->at(i).requires_grad) continue;
      const auto* g = tape.grad(vars_[i]);
      out[i] = g ? *g : Tensor<Real>(params_->at(i).shape);
    }
    return out;
  }

 private:
  const ParamSet<Real>* params_;
  std::vector<Var> vars_;
};

}  // namespace meg
