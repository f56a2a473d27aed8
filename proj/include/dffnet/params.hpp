#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dffnet/autodiff.hpp"
#include "dffnet/rng.hpp"
#include "dffnet/tensor.hpp"

namespace dffnet {

/// Ordered registry of named learnable tensors.
template <class T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    index_.emplace(name, values_.size());
    names_.push_back(name);
    values_.push_back(std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& get(const std::string& name) { return values_[lookup(name)]; }
  const Tensor<T>& get(const std::string& name) const { return values_[lookup(name)]; }

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::size_t size() const noexcept { return values_.size(); }
  Tensor<T>& at(std::size_t i) { return values_.at(i); }
  const Tensor<T>& at(std::size_t i) const { return values_.at(i); }

  /// Total number of learnable scalars.
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
  }

  bool operator==(const ParamStore& o) const { return names_ == o.names_ && values_ == o.values_; }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters placed on a tape as differentiable leaves.
template <class T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, const ParamStore<T>& store) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      vars_.emplace(store.names()[i], tape.leaf(store.at(i), store.names()[i]));
      order_.push_back(store.names()[i]);
    }
  }

  /// Binds existing leaves; `vars[i]` plays the parameter `names[i]`.
  BoundParams(const std::vector<std::string>& names, const std::vector<Var<T>>& vars) {
    if (vars.size() < names.size()) throw Error("BoundParams: fewer handles than parameter names");
    for (std::size_t i = 0; i < names.size(); ++i) {
      vars_.emplace(names[i], vars[i]);
      order_.push_back(names[i]);
    }
  }

  Var<T> operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw Error("parameter '" + name + "' is not bound");
    return it->second;
  }

  const std::vector<std::string>& names() const noexcept { return order_; }

 private:
  std::map<std::string, Var<T>> vars_;
  std::vector<std::string> order_;
};

namespace init {

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
Tensor<T> normal(Shape shape, double mean, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(mean, stddev));
  return t;
}

/// Weight `out x fan_in_dims...` and bias `out`, both fan-in uniform.
template <class T>
void dense(ParamStore<T>& store, const std::string& prefix, Shape weight_shape, Rng& rng) {
  std::size_t fan_in = 1;
  for (std::size_t d = 1; d < weight_shape.size(); ++d) fan_in *= weight_shape[d];
  const std::size_t out = weight_shape.at(0);
  store.add(prefix + ".w", fan_in_uniform<T>(std::move(weight_shape), fan_in, rng));
  store.add(prefix + ".b", fan_in_uniform<T>(Shape{out}, fan_in, rng));
}

}  // namespace init
}  // namespace dffnet
