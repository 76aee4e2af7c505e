#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <string_view>

#include "divsum/graph.hpp"
#include "divsum/random.hpp"
#include "divsum/tensor.hpp"

namespace divsum {

using ParamVisitor = std::function<void(const std::string& name, Tensor& tensor)>;
using ConstParamVisitor = std::function<void(const std::string& name, const Tensor& tensor)>;

inline std::string param_name(std::string_view prefix, std::string_view name) {
  return std::string(prefix) + "." + std::string(name);
}

/// Entries drawn uniform(−bound, bound).
inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& x : t.values()) x = rng.uniform(-bound, bound);
  return t;
}

/// uniform(−1/√fan, 1/√fan) initialization.
inline Tensor scaled_uniform(Shape shape, std::size_t fan, Rng& rng) {
  return uniform_tensor(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan)), rng);
}

/// Turns parameter tensors into graph leaves. With `track_grads` the leaves
/// accumulate gradients into the tensors, which must then be mutable objects
/// (Binder is only built that way from a non-const model).
class Binder {
 public:
  Binder(Graph& graph, bool track_grads) : graph_(&graph), track_(track_grads) {}

  Var operator()(const Tensor& tensor) const {
    return track_ ? graph_->param(const_cast<Tensor&>(tensor)) : graph_->frozen(tensor);
  }
  Graph& graph() const { return *graph_; }
  bool tracks_grads() const { return track_; }

 private:
  Graph* graph_;
  bool track_;
};

}  // namespace divsum
