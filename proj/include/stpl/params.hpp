#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>

#include "stpl/diffcore/tape.hpp"

namespace stpl {

/// Named parameter tensors, ordered by name so iteration is deterministic.
template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;

/// Parameters whose name starts with "fixed." are constant buffers and never optimized.
inline bool is_buffer(const std::string& name) { return name.rfind("fixed.", 0) == 0; }

/// Uniform init in [-a, a] with a = sqrt(1 / fan_in).
template <class T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double a = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-a, a);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

template <class T>
ParamMap<T> cast_params(const ParamMap<double>& src) {
  ParamMap<T> out;
  for (const auto& [name, t] : src) out.emplace(name, t.template cast<T>());
  return out;
}

/// Parameters of a model bound as leaves of one tape.
template <class T>
class BoundParams {
 public:
  using Predicate = std::function<bool(const std::string&)>;

  BoundParams(Tape<T>& tape, const ParamMap<T>& params, const Predicate& trainable = {})
      : tape_(&tape) {
    for (const auto& [name, value] : params) {
      const bool grad = !is_buffer(name) && (!trainable || trainable(name));
      vars_.emplace(name, tape.leaf(value, grad));
    }
  }

  /// View over leaves that already live on `tape`.
  BoundParams(Tape<T>& tape, std::map<std::string, Var<T>> vars) : tape_(&tape), vars_(std::move(vars)) {}

  Tape<T>& tape() const { return *tape_; }

  const Var<T>& operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  /// Gradients after backward; parameters that received none get zeros.
  ParamMap<T> gradients() const {
    ParamMap<T> out;
    for (const auto& [name, var] : vars_) {
      Tensor<T> g(var.shape());
      const auto src = var.grad();
      if (!src.empty()) std::copy(src.begin(), src.end(), g.data().begin());
      out.emplace(name, std::move(g));
    }
    return out;
  }

  const std::map<std::string, Var<T>>& vars() const { return vars_; }

 private:
  Tape<T>* tape_;
  std::map<std::string, Var<T>> vars_;
};

}  // namespace stpl
