#pragma once

#include <cmath>
#include <map>
#include <string>

#include "affectkit/errors.hpp"
#include "affectkit/graph.hpp"

namespace affectkit {

enum class OptimizerKind { adam, sgd };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ArgumentError("unknown optimizer '" + s + "' (expected adam or sgd)");
}

/// Euclidean norm of all gradients taken together.
inline double global_grad_norm(const ParameterSet& params) {
  double total = 0.0;
  for (const auto& [name, p] : params) {
    for (double g : p.grad.values()) total += g * g;
  }
  return std::sqrt(total);
}

/// Rescales every gradient so the global norm is at most `max_norm`. Returns the norm before clipping.
inline double clip_grad_norm(ParameterSet& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& [name, p] : params) {
      for (double& g : p.grad.values()) g *= factor;
    }
  }
  return norm;
}

/// Adam (bias-corrected moments) or plain SGD over a ParameterSet.
class Optimizer {
public:
  Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {
    if (!(learning_rate >= 0.0 && learning_rate < 1.0)) {
      throw ArgumentError("learning rate must lie in [0,1), got " + std::to_string(learning_rate));
    }
  }

  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  OptimizerKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }
  long steps() const { return steps_; }

  void step(ParameterSet& params) {
    ++steps_;
    if (lr_ == 0.0) return;
    if (kind_ == OptimizerKind::sgd) {
      for (auto& [name, p] : params) {
        for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr_ * p.grad[i];
      }
      return;
    }
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
    for (auto& [name, p] : params) {
      auto [it, fresh] = moments_.try_emplace(name);
      if (fresh) it->second = {Tensor(p.value.shape()), Tensor(p.value.shape())};
      Tensor& m = it->second.first;
      Tensor& v = it->second.second;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon);
      }
    }
  }

private:
  OptimizerKind kind_;
  double lr_;
  long steps_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

}  // namespace affectkit
