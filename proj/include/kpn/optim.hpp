#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kpn/tensor.hpp"

namespace kpn {

// A named leaf tensor plus its optimizer state. A non-learnable parameter is
// never touched by sgd_step and never receives gradients.
template <typename Real>
struct Parameter {
  std::string name;
  Tensor<Real> tensor;
  std::vector<Real> momentum;
  Real weight_decay = 0;
  bool learnable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<Real> t, Real decay = 0, bool is_learnable = true)
      : name(std::move(n)), tensor(std::move(t)), momentum(tensor.numel(), Real(0)),
        weight_decay(decay), learnable(is_learnable) {
    tensor.set_requires_grad(learnable);
  }

  // Deep copy: fresh tensor storage, same optimizer state.
  Parameter clone() const {
    Parameter p;
    p.name = name;
    p.tensor = tensor.clone();
    p.momentum = momentum;
    p.weight_decay = weight_decay;
    p.learnable = learnable;
    return p;
  }

  void freeze() {
    learnable = false;
    tensor.set_requires_grad(false);
    tensor.zero_grad();
  }
};

// Heavy-ball SGD with per-parameter L2 decay:
//   v <- momentum * v + grad + decay * w;  w <- w - lr * v
// Parameters without an accumulated gradient are skipped.
template <typename Real>
void sgd_step(std::span<Parameter<Real>* const> params, Real lr, Real momentum) {
  for (Parameter<Real>* p : params) {
    if (!p->learnable || !p->tensor.has_grad()) continue;
    auto w = p->tensor.mutable_values();
    const auto g = p->tensor.grad();
    auto& v = p->momentum;
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + g[i] + p->weight_decay * w[i];
      w[i] -= lr * v[i];
    }
  }
}

template <typename Real>
void zero_grad(std::span<Parameter<Real>* const> params) {
  for (Parameter<Real>* p : params) p->tensor.zero_grad();
}

}  // namespace kpn
