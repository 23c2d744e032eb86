// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "clseg/numerics/tensor.hpp"

namespace clseg {

/// θ ← θ − lr·(grad + l2_weight·θ). Plain SGD; momentum or adaptive variants
/// would slot in here as separate step functions with their own state.
template <typename Scalar>
void sgd_step(Tensor<Scalar>& param, const typename Tensor<Scalar>::Buffer& grad, Scalar lr, Scalar l2_weight,
              const std::string& name = "param") {
  if (!(lr > Scalar(0)) || !(l2_weight >= Scalar(0))) {
    throw ConfigError("sgd_step needs lr > 0 and l2_weight >= 0");
  }
  if (grad.size() != param.size()) {
    throw SchemaError("sgd_step: gradient size " + std::to_string(grad.size()) + " for " + name + " of shape " +
                      shape_str(param.shape()));
  }
  typename Tensor<Scalar>::Buffer next = param.values() - lr * (grad + l2_weight * param.values());
  if (!next.allFinite()) {
    throw NumericError("sgd_step produced non-finite values in " + name + " (max |grad| = " +
                       std::to_string(double(grad.cwiseAbs().maxCoeff())) + ")");
  }
  param.values() = std::move(next);
}

/// Central-difference gradient (f(θ+h) − f(θ−h)) / 2h for each coordinate of
/// each tensor in `params`. Tensors are perturbed in place and restored.
template <typename Scalar>
std::vector<typename Tensor<Scalar>::Buffer> finite_diff_grad(const std::function<Scalar()>& f,
                                                              std::span<Tensor<Scalar>*> params,
                                                              Scalar h = Scalar(1e-5)) {
  std::vector<typename Tensor<Scalar>::Buffer> grads;
  grads.reserve(params.size());
  for (Tensor<Scalar>* p : params) {
    typename Tensor<Scalar>::Buffer g(p->size());
    for (Index i = 0; i < p->size(); ++i) {
      const Scalar orig = (*p)[i];
      (*p)[i] = orig + h;
      const Scalar up = f();
      (*p)[i] = orig - h;
      const Scalar down = f();
      (*p)[i] = orig;
      g[i] = (up - down) / (Scalar(2) * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace clseg
