// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <memory>

#include "clseg/numerics/ops.hpp"

namespace clseg {

inline constexpr double kDiceSmoothing = 1e-6;
inline constexpr double kBceClamp = 1e-7;
inline constexpr double kBceGradFloor = 1e-30;

namespace detail {

template <typename Scalar>
void check_loss_inputs(const char* op, const Tensor<Scalar>& pred, const Tensor<Scalar>& target, bool binary_target) {
  if (pred.shape() != target.shape()) {
    throw ConfigError(std::string(op) + ": prediction " + shape_str(pred.shape()) + " vs target " +
                      shape_str(target.shape()));
  }
  for (Index i = 0; i < pred.size(); ++i) {
    const Scalar p = pred[i], g = target[i];
    if (!(p >= Scalar(0) && p <= Scalar(1))) {
      throw InputError(std::string(op) + ": prediction outside [0,1] at element " + std::to_string(i));
    }
    if (binary_target ? !(g == Scalar(0) || g == Scalar(1)) : !(g >= Scalar(0) && g <= Scalar(1))) {
      throw InputError(std::string(op) + ": target value " + std::to_string(double(g)) + " at element " +
                       std::to_string(i) + (binary_target ? " is not in {0,1}" : " is outside [0,1]"));
    }
  }
}

template <typename Scalar>
Var bce_impl(Tape<Scalar>& tape, Var pred, const Tensor<Scalar>& target, bool binary_target, const char* op,
             bool relative = false) {
  const auto& p = tape.value(pred);
  check_loss_inputs(op, p, target, binary_target);
  const Scalar lo = Scalar(kBceClamp), hi = Scalar(1) - Scalar(kBceClamp);
  const Index n = p.size();
  double total = 0;
  for (Index i = 0; i < n; ++i) {
    const double pc = std::clamp(p[i], lo, hi);
    const double g = target[i];
    total -= g * std::log(pc) + (1.0 - g) * std::log(1.0 - pc);
    if (relative) {
      const double tc = std::clamp(double(g), double(lo), double(hi));
      total += g * std::log(tc) + (1.0 - g) * std::log(1.0 - tc);
    }
  }
  Tensor<Scalar> y({1});
  y[0] = Scalar(total / double(n));
  auto tgt = std::make_shared<Tensor<Scalar>>(target);
  return tape.record(op, std::move(y), {pred}, [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
    const auto& pv = t.value(pred);
    auto& gp = t.grad(pred);
    const Scalar s = gy[0] / Scalar(n);
    for (Index i = 0; i < n; ++i) {
      // The clamp bounds the value only; saturated predictions still receive the
      // cross-entropy gradient so a confidently wrong model can recover.
      const double pi = std::max(double(pv[i]), kBceGradFloor);
      const double qi = std::max(1.0 - double(pv[i]), kBceGradFloor);
      const double g = double((*tgt)[i]);
      gp[i] += s * Scalar(-g / pi + (1.0 - g) / qi);
    }
  });
}

}  // namespace detail

/// Soft Dice loss 1 − (2Σpg + ε)/(Σp + Σg + ε) pooled over every element.
template <typename Scalar>
Var loss_dice(Tape<Scalar>& tape, Var pred, const Tensor<Scalar>& target) {
  const auto& p = tape.value(pred);
  detail::check_loss_inputs("loss_dice", p, target, true);
  double inter = 0, sum_p = 0, sum_g = 0;
  for (Index i = 0; i < p.size(); ++i) {
    inter += double(p[i]) * double(target[i]);
    sum_p += p[i];
    sum_g += target[i];
  }
  const double num = 2.0 * inter + kDiceSmoothing;
  const double den = sum_p + sum_g + kDiceSmoothing;
  Tensor<Scalar> y({1});
  y[0] = Scalar(1.0 - num / den);
  auto tgt = std::make_shared<Tensor<Scalar>>(target);
  return tape.record("loss_dice", std::move(y), {pred},
                     [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
                       auto& gp = t.grad(pred);
                       const double inv = 1.0 / (den * den);
                       for (Index i = 0; i < gp.size(); ++i) {
                         gp[i] += Scalar(double(gy[0]) * -(2.0 * double((*tgt)[i]) * den - num) * inv);
                       }
                     });
}

/// Mean binary cross-entropy against a {0,1} target; predictions clamped to [1e-7, 1−1e-7].
template <typename Scalar>
Var loss_bce(Tape<Scalar>& tape, Var pred, const Tensor<Scalar>& target) {
  return detail::bce_impl(tape, pred, target, true, "loss_bce");
}

/// Cross-entropy against soft targets in [0,1] minus the targets' own entropy
/// (output distillation). Zero when pred equals the target; same gradient as
/// the plain soft-target cross-entropy.
template <typename Scalar>
Var loss_distill(Tape<Scalar>& tape, Var pred, const Tensor<Scalar>& soft_target) {
  return detail::bce_impl(tape, pred, soft_target, false, "loss_distill", true);
}

/// Segmentation objective: Dice and BCE weighted equally.
template <typename Scalar>
Var loss_seg(Tape<Scalar>& tape, Var pred, const Tensor<Scalar>& target) {
  Var dice = loss_dice(tape, pred, target);
  Var bce = loss_bce(tape, pred, target);
  return add(tape, scale(tape, dice, Scalar(0.5)), scale(tape, bce, Scalar(0.5)));
}

/// (1/N)·Σ(x − recon)².
template <typename Scalar>
Var loss_mse(Tape<Scalar>& tape, Var x, Var recon) {
  if (tape.shape(x) != tape.shape(recon)) {
    throw ConfigError("loss_mse shape mismatch: " + shape_str(tape.shape(x)) + " vs " +
                      shape_str(tape.shape(recon)));
  }
  auto diff = std::make_shared<typename Tensor<Scalar>::Buffer>(tape.value(x).values() - tape.value(recon).values());
  const Index n = diff->size();
  Tensor<Scalar> y({1});
  y[0] = Scalar(diff->template cast<double>().squaredNorm() / double(n));
  return tape.record("loss_mse", std::move(y), {x, recon},
                     [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
                       const Scalar s = Scalar(2) * gy[0] / Scalar(n);
                       if (t.requires_grad(x)) t.grad(x) += s * (*diff);
                       if (t.requires_grad(recon)) t.grad(recon) -= s * (*diff);
                     });
}

}  // namespace clseg
