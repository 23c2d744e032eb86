// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "clseg/errors.hpp"
#include "clseg/numerics/tensor.hpp"

namespace clseg {

inline constexpr double kDiceThreshold = 0.5;

/// Hard Dice 2|P∩G|/(|P|+|G|) with P = pred ≥ threshold. Both empty gives 1.
template <typename Scalar>
double dice_score(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt, double threshold = kDiceThreshold) {
  if (pred.shape() != gt.shape()) {
    throw ConfigError("dice_score shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  }
  long long inter = 0, p = 0, g = 0;
  for (Index i = 0; i < gt.size(); ++i) {
    if (gt[i] != Scalar(0) && gt[i] != Scalar(1)) throw InputError("dice_score: ground truth is not binary");
    const bool pi = double(pred[i]) >= threshold, gi = gt[i] == Scalar(1);
    inter += pi && gi;
    p += pi;
    g += gi;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(inter) / double(p + g);
}

}  // namespace clseg
