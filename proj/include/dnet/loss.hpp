#pragma once

#include <span>
#include <string>

#include "dnet/tensor.hpp"

namespace dnet {

struct LossConfig {
  double lambda = 1e-4;  // L2 weight penalty
  double beta = 1.0;     // squared-distance term
  double cross_entropy_weight = 1.0;
  double clamp_eps = 1e-7;

  void validate() const;
};

/// lambda * sum ||W||^2 + ce_weight * mean BCE(pred, target)
///   + beta * mean (pred - target)^2
/// with pred clamped to [eps, 1 - eps] inside the logarithms.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target,
                     std::span<const Tensor<T>> params, const LossConfig& cfg);

/// The data terms alone (cross-entropy and squared distance), as one node.
template <typename T>
Tensor<T> data_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg);

/// sum over params of sum(w^2), as one node.
template <typename T>
Tensor<T> l2_penalty(std::span<const Tensor<T>> params);

/// Human-readable statement of the objective being minimised.
std::string loss_formula(const LossConfig& cfg);

}  // namespace dnet
