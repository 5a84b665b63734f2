#pragma once

#include <span>
#include <vector>

#include "dnet/tensor.hpp"

namespace dnet {

/// Adam moments for an ordered list of parameter tensors.
template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// One Adam update with bias-corrected moments; eps is added to sqrt(v_hat).
/// The step counter advances before the bias correction.
template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const std::vector<T>> grads,
               AdamState<T>& state, double lr);

/// Same, reading each parameter's accumulated gradient (zeros if none).
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, double lr);

struct PolySchedule {
  double initial_lr = 1e-4;
  double power = 0.9;
  long max_iter = 1;
};

/// initial_lr * (1 - iter / max_iter)^power for 0 <= iter <= max_iter.
double poly_lr(long iter, const PolySchedule& schedule);

}  // namespace dnet
