#include "dnet/optim.hpp"

#include <cmath>
#include <string>

namespace dnet {

template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const std::vector<T>> grads,
               AdamState<T>& state, double lr) {
  if (params.size() != grads.size()) {
    throw Error(ErrorCode::shape_mismatch, "adam_step: parameter and gradient counts differ");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), T(0));
      state.v.emplace_back(p.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw Error(ErrorCode::shape_mismatch, "adam_step: optimizer state tracks " +
                                               std::to_string(state.m.size()) +
                                               " tensors, got " +
                                               std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].size() || state.m[k].size() != params[k].size()) {
      throw Error(ErrorCode::shape_mismatch,
                  "adam_step: gradient " + std::to_string(k) + " does not match its parameter");
    }
  }
  state.step += 1;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].mutable_data();
    const auto& g = grads[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / c1;
      const double v_hat = vi / c2;
      p[i] = static_cast<T>(p[i] - lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, double lr) {
  std::vector<std::vector<T>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  adam_step<T>(params, std::span<const std::vector<T>>(grads), state, lr);
}

double poly_lr(long iter, const PolySchedule& s) {
  if (s.max_iter < 1) throw Error(ErrorCode::invalid_argument, "poly_lr: max_iter must be >= 1");
  if (iter < 0 || iter > s.max_iter) {
    throw Error(ErrorCode::invalid_argument, "poly_lr: iteration " + std::to_string(iter) +
                                                 " outside [0, " +
                                                 std::to_string(s.max_iter) + "]");
  }
  return s.initial_lr *
         std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(s.max_iter), s.power);
}

template void adam_step<float>(std::span<Tensor<float>>, std::span<const std::vector<float>>,
                               AdamState<float>&, double);
template void adam_step<double>(std::span<Tensor<double>>, std::span<const std::vector<double>>,
                                AdamState<double>&, double);
template void adam_step<float>(std::span<Tensor<float>>, AdamState<float>&, double);
template void adam_step<double>(std::span<Tensor<double>>, AdamState<double>&, double);

}  // namespace dnet
