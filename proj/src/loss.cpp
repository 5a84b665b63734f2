#include "dnet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dnet {

void LossConfig::validate() const {
  if (lambda < 0 || beta < 0 || cross_entropy_weight < 0) {
    throw Error(ErrorCode::config, "loss weights must be non-negative");
  }
  if (!(clamp_eps > 0 && clamp_eps < 0.5)) {
    throw Error(ErrorCode::config, "clamp epsilon must lie in (0, 0.5)");
  }
}

template <typename T>
Tensor<T> data_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
  cfg.validate();
  if (!(pred.shape() == target.shape())) {
    throw Error(ErrorCode::shape_mismatch,
                "loss: prediction " + pred.shape().str() + " vs target " + target.shape().str());
  }
  if (pred.empty()) throw Error(ErrorCode::invalid_argument, "loss of empty tensor");
  const T eps = static_cast<T>(cfg.clamp_eps);
  const T ce_w = static_cast<T>(cfg.cross_entropy_weight);
  const T beta = static_cast<T>(cfg.beta);
  const T inv_n = T(1) / static_cast<T>(pred.size());
  auto p = pred.data();
  auto y = target.data();
  T ce = T(0);
  T sq = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T pc = std::clamp(p[i], eps, T(1) - eps);
    ce -= y[i] * std::log(pc) + (T(1) - y[i]) * std::log(T(1) - pc);
    const T d = p[i] - y[i];
    sq += d * d;
  }
  const T value = ce_w * ce * inv_n + beta * sq * inv_n;
  return make_result<T>({1, 1, 1, 1}, {value}, {pred, target},
                        [eps, ce_w, beta, inv_n](detail::Node<T>& self) {
                          auto& pn = *self.inputs[0];
                          auto& yn = *self.inputs[1];
                          const T g = self.grad[0];
                          const auto& p = pn.data;
                          const auto& y = yn.data;
                          if (pn.requires_grad) {
                            auto& gp = pn.grad_buffer();
                            for (std::size_t i = 0; i < p.size(); ++i) {
                              T d_ce = T(0);
                              if (p[i] > eps && p[i] < T(1) - eps) {
                                d_ce = -y[i] / p[i] + (T(1) - y[i]) / (T(1) - p[i]);
                              }
                              gp[i] += g * inv_n * (ce_w * d_ce + beta * T(2) * (p[i] - y[i]));
                            }
                          }
                          if (yn.requires_grad) {
                            auto& gy = yn.grad_buffer();
                            for (std::size_t i = 0; i < p.size(); ++i) {
                              const T pc = std::clamp(p[i], eps, T(1) - eps);
                              const T d_ce = -std::log(pc) + std::log(T(1) - pc);
                              gy[i] += g * inv_n * (ce_w * d_ce - beta * T(2) * (p[i] - y[i]));
                            }
                          }
                        });
}

template <typename T>
Tensor<T> l2_penalty(std::span<const Tensor<T>> params) {
  T total = T(0);
  for (const auto& w : params)
    for (T v : w.data()) total += v * v;
  std::vector<Tensor<T>> inputs(params.begin(), params.end());
  return make_result<T>({1, 1, 1, 1}, {total}, std::move(inputs), [](detail::Node<T>& self) {
    const T g = self.grad[0];
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& gw = in->grad_buffer();
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += g * T(2) * in->data[i];
    }
  });
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target,
                     std::span<const Tensor<T>> params, const LossConfig& cfg) {
  Tensor<T> loss = data_loss(pred, target, cfg);
  if (cfg.lambda > 0 && !params.empty()) {
    loss = add(loss, scale(l2_penalty(params), static_cast<T>(cfg.lambda)));
  }
  return loss;
}

std::string loss_formula(const LossConfig& cfg) {
  std::ostringstream s;
  s << "loss = " << cfg.lambda << " * sum ||W||^2 + " << cfg.cross_entropy_weight
    << " * mean BCE(y_hat, y) + " << cfg.beta
    << " * mean (y_hat - y)^2   (all terms added; y_hat clamped to [" << cfg.clamp_eps
    << ", 1 - " << cfg.clamp_eps << "] in BCE)";
  return s.str();
}

#define DNET_INSTANTIATE(T)                                                         \
  template Tensor<T> total_loss<T>(const Tensor<T>&, const Tensor<T>&,              \
                                   std::span<const Tensor<T>>, const LossConfig&);  \
  template Tensor<T> data_loss<T>(const Tensor<T>&, const Tensor<T>&,               \
                                  const LossConfig&);                               \
  template Tensor<T> l2_penalty<T>(std::span<const Tensor<T>>);

DNET_INSTANTIATE(float)
DNET_INSTANTIATE(double)

}  // namespace dnet
