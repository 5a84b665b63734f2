#include "dnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

namespace dnet {

void TrainConfig::validate() const {
  if (!(lr >= 0)) throw Error(ErrorCode::config, "lr must be >= 0");
  if (!(power > 0)) throw Error(ErrorCode::config, "power must be > 0");
  if (max_iter < 1) throw Error(ErrorCode::config, "max_iter must be >= 1");
  if (batch < 1) throw Error(ErrorCode::config, "batch must be >= 1");
  loss().validate();
}

LossConfig TrainConfig::loss() const {
  LossConfig c;
  c.lambda = lambda;
  c.beta = beta;
  c.cross_entropy_weight = cross_entropy_weight;
  return c;
}

std::vector<TraceRow> train(const Dataset& data, DNet<float>& model, const TrainConfig& cfg,
                            const StepCallback& on_step) {
  cfg.validate();
  if (data.empty()) throw Error(ErrorCode::invalid_argument, "train: empty dataset");
  const LossConfig loss_cfg = cfg.loss();
  const PolySchedule schedule = cfg.schedule();
  std::vector<Tensor<float>> params = model.trainable();
  const std::vector<Tensor<float>> decayed = model.decayed();
  AdamState<float> adam;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t batch = std::min<std::size_t>(cfg.batch, data.size());

  std::vector<TraceRow> trace;
  trace.reserve(cfg.max_iter);
  std::vector<std::size_t> pick(batch);
  for (long step = 0; step < cfg.max_iter; ++step) {
    for (std::size_t k = 0; k < batch; ++k) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      pick[k] = order[cursor++];
    }
    const Batch b = stack_batch(data, pick);
    model.zero_grad();
    Tensor<float> pred = model.forward(b.images, Mode::training);
    Tensor<float> loss = total_loss<float>(pred, b.masks, decayed, loss_cfg);
    backward(loss);
    const double lr = poly_lr(step, schedule);
    adam_step<float>(params, adam, lr);
    TraceRow row{step, lr, static_cast<double>(loss.item())};
    if (!std::isfinite(row.loss)) {
      throw Error(ErrorCode::invalid_argument,
                  "train: loss became non-finite at step " + std::to_string(step));
    }
    trace.push_back(row);
    if (on_step) on_step(row);
  }
  model.zero_grad();
  return trace;
}

ConfusionCounts evaluate(DNet<float>& model, const Dataset& data, double threshold) {
  ConfusionCounts total;
  for (const Sample& s : data) {
    const Tensor<float> prob = model.forward(s.image, Mode::inference);
    std::vector<std::uint8_t> pred(prob.size());
    std::vector<std::uint8_t> gt(prob.size());
    std::vector<std::uint8_t> fov;
    for (std::size_t i = 0; i < prob.size(); ++i) {
      pred[i] = prob[i] >= threshold;
      gt[i] = s.mask[i] > 0.5f;
    }
    if (!s.fov.empty()) {
      fov.resize(prob.size());
      for (std::size_t i = 0; i < prob.size(); ++i) fov[i] = s.fov[i] > 0.5f;
    }
    total += confusion(pred, gt, fov);
  }
  return total;
}

void write_loss_csv(std::ostream& out, const std::vector<TraceRow>& trace) {
  out << "step,lr,loss\n";
  const auto flags = out.flags();
  const auto prec = out.precision();
  out.precision(9);
  for (const TraceRow& r : trace) out << r.step << ',' << r.lr << ',' << r.loss << '\n';
  out.flags(flags);
  out.precision(prec);
}

}  // namespace dnet
