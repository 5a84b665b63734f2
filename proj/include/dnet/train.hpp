#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "dnet/loss.hpp"
#include "dnet/metrics.hpp"
#include "dnet/model.hpp"
#include "dnet/optim.hpp"
#include "dnet/synth.hpp"

namespace dnet {

struct TrainConfig {
  double lr = 1e-4;
  double power = 0.9;
  long max_iter = 1000;
  int batch = 4;
  std::uint64_t seed = 0;
  double lambda = 1e-4;
  double beta = 1.0;
  double cross_entropy_weight = 1.0;

  void validate() const;
  LossConfig loss() const;
  PolySchedule schedule() const { return {lr, power, max_iter}; }
};

struct TraceRow {
  long step;
  double lr;
  double loss;
};

using StepCallback = std::function<void(const TraceRow&)>;

/// max_iter steps of forward, total loss, backward and Adam under the poly
/// schedule. Mini-batches walk a seeded permutation of the dataset, reshuffled
/// each epoch. The returned trace holds the pre-update loss of every step.
std::vector<TraceRow> train(const Dataset& data, DNet<float>& model, const TrainConfig& cfg,
                            const StepCallback& on_step = {});

/// Binarises model output at `threshold` and counts against the masks (and
/// field-of-view masks where present).
ConfusionCounts evaluate(DNet<float>& model, const Dataset& data, double threshold = 0.5);

/// `step,lr,loss` with header.
void write_loss_csv(std::ostream& out, const std::vector<TraceRow>& trace);

}  // namespace dnet
