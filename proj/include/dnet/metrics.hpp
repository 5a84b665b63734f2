#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace dnet {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Counts over pixels where `fov` is set (all pixels when fov is empty).
/// Inputs are binary masks; any non-zero value counts as positive.
ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                          std::span<const std::uint8_t> fov = {});

struct Metrics {
  double accuracy = 0;
  double precision = 0;
  double recall = 0;  // sensitivity
  double specificity = 0;
  double f1 = 0;
  // A ratio whose denominator was zero; the value is reported as 0.
  bool precision_degenerate = false;
  bool recall_degenerate = false;
  bool specificity_degenerate = false;
  bool f1_degenerate = false;
};

Metrics metrics(const ConfusionCounts& c);

struct CurvePoint {
  double threshold;
  double x;  // FPR for ROC, recall for PR
  double y;  // TPR for ROC, precision for PR
};

struct Curves {
  std::vector<CurvePoint> roc;
  std::vector<CurvePoint> pr;
  double auc_roc = 0;
  double auc_pr = 0;
};

/// Threshold sweep over the distinct scores in descending order. ROC runs
/// from (0,0) to (1,1); PR starts at (recall 0, precision 1). Both areas use
/// the trapezoidal rule, so tied scores earn half credit in the ROC area.
Curves roc_pr_curves(std::span<const double> scores, std::span<const std::uint8_t> labels);

}  // namespace dnet
