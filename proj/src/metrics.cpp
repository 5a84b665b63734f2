#include "dnet/metrics.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "dnet/error.hpp"

namespace dnet {

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                          std::span<const std::uint8_t> fov) {
  if (pred.size() != gt.size() || (!fov.empty() && fov.size() != gt.size())) {
    throw Error(ErrorCode::shape_mismatch, "confusion: mask sizes differ");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!fov.empty() && !fov[i]) continue;
    const bool p = pred[i] != 0;
    const bool g = gt[i] != 0;
    if (p && g) ++c.tp;
    else if (!p && !g) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den, bool& degenerate) {
  degenerate = den == 0;
  return degenerate ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

Metrics metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw Error(ErrorCode::invalid_argument, "metrics: no pixels counted");
  Metrics m;
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  m.precision = ratio(c.tp, c.tp + c.fp, m.precision_degenerate);
  m.recall = ratio(c.tp, c.tp + c.fn, m.recall_degenerate);
  m.specificity = ratio(c.tn, c.tn + c.fp, m.specificity_degenerate);
  m.f1_degenerate = m.precision + m.recall == 0.0;
  m.f1 = m.f1_degenerate ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

Curves roc_pr_curves(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw Error(ErrorCode::shape_mismatch, "roc_pr_curves: scores and labels differ in length");
  }
  std::uint64_t pos = 0;
  for (auto l : labels) pos += l != 0;
  const std::uint64_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) {
    throw Error(ErrorCode::invalid_argument, "roc_pr_curves: need both classes");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  Curves out;
  out.roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  out.pr.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  // Twice the ROC area in units of (1/pos)(1/neg): exact integer arithmetic.
  std::uint64_t roc_twice = 0;
  double pr_area = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double threshold = scores[order[i]];
    const std::uint64_t tp_prev = tp;
    const std::uint64_t fp_prev = fp;
    while (i < order.size() && scores[order[i]] == threshold) {
      if (labels[order[i]]) ++tp;
      else ++fp;
      ++i;
    }
    roc_twice += (fp - fp_prev) * (tp + tp_prev);
    const double tpr = static_cast<double>(tp) / pos;
    const double fpr = static_cast<double>(fp) / neg;
    out.roc.push_back({threshold, fpr, tpr});
    const double precision = static_cast<double>(tp) / (tp + fp);
    const CurvePoint& last = out.pr.back();
    pr_area += (tpr - last.x) * (precision + last.y) / 2.0;
    out.pr.push_back({threshold, tpr, precision});
  }
  out.auc_roc = static_cast<double>(roc_twice) / 2.0 / (static_cast<double>(pos) * neg);
  out.auc_pr = pr_area;
  return out;
}

}  // namespace dnet
