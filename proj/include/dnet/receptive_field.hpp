#pragma once

#include <optional>
#include <string>
#include <vector>

namespace dnet::rf {

enum class LayerKind { conv, pool, transposed_conv };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int k = 1;
  int stride = 1;
  int dilation = 1;
  std::string name;
};

struct LayerRF {
  std::string name;
  int k_eff = 1;
  long jump = 1;  // accumulated stride entering the next layer
  long rf = 1;
};

struct Coverage {
  bool dense = true;
  long lo = 0;
  long hi = 0;
  std::vector<long> holes;  // offsets in [lo, hi] never sampled
};

struct RFReport {
  std::vector<LayerRF> layers;
  Coverage coverage;

  long final_rf() const { return layers.empty() ? 1 : layers.back().rf; }
};

/// (k - 1)(r - 1) + k for a single dilated layer.
long rf_single(int k, int r);

/// Per-layer receptive field with RF += (k_eff - 1) * jump, jump *= s.
/// Transposed layers divide the jump by their stride (must divide evenly).
RFReport rf_stack(const std::vector<LayerSpec>& layers);

/// Input offsets reachable from one top unit through the stack (1-D).
Coverage trace_coverage(const std::vector<LayerSpec>& layers);

/// 1-D coverage of a cascade of stride-1 k-tap convolutions with the given
/// dilations.
Coverage coverage_map(const std::vector<int>& dilations, int k = 3);

/// A network description. A stage with several branches (e.g. a residual
/// block's main path and shortcut) needs `path` to pick the one analysed.
struct ArchStage {
  std::string name;
  std::vector<std::vector<LayerSpec>> branches;
  std::optional<std::size_t> path;
};

struct ArchSpec {
  std::vector<ArchStage> stages;
};

/// Flattens `arch` along its designated path.
std::vector<LayerSpec> serial_path(const ArchSpec& arch);

RFReport network_rf(const ArchSpec& arch);

/// `kind k s r` per line; blank lines and `#` comments ignored.
std::vector<LayerSpec> parse_layer_stack(const std::string& text);

/// `layer,k_eff,jump,rf` rows with header.
std::string to_csv(const RFReport& report);
/// `coverage=dense` or `coverage=holes:<p1>,<p2>,...`
std::string coverage_line(const Coverage& c);

std::string to_string(LayerKind kind);

}  // namespace dnet::rf
