#include "dnet/receptive_field.hpp"

#include <sstream>

#include "dnet/conv.hpp"
#include "dnet/error.hpp"

namespace dnet::rf {

namespace {

void validate(const LayerSpec& l) {
  if (l.k < 1 || l.stride < 1 || l.dilation < 1) {
    throw Error(ErrorCode::invalid_argument,
                "layer '" + l.name + "': k, stride and dilation must be >= 1");
  }
}

long ceil_div(long a, long b) { return (a + b - 1) / b; }

long floor_div(long a, long b) {
  const long q = a / b;
  return (a % b != 0 && (a < 0) != (b < 0)) ? q - 1 : q;
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::pool: return "pool";
    case LayerKind::transposed_conv: return "tconv";
  }
  return "?";
}

long rf_single(int k, int r) {
  if (k < 1 || r < 1) throw Error(ErrorCode::invalid_argument, "rf_single: k, r must be >= 1");
  return static_cast<long>(k - 1) * (r - 1) + k;
}

RFReport rf_stack(const std::vector<LayerSpec>& layers) {
  if (layers.empty()) throw Error(ErrorCode::invalid_argument, "rf_stack: empty layer list");
  RFReport report;
  long rf = 1;
  long jump = 1;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    validate(l);
    const int k_eff = dilated_kernel_extent(l.k, l.dilation);
    if (l.kind == LayerKind::transposed_conv) {
      // Each output unit sees ceil(k_eff / s) input units.
      rf += (ceil_div(k_eff, l.stride) - 1) * jump;
      if (jump % l.stride != 0) {
        throw Error(ErrorCode::invalid_argument,
                    "rf_stack: transposed stride does not divide the accumulated jump");
      }
      jump /= l.stride;
    } else {
      rf += static_cast<long>(k_eff - 1) * jump;
      jump *= l.stride;
    }
    report.layers.push_back(
        {l.name.empty() ? "L" + std::to_string(i + 1) : l.name, k_eff, jump, rf});
  }
  report.coverage = trace_coverage(layers);
  return report;
}

Coverage trace_coverage(const std::vector<LayerSpec>& layers) {
  // Reachable offsets as a bitmap over [lo, hi], walked from the top layer
  // down to the input.
  long lo = 0;
  long hi = 0;
  std::vector<char> hit{1};
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    const LayerSpec& l = *it;
    validate(l);
    const long k_eff = dilated_kernel_extent(l.k, l.dilation);
    const long centre = (k_eff - 1) / 2;
    long nlo;
    long nhi;
    if (l.kind == LayerKind::transposed_conv) {
      // Output p is fed by inputs i with i*s + a*d - centre == p.
      nlo = floor_div(lo - (k_eff - 1 - centre), l.stride) - 1;
      nhi = floor_div(hi + centre, l.stride) + 1;
    } else {
      nlo = lo * l.stride - centre;
      nhi = hi * l.stride + (k_eff - 1 - centre);
    }
    std::vector<char> next(static_cast<std::size_t>(nhi - nlo + 1), 0);
    for (long p = lo; p <= hi; ++p) {
      if (!hit[p - lo]) continue;
      for (int a = 0; a < l.k; ++a) {
        const long tap = static_cast<long>(a) * l.dilation - centre;
        if (l.kind == LayerKind::transposed_conv) {
          const long num = p - tap;
          if (num % l.stride != 0) continue;
          const long i = num / l.stride;
          if (i >= nlo && i <= nhi) next[i - nlo] = 1;
        } else {
          next[p * l.stride + tap - nlo] = 1;
        }
      }
    }
    // Trim to the occupied range.
    long first = 0;
    while (first < static_cast<long>(next.size()) && !next[first]) ++first;
    long last = static_cast<long>(next.size()) - 1;
    while (last > first && !next[last]) --last;
    hit.assign(next.begin() + first, next.begin() + last + 1);
    lo = nlo + first;
    hi = nlo + last;
  }
  Coverage c;
  c.lo = lo;
  c.hi = hi;
  for (long p = lo; p <= hi; ++p)
    if (!hit[p - lo]) c.holes.push_back(p);
  c.dense = c.holes.empty();
  return c;
}

Coverage coverage_map(const std::vector<int>& dilations, int k) {
  std::vector<LayerSpec> layers;
  for (int d : dilations) {
    if (d < 1) throw Error(ErrorCode::invalid_argument, "coverage_map: dilation must be >= 1");
    layers.push_back({LayerKind::conv, k, 1, d, {}});
  }
  return trace_coverage(layers);
}

std::vector<LayerSpec> serial_path(const ArchSpec& arch) {
  std::vector<LayerSpec> out;
  for (const ArchStage& stage : arch.stages) {
    if (stage.branches.empty()) continue;
    std::size_t pick = 0;
    if (stage.branches.size() > 1) {
      if (!stage.path) {
        throw Error(ErrorCode::invalid_argument,
                    "stage '" + stage.name + "' branches without a designated path");
      }
      pick = *stage.path;
    }
    if (pick >= stage.branches.size()) {
      throw Error(ErrorCode::invalid_argument,
                  "stage '" + stage.name + "': designated path out of range");
    }
    for (LayerSpec l : stage.branches[pick]) {
      if (!stage.name.empty()) l.name = l.name.empty() ? stage.name : stage.name + "." + l.name;
      out.push_back(std::move(l));
    }
  }
  return out;
}

RFReport network_rf(const ArchSpec& arch) { return rf_stack(serial_path(arch)); }

std::vector<LayerSpec> parse_layer_stack(const std::string& text) {
  std::vector<LayerSpec> layers;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string kind;
    if (!(fields >> kind)) continue;
    LayerSpec l;
    if (kind == "conv") {
      l.kind = LayerKind::conv;
    } else if (kind == "pool") {
      l.kind = LayerKind::pool;
    } else if (kind == "tconv" || kind == "transposed-conv" || kind == "transposed_conv") {
      l.kind = LayerKind::transposed_conv;
    } else {
      throw Error(ErrorCode::parse,
                  "line " + std::to_string(lineno) + ": unknown layer kind '" + kind + "'");
    }
    std::string extra;
    if (!(fields >> l.k >> l.stride >> l.dilation) || (fields >> extra)) {
      throw Error(ErrorCode::parse,
                  "line " + std::to_string(lineno) + ": expected `kind k s r`");
    }
    if (l.k < 1 || l.stride < 1 || l.dilation < 1) {
      throw Error(ErrorCode::parse,
                  "line " + std::to_string(lineno) + ": k, s, r must be >= 1");
    }
    l.name = "L" + std::to_string(layers.size() + 1);
    layers.push_back(l);
  }
  if (layers.empty()) throw Error(ErrorCode::parse, "layer stack is empty");
  return layers;
}

std::string to_csv(const RFReport& report) {
  std::ostringstream out;
  out << "layer,k_eff,jump,rf\n";
  for (const LayerRF& l : report.layers) {
    out << l.name << ',' << l.k_eff << ',' << l.jump << ',' << l.rf << '\n';
  }
  return out.str();
}

std::string coverage_line(const Coverage& c) {
  if (c.dense) return "coverage=dense";
  std::string s = "coverage=holes:";
  for (std::size_t i = 0; i < c.holes.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(c.holes[i]);
  }
  return s;
}

}  // namespace dnet::rf
