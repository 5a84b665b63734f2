#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dnet/tensor.hpp"

namespace dnet {

/// One image/mask pair; tensors have batch size 1.
struct Sample {
  Tensor<float> image;  // 1 x H x W x 3, values in [0, 1]
  Tensor<float> mask;   // 1 x H x W x 1, values in {0, 1}
  Tensor<float> fov;    // empty, or 1 x H x W x 1 in {0, 1}
};

using Dataset = std::vector<Sample>;

struct SynthOptions {
  int min_trees = 2;
  int max_trees = 3;
  int max_depth = 2;  // branching generations below a trunk
  double noise_sigma = 0.04;
  double min_contrast = 0.35;
  double max_contrast = 0.6;
  double max_fraction = 0.25;  // trees are dropped until the mask covers at most this
};

/// Dark noisy backgrounds crossed by bright branching curves (quadratic
/// Bezier polylines, 1-4 px wide). The mask is exactly the rasterised curve
/// support. Output is a pure function of the arguments.
Dataset synth_vessels(std::uint64_t seed, int n, int h, int w, const SynthOptions& opts = {});

struct Batch {
  Tensor<float> images;
  Tensor<float> masks;
};

/// Concatenates the selected samples along the batch axis.
Batch stack_batch(const Dataset& data, std::span<const std::size_t> indices);

}  // namespace dnet
