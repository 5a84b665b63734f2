#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dnet/conv.hpp"
#include "dnet/receptive_field.hpp"
#include "dnet/tensor.hpp"

namespace dnet {

/// Network hyperparameters. Channel widths follow the backbone table divided
/// by `width_divisor` (1 = full size, 8 = the desk-scale variant).
struct DNetConfig {
  std::array<int, 3> dilations{1, 2, 4};
  std::array<int, 3> msif_rates{3, 6, 12};
  bool msif_enabled = true;
  int in_channels = 3;
  int width_divisor = 1;
  bool batch_norm = false;

  /// Throws ErrorCode::config on an invalid combination.
  void validate() const;
  int width(int full_width) const;
  /// Decoder widths scale the same way but never drop below
  /// widths::decoder_min, so the output stages keep enough channels.
  int decoder_width(int full_width) const;

  bool operator==(const DNetConfig&) const = default;
};

/// Full-size channel widths of the backbone, decoder and fusion module.
namespace widths {
inline constexpr std::array<int, 3> root{32, 32, 64};
// (reduce, spatial, restore) per block.
inline constexpr std::array<std::array<int, 3>, 5> blocks{{
    {64, 64, 128},
    {64, 64, 128},
    {128, 128, 256},
    {256, 256, 512},
    {128, 128, 256},
}};
inline constexpr int msif_branch = 256;
inline constexpr int msif_fuse = 256;
inline constexpr std::array<int, 4> decoder{128, 64, 32, 32};
inline constexpr int decoder_min = 16;
inline constexpr int downsampling = 16;
}  // namespace widths

enum class Mode { inference, training };

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
  bool decay = false;  // participates in the L2 penalty
};

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// One convolution followed by optional batch norm and ReLU. Padding is
/// recomputed from the input so the output is ceil(H / stride).
template <typename T>
struct ConvLayer {
  std::string name;
  ConvKernel<T> kernel;
  bool depthwise = false;
  bool transposed = false;
  bool activation = true;
  std::optional<BatchNormParams<T>> bn;

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  /// Raw convolution output (no norm, no activation).
  Tensor<T> linear(const Tensor<T>& x) const;
  void collect(std::vector<NamedTensor<T>>& out) const;
};

template <typename T>
struct ResidualBottleneck {
  ConvLayer<T> reduce;   // 1x1, C -> C2
  ConvLayer<T> spatial;  // 3x3 dilated, C2 -> C2, carries the block stride
  ConvLayer<T> restore;  // 1x1, C2 -> C', no activation before the sum
  std::optional<ConvLayer<T>> projection;

  int in_channels() const { return reduce.kernel.in_channels(); }
  int out_channels() const { return restore.kernel.out_channels(); }
  int stride() const { return spatial.kernel.stride; }
  void collect(std::vector<NamedTensor<T>>& out) const;
};

/// relu(shortcut(v) + restore(spatial(reduce(v)))).
template <typename T>
Tensor<T> residual_forward(const Tensor<T>& v, ResidualBottleneck<T>& block,
                           Mode mode = Mode::inference);

template <typename T>
struct EncoderFeatures {
  Tensor<T> root_full;  // root block output before max-pool, /2
  Tensor<T> root_pool;  // after max-pool, /4
  std::array<Tensor<T>, 5> blocks;
};

template <typename T>
struct Encoder {
  std::vector<ConvLayer<T>> root;  // three 3x3 convs, the first stride 2
  std::array<std::vector<ResidualBottleneck<T>>, 5> blocks;

  EncoderFeatures<T> forward(const Tensor<T>& image, Mode mode = Mode::inference);
  void collect(std::vector<NamedTensor<T>>& out) const;
};

/// Weight initialisation: uniform in +-sqrt(6 / fan_in), zero biases. The
/// residual restore convs are further scaled by 1/sqrt(number of blocks).
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  template <typename T>
  Tensor<T> uniform(Shape shape, int fan_in);

 private:
  std::mt19937_64 rng_;
};

template <typename T>
Encoder<T> build_encoder(const DNetConfig& cfg, Initializer& init);

/// Channel concatenation of Block3, Block4 and Block5 outputs, in that order.
template <typename T>
Tensor<T> encoder_concat(const Tensor<T>& b3, const Tensor<T>& b4, const Tensor<T>& b5);

template <typename T>
struct Msif {
  ConvLayer<T> pointwise;                // 1x1 branch
  std::array<ConvLayer<T>, 3> depthwise;  // 3x3 at each rate
  std::array<ConvLayer<T>, 3> mixing;     // 1x1 after each depthwise
  ConvLayer<T> pooled;                   // 1x1 on the global average
  ConvLayer<T> fuse;                     // 1x1 over the concatenation

  void collect(std::vector<NamedTensor<T>>& out) const;
};

template <typename T>
Msif<T> build_msif(const DNetConfig& cfg, int in_channels, Initializer& init);

/// Intermediate results of the fusion module, exposed for inspection.
template <typename T>
struct MsifTrace {
  std::array<Tensor<T>, 4> branches;
  Tensor<T> pooled;    // N x 1 x 1 x C global average of the input
  Tensor<T> gap;       // pooled branch upsampled to the input extent
  Tensor<T> concat;    // M
  Tensor<T> fused;     // u
};

template <typename T>
Tensor<T> msif_forward(const Tensor<T>& g, Msif<T>& msif, Mode mode = Mode::inference,
                       MsifTrace<T>* trace = nullptr);

template <typename T>
struct Decoder {
  std::array<ConvLayer<T>, 4> up;    // stride-2 transposed convs
  std::array<ConvLayer<T>, 3> fuse;  // 3x3 after each skip concatenation
  std::array<ConvLayer<T>, 2> refine;
  ConvLayer<T> head;  // 1x1 to one logit channel

  void collect(std::vector<NamedTensor<T>>& out) const;
};

template <typename T>
Decoder<T> build_decoder(const DNetConfig& cfg, int in_channels, Initializer& init);

/// Skips are the /8, /4 and /2 encoder features, in that order.
template <typename T>
Tensor<T> decoder_forward(const Tensor<T>& u, std::span<const Tensor<T>> skips,
                          Decoder<T>& decoder, Mode mode = Mode::inference);

/// The assembled network with a flat, ordered parameter registry.
template <typename T>
class DNet {
 public:
  DNet(const DNetConfig& cfg, std::uint64_t seed);

  const DNetConfig& config() const { return cfg_; }

  /// Per-pixel logits, N x H x W x 1.
  Tensor<T> logits(const Tensor<T>& image, Mode mode = Mode::inference);
  /// sigmoid(logits).
  Tensor<T> forward(const Tensor<T>& image, Mode mode = Mode::inference);

  Encoder<T>& encoder() { return encoder_; }
  Msif<T>& msif() { return msif_; }
  Decoder<T>& decoder() { return decoder_; }

  std::vector<NamedTensor<T>>& parameters() { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  std::vector<Tensor<T>> trainable() const;
  std::vector<Tensor<T>> decayed() const;
  std::size_t parameter_count() const;
  void zero_grad();

  /// Receptive-field description of the deepest encoder path.
  rf::ArchSpec encoder_arch() const;

 private:
  void check_input(const Tensor<T>& image) const;

  DNetConfig cfg_;
  Encoder<T> encoder_;
  Msif<T> msif_;
  Decoder<T> decoder_;
  std::vector<NamedTensor<T>> params_;
};

/// Convenience: sigmoid(logits(image)).
template <typename T>
Tensor<T> dnet_forward(const Tensor<T>& image, DNet<T>& model) {
  return model.forward(image);
}

/// Encoder path description for any config without building weights.
rf::ArchSpec encoder_arch(const DNetConfig& cfg);

}  // namespace dnet
