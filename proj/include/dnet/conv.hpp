#pragma once

#include <algorithm>

#include "dnet/tensor.hpp"

namespace dnet {

/// Explicit per-side zero padding.
struct Padding {
  int top = 0;
  int bottom = 0;
  int left = 0;
  int right = 0;

  /// Keeps the spatial size at stride 1: total k_eff - 1, split floor/ceil.
  static Padding same(int k_eff_h, int k_eff_w) {
    return {(k_eff_h - 1) / 2, k_eff_h - 1 - (k_eff_h - 1) / 2,
            (k_eff_w - 1) / 2, k_eff_w - 1 - (k_eff_w - 1) / 2};
  }
  static Padding same(int k_eff) { return same(k_eff, k_eff); }

  /// Padding giving output ceil(in / stride) per axis; the extra row or
  /// column, if any, goes to the bottom/right. Equals same() at stride 1.
  static Padding for_stride(int in_h, int in_w, int k_eff, int stride) {
    auto split = [&](int in, int& lo, int& hi) {
      const int out = (in + stride - 1) / stride;
      const int total = std::max((out - 1) * stride + k_eff - in, 0);
      lo = total / 2;
      hi = total - lo;
    };
    Padding p;
    split(in_h, p.top, p.bottom);
    split(in_w, p.left, p.right);
    return p;
  }

  bool operator==(const Padding&) const = default;
};

/// k + (k - 1)(d - 1): the footprint of a k-tap kernel with d - 1 zeros
/// between consecutive taps.
constexpr int dilated_kernel_extent(int k, int d) { return k + (k - 1) * (d - 1); }

/// Convolution parameters. `weights` has shape (kh, kw, in, out); for a
/// depthwise kernel it is (kh, kw, channels, 1). `bias` has `out` entries
/// (or `channels` for depthwise) and may be empty.
template <typename T>
struct ConvKernel {
  Tensor<T> weights;
  Tensor<T> bias;
  int stride = 1;
  int dilation = 1;
  Padding padding;

  int kh() const { return weights.shape().n; }
  int kw() const { return weights.shape().h; }
  int in_channels() const { return weights.shape().w; }
  int out_channels() const { return weights.shape().c; }
  bool has_bias() const { return !bias.empty(); }
};

/// Output length of a strided, dilated, padded window sweep; <= 0 if empty.
int conv_output_size(int in, int k, int stride, int dilation, int pad_total);

/// Dilated cross-correlation:
///   out[n,i,j,c] = bias[c] + sum_{a,b,m} x[n, i*s + a*d - top, j*s + b*d - left, m] * w[a,b,m,c]
/// Out-of-range input positions contribute nothing. Products are accumulated
/// per output element in (a, b, m) order.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& kernel);

/// Per-channel spatial convolution (channel multiplier 1).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const ConvKernel<T>& kernel);

/// Depthwise spatial convolution followed by a 1x1 pointwise mixing conv.
template <typename T>
Tensor<T> depthwise_separable_conv(const Tensor<T>& x, const ConvKernel<T>& depthwise,
                                   const ConvKernel<T>& pointwise);

/// Parameter counts (weights only) for a k x k depthwise-separable layer and
/// the equivalent standard convolution.
std::size_t separable_param_count(int k, int in_channels, int out_channels);
std::size_t standard_param_count(int k, int in_channels, int out_channels);

/// Max over k x k windows. Padded positions never win the max. Ties send the
/// gradient to the first maximum in row-major window order.
template <typename T>
Tensor<T> max_pool(const Tensor<T>& x, int k, int stride, Padding padding = {});

/// Transposed convolution: the adjoint of conv2d with the same kernel
/// geometry, so x is scattered as
///   out[n, i*s + a*d - top, j*s + b*d - left, c] += x[n,i,j,m] * w[a,b,m,c].
/// Output size defaults to (stride * H, stride * W); positions scattered
/// outside are dropped.
template <typename T>
Tensor<T> transposed_conv(const Tensor<T>& x, const ConvKernel<T>& kernel,
                          int out_h = -1, int out_w = -1);

/// Crop offsets giving exact 2x upsampling for a k-tap stride-2 transposed
/// conv whose taps are centred on the doubled grid.
Padding doubling_padding(int k);

/// Mean over (H, W) per channel; result is N x 1 x 1 x C.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Bilinear resize with corner alignment: output (0,0) and (out_h-1,out_w-1)
/// sample the input corners exactly.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int out_h, int out_w);

}  // namespace dnet
