#include "dnet/conv.hpp"

#include <cmath>
#include <limits>

namespace dnet {

namespace {

template <typename T>
void check_kernel(const Tensor<T>& x, const ConvKernel<T>& k, bool depthwise,
                  const char* op) {
  const Shape& ws = k.weights.shape();
  if (ws.n < 1 || ws.h < 1) {
    throw Error(ErrorCode::invalid_argument, std::string(op) + ": empty kernel");
  }
  if (k.stride < 1 || k.dilation < 1) {
    throw Error(ErrorCode::invalid_argument,
                std::string(op) + ": stride and dilation must be >= 1");
  }
  const Padding& p = k.padding;
  if (p.top < 0 || p.bottom < 0 || p.left < 0 || p.right < 0) {
    throw Error(ErrorCode::invalid_argument, std::string(op) + ": negative padding");
  }
  if (ws.w != x.shape().c) {
    throw Error(ErrorCode::shape_mismatch,
                std::string(op) + ": input has " + std::to_string(x.shape().c) +
                    " channels, kernel expects " + std::to_string(ws.w));
  }
  if (depthwise && ws.c != 1) {
    throw Error(ErrorCode::invalid_argument,
                std::string(op) + ": depthwise kernel must have channel multiplier 1");
  }
  const int bias_len = depthwise ? ws.w : ws.c;
  if (!k.bias.empty() && k.bias.size() != static_cast<std::size_t>(bias_len)) {
    throw Error(ErrorCode::shape_mismatch, std::string(op) + ": bias length " +
                                               std::to_string(k.bias.size()) +
                                               " != " + std::to_string(bias_len));
  }
}

struct Geometry {
  int N, H, W, Cin, OH, OW, KH, KW, s, d, top, left;
};

template <typename T>
Geometry conv_geometry(const Tensor<T>& x, const ConvKernel<T>& k, const char* op) {
  const Shape& xs = x.shape();
  const Padding& p = k.padding;
  Geometry g{xs.n, xs.h, xs.w, xs.c, 0, 0, k.kh(), k.kw(), k.stride, k.dilation,
             p.top, p.left};
  g.OH = conv_output_size(xs.h, g.KH, g.s, g.d, p.top + p.bottom);
  g.OW = conv_output_size(xs.w, g.KW, g.s, g.d, p.left + p.right);
  if (g.OH <= 0 || g.OW <= 0) {
    throw Error(ErrorCode::invalid_argument,
                std::string(op) + ": non-positive output size for input " + xs.str());
  }
  return g;
}

template <typename T>
std::vector<Tensor<T>> kernel_inputs(const Tensor<T>& x, const ConvKernel<T>& k) {
  std::vector<Tensor<T>> in{x, k.weights};
  if (k.has_bias()) in.push_back(k.bias);
  return in;
}

// Bias gradient: sum of upstream gradient over all pixels, per channel.
template <typename T>
void bias_backward(detail::Node<T>& self, std::size_t bias_index, int channels) {
  if (self.inputs.size() <= bias_index) return;
  auto& b = *self.inputs[bias_index];
  if (!b.requires_grad) return;
  auto& gb = b.grad_buffer();
  const std::size_t pixels = self.grad.size() / channels;
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < channels; ++c) gb[c] += self.grad[p * channels + c];
}

}  // namespace

int conv_output_size(int in, int k, int stride, int dilation, int pad_total) {
  const int span = in + pad_total - dilated_kernel_extent(k, dilation);
  if (span < 0) return 0;
  return span / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& kernel) {
  check_kernel(x, kernel, false, "conv2d");
  const Geometry g = conv_geometry(x, kernel, "conv2d");
  const int Cout = kernel.out_channels();
  Shape out_shape{g.N, g.OH, g.OW, Cout};
  std::vector<T> out(out_shape.size());
  const T* xd = x.data().data();
  const T* wd = kernel.weights.data().data();
  const T* bd = kernel.has_bias() ? kernel.bias.data().data() : nullptr;

  for (int n = 0; n < g.N; ++n)
    for (int i = 0; i < g.OH; ++i)
      for (int j = 0; j < g.OW; ++j) {
        T* o = out.data() + ((static_cast<std::size_t>(n) * g.OH + i) * g.OW + j) * Cout;
        for (int c = 0; c < Cout; ++c) o[c] = bd ? bd[c] : T(0);
        for (int a = 0; a < g.KH; ++a) {
          const int ih = i * g.s + a * g.d - g.top;
          if (ih < 0 || ih >= g.H) continue;
          for (int b = 0; b < g.KW; ++b) {
            const int iw = j * g.s + b * g.d - g.left;
            if (iw < 0 || iw >= g.W) continue;
            const T* xp = xd + ((static_cast<std::size_t>(n) * g.H + ih) * g.W + iw) * g.Cin;
            const T* wp = wd + (static_cast<std::size_t>(a) * g.KW + b) * g.Cin * Cout;
            for (int m = 0; m < g.Cin; ++m) {
              const T xv = xp[m];
              const T* wr = wp + static_cast<std::size_t>(m) * Cout;
              for (int c = 0; c < Cout; ++c) o[c] += xv * wr[c];
            }
          }
        }
      }

  return make_result<T>(
      out_shape, std::move(out), kernel_inputs(x, kernel),
      [g, Cout](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        const T* gd = self.grad.data();
        const T* xd = xn.data.data();
        const T* wd = wn.data.data();
        T* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        T* gw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
        for (int n = 0; n < g.N; ++n)
          for (int i = 0; i < g.OH; ++i)
            for (int j = 0; j < g.OW; ++j) {
              const T* go =
                  gd + ((static_cast<std::size_t>(n) * g.OH + i) * g.OW + j) * Cout;
              for (int a = 0; a < g.KH; ++a) {
                const int ih = i * g.s + a * g.d - g.top;
                if (ih < 0 || ih >= g.H) continue;
                for (int b = 0; b < g.KW; ++b) {
                  const int iw = j * g.s + b * g.d - g.left;
                  if (iw < 0 || iw >= g.W) continue;
                  const std::size_t xoff =
                      ((static_cast<std::size_t>(n) * g.H + ih) * g.W + iw) * g.Cin;
                  const std::size_t woff =
                      (static_cast<std::size_t>(a) * g.KW + b) * g.Cin * Cout;
                  for (int m = 0; m < g.Cin; ++m) {
                    const T* wr = wd + woff + static_cast<std::size_t>(m) * Cout;
                    if (gx) {
                      T acc = T(0);
                      for (int c = 0; c < Cout; ++c) acc += go[c] * wr[c];
                      gx[xoff + m] += acc;
                    }
                    if (gw) {
                      const T xv = xd[xoff + m];
                      T* gwr = gw + woff + static_cast<std::size_t>(m) * Cout;
                      for (int c = 0; c < Cout; ++c) gwr[c] += xv * go[c];
                    }
                  }
                }
              }
            }
        bias_backward(self, 2, Cout);
      });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const ConvKernel<T>& kernel) {
  check_kernel(x, kernel, true, "depthwise_conv2d");
  const Geometry g = conv_geometry(x, kernel, "depthwise_conv2d");
  const int C = g.Cin;
  Shape out_shape{g.N, g.OH, g.OW, C};
  std::vector<T> out(out_shape.size());
  const T* xd = x.data().data();
  const T* wd = kernel.weights.data().data();
  const T* bd = kernel.has_bias() ? kernel.bias.data().data() : nullptr;

  for (int n = 0; n < g.N; ++n)
    for (int i = 0; i < g.OH; ++i)
      for (int j = 0; j < g.OW; ++j) {
        T* o = out.data() + ((static_cast<std::size_t>(n) * g.OH + i) * g.OW + j) * C;
        for (int c = 0; c < C; ++c) o[c] = bd ? bd[c] : T(0);
        for (int a = 0; a < g.KH; ++a) {
          const int ih = i * g.s + a * g.d - g.top;
          if (ih < 0 || ih >= g.H) continue;
          for (int b = 0; b < g.KW; ++b) {
            const int iw = j * g.s + b * g.d - g.left;
            if (iw < 0 || iw >= g.W) continue;
            const T* xp = xd + ((static_cast<std::size_t>(n) * g.H + ih) * g.W + iw) * C;
            const T* wp = wd + (static_cast<std::size_t>(a) * g.KW + b) * C;
            for (int c = 0; c < C; ++c) o[c] += xp[c] * wp[c];
          }
        }
      }

  return make_result<T>(
      out_shape, std::move(out), kernel_inputs(x, kernel), [g, C](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        const T* gd = self.grad.data();
        const T* xd = xn.data.data();
        const T* wd = wn.data.data();
        T* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        T* gw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
        for (int n = 0; n < g.N; ++n)
          for (int i = 0; i < g.OH; ++i)
            for (int j = 0; j < g.OW; ++j) {
              const T* go = gd + ((static_cast<std::size_t>(n) * g.OH + i) * g.OW + j) * C;
              for (int a = 0; a < g.KH; ++a) {
                const int ih = i * g.s + a * g.d - g.top;
                if (ih < 0 || ih >= g.H) continue;
                for (int b = 0; b < g.KW; ++b) {
                  const int iw = j * g.s + b * g.d - g.left;
                  if (iw < 0 || iw >= g.W) continue;
                  const std::size_t xoff =
                      ((static_cast<std::size_t>(n) * g.H + ih) * g.W + iw) * C;
                  const std::size_t woff = (static_cast<std::size_t>(a) * g.KW + b) * C;
                  if (gx)
                    for (int c = 0; c < C; ++c) gx[xoff + c] += go[c] * wd[woff + c];
                  if (gw)
                    for (int c = 0; c < C; ++c) gw[woff + c] += go[c] * xd[xoff + c];
                }
              }
            }
        bias_backward(self, 2, C);
      });
}

template <typename T>
Tensor<T> depthwise_separable_conv(const Tensor<T>& x, const ConvKernel<T>& depthwise,
                                   const ConvKernel<T>& pointwise) {
  if (pointwise.kh() != 1 || pointwise.kw() != 1 || pointwise.stride != 1) {
    throw Error(ErrorCode::invalid_argument,
                "depthwise_separable_conv: pointwise kernel must be 1x1 stride 1");
  }
  return conv2d(depthwise_conv2d(x, depthwise), pointwise);
}

std::size_t separable_param_count(int k, int in_channels, int out_channels) {
  return static_cast<std::size_t>(k) * k * in_channels +
         static_cast<std::size_t>(in_channels) * out_channels;
}

std::size_t standard_param_count(int k, int in_channels, int out_channels) {
  return static_cast<std::size_t>(k) * k * in_channels * out_channels;
}

template <typename T>
Tensor<T> max_pool(const Tensor<T>& x, int k, int stride, Padding padding) {
  if (k < 1 || stride < 1) {
    throw Error(ErrorCode::invalid_argument, "max_pool: window and stride must be >= 1");
  }
  const Shape& xs = x.shape();
  const int OH = conv_output_size(xs.h, k, stride, 1, padding.top + padding.bottom);
  const int OW = conv_output_size(xs.w, k, stride, 1, padding.left + padding.right);
  if (OH <= 0 || OW <= 0) {
    throw Error(ErrorCode::invalid_argument, "max_pool: empty output for " + xs.str());
  }
  const int C = xs.c;
  Shape out_shape{xs.n, OH, OW, C};
  std::vector<T> out(out_shape.size());
  std::vector<std::size_t> argmax(out_shape.size());
  const T* xd = x.data().data();

  for (int n = 0; n < xs.n; ++n)
    for (int i = 0; i < OH; ++i)
      for (int j = 0; j < OW; ++j)
        for (int c = 0; c < C; ++c) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_at = 0;
          bool any = false;
          for (int a = 0; a < k; ++a) {
            const int ih = i * stride + a - padding.top;
            if (ih < 0 || ih >= xs.h) continue;
            for (int b = 0; b < k; ++b) {
              const int iw = j * stride + b - padding.left;
              if (iw < 0 || iw >= xs.w) continue;
              const std::size_t at =
                  ((static_cast<std::size_t>(n) * xs.h + ih) * xs.w + iw) * C + c;
              if (!any || xd[at] > best) {
                best = xd[at];
                best_at = at;
                any = true;
              }
            }
          }
          if (!any) {
            throw Error(ErrorCode::invalid_argument,
                        "max_pool: window lies entirely in padding");
          }
          const std::size_t o = ((static_cast<std::size_t>(n) * OH + i) * OW + j) * C + c;
          out[o] = best;
          argmax[o] = best_at;
        }

  return make_result<T>(out_shape, std::move(out), {x},
                        [argmax = std::move(argmax)](detail::Node<T>& self) {
                          auto& xn = *self.inputs[0];
                          if (!xn.requires_grad) return;
                          auto& gx = xn.grad_buffer();
                          for (std::size_t o = 0; o < argmax.size(); ++o)
                            gx[argmax[o]] += self.grad[o];
                        });
}

Padding doubling_padding(int k) {
  const int crop = std::max(k - 2, 0) / 2;
  return {crop, crop, crop, crop};
}

template <typename T>
Tensor<T> transposed_conv(const Tensor<T>& x, const ConvKernel<T>& kernel, int out_h,
                          int out_w) {
  check_kernel(x, kernel, false, "transposed_conv");
  const Shape& xs = x.shape();
  if (out_h < 0) out_h = xs.h * kernel.stride;
  if (out_w < 0) out_w = xs.w * kernel.stride;
  if (out_h == 0 || out_w == 0) {
    throw Error(ErrorCode::invalid_argument, "transposed_conv: non-positive output size");
  }
  const Geometry g{xs.n, out_h, out_w, xs.c, xs.h, xs.w, kernel.kh(), kernel.kw(),
                   kernel.stride, kernel.dilation, kernel.padding.top,
                   kernel.padding.left};
  // Here (H, W) is the output extent and (OH, OW) the input extent, so the
  // index arithmetic mirrors conv2d exactly.
  const int Cin = xs.c;
  const int Cout = kernel.out_channels();
  Shape out_shape{xs.n, out_h, out_w, Cout};
  std::vector<T> out(out_shape.size());
  const T* xd = x.data().data();
  const T* wd = kernel.weights.data().data();
  if (kernel.has_bias()) {
    const T* bd = kernel.bias.data().data();
    for (std::size_t p = 0; p < out.size() / Cout; ++p)
      for (int c = 0; c < Cout; ++c) out[p * Cout + c] = bd[c];
  }

  for (int n = 0; n < g.N; ++n)
    for (int i = 0; i < g.OH; ++i)
      for (int j = 0; j < g.OW; ++j) {
        const T* xp = xd + ((static_cast<std::size_t>(n) * g.OH + i) * g.OW + j) * Cin;
        for (int a = 0; a < g.KH; ++a) {
          const int oh = i * g.s + a * g.d - g.top;
          if (oh < 0 || oh >= g.H) continue;
          for (int b = 0; b < g.KW; ++b) {
            const int ow = j * g.s + b * g.d - g.left;
            if (ow < 0 || ow >= g.W) continue;
            T* o = out.data() + ((static_cast<std::size_t>(n) * g.H + oh) * g.W + ow) * Cout;
            const T* wp = wd + (static_cast<std::size_t>(a) * g.KW + b) * Cin * Cout;
            for (int m = 0; m < Cin; ++m) {
              const T xv = xp[m];
              const T* wr = wp + static_cast<std::size_t>(m) * Cout;
              for (int c = 0; c < Cout; ++c) o[c] += xv * wr[c];
            }
          }
        }
      }

  return make_result<T>(
      out_shape, std::move(out), kernel_inputs(x, kernel),
      [g, Cin, Cout](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        const T* gd = self.grad.data();
        const T* xd = xn.data.data();
        const T* wd = wn.data.data();
        T* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        T* gw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
        for (int n = 0; n < g.N; ++n)
          for (int i = 0; i < g.OH; ++i)
            for (int j = 0; j < g.OW; ++j) {
              const std::size_t xoff =
                  ((static_cast<std::size_t>(n) * g.OH + i) * g.OW + j) * Cin;
              for (int a = 0; a < g.KH; ++a) {
                const int oh = i * g.s + a * g.d - g.top;
                if (oh < 0 || oh >= g.H) continue;
                for (int b = 0; b < g.KW; ++b) {
                  const int ow = j * g.s + b * g.d - g.left;
                  if (ow < 0 || ow >= g.W) continue;
                  const T* go =
                      gd + ((static_cast<std::size_t>(n) * g.H + oh) * g.W + ow) * Cout;
                  const std::size_t woff =
                      (static_cast<std::size_t>(a) * g.KW + b) * Cin * Cout;
                  for (int m = 0; m < Cin; ++m) {
                    const T* wr = wd + woff + static_cast<std::size_t>(m) * Cout;
                    if (gx) {
                      T acc = T(0);
                      for (int c = 0; c < Cout; ++c) acc += go[c] * wr[c];
                      gx[xoff + m] += acc;
                    }
                    if (gw) {
                      const T xv = xd[xoff + m];
                      T* gwr = gw + woff + static_cast<std::size_t>(m) * Cout;
                      for (int c = 0; c < Cout; ++c) gwr[c] += xv * go[c];
                    }
                  }
                }
              }
            }
        bias_backward(self, 2, Cout);
      });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& xs = x.shape();
  if (xs.h < 1 || xs.w < 1) {
    throw Error(ErrorCode::invalid_argument, "global_avg_pool: empty spatial extent");
  }
  const int C = xs.c;
  const std::size_t area = static_cast<std::size_t>(xs.h) * xs.w;
  Shape out_shape{xs.n, 1, 1, C};
  std::vector<T> out(out_shape.size(), T(0));
  const T* xd = x.data().data();
  for (int n = 0; n < xs.n; ++n) {
    T* o = out.data() + static_cast<std::size_t>(n) * C;
    for (std::size_t p = 0; p < area; ++p)
      for (int c = 0; c < C; ++c) o[c] += xd[(n * area + p) * C + c];
    for (int c = 0; c < C; ++c) o[c] /= static_cast<T>(area);
  }
  return make_result<T>(out_shape, std::move(out), {x},
                        [area, C, N = xs.n](detail::Node<T>& self) {
                          auto& xn = *self.inputs[0];
                          if (!xn.requires_grad) return;
                          auto& gx = xn.grad_buffer();
                          for (int n = 0; n < N; ++n)
                            for (std::size_t p = 0; p < area; ++p)
                              for (int c = 0; c < C; ++c)
                                gx[(n * area + p) * C + c] +=
                                    self.grad[static_cast<std::size_t>(n) * C + c] /
                                    static_cast<T>(area);
                        });
}

namespace {

struct Tap {
  int lo;
  int hi;
  double frac;
};

std::vector<Tap> corner_aligned_taps(int in, int out) {
  std::vector<Tap> taps(out);
  for (int i = 0; i < out; ++i) {
    if (in == 1 || out == 1) {
      taps[i] = {0, 0, 0.0};
      continue;
    }
    // Integer numerator keeps grid points on exact source pixels.
    const long num = static_cast<long>(i) * (in - 1);
    const int lo = static_cast<int>(num / (out - 1));
    const double frac = static_cast<double>(num % (out - 1)) / (out - 1);
    taps[i] = {lo, std::min(lo + 1, in - 1), frac};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) {
    throw Error(ErrorCode::invalid_argument, "bilinear_upsample: output size must be >= 1");
  }
  const Shape& xs = x.shape();
  if (xs.h < 1 || xs.w < 1) {
    throw Error(ErrorCode::invalid_argument, "bilinear_upsample: empty input");
  }
  const auto ty = corner_aligned_taps(xs.h, out_h);
  const auto tx = corner_aligned_taps(xs.w, out_w);
  const int C = xs.c;
  Shape out_shape{xs.n, out_h, out_w, C};
  std::vector<T> out(out_shape.size());
  const T* xd = x.data().data();
  auto in_at = [&xs, C](int n, int i, int j) {
    return ((static_cast<std::size_t>(n) * xs.h + i) * xs.w + j) * C;
  };
  for (int n = 0; n < xs.n; ++n)
    for (int i = 0; i < out_h; ++i)
      for (int j = 0; j < out_w; ++j) {
        const T fy = static_cast<T>(ty[i].frac);
        const T fx = static_cast<T>(tx[j].frac);
        const T* p00 = xd + in_at(n, ty[i].lo, tx[j].lo);
        const T* p01 = xd + in_at(n, ty[i].lo, tx[j].hi);
        const T* p10 = xd + in_at(n, ty[i].hi, tx[j].lo);
        const T* p11 = xd + in_at(n, ty[i].hi, tx[j].hi);
        T* o = out.data() + ((static_cast<std::size_t>(n) * out_h + i) * out_w + j) * C;
        for (int c = 0; c < C; ++c) {
          const T top = p00[c] + fx * (p01[c] - p00[c]);
          const T bot = p10[c] + fx * (p11[c] - p10[c]);
          o[c] = top + fy * (bot - top);
        }
      }

  return make_result<T>(
      out_shape, std::move(out), {x},
      [ty, tx, xs, C, out_h, out_w](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        if (!xn.requires_grad) return;
        auto& gx = xn.grad_buffer();
        auto in_at = [&xs, C](int n, int i, int j) {
          return ((static_cast<std::size_t>(n) * xs.h + i) * xs.w + j) * C;
        };
        for (int n = 0; n < xs.n; ++n)
          for (int i = 0; i < out_h; ++i)
            for (int j = 0; j < out_w; ++j) {
              const T fy = static_cast<T>(ty[i].frac);
              const T fx = static_cast<T>(tx[j].frac);
              const T* go =
                  self.grad.data() + ((static_cast<std::size_t>(n) * out_h + i) * out_w + j) * C;
              const std::size_t a00 = in_at(n, ty[i].lo, tx[j].lo);
              const std::size_t a01 = in_at(n, ty[i].lo, tx[j].hi);
              const std::size_t a10 = in_at(n, ty[i].hi, tx[j].lo);
              const std::size_t a11 = in_at(n, ty[i].hi, tx[j].hi);
              for (int c = 0; c < C; ++c) {
                const T g = go[c];
                gx[a00 + c] += g * (T(1) - fy) * (T(1) - fx);
                gx[a01 + c] += g * (T(1) - fy) * fx;
                gx[a10 + c] += g * fy * (T(1) - fx);
                gx[a11 + c] += g * fy * fx;
              }
            }
      });
}

#define DNET_INSTANTIATE(T)                                                          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const ConvKernel<T>&);              \
  template Tensor<T> depthwise_conv2d<T>(const Tensor<T>&, const ConvKernel<T>&);    \
  template Tensor<T> depthwise_separable_conv<T>(const Tensor<T>&,                   \
                                                 const ConvKernel<T>&,               \
                                                 const ConvKernel<T>&);              \
  template Tensor<T> max_pool<T>(const Tensor<T>&, int, int, Padding);               \
  template Tensor<T> transposed_conv<T>(const Tensor<T>&, const ConvKernel<T>&, int, \
                                        int);                                        \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                           \
  template Tensor<T> bilinear_upsample<T>(const Tensor<T>&, int, int);

DNET_INSTANTIATE(float)
DNET_INSTANTIATE(double)

}  // namespace dnet
