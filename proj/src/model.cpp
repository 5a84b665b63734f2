#include "dnet/model.hpp"

#include <cmath>

namespace dnet {

void DNetConfig::validate() const {
  auto increasing_or_unit = [](const std::array<int, 3>& v) {
    if (v[0] == 1 && v[1] == 1 && v[2] == 1) return true;
    return v[0] >= 1 && v[0] < v[1] && v[1] < v[2];
  };
  if (!increasing_or_unit(dilations)) {
    throw Error(ErrorCode::config,
                "dilations must satisfy d1 < d2 < d3 (or be 1,1,1), got " +
                    std::to_string(dilations[0]) + "," + std::to_string(dilations[1]) +
                    "," + std::to_string(dilations[2]));
  }
  if (!increasing_or_unit(msif_rates)) {
    throw Error(ErrorCode::config, "msif_rates must be strictly increasing (or 1,1,1)");
  }
  if (in_channels < 1) throw Error(ErrorCode::config, "in_channels must be >= 1");
  if (width_divisor < 1) throw Error(ErrorCode::config, "width_divisor must be >= 1");
}

int DNetConfig::width(int full_width) const {
  return std::max(1, full_width / width_divisor);
}

int DNetConfig::decoder_width(int full_width) const {
  return std::max(std::min(widths::decoder_min, full_width), width(full_width));
}

template <typename T>
Tensor<T> Initializer::uniform(Shape shape, int fan_in) {
  const double bound = std::sqrt(6.0 / std::max(fan_in, 1));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> data(shape.size());
  for (T& v : data) v = static_cast<T>(dist(rng_));
  return Tensor<T>(shape, std::move(data), true);
}

namespace {

struct LayerOpts {
  int stride = 1;
  int dilation = 1;
  bool depthwise = false;
  bool transposed = false;
  bool activation = true;
  double gain = 1.0;  // multiplies the initial weights
};

template <typename T>
ConvLayer<T> make_layer(const DNetConfig& cfg, Initializer& init, std::string name, int k,
                        int in, int out, LayerOpts opts) {
  ConvLayer<T> layer;
  layer.name = std::move(name);
  layer.depthwise = opts.depthwise;
  layer.transposed = opts.transposed;
  layer.activation = opts.activation;
  const int out_c = opts.depthwise ? 1 : out;
  int fan_in = opts.depthwise ? k * k : k * k * in;
  if (opts.transposed) fan_in = std::max(1, fan_in / (opts.stride * opts.stride));
  layer.kernel.weights = init.uniform<T>({k, k, in, out_c}, fan_in);
  if (opts.gain != 1.0)
    for (T& v : layer.kernel.weights.mutable_data()) v = static_cast<T>(v * opts.gain);
  const int bias_len = opts.depthwise ? in : out;
  layer.kernel.bias = Tensor<T>({1, 1, 1, bias_len}, true);
  layer.kernel.stride = opts.stride;
  layer.kernel.dilation = opts.dilation;
  if (cfg.batch_norm && opts.activation) {
    BatchNormParams<T> bn;
    bn.gamma = Tensor<T>::full({1, 1, 1, bias_len}, T(1));
    bn.gamma.set_requires_grad(true);
    bn.beta = Tensor<T>({1, 1, 1, bias_len}, true);
    bn.running_mean = Tensor<T>({1, 1, 1, bias_len});
    bn.running_var = Tensor<T>::full({1, 1, 1, bias_len}, T(1));
    layer.bn = std::move(bn);
  }
  return layer;
}

}  // namespace

template <typename T>
Tensor<T> ConvLayer<T>::linear(const Tensor<T>& x) const {
  ConvKernel<T> k = kernel;
  if (transposed) {
    k.padding = doubling_padding(k.kh());
    return transposed_conv(x, k);
  }
  const int k_eff = dilated_kernel_extent(k.kh(), k.dilation);
  k.padding = Padding::for_stride(x.shape().h, x.shape().w, k_eff, k.stride);
  return depthwise ? depthwise_conv2d(x, k) : conv2d(x, k);
}

template <typename T>
Tensor<T> ConvLayer<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> y = linear(x);
  if (bn) {
    y = batch_norm(y, bn->gamma, bn->beta, bn->running_mean, bn->running_var,
                   mode == Mode::training);
  }
  return activation ? relu(y) : y;
}

template <typename T>
void ConvLayer<T>::collect(std::vector<NamedTensor<T>>& out) const {
  out.push_back({name + ".weight", kernel.weights, true, true});
  if (kernel.has_bias()) out.push_back({name + ".bias", kernel.bias, true, false});
  if (bn) {
    out.push_back({name + ".bn.gamma", bn->gamma, true, false});
    out.push_back({name + ".bn.beta", bn->beta, true, false});
    out.push_back({name + ".bn.running_mean", bn->running_mean, false, false});
    out.push_back({name + ".bn.running_var", bn->running_var, false, false});
  }
}

template <typename T>
void ResidualBottleneck<T>::collect(std::vector<NamedTensor<T>>& out) const {
  reduce.collect(out);
  spatial.collect(out);
  restore.collect(out);
  if (projection) projection->collect(out);
}

template <typename T>
Tensor<T> residual_forward(const Tensor<T>& v, ResidualBottleneck<T>& block, Mode mode) {
  if (v.shape().c != block.in_channels()) {
    throw Error(ErrorCode::shape_mismatch,
                "residual block expects " + std::to_string(block.in_channels()) +
                    " channels, got " + std::to_string(v.shape().c));
  }
  Tensor<T> v1 = block.reduce.forward(v, mode);
  Tensor<T> v2 = block.spatial.forward(v1, mode);
  Tensor<T> v3 = block.restore.forward(v2, mode);
  Tensor<T> shortcut = block.projection ? block.projection->forward(v, mode) : v;
  return relu(add(shortcut, v3));
}

template <typename T>
EncoderFeatures<T> Encoder<T>::forward(const Tensor<T>& image, Mode mode) {
  EncoderFeatures<T> f;
  Tensor<T> x = image;
  for (auto& layer : root) x = layer.forward(x, mode);
  f.root_full = x;
  x = max_pool(x, 3, 2, Padding::for_stride(x.shape().h, x.shape().w, 3, 2));
  f.root_pool = x;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (auto& bottleneck : blocks[b]) x = residual_forward(x, bottleneck, mode);
    f.blocks[b] = x;
  }
  return f;
}

template <typename T>
void Encoder<T>::collect(std::vector<NamedTensor<T>>& out) const {
  for (const auto& layer : root) layer.collect(out);
  for (const auto& block : blocks)
    for (const auto& b : block) b.collect(out);
}

template <typename T>
Encoder<T> build_encoder(const DNetConfig& cfg, Initializer& init) {
  cfg.validate();
  Encoder<T> enc;
  int c = cfg.in_channels;
  for (std::size_t i = 0; i < widths::root.size(); ++i) {
    const int out = cfg.width(widths::root[i]);
    enc.root.push_back(make_layer<T>(cfg, init, "root.conv" + std::to_string(i + 1), 3, c,
                                     out, {.stride = i == 0 ? 2 : 1}));
    c = out;
  }
  // Residual branches start scaled by 1/sqrt(block count) so activations
  // stay O(1) through the unnormalised stack.
  const double restore_gain = 1.0 / std::sqrt(3.0 * widths::blocks.size());
  for (std::size_t b = 0; b < widths::blocks.size(); ++b) {
    const int reduce = cfg.width(widths::blocks[b][0]);
    const int spatial = cfg.width(widths::blocks[b][1]);
    const int restore = cfg.width(widths::blocks[b][2]);
    for (int i = 0; i < 3; ++i) {
      const std::string name = "block" + std::to_string(b + 1) + "." + std::to_string(i);
      const int stride = (b == 1 || b == 2) && i == 0 ? 2 : 1;
      const int dilation = b >= 3 ? cfg.dilations[i] : 1;
      ResidualBottleneck<T> rb;
      rb.reduce = make_layer<T>(cfg, init, name + ".reduce", 1, c, reduce, {});
      rb.spatial = make_layer<T>(cfg, init, name + ".spatial", 3, reduce, spatial,
                                 {.stride = stride, .dilation = dilation});
      rb.restore = make_layer<T>(cfg, init, name + ".restore", 1, spatial, restore,
                                 {.activation = false, .gain = restore_gain});
      if (c != restore || stride != 1) {
        rb.projection = make_layer<T>(cfg, init, name + ".projection", 1, c, restore,
                                      {.stride = stride, .activation = false});
      }
      enc.blocks[b].push_back(std::move(rb));
      c = restore;
    }
  }
  return enc;
}

template <typename T>
Tensor<T> encoder_concat(const Tensor<T>& b3, const Tensor<T>& b4, const Tensor<T>& b5) {
  return concat_channels<T>({b3, b4, b5});
}

template <typename T>
void Msif<T>::collect(std::vector<NamedTensor<T>>& out) const {
  pointwise.collect(out);
  for (int i = 0; i < 3; ++i) {
    depthwise[i].collect(out);
    mixing[i].collect(out);
  }
  pooled.collect(out);
  fuse.collect(out);
}

template <typename T>
Msif<T> build_msif(const DNetConfig& cfg, int in_channels, Initializer& init) {
  Msif<T> m;
  const int branch = cfg.width(widths::msif_branch);
  m.pointwise = make_layer<T>(cfg, init, "msif.conv1x1", 1, in_channels, branch, {});
  for (int i = 0; i < 3; ++i) {
    const std::string name = "msif.rate" + std::to_string(cfg.msif_rates[i]);
    m.depthwise[i] = make_layer<T>(cfg, init, name + ".depthwise", 3, in_channels, in_channels,
                                   {.dilation = cfg.msif_rates[i], .depthwise = true,
                                    .activation = false});
    m.mixing[i] = make_layer<T>(cfg, init, name + ".pointwise", 1, in_channels, branch, {});
  }
  m.pooled = make_layer<T>(cfg, init, "msif.pool", 1, in_channels, branch, {});
  m.fuse = make_layer<T>(cfg, init, "msif.fuse", 1, 5 * branch, cfg.width(widths::msif_fuse),
                         {});
  return m;
}

template <typename T>
Tensor<T> msif_forward(const Tensor<T>& g, Msif<T>& msif, Mode mode, MsifTrace<T>* trace) {
  MsifTrace<T> local;
  MsifTrace<T>& t = trace ? *trace : local;
  t.branches[0] = msif.pointwise.forward(g, mode);
  for (int i = 0; i < 3; ++i) {
    t.branches[i + 1] = msif.mixing[i].forward(msif.depthwise[i].forward(g, mode), mode);
  }
  t.pooled = global_avg_pool(g);
  t.gap = bilinear_upsample(msif.pooled.forward(t.pooled, mode), g.shape().h, g.shape().w);
  t.concat = concat_channels<T>({t.branches[0], t.branches[1], t.branches[2], t.branches[3],
                                 t.gap});
  t.fused = msif.fuse.forward(t.concat, mode);
  return t.fused;
}

template <typename T>
void Decoder<T>::collect(std::vector<NamedTensor<T>>& out) const {
  for (int i = 0; i < 4; ++i) {
    up[i].collect(out);
    if (i < 3) fuse[i].collect(out);
  }
  for (const auto& r : refine) r.collect(out);
  head.collect(out);
}

template <typename T>
Decoder<T> build_decoder(const DNetConfig& cfg, int in_channels, Initializer& init) {
  Decoder<T> d;
  // Skip channels at /8, /4, /2: Block2 output, pooled root, full root.
  const std::array<int, 3> skip{cfg.width(widths::blocks[1][2]), cfg.width(widths::root[2]),
                                cfg.width(widths::root[2])};
  int c = in_channels;
  for (int i = 0; i < 4; ++i) {
    const int out = cfg.decoder_width(widths::decoder[i]);
    d.up[i] = make_layer<T>(cfg, init, "decoder.up" + std::to_string(i + 1), 4, c, out,
                            {.stride = 2, .transposed = true});
    c = out;
    if (i < 3) {
      d.fuse[i] = make_layer<T>(cfg, init, "decoder.fuse" + std::to_string(i + 1), 3,
                                c + skip[i], c, {});
    }
  }
  for (int i = 0; i < 2; ++i) {
    d.refine[i] =
        make_layer<T>(cfg, init, "decoder.refine" + std::to_string(i + 1), 3, c, c, {});
  }
  d.head = make_layer<T>(cfg, init, "decoder.head", 1, c, 1, {.activation = false});
  return d;
}

template <typename T>
Tensor<T> decoder_forward(const Tensor<T>& u, std::span<const Tensor<T>> skips,
                          Decoder<T>& decoder, Mode mode) {
  if (skips.size() != 3) {
    throw Error(ErrorCode::invalid_argument, "decoder expects three skip features");
  }
  Tensor<T> x = u;
  for (int i = 0; i < 3; ++i) {
    x = decoder.up[i].forward(x, mode);
    const Shape& s = skips[i].shape();
    if (s.n != x.shape().n || s.h != x.shape().h || s.w != x.shape().w) {
      throw Error(ErrorCode::shape_mismatch,
                  "skip " + std::to_string(i) + " has shape " + s.str() +
                      ", decoder stage is at " + x.shape().str());
    }
    x = decoder.fuse[i].forward(concat_channels<T>({x, skips[i]}), mode);
  }
  x = decoder.up[3].forward(x, mode);
  for (auto& r : decoder.refine) x = r.forward(x, mode);
  return decoder.head.forward(x, mode);
}

template <typename T>
DNet<T>::DNet(const DNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Initializer init(seed);
  encoder_ = build_encoder<T>(cfg_, init);
  const int g_channels = cfg_.width(widths::blocks[2][2]) + cfg_.width(widths::blocks[3][2]) +
                         cfg_.width(widths::blocks[4][2]);
  int decoder_in = g_channels;
  if (cfg_.msif_enabled) {
    msif_ = build_msif<T>(cfg_, g_channels, init);
    decoder_in = cfg_.width(widths::msif_fuse);
  }
  decoder_ = build_decoder<T>(cfg_, decoder_in, init);
  encoder_.collect(params_);
  if (cfg_.msif_enabled) msif_.collect(params_);
  decoder_.collect(params_);
}

template <typename T>
void DNet<T>::check_input(const Tensor<T>& image) const {
  const Shape& s = image.shape();
  if (s.c != cfg_.in_channels) {
    throw Error(ErrorCode::shape_mismatch, "image has " + std::to_string(s.c) +
                                               " channels, model expects " +
                                               std::to_string(cfg_.in_channels));
  }
  if (s.n < 1 || s.h < widths::downsampling || s.w < widths::downsampling ||
      s.h % widths::downsampling != 0 || s.w % widths::downsampling != 0) {
    throw Error(ErrorCode::shape_mismatch,
                "image height and width must be positive multiples of 16, got " + s.str());
  }
}

template <typename T>
Tensor<T> DNet<T>::logits(const Tensor<T>& image, Mode mode) {
  check_input(image);
  EncoderFeatures<T> f = encoder_.forward(image, mode);
  Tensor<T> g = encoder_concat(f.blocks[2], f.blocks[3], f.blocks[4]);
  Tensor<T> u = cfg_.msif_enabled ? msif_forward(g, msif_, mode) : g;
  const std::array<Tensor<T>, 3> skips{f.blocks[1], f.root_pool, f.root_full};
  return decoder_forward<T>(u, skips, decoder_, mode);
}

template <typename T>
Tensor<T> DNet<T>::forward(const Tensor<T>& image, Mode mode) {
  return sigmoid(logits(image, mode));
}

template <typename T>
std::vector<Tensor<T>> DNet<T>::trainable() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_)
    if (p.trainable) out.push_back(p.tensor);
  return out;
}

template <typename T>
std::vector<Tensor<T>> DNet<T>::decayed() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_)
    if (p.decay) out.push_back(p.tensor);
  return out;
}

template <typename T>
std::size_t DNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.tensor.size();
  return n;
}

template <typename T>
void DNet<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
rf::ArchSpec DNet<T>::encoder_arch() const {
  return dnet::encoder_arch(cfg_);
}

rf::ArchSpec encoder_arch(const DNetConfig& cfg) {
  cfg.validate();
  using rf::LayerKind;
  using rf::LayerSpec;
  rf::ArchSpec arch;
  arch.stages.push_back({"root", {{LayerSpec{LayerKind::conv, 3, 2, 1, "conv1"},
                                   LayerSpec{LayerKind::conv, 3, 1, 1, "conv2"},
                                   LayerSpec{LayerKind::conv, 3, 1, 1, "conv3"},
                                   LayerSpec{LayerKind::pool, 3, 2, 1, "pool"}}},
                         std::nullopt});
  for (int b = 0; b < 5; ++b) {
    for (int i = 0; i < 3; ++i) {
      const int stride = (b == 1 || b == 2) && i == 0 ? 2 : 1;
      const int dilation = b >= 3 ? cfg.dilations[i] : 1;
      rf::ArchStage stage;
      stage.name = "block" + std::to_string(b + 1) + "." + std::to_string(i);
      stage.branches.push_back({LayerSpec{LayerKind::conv, 1, 1, 1, "reduce"},
                                LayerSpec{LayerKind::conv, 3, stride, dilation, "spatial"},
                                LayerSpec{LayerKind::conv, 1, 1, 1, "restore"}});
      stage.branches.push_back({LayerSpec{LayerKind::conv, 1, stride, 1, "shortcut"}});
      stage.path = 0;
      arch.stages.push_back(std::move(stage));
    }
  }
  return arch;
}

#define DNET_INSTANTIATE(T)                                                              \
  template Tensor<T> Initializer::uniform<T>(Shape, int);                                \
  template struct ConvLayer<T>;                                                          \
  template struct ResidualBottleneck<T>;                                                 \
  template struct Encoder<T>;                                                            \
  template struct Msif<T>;                                                               \
  template struct Decoder<T>;                                                            \
  template class DNet<T>;                                                                \
  template Tensor<T> residual_forward<T>(const Tensor<T>&, ResidualBottleneck<T>&, Mode); \
  template Encoder<T> build_encoder<T>(const DNetConfig&, Initializer&);                 \
  template Tensor<T> encoder_concat<T>(const Tensor<T>&, const Tensor<T>&,               \
                                       const Tensor<T>&);                                \
  template Msif<T> build_msif<T>(const DNetConfig&, int, Initializer&);                  \
  template Tensor<T> msif_forward<T>(const Tensor<T>&, Msif<T>&, Mode, MsifTrace<T>*);   \
  template Decoder<T> build_decoder<T>(const DNetConfig&, int, Initializer&);            \
  template Tensor<T> decoder_forward<T>(const Tensor<T>&, std::span<const Tensor<T>>,    \
                                        Decoder<T>&, Mode);

DNET_INSTANTIATE(float)
DNET_INSTANTIATE(double)

}  // namespace dnet
