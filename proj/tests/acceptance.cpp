// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]  (all when none given)

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>

#include "dnet/commands.hpp"
#include "dnet/io.hpp"
#include "dnet/loss.hpp"
#include "dnet/metrics.hpp"
#include "dnet/model.hpp"
#include "dnet/optim.hpp"
#include "dnet/receptive_field.hpp"
#include "dnet/train.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using dnet::ConvKernel;
using dnet::DNet;
using dnet::DNetConfig;
using dnet::Mode;
using dnet::Padding;
using dnet::Shape;
using dnet::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

DNetConfig tiny() {
  DNetConfig cfg;
  cfg.width_divisor = 8;
  return cfg;
}

template <typename T>
ConvKernel<T> random_kernel(std::mt19937_64& rng, int k, int cin, int cout, int d, int s, Padding p,
                            bool bias = true) {
  ConvKernel<T> kern;
  kern.weights = oracle::random_tensor<T>({k, k, cin, cout}, rng);
  if (bias) kern.bias = oracle::random_tensor<T>({1, 1, 1, cout}, rng);
  kern.dilation = d;
  kern.stride = s;
  kern.padding = p;
  return kern;
}

Outcome rf_formulas() {
  using namespace dnet::rf;
  Outcome o;
  const long a = rf_single(3, 4);
  const long b = rf_stack({{LayerKind::conv, 5, 1, 1, ""}, {LayerKind::conv, 9, 1, 1, ""}}).final_rf();
  o.require(a == 9, "rf_single(3,4)");
  o.require(b == 13, "rf_stack(5,9)");
  o.note("rf_single(3,4)=" + std::to_string(a) + " rf_stack(5,9)=" + std::to_string(b));
  return o;
}

Outcome dilated_extent() {
  Outcome o;
  const int e = dnet::dilated_kernel_extent(3, 2);
  o.require(e == 5, "dilated_kernel_extent(3,2)");
  o.note("dilated_kernel_extent(3,2)=" + std::to_string(e));
  return o;
}

Outcome dilation_oracle() {
  Outcome o;
  std::mt19937_64 rng(31);
  double worst = 0;
  int cases = 0;
  for (int d = 1; d <= 4; ++d) {
    for (int trial = 0; trial < 100; ++trial) {
      const int h = 1 + rng() % 6, w = 1 + rng() % 6, cin = 1 + rng() % 3, cout = 1 + rng() % 3;
      const int ke = dnet::dilated_kernel_extent(3, d);
      auto x = oracle::random_tensor<float>({1 + static_cast<int>(rng() % 2), h, w, cin}, rng);
      auto dilated = random_kernel<float>(rng, 3, cin, cout, d, 1, Padding::same(ke));
      ConvKernel<float> dense = dilated;
      dense.weights = oracle::zero_insert(dilated.weights, d);
      dense.dilation = 1;
      const auto a = conv2d(x, dilated);
      const auto b = conv2d(x, dense);
      if (a.shape() != b.shape()) {
        o.require(false, "shape");
        continue;
      }
      for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, double{std::abs(a[i] - b[i])});
      ++cases;
    }
  }
  o.require(worst == 0, "max abs diff is zero");
  o.note(std::to_string(cases) + " cases, max abs diff " + fmt("%g", worst));
  return o;
}

Outcome coverage() {
  Outcome o;
  const auto sparse = dnet::rf::coverage_map({2, 2, 2});
  const auto dense = dnet::rf::coverage_map({1, 2, 3});
  o.require(!sparse.dense && !sparse.holes.empty(), "(2,2,2) has holes");
  o.require(dense.dense, "(1,2,3) dense");
  int agree = 0;
  for (int a = 1; a <= 4; ++a)
    for (int b = 1; b <= 4; ++b)
      for (int c = 1; c <= 4; ++c) {
        const auto cov = dnet::rf::coverage_map({a, b, c});
        const auto ref = oracle::dependency_trace({a, b, c}, 3);
        const bool same = cov.lo == *ref.begin() && cov.hi == *ref.rbegin() &&
                          cov.holes == oracle::holes_of(ref) && cov.dense == cov.holes.empty();
        agree += same;
      }
  o.require(agree == 64, "trace oracle agreement");
  o.note(dnet::rf::coverage_line(sparse) + " for (2,2,2), " + dnet::rf::coverage_line(dense) +
         " for (1,2,3), oracle agrees on " + std::to_string(agree) + "/64 triples");
  return o;
}

Outcome gradients() {
  using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;
  Outcome o;
  std::mt19937_64 rng(41);
  std::map<std::string, double> worst;
  auto check = [&](const std::string& op, std::vector<Tensor<double>> in, const Fn& f) {
    worst[op] = std::max(worst[op], oracle::grad_check(std::move(in), f).max_rel_error);
  };

  for (int d = 1; d <= 4; ++d)
    for (int s = 1; s <= 2; ++s) {
      auto x = oracle::random_tensor<double>({2, 6, 5, 2}, rng);
      auto kern = random_kernel<double>(rng, 3, 2, 3, d, s,
                                        Padding::for_stride(6, 5, dnet::dilated_kernel_extent(3, d), s));
      check("conv2d", {x, kern.weights, kern.bias}, [&](auto& in) {
        ConvKernel<double> k = kern;
        k.weights = in[1];
        k.bias = in[2];
        return oracle::project(conv2d(in[0], k));
      });
    }
  for (int d = 1; d <= 3; ++d) {
    auto x = oracle::random_tensor<double>({1, 5, 6, 3}, rng);
    auto dw = random_kernel<double>(rng, 3, 3, 1, d, 1, Padding::same(dnet::dilated_kernel_extent(3, d)),
                                    false);
    dw.bias = oracle::random_tensor<double>({1, 1, 1, 3}, rng);
    auto pw = random_kernel<double>(rng, 1, 3, 2, 1, 1, {});
    check("depthwise_separable", {x, dw.weights, dw.bias, pw.weights, pw.bias}, [&](auto& in) {
      ConvKernel<double> a = dw, b = pw;
      a.weights = in[1];
      a.bias = in[2];
      b.weights = in[3];
      b.bias = in[4];
      return oracle::project(depthwise_separable_conv(in[0], a, b));
    });
  }
  {
    auto x = oracle::random_tensor<double>({1, 3, 4, 2}, rng);
    auto tk = random_kernel<double>(rng, 4, 2, 3, 1, 2, dnet::doubling_padding(4));
    check("transposed_conv", {x, tk.weights, tk.bias}, [&](auto& in) {
      ConvKernel<double> k = tk;
      k.weights = in[1];
      k.bias = in[2];
      return oracle::project(transposed_conv(in[0], k));
    });
  }
  {
    std::vector<double> v(2 * 5 * 6 * 2);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(1.3 * i) + 0.001 * i;
    check("max_pool", {Tensor<double>({2, 5, 6, 2}, v)},
          [](auto& in) { return oracle::project(max_pool(in[0], 3, 2, Padding::for_stride(5, 6, 3, 2))); });
  }
  {
    auto x = oracle::random_tensor<double>({2, 3, 4, 3}, rng);
    check("global_avg_pool", {x}, [](auto& in) { return oracle::project(global_avg_pool(in[0])); });
    check("bilinear", {x}, [](auto& in) { return oracle::project(bilinear_upsample(in[0], 7, 5)); });
  }
  {
    // Keep inputs away from the kink at 0.
    auto x = oracle::random_tensor<double>({1, 4, 4, 3}, rng, 0.05, 1.0);
    auto sign = oracle::random_tensor<double>({1, 4, 4, 3}, rng);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (sign[i] < 0) x.mutable_data()[i] = -x[i];
    check("relu", {x}, [](auto& in) { return oracle::project(dnet::relu(in[0])); });
    check("sigmoid", {oracle::random_tensor<double>({1, 4, 4, 3}, rng, -4, 4)},
          [](auto& in) { return oracle::project(dnet::sigmoid(in[0])); });
  }
  {
    auto pred = oracle::random_tensor<double>({2, 3, 4, 1}, rng, 0.05, 0.95);
    std::vector<double> tv(pred.size());
    for (auto& v : tv) v = static_cast<double>(rng() % 2);
    Tensor<double> target(pred.shape(), tv);
    auto w1 = oracle::random_tensor<double>({3, 3, 2, 2}, rng);
    dnet::LossConfig lc;
    lc.lambda = 0.01;
    lc.beta = 0.7;
    check("total_loss", {pred, w1}, [&](auto& in) {
      const std::vector<Tensor<double>> params{in[1]};
      return total_loss<double>(in[0], target, params, lc);
    });
  }
  for (const auto& [op, err] : worst) o.require(err < 1e-4, op);

  // Whole network, every parameter kind sampled at least 20 times.
  DNet<double> net(tiny(), 11);
  auto x = oracle::random_tensor<double>({1, 16, 16, 3}, rng, 0, 1);
  std::vector<double> m(256);
  for (auto& v : m) v = (rng() % 5 == 0) ? 1.0 : 0.0;
  Tensor<double> target({1, 16, 16, 1}, m);
  const auto decayed = net.decayed();
  auto loss = [&] {
    return total_loss<double>(net.forward(x, Mode::training), target, decayed, dnet::LossConfig{});
  };
  net.zero_grad();
  dnet::backward(loss());
  auto kind_of = [](std::string name) {
    for (char& ch : name)
      if (std::isdigit(static_cast<unsigned char>(ch))) ch = '#';
    return name;
  };
  std::map<std::string, int> tensors;
  for (const auto& p : net.parameters())
    if (p.trainable) ++tensors[kind_of(p.name)];
  double e2e = 0;
  std::size_t samples = 0;
  const double eps = 1e-6;
  for (auto& p : net.parameters()) {
    if (!p.trainable) continue;
    const std::string kind = kind_of(p.name);
    const int n = (20 + tensors[kind] - 1) / tensors[kind];
    const auto g = p.tensor.grad();
    auto d = p.tensor.mutable_data();
    for (int s = 0; s < n; ++s, ++samples) {
      const std::size_t i = rng() % d.size();
      const double orig = d[i];
      d[i] = orig + eps;
      const double up = loss().item();
      d[i] = orig - eps;
      const double down = loss().item();
      d[i] = orig;
      const double num = (up - down) / (2 * eps);
      e2e = std::max(e2e, std::abs(num - g[i]) / std::max({std::abs(num), std::abs(g[i]), 1e-7}));
    }
  }
  o.require(e2e < 1e-3, "end-to-end");
  double op_worst = 0;
  for (const auto& [op, err] : worst) op_worst = std::max(op_worst, err);
  o.note(std::to_string(worst.size()) + " operators, worst rel err " + fmt("%.2e", op_worst) +
         "; end-to-end " + std::to_string(samples) + " samples, worst " + fmt("%.2e", e2e));
  return o;
}

Outcome shapes() {
  Outcome o;
  DNet<float> net(DNetConfig{}, 2);
  std::mt19937_64 rng(1);
  auto x = oracle::random_tensor<float>({1, 64, 64, 3}, rng, 0, 1);
  const auto f = net.encoder().forward(x);
  for (int b = 2; b < 5; ++b) {
    o.require(f.blocks[b].shape().h == 4 && f.blocks[b].shape().w == 4,
              "block" + std::to_string(b + 1) + " at 4x4");
  }
  const auto g = encoder_concat(f.blocks[2], f.blocks[3], f.blocks[4]);
  o.require(g.shape().c == 1024, "G channels");
  dnet::MsifTrace<float> trace;
  const auto u = msif_forward(g, net.msif(), Mode::inference, &trace);
  o.require(u.shape() == Shape{1, 4, 4, 256}, "msif output");
  const auto y = net.forward(x);
  o.require(y.shape() == Shape{1, 64, 64, 1}, "output shape");
  float lo = 1, hi = 0;
  for (float v : y.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  o.require(lo > 0 && hi < 1, "output in (0,1)");
  o.note("blocks3-5 " + f.blocks[2].shape().str() + " " + f.blocks[3].shape().str() + " " +
         f.blocks[4].shape().str() + ", G " + g.shape().str() + ", msif " + u.shape().str() + ", out " +
         y.shape().str() + " in [" + fmt("%.4f", lo) + ", " + fmt("%.4f", hi) + "]");
  return o;
}

Outcome metrics_check() {
  Outcome o;
  const auto m = dnet::metrics({2, 6, 1, 1});
  auto near = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
  o.require(near(m.precision, 2.0 / 3), "precision");
  o.require(near(m.recall, 2.0 / 3), "recall");
  o.require(near(m.f1, 2.0 / 3), "f1");
  o.require(near(m.accuracy, 0.8), "accuracy");
  o.require(near(m.specificity, 6.0 / 7), "specificity");
  std::mt19937_64 rng(77);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng() % 300;
    std::vector<double> s(n);
    std::vector<std::uint8_t> l(n);
    const int levels = 1 + rng() % 50;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % levels) / levels;
      l[i] = rng() % 2;
    }
    l[0] = 1;
    l[1] = 0;
    worst = std::max(worst, std::abs(dnet::roc_pr_curves(s, l).auc_roc - oracle::pairwise_auc(s, l)));
  }
  o.require(worst <= 1e-12, "auc vs pairwise oracle");
  o.note("P=R=F1=" + fmt("%.15f", m.f1) + " acc=" + fmt("%.15f", m.accuracy) + " specificity=" +
         fmt("%.15f", m.specificity) + "; auc max diff over 50 sets " + fmt("%.1e", worst));
  return o;
}

Outcome schedule() {
  Outcome o;
  const dnet::PolySchedule s{1e-4, 0.9, 1000};
  const double mid = dnet::poly_lr(500, s);
  o.require(dnet::poly_lr(0, s) == 1e-4, "poly_lr(0)");
  o.require(dnet::poly_lr(1000, s) == 0, "poly_lr(max)");
  o.require(std::abs(mid - 5.3589e-5) < 1e-9, "poly_lr(max/2)");
  std::mt19937_64 rng(8);
  auto t = oracle::random_tensor<double>({2, 3, 3, 2}, rng);
  std::vector<double> theta(t.data().begin(), t.data().end());
  std::vector<Tensor<double>> p{t};
  dnet::AdamState<double> st;
  oracle::ReferenceAdam ref;
  for (int k = 0; k < 3; ++k) {
    std::vector<double> g(theta.size());
    for (auto& v : g) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    dnet::adam_step<double>(p, std::vector<std::vector<double>>{g}, st, 1e-3);
    ref.step(theta, g, 1e-3);
  }
  double worst = 0;
  for (std::size_t i = 0; i < theta.size(); ++i) worst = std::max(worst, std::abs(p[0][i] - theta[i]));
  o.require(worst < 1e-10, "adam vs reference");
  o.note("poly_lr(500)=" + fmt("%.6e", mid) + ", adam max diff " + fmt("%.1e", worst));
  return o;
}

Outcome desk_training() {
  Outcome o;
  const auto data = dnet::synth_vessels(1, 4, 64, 64);
  DNet<float> net(tiny(), 7);
  dnet::TrainConfig cfg;
  cfg.lr = 1e-4;
  cfg.max_iter = 2000;
  cfg.seed = 3;
  long first = -1;
  double best = 0, last = 0;
  std::string log;
  dnet::train(data, net, cfg, [&](const dnet::TraceRow& r) {
    if ((r.step + 1) % 100 != 0) return;
    last = dnet::metrics(dnet::evaluate(net, data)).f1;
    best = std::max(best, last);
    if (first < 0 && last > 0.95) first = r.step + 1;
    std::fprintf(stderr, "  step %ld loss %.4f f1 %.4f\n", r.step + 1, r.loss, last);
  });
  o.require(first > 0, "training-set F1 > 0.95");
  o.note("F1 first above 0.95 at step " + std::to_string(first) + ", final F1 " + fmt("%.4f", last));
  return o;
}

Outcome ablation() {
  Outcome o;
  const long steps = std::getenv("DNET_ABLATION_STEPS") ? std::atol(std::getenv("DNET_ABLATION_STEPS")) : 2000;
  const auto all = dnet::synth_vessels(100, 32, 64, 64);
  const dnet::Dataset train(all.begin(), all.begin() + 24);
  const dnet::Dataset held(all.begin() + 24, all.end());
  double mean[2] = {0, 0};
  for (int variant = 0; variant < 2; ++variant) {
    DNetConfig cfg = tiny();
    if (variant == 1) {
      cfg.dilations = {1, 1, 1};
      cfg.msif_enabled = false;
    }
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      DNet<float> net(cfg, seed);
      dnet::TrainConfig tc;
      tc.lr = 1e-4;
      tc.max_iter = steps;
      tc.seed = seed;
      dnet::train(train, net, tc);
      const double f1 = dnet::metrics(dnet::evaluate(net, held)).f1;
      std::fprintf(stderr, "  %s seed %llu held-out F1 %.4f\n", variant == 0 ? "(1,2,4)+MSIF" : "(1,1,1)",
                   static_cast<unsigned long long>(seed), f1);
      mean[variant] += f1 / 3;
    }
  }
  o.require(mean[0] >= mean[1], "(1,2,4)+MSIF >= (1,1,1) no-MSIF");
  o.note("mean held-out F1 (1,2,4)+MSIF " + fmt("%.4f", mean[0]) + " vs (1,1,1) no-MSIF " +
         fmt("%.4f", mean[1]) + " (" + std::to_string(steps) + " steps, 24 train / 8 held-out)");
  return o;
}

Outcome round_trips() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / ("dnet_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);

  // Checkpoint and image round trips.
  {
    DNet<float> net(tiny(), 5);
    std::stringstream a, b;
    dnet::io::save_checkpoint(a, net);
    auto loaded = dnet::io::load_checkpoint(a);
    dnet::io::save_checkpoint(b, loaded);
    o.require(a.str() == b.str(), "checkpoint save-load-save");
    const auto data = dnet::synth_vessels(4, 1, 32, 32);
    std::stringstream m, img;
    dnet::io::write_pnm(m, data[0].mask, 255);
    const auto mb = dnet::io::read_pnm(m);
    o.require(std::equal(mb.data().begin(), mb.data().end(), data[0].mask.data().begin()), "mask PGM");
    dnet::io::write_pnm(img, data[0].image, 255);
    const std::string first = img.str();
    std::stringstream again;
    dnet::io::write_pnm(again, dnet::io::read_pnm(img), 255);
    o.require(again.str() == first, "image PPM");
  }

  // synth -> train -> predict twice from scratch.
  std::vector<std::string> outputs[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = root / ("run" + std::to_string(run));
    dnet::cli::cmd_synth(12, 3, 32, 32, dir / "data", 1);
    {
      std::ofstream cfg(dir / "run.cfg");
      cfg << "d1 = 1\nd2 = 2\nd3 = 4\nmsif = on\nmsif_rates = 3,6,12\nlr = 3e-4\nmax_iter = 25\n"
             "batch = 2\nseed = 9\nchannels_scale = 1/8\n";
    }
    dnet::cli::TrainArgs args;
    args.config = dir / "run.cfg";
    args.manifest = dir / "data" / "manifest.txt";
    args.out = dir / "model.ckpt";
    args.loss_csv = dir / "loss.csv";
    std::ostringstream log;
    dnet::cli::cmd_train(args, log);
    dnet::cli::cmd_predict(dir / "model.ckpt", dir / "data" / "image_002.ppm", dir / "prob.pgm",
                           dir / "mask.pgm");
    for (const char* f : {"data/image_000.ppm", "data/mask_000.pgm", "model.ckpt", "loss.csv", "prob.pgm",
                          "mask.pgm"})
      outputs[run].push_back(dnet::io::read_text(dir / f));
  }
  o.require(outputs[0] == outputs[1], "seeded end-to-end run reproducible");
  fs::remove_all(root);
  o.note("checkpoint, PGM and PPM round trips exact; two synth-train-predict runs byte-identical");
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;  // 0 = no limit
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "receptive-field formulas", 1, rf_formulas},
    {2, "dilated kernel extent", 0, dilated_extent},
    {3, "dilation oracle", 10, dilation_oracle},
    {4, "coverage", 5, coverage},
    {5, "gradient suite", 120, gradients},
    {6, "shape contract", 0, shapes},
    {7, "metrics", 5, metrics_check},
    {8, "schedule and optimizer", 1, schedule},
    {9, "desk-scale training", 900, desk_training},
    {10, "ablation direction", 7200, ablation},
    {11, "round trips", 0, round_trips},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : kCriteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0) o.require(secs < c.limit_s, "runtime limit " + fmt("%.0f s", c.limit_s));
    failures += !o.pass;
    std::printf("%s %d %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
