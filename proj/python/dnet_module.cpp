#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "dnet/conv.hpp"
#include "dnet/error.hpp"
#include "dnet/io.hpp"
#include "dnet/metrics.hpp"
#include "dnet/model.hpp"
#include "dnet/optim.hpp"
#include "dnet/receptive_field.hpp"
#include "dnet/synth.hpp"
#include "dnet/train.hpp"

namespace py = pybind11;
using namespace dnet;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  if (a.ndim() != 4) throw Error(ErrorCode::shape_mismatch, "expected a 4-D NHWC array");
  const Shape s{static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
                static_cast<int>(a.shape(2)), static_cast<int>(a.shape(3))};
  return Tensor<T>(s, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
Array<T> to_array(const Tensor<T>& t) {
  const Shape s = t.shape();
  Array<T> out({s.n, s.h, s.w, s.c});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

rf::LayerKind kind_of(const std::string& k) {
  if (k == "conv") return rf::LayerKind::conv;
  if (k == "pool") return rf::LayerKind::pool;
  if (k == "tconv") return rf::LayerKind::transposed_conv;
  throw Error(ErrorCode::invalid_argument, "unknown layer kind '" + k + "'");
}

py::dict coverage_dict(const rf::Coverage& c) {
  py::dict d;
  d["dense"] = c.dense;
  d["lo"] = c.lo;
  d["hi"] = c.hi;
  d["holes"] = c.holes;
  d["line"] = rf::coverage_line(c);
  return d;
}

py::dict report_dict(const rf::RFReport& r) {
  py::list layers;
  for (const auto& l : r.layers) layers.append(py::make_tuple(l.name, l.k_eff, l.jump, l.rf));
  py::dict d;
  d["layers"] = layers;
  d["rf"] = r.final_rf();
  d["csv"] = rf::to_csv(r);
  d["coverage"] = coverage_dict(r.coverage);
  return d;
}

py::array_t<double> curve_array(const std::vector<CurvePoint>& pts) {
  py::array_t<double> out({static_cast<py::ssize_t>(pts.size()), py::ssize_t{3}});
  auto m = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    m(i, 0) = pts[i].threshold;
    m(i, 1) = pts[i].x;
    m(i, 2) = pts[i].y;
  }
  return out;
}

DNetConfig make_config(std::array<int, 3> dilations, bool msif, std::array<int, 3> rates, int divisor,
                       bool batch_norm) {
  DNetConfig cfg;
  cfg.dilations = dilations;
  cfg.msif_enabled = msif;
  cfg.msif_rates = rates;
  cfg.width_divisor = divisor;
  cfg.batch_norm = batch_norm;
  cfg.validate();
  return cfg;
}

class Model {
 public:
  Model(std::array<int, 3> dilations, bool msif, std::array<int, 3> rates, int divisor, bool batch_norm,
        std::uint64_t seed)
      : net_(make_config(dilations, msif, rates, divisor, batch_norm), seed) {}
  explicit Model(DNet<float> net) : net_(std::move(net)) {}

  Array<float> forward(const Array<float>& x) {
    const Tensor<float> t = to_tensor(x);
    Tensor<float> y;
    {
      py::gil_scoped_release release;
      y = net_.forward(t, Mode::inference);
    }
    return to_array(y);
  }

  std::vector<double> train(const Array<float>& images, const Array<float>& masks, const TrainConfig& cfg) {
    const Tensor<float> im = to_tensor(images), mk = to_tensor(masks);
    if (im.shape().n != mk.shape().n || mk.shape().c != 1 || im.shape().h != mk.shape().h ||
        im.shape().w != mk.shape().w)
      throw Error(ErrorCode::shape_mismatch, "masks must be N x H x W x 1 matching the images");
    Dataset data;
    const Shape is = im.shape(), ms = mk.shape();
    for (int n = 0; n < is.n; ++n) {
      const std::size_t ip = static_cast<std::size_t>(is.h) * is.w * is.c;
      const std::size_t mp = static_cast<std::size_t>(ms.h) * ms.w;
      Sample s;
      s.image = Tensor<float>({1, is.h, is.w, is.c},
                              std::vector<float>(im.data().begin() + n * ip, im.data().begin() + (n + 1) * ip));
      s.mask = Tensor<float>({1, ms.h, ms.w, 1},
                             std::vector<float>(mk.data().begin() + n * mp, mk.data().begin() + (n + 1) * mp));
      data.push_back(std::move(s));
    }
    std::vector<TraceRow> trace;
    {
      py::gil_scoped_release release;
      trace = dnet::train(data, net_, cfg);
    }
    std::vector<double> losses;
    for (const auto& r : trace) losses.push_back(r.loss);
    return losses;
  }

  py::dict config() const {
    const auto& c = net_.config();
    py::dict d;
    d["dilations"] = c.dilations;
    d["msif"] = c.msif_enabled;
    d["msif_rates"] = c.msif_rates;
    d["width_divisor"] = c.width_divisor;
    d["batch_norm"] = c.batch_norm;
    return d;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& p : net_.parameters()) out.push_back(p.name);
    return out;
  }

  std::size_t parameter_count() const { return net_.parameter_count(); }
  void save(const std::filesystem::path& p) const { io::save_checkpoint(p, net_); }
  py::bytes to_bytes() const {
    std::ostringstream out;
    io::save_checkpoint(out, net_);
    return out.str();
  }
  static Model load(const std::filesystem::path& p) { return Model(io::load_checkpoint(p)); }
  py::dict receptive_field() const { return report_dict(rf::network_rf(net_.encoder_arch())); }

 private:
  DNet<float> net_;
};

}  // namespace

PYBIND11_MODULE(dnet, m) {
  m.doc() = "Dilated-convolution vessel segmentation network on a small autodiff core.";
  py::register_exception<Error>(m, "Error", PyExc_ValueError);

  m.def("rf_single", &rf::rf_single, py::arg("k"), py::arg("r"));
  m.def("dilated_kernel_extent", [](int k, int d) { return dilated_kernel_extent(k, d); }, py::arg("k"),
        py::arg("d"));
  m.def(
      "rf_stack",
      [](const std::vector<std::tuple<std::string, int, int, int>>& layers) {
        std::vector<rf::LayerSpec> specs;
        for (const auto& [kind, k, s, r] : layers) specs.push_back({kind_of(kind), k, s, r, ""});
        return report_dict(rf::rf_stack(specs));
      },
      py::arg("layers"), "Layers as (kind, k, stride, dilation) with kind conv, pool or tconv.");
  m.def("parse_layer_stack", [](const std::string& text) {
    return report_dict(rf::rf_stack(rf::parse_layer_stack(text)));
  });
  m.def(
      "coverage_map",
      [](const std::vector<int>& d, int k) { return coverage_dict(rf::coverage_map(d, k)); },
      py::arg("dilations"), py::arg("k") = 3);

  m.def(
      "conv2d",
      [](const Array<double>& x, const Array<double>& w, std::optional<Array<double>> bias, int stride,
         int dilation, std::string padding) {
        ConvKernel<double> k;
        k.weights = to_tensor(w);
        if (bias) {
          auto b = *bias;
          k.bias = Tensor<double>({1, 1, 1, static_cast<int>(b.size())},
                                  std::vector<double>(b.data(), b.data() + b.size()));
        }
        k.stride = stride;
        k.dilation = dilation;
        const Tensor<double> t = to_tensor(x);
        if (padding == "same") {
          k.padding = Padding::for_stride(t.shape().h, t.shape().w,
                                          dilated_kernel_extent(k.kh(), dilation), stride);
        } else if (padding != "valid") {
          throw Error(ErrorCode::invalid_argument, "padding must be 'same' or 'valid'");
        }
        return to_array(dnet::conv2d(t, k));
      },
      py::arg("x"), py::arg("weights"), py::arg("bias") = py::none(), py::arg("stride") = 1,
      py::arg("dilation") = 1, py::arg("padding") = "same",
      "NHWC input, (kh, kw, in, out) weights. Computed in double precision.");

  m.def(
      "poly_lr",
      [](long step, double lr, double power, long max_iter) {
        return poly_lr(step, PolySchedule{lr, power, max_iter});
      },
      py::arg("step"), py::arg("lr") = 1e-4, py::arg("power") = 0.9, py::arg("max_iter") = 1000);

  m.def(
      "metrics",
      [](std::uint64_t tp, std::uint64_t tn, std::uint64_t fp, std::uint64_t fn) {
        const Metrics r = metrics({tp, tn, fp, fn});
        py::dict d;
        d["accuracy"] = r.accuracy;
        d["precision"] = r.precision;
        d["recall"] = r.recall;
        d["specificity"] = r.specificity;
        d["f1"] = r.f1;
        return d;
      },
      py::arg("tp"), py::arg("tn"), py::arg("fp"), py::arg("fn"));
  m.def(
      "roc_pr",
      [](const Array<double>& scores, const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& labels) {
        const Curves c = roc_pr_curves(std::span<const double>(scores.data(), scores.size()),
                                       std::span<const std::uint8_t>(labels.data(), labels.size()));
        py::dict d;
        d["auc_roc"] = c.auc_roc;
        d["auc_pr"] = c.auc_pr;
        d["roc"] = curve_array(c.roc);
        d["pr"] = curve_array(c.pr);
        return d;
      },
      py::arg("scores"), py::arg("labels"),
      "Curves as (threshold, x, y) rows: (fpr, tpr) for ROC, (recall, precision) for PR.");

  m.def(
      "synth_vessels",
      [](std::uint64_t seed, int n, int h, int w) {
        const Dataset d = synth_vessels(seed, n, h, w);
        py::list out;
        for (const auto& s : d) out.append(py::make_tuple(to_array(s.image), to_array(s.mask)));
        return out;
      },
      py::arg("seed"), py::arg("n"), py::arg("h") = 64, py::arg("w") = 64,
      "List of (image 1xHxWx3, mask 1xHxWx1) pairs.");

  m.def("read_pnm", [](const std::filesystem::path& p) { return to_array(io::read_pnm(p)); });
  m.def(
      "write_pnm",
      [](const std::filesystem::path& p, const Array<float>& a, int maxval) {
        io::write_pnm(p, to_tensor(a), maxval);
      },
      py::arg("path"), py::arg("image"), py::arg("maxval") = 255);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("power", &TrainConfig::power)
      .def_readwrite("max_iter", &TrainConfig::max_iter)
      .def_readwrite("batch", &TrainConfig::batch)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("lambda_", &TrainConfig::lambda)
      .def_readwrite("beta", &TrainConfig::beta);

  m.def("parse_run_config", [](const std::string& text) {
    const io::RunConfig c = io::parse_run_config(text);
    py::dict d;
    d["dilations"] = c.model.dilations;
    d["msif"] = c.model.msif_enabled;
    d["msif_rates"] = c.model.msif_rates;
    d["width_divisor"] = c.model.width_divisor;
    d["train"] = c.train;
    return d;
  });

  py::class_<Model>(m, "Model")
      .def(py::init<std::array<int, 3>, bool, std::array<int, 3>, int, bool, std::uint64_t>(),
           py::arg("dilations") = std::array<int, 3>{1, 2, 4}, py::arg("msif") = true,
           py::arg("msif_rates") = std::array<int, 3>{3, 6, 12}, py::arg("width_divisor") = 1,
           py::arg("batch_norm") = false, py::arg("seed") = 0)
      .def("forward", &Model::forward, py::arg("images"), "N x H x W x C images to N x H x W x 1 probabilities.")
      .def("train", &Model::train, py::arg("images"), py::arg("masks"), py::arg("config"),
           "Runs the training loop; returns the per-step loss.")
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_names", &Model::parameter_names)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("receptive_field", &Model::receptive_field)
      .def("save", &Model::save)
      .def("to_bytes", &Model::to_bytes)
      .def_static("load", &Model::load);
}
