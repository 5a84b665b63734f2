#include "dnet/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <vector>

#include "dnet/error.hpp"
#include "dnet/io.hpp"
#include "dnet/metrics.hpp"
#include "dnet/receptive_field.hpp"
#include "dnet/synth.hpp"
#include "dnet/train.hpp"

namespace dnet::cli {

namespace {

std::ofstream open_text(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot create " + path.string());
  out.precision(12);
  return out;
}

std::vector<fs::path> pgm_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::io, "not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") out.push_back(e.path().filename());
  std::sort(out.begin(), out.end());
  return out;
}

void write_curve(const fs::path& path, const char* header, const std::vector<CurvePoint>& pts) {
  auto out = open_text(path);
  out << header << '\n';
  for (const auto& p : pts) out << p.threshold << ',' << p.x << ',' << p.y << '\n';
}

std::string numbered(const char* stem, int i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03d%s", stem, i, ext);
  return buf;
}

}  // namespace

void cmd_train(const TrainArgs& args, std::ostream& log) {
  if (args.manifest.has_value() == args.synth.has_value())
    throw Error(ErrorCode::invalid_argument, "train needs exactly one of --manifest or --synth");
  const io::RunConfig cfg = io::load_run_config(args.config);
  Dataset data;
  if (args.manifest) {
    data = io::load_dataset(io::load_manifest(*args.manifest), "train");
    if (data.empty()) throw Error(ErrorCode::invalid_argument, "manifest has no train entries");
  } else {
    if (*args.synth < 1) throw Error(ErrorCode::invalid_argument, "--synth must be >= 1");
    data = synth_vessels(cfg.train.seed, *args.synth, args.synth_size, args.synth_size);
  }
  for (const auto& s : data) {
    if (s.image.shape().c != cfg.model.in_channels) {
      throw Error(ErrorCode::shape_mismatch,
                  "images have " + std::to_string(s.image.shape().c) + " channels, config expects " +
                      std::to_string(cfg.model.in_channels));
    }
  }

  log << "loss: " << loss_formula(cfg.train.loss()) << '\n';
  log << "images: " << data.size() << ", steps: " << cfg.train.max_iter << '\n';
  DNet<float> model(cfg.model, cfg.train.seed);
  const auto trace = train(data, model, cfg.train, [&](const TraceRow& r) {
    if (args.log_every > 0 && (r.step % args.log_every == 0 || r.step + 1 == cfg.train.max_iter))
      log << "step " << r.step << " lr " << r.lr << " loss " << r.loss << '\n';
  });
  io::save_checkpoint(args.out, model);
  if (args.loss_csv) {
    auto out = open_text(*args.loss_csv);
    write_loss_csv(out, trace);
  }
  const Metrics m = metrics(evaluate(model, data));
  log << "train accuracy " << m.accuracy << " f1 " << m.f1 << '\n';
}

void cmd_predict(const fs::path& checkpoint, const fs::path& image, const fs::path& out_prob,
                 const fs::path& out_mask) {
  DNet<float> model = io::load_checkpoint(checkpoint);
  const Tensor<float> x = io::read_pnm(image);
  if (x.shape().c != model.config().in_channels) {
    throw Error(ErrorCode::shape_mismatch, image.string() + " has " + std::to_string(x.shape().c) +
                                               " channels, model expects " +
                                               std::to_string(model.config().in_channels));
  }
  const Tensor<float> prob = model.forward(x, Mode::inference);
  io::write_probability(out_prob, prob);
  io::write_mask(out_mask, prob);
}

void cmd_eval(const fs::path& pred_dir, const fs::path& gt_dir, const std::optional<fs::path>& fov_dir,
              const fs::path& out_dir, std::ostream& log) {
  const auto names = pgm_files(pred_dir);
  if (names.empty()) throw Error(ErrorCode::invalid_argument, "no .pgm files in " + pred_dir.string());
  std::vector<double> scores;
  std::vector<std::uint8_t> labels, pred;
  for (const auto& name : names) {
    const Tensor<float> p = io::read_pnm(pred_dir / name);
    if (!fs::exists(gt_dir / name)) throw Error(ErrorCode::io, "no ground truth for " + name.string());
    const Tensor<float> g = io::read_pnm(gt_dir / name);
    if (p.shape() != g.shape() || p.shape().c != 1) {
      throw Error(ErrorCode::shape_mismatch, name.string() + ": prediction " + p.shape().str() +
                                                 " vs ground truth " + g.shape().str());
    }
    Tensor<float> f;
    if (fov_dir) {
      f = io::read_pnm(*fov_dir / name);
      if (f.shape() != p.shape()) throw Error(ErrorCode::shape_mismatch, name.string() + ": fov extent differs");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (fov_dir && !(f[i] > 0.5f)) continue;
      scores.push_back(p[i]);
      labels.push_back(g[i] > 0.5f);
      pred.push_back(p[i] >= 0.5f);
    }
  }
  const Metrics m = metrics(confusion(pred, labels));
  const ConfusionCounts c = confusion(pred, labels);
  const Curves curves = roc_pr_curves(scores, labels);

  fs::create_directories(out_dir);
  auto out = open_text(out_dir / "metrics.csv");
  out << "name,value\n"
      << "accuracy," << m.accuracy << '\n'
      << "precision," << m.precision << '\n'
      << "recall," << m.recall << '\n'
      << "sensitivity," << m.recall << '\n'
      << "specificity," << m.specificity << '\n'
      << "f1," << m.f1 << '\n'
      << "auc_roc," << curves.auc_roc << '\n'
      << "auc_pr," << curves.auc_pr << '\n'
      << "tp," << c.tp << '\n'
      << "tn," << c.tn << '\n'
      << "fp," << c.fp << '\n'
      << "fn," << c.fn << '\n'
      << "images," << names.size() << '\n';
  write_curve(out_dir / "roc.csv", "threshold,fpr,tpr", curves.roc);
  write_curve(out_dir / "pr.csv", "threshold,recall,precision", curves.pr);
  log << "images " << names.size() << " accuracy " << m.accuracy << " f1 " << m.f1 << " auc_roc "
      << curves.auc_roc << '\n';
  for (const char* flag : {"precision", "recall", "specificity", "f1"}) {
    const bool degenerate = (flag[0] == 'p' && m.precision_degenerate) ||
                            (flag[0] == 'r' && m.recall_degenerate) ||
                            (flag[0] == 's' && m.specificity_degenerate) ||
                            (flag[0] == 'f' && m.f1_degenerate);
    if (degenerate) log << "warning: " << flag << " has a zero denominator, reported as 0\n";
  }
}

void cmd_rf_analyze(const std::optional<fs::path>& layers, const std::optional<fs::path>& config,
                    std::ostream& out) {
  if (layers.has_value() == config.has_value())
    throw Error(ErrorCode::invalid_argument, "rf-analyze needs a layer file or --config");
  rf::RFReport report;
  if (layers) {
    report = rf::rf_stack(rf::parse_layer_stack(io::read_text(*layers)));
  } else {
    const io::RunConfig cfg = io::load_run_config(*config);
    report = rf::network_rf(encoder_arch(cfg.model));
    out << "# encoder path, dilations " << cfg.model.dilations[0] << ',' << cfg.model.dilations[1]
        << ',' << cfg.model.dilations[2] << "; rf += (k_eff - 1) * jump, jump *= stride, "
        << "k_eff = (k - 1) * r + 1\n";
  }
  out << rf::to_csv(report);
  out << "rf=" << report.final_rf() << '\n';
  out << rf::coverage_line(report.coverage) << '\n';
}

void cmd_synth(std::uint64_t seed, int n, int h, int w, const fs::path& out_dir, int n_test) {
  if (n < 1) throw Error(ErrorCode::invalid_argument, "--n must be >= 1");
  if (n_test < 0 || n_test > n) throw Error(ErrorCode::invalid_argument, "--test must be in [0, n]");
  const Dataset data = synth_vessels(seed, n, h, w);
  fs::create_directories(out_dir);
  auto manifest = open_text(out_dir / "manifest.txt");
  for (int i = 0; i < n; ++i) {
    const std::string image = numbered("image", i, ".ppm");
    const std::string mask = numbered("mask", i, ".pgm");
    io::write_pnm(out_dir / image, data[i].image, 255);
    io::write_mask(out_dir / mask, data[i].mask);
    manifest << (i >= n - n_test ? "test " : "train ") << image << ' ' << mask << '\n';
  }
}

}  // namespace dnet::cli
