#include <CLI11.hpp>

#include <iostream>

#include "dnet/commands.hpp"
#include "dnet/error.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"Dilated-convolution vessel segmentation"};
  app.require_subcommand(1);

  dnet::cli::TrainArgs train;
  int synth_n = 0;
  fs::path manifest;
  fs::path loss_csv;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  t->add_option("--config", train.config, "Run config file")->required();
  auto* t_manifest = t->add_option("--manifest", manifest, "Dataset manifest (train split)");
  auto* t_synth = t->add_option("--synth", synth_n, "Train on n synthetic images");
  t_manifest->excludes(t_synth);
  t->add_option("--synth-size", train.synth_size, "Side of synthetic images")->check(CLI::PositiveNumber);
  t->add_option("--out", train.out, "Checkpoint path")->required();
  t->add_option("--loss-csv", loss_csv, "Per-step loss CSV");
  t->add_option("--log-every", train.log_every, "Progress interval in steps (0 = quiet)");

  fs::path checkpoint, image, out_prob, out_mask;
  auto* p = app.add_subcommand("predict", "Predict a probability map and mask for one image");
  p->add_option("--checkpoint", checkpoint)->required();
  p->add_option("--image", image)->required();
  p->add_option("--out-prob", out_prob, "16-bit PGM")->required();
  p->add_option("--out-mask", out_mask, "8-bit PGM thresholded at 0.5")->required();

  fs::path pred_dir, gt_dir, fov_dir, out_dir;
  auto* e = app.add_subcommand("eval", "Score prediction PGMs against ground truth");
  e->add_option("--pred", pred_dir)->required();
  e->add_option("--gt", gt_dir)->required();
  auto* e_fov = e->add_option("--fov", fov_dir);
  e->add_option("--out-dir", out_dir)->required();

  fs::path layers, rf_config;
  auto* r = app.add_subcommand("rf-analyze", "Receptive field of a layer stack or model config");
  auto* r_layers = r->add_option("layers", layers, "Layer-stack file (kind k s r per line)");
  auto* r_config = r->add_option("--config", rf_config, "Run config; analyses the encoder path");
  r_layers->excludes(r_config);

  std::uint64_t seed = 0;
  int n = 4, h = 64, w = 64, n_test = 0;
  fs::path synth_out;
  auto* s = app.add_subcommand("synth", "Write a synthetic image/mask set with a manifest");
  s->set_help_flag("--help", "Print this help message and exit");
  s->add_option("--seed", seed);
  s->add_option("--n", n);
  s->add_option("--h", h);
  s->add_option("--w", w);
  s->add_option("--test", n_test, "Tag the last n samples as test");
  s->add_option("--out", synth_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::cerr << "error: invalid_argument: " << ex.what() << '\n';
    return 1;
  }

  try {
    if (*t) {
      if (*t_manifest) train.manifest = manifest;
      if (*t_synth) train.synth = synth_n;
      if (!loss_csv.empty()) train.loss_csv = loss_csv;
      dnet::cli::cmd_train(train, std::cout);
    } else if (*p) {
      dnet::cli::cmd_predict(checkpoint, image, out_prob, out_mask);
    } else if (*e) {
      dnet::cli::cmd_eval(pred_dir, gt_dir, *e_fov ? std::optional(fov_dir) : std::nullopt, out_dir,
                          std::cerr);
    } else if (*r) {
      dnet::cli::cmd_rf_analyze(*r_layers ? std::optional(layers) : std::nullopt,
                                *r_config ? std::optional(rf_config) : std::nullopt, std::cout);
    } else if (*s) {
      dnet::cli::cmd_synth(seed, n, h, w, synth_out, n_test);
    }
  } catch (const dnet::Error& ex) {
    std::cerr << "error: " << dnet::to_string(ex.code()) << ": " << ex.what() << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& ex) {
    std::cerr << "error: io: " << ex.what() << '\n';
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << "error: internal: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
