#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>

namespace dnet::cli {

namespace fs = std::filesystem;

struct TrainArgs {
  fs::path config;
  std::optional<fs::path> manifest;  // uses the train split
  std::optional<int> synth;          // n synthetic images instead of a manifest
  int synth_size = 64;
  fs::path out;                      // checkpoint
  std::optional<fs::path> loss_csv;
  long log_every = 100;
};

/// Trains from a run config; weights are initialised from its seed.
void cmd_train(const TrainArgs& args, std::ostream& log);

/// Probability map as 16-bit PGM and mask thresholded at 0.5 as 8-bit PGM.
void cmd_predict(const fs::path& checkpoint, const fs::path& image, const fs::path& out_prob,
                 const fs::path& out_mask);

/// Matches `*.pgm` files by name across the directories, pools all pixels
/// and writes metrics.csv, roc.csv and pr.csv into `out_dir`.
void cmd_eval(const fs::path& pred_dir, const fs::path& gt_dir,
              const std::optional<fs::path>& fov_dir, const fs::path& out_dir, std::ostream& log);

/// RF table and coverage verdict for a layer-stack file, or for the encoder
/// path of a run config.
void cmd_rf_analyze(const std::optional<fs::path>& layers, const std::optional<fs::path>& config,
                    std::ostream& out);

/// Writes image_###.ppm, mask_###.pgm and manifest.txt; the last `n_test`
/// samples are tagged test.
void cmd_synth(std::uint64_t seed, int n, int h, int w, const fs::path& out_dir, int n_test = 0);

}  // namespace dnet::cli
