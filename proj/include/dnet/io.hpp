#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dnet/model.hpp"
#include "dnet/synth.hpp"
#include "dnet/tensor.hpp"
#include "dnet/train.hpp"

namespace dnet::io {

/// Binary portable anymap: P5 (one channel) or P6 (three channels). Values
/// are scaled to [0, 1] by maxval; 16-bit samples are big-endian.
/// P5 accepts any maxval in [1, 65535]; P6 only 255 or 65535.
Tensor<float> read_pnm(std::istream& in, const std::string& what = "image");
Tensor<float> read_pnm(const std::filesystem::path& path);

/// Writes a 1 x H x W x C tensor (C = 1 -> P5, C = 3 -> P6) with values
/// clamped to [0, 1] and rounded to the nearest level. maxval is 255 or 65535.
void write_pnm(std::ostream& out, const Tensor<float>& image, int maxval);
void write_pnm(const std::filesystem::path& path, const Tensor<float>& image, int maxval);

/// Probability maps are stored as 16-bit P5, masks as 8-bit P5 with 0/255.
void write_probability(const std::filesystem::path& path, const Tensor<float>& prob);
void write_mask(const std::filesystem::path& path, const Tensor<float>& mask);

struct RunConfig {
  DNetConfig model;
  TrainConfig train;
};

/// `key = value` lines; `#` starts a comment. Keys: d1 d2 d3 msif (on/off)
/// msif_rates (a,b,c) lr power max_iter batch lambda beta seed channels_scale
/// (`1/8` or `0.125`). Unknown or repeated keys are rejected; the result is
/// validated.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string format_run_config(const RunConfig& cfg);

struct ManifestEntry {
  std::string split;  // train or test
  std::filesystem::path image;
  std::filesystem::path mask;
  std::optional<std::filesystem::path> fov;
};

/// `split image mask [fov]` per line; relative paths resolve against `base`.
std::vector<ManifestEntry> parse_manifest(const std::string& text,
                                          const std::filesystem::path& base);
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);

/// Decodes the entries of one split (all entries when `split` is empty) and
/// checks that image, mask and fov extents agree.
Dataset load_dataset(const std::vector<ManifestEntry>& entries, const std::string& split = "");

/// Magic `DNET1`, the config as little-endian int32 fields, a parameter
/// count, then per tensor: name length, name, 4 dims, float32 data.
void save_checkpoint(std::ostream& out, const DNet<float>& model);
void save_checkpoint(const std::filesystem::path& path, const DNet<float>& model);
DNet<float> load_checkpoint(std::istream& in);
DNet<float> load_checkpoint(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);

}  // namespace dnet::io
