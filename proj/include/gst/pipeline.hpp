#pragma once

// End-to-end jobs: warp estimation, rendering onto the style canvas,
// multi-scale texture transfer, and regressor training from a corpus.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "gst/regressor.hpp"
#include "gst/texture.hpp"
#include "gst/training.hpp"

namespace gst {

enum class WarpMode { none, affine, tps };
WarpMode parse_warp_mode(std::string_view s);
std::string_view to_string(WarpMode m);

/// Where the backbone weights come from: a converted weights file, or the
/// seeded initialization when no file is given.
struct BackboneSpec {
  std::filesystem::path weights;
  std::uint64_t seed = 0;

  [[nodiscard]] FeatureExtractor make_extractor() const;
};

struct JobSpec {
  std::filesystem::path content_path;
  /// Texture style; also the output canvas.
  std::filesystem::path style_path;
  /// Geometry style; the texture style when unset.
  std::optional<std::filesystem::path> geometry_style_path;
  std::filesystem::path output_path;
  WarpMode warp_mode = WarpMode::tps;
  std::filesystem::path affine_checkpoint;
  std::filesystem::path tps_checkpoint;
  TransferConfig transfer;
  BackboneSpec backbone;
  /// When set, receives warped_content.png, level_<k>.png and warp.txt.
  std::filesystem::path intermediates_dir;
  /// When set, receives one `level,iter,total,texture,content` line per step.
  std::filesystem::path loss_log_path;

  [[nodiscard]] const std::filesystem::path& geometry_style() const {
    return geometry_style_path ? *geometry_style_path : style_path;
  }
  /// Throws ArgumentError for missing paths and StateError when the warp
  /// mode lacks a checkpoint it needs.
  void validate() const;
};

struct TransferReport {
  std::filesystem::path output;
  WarpEstimate warp;
  /// Content rendered onto the style canvas; the coarsest-level initialization.
  Image warped_content;
  TransferResult result;
};

/// Runs a job and keeps every intermediate.
TransferReport run_transfer_report(const JobSpec& job, const IterationCallback& on_iteration = {});
/// Runs a job; returns the written output path.
std::filesystem::path run_transfer(const JobSpec& job);

/// Content rendered through affine(tps(x)) onto a style_h x style_w canvas.
Image render_warped_content(const Image& content, const WarpEstimate& warp, int style_h, int style_w);

struct TrainJob {
  WarpKind kind = WarpKind::affine;
  /// Directory of training images; ignored when `synthetic_count` > 0.
  std::filesystem::path corpus_dir;
  /// Number of procedural images to train on instead of a corpus directory.
  int synthetic_count = 0;
  std::filesystem::path out_checkpoint;
  /// Frozen affine stage, required for TPS training.
  std::filesystem::path affine_checkpoint;
  TrainConfig config;
  BackboneSpec backbone;

  void validate() const;
};

/// Trains and writes the checkpoint plus its metadata; returns the checkpoint path.
std::filesystem::path run_train(const TrainJob& job, const BatchCallback& on_batch = {});

/// `key = value` lines; `#` starts a comment; blank lines are ignored.
using KeyValues = std::map<std::string, std::string>;
KeyValues read_config_file(const std::filesystem::path& path);
KeyValues parse_config(std::string_view text);

/// Apply recognized keys; unknown keys raise ConfigError.
void apply_config(const KeyValues& kv, JobSpec& job);
void apply_config(const KeyValues& kv, TrainJob& job);

/// "300,200,100" -> {300, 200, 100}.
std::vector<int> parse_int_list(std::string_view s);

}  // namespace gst
