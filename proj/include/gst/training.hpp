#pragma once

// Self-supervised training of warp regressors from synthetic warps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "gst/features.hpp"
#include "gst/image.hpp"
#include "gst/regressor.hpp"
#include "gst/transforms.hpp"

namespace gst {

struct AffineRanges {
  double translation = 0.25;
  double rotation_deg = 30.0;
  double scale_min = 0.75;
  double scale_max = 1.25;
  double shear = 0.15;
};

struct TransformSampler {
  WarpKind kind = WarpKind::affine;
  AffineRanges affine;
  /// Half-width of the uniform range of every TPS control offset.
  double tps_offset = 0.4;
  std::uint64_t seed = 0;
  /// Minimum fraction of the unit square that must land inside [-1.3, 1.3]^2.
  double min_inside = 0.6;
  double inside_bound = 1.3;

  /// Draw `index` of this sampler's stream; the same (seed, index) always
  /// gives the same transform. Throws ConfigError after 100 consecutive
  /// rejections.
  [[nodiscard]] WarpParams sample(std::uint64_t index) const;
};

/// Fraction of a 20x20 lattice over [-1,1]^2 that `p` sends inside [-bound, bound]^2.
double fraction_inside(const WarpParams& p, double bound);

enum class AugmentPolicy { none, jitter, style_bank };
AugmentPolicy parse_augment_policy(std::string_view s);
std::string_view to_string(AugmentPolicy p);

struct JitterRanges {
  double color_shift = 0.15;
  double contrast_min = 0.7;
  double contrast_max = 1.3;
  double noise_sigma_max = 0.05;
};

/// Draws one color shift, one contrast factor and one noise level, then
/// applies them to every pixel and clamps to [0,1].
Image jitter(const Image& img, std::mt19937_64& rng, const JitterRanges& ranges = {});

/// Precomputed stylized renditions keyed by corpus image name.
class StyleBank {
 public:
  StyleBank() = default;
  /// Loads every `<name>__*.png|jpg` file in `dir`, grouped by `<name>`.
  static StyleBank load(const std::filesystem::path& dir);
  void add(const std::string& name, Image rendition);
  [[nodiscard]] bool empty() const { return bank_.empty(); }
  [[nodiscard]] const Image& pick(const std::string& name, std::mt19937_64& rng) const;

 private:
  std::map<std::string, std::vector<Image>> bank_;
};

/// none: the image; jitter: jitter(); style_bank: a stored rendition of the
/// named image (StateError when there is no bank or no rendition).
Image texture_augment(const Image& img, AugmentPolicy policy, std::mt19937_64& rng, const StyleBank* bank = nullptr,
                      const std::string& name = "");

struct TrainingPair {
  Image a;
  Image b;
  WarpParams truth;
};

/// Samples the truth for `index`, renders b = augment(warp(a, truth)). With
/// the style_bank policy the rendition is chosen first and then warped.
TrainingPair make_training_pair(const Image& a, const TransformSampler& sampler, std::uint64_t index, AugmentPolicy policy,
                                std::mt19937_64& rng, const StyleBank* bank = nullptr, const std::string& name = "");

/// Mean over the grid of the squared distance between where the two
/// transforms send each point.
double grid_loss(const WarpParams& pred, const WarpParams& truth, const Points<double>& grid = uniform_grid());
/// Mean (unsquared) point distance; the evaluation metric.
double grid_error(const WarpParams& pred, const WarpParams& truth, const Points<double>& grid = uniform_grid());
/// d grid_loss / d pred.values.
Eigen::VectorXd grid_loss_gradient(const WarpParams& pred, const WarpParams& truth, const Points<double>& grid = uniform_grid());

/// Loss of the cascade affine(tps(x)) against the truth, and its gradient
/// with respect to the TPS offsets.
double cascade_grid_loss(const Affine& affine, const Tps& tps, const WarpParams& truth, const Points<double>& grid = uniform_grid());
double cascade_grid_error(const Affine& affine, const Tps& tps, const WarpParams& truth,
                          const Points<double>& grid = uniform_grid());
Eigen::VectorXd cascade_grid_loss_gradient(const Affine& affine, const Tps& tps, const WarpParams& truth,
                                           const Points<double>& grid = uniform_grid());

struct TrainConfig {
  int batch_size = 8;
  double learning_rate = 1e-3;
  int image_size = 240;
  int grid_points = 20;
  int epochs = 10;
  /// Fresh synthetic pairs drawn per image and epoch.
  int pairs_per_image = 1;
  /// Fraction of the corpus held out for checkpoint selection.
  double validation_fraction = 0.1;
  AugmentPolicy augment = AugmentPolicy::jitter;
  /// Renditions used by the style_bank policy.
  std::filesystem::path style_bank_dir;
  TransformSampler sampler;
  RegressorArch arch;
  std::uint64_t seed = 0;
  /// Best-by-validation checkpoint, rewritten whenever validation improves.
  std::filesystem::path checkpoint_path;
  std::filesystem::path log_path;

  void validate() const;
  /// Stable hash of every field that affects the trained weights.
  [[nodiscard]] std::string digest() const;
};

/// A corpus of training images at the training resolution.
struct Corpus {
  std::vector<std::string> names;
  std::vector<Image> images;

  [[nodiscard]] std::size_t size() const { return images.size(); }
  /// Loads every PNG/JPEG in `dir` (sorted by name), center-cropped and resized to `size`.
  static Corpus load(const std::filesystem::path& dir, int size = 240);
  void save(const std::filesystem::path& dir) const;
};

/// Procedural photo stand-ins: smooth color fields overlaid with textured
/// ellipses, boxes and diamonds.
Image synthetic_image(int size, std::mt19937_64& rng);
Corpus synthetic_corpus(int count, int size, std::uint64_t seed);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double validation_loss = 0;
  double validation_error = 0;
};

struct TrainResult {
  Regressor regressor;  // best-by-validation weights
  std::vector<EpochStats> epochs;
  double first_batch_loss = 0;
  int best_epoch = -1;
};

/// Called after every optimizer step with (epoch, batch, loss).
using BatchCallback = std::function<void(int, int, double)>;

/// Trains a regressor of `kind`. TPS training needs a trained affine
/// regressor: every TPS input is correlated against the affine-prewarped
/// image and the loss is measured through the cascade.
TrainResult train(const FeatureExtractor& fx, const Corpus& corpus, const TrainConfig& cfg, WarpKind kind,
                  const Regressor* prior_affine = nullptr, const BatchCallback& on_batch = {});

}  // namespace gst
