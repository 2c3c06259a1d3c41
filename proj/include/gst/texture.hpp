#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gst/features.hpp"
#include "gst/image.hpp"

namespace gst {

enum class PixelOptimizer { adam, lbfgs };

PixelOptimizer parse_pixel_optimizer(std::string_view s);

struct TransferConfig {
  /// Weight of each texture tap, conv1_1 .. conv5_1.
  std::array<double, 5> layer_weights = {0.2, 0.2, 0.2, 0.2, 0.2};
  /// Ratio of the texture weight to the content weight; the content weight is 1.
  double alpha_over_beta = 5e-3;
  int pyramid_levels = 3;
  /// Iterations per pyramid level, finest level first.
  std::vector<int> iterations_per_level = {100, 200, 300};
  PixelOptimizer optimizer = PixelOptimizer::adam;
  /// Adam step on [0,1] pixel values.
  double step_size = 0.02;
  /// L-BFGS history length.
  int lbfgs_history = 10;
  std::uint64_t seed = 0;

  /// Throws ArgumentError when weights or ratio are out of range.
  void validate() const;
  [[nodiscard]] int iterations_for_level(int level) const;
};

/// 0.5 * mean squared difference of two conv4_2 maps.
template <typename Scalar>
double content_loss(const ContentFeaturesT<Scalar>& target, const ContentFeaturesT<Scalar>& out);

/// 0.5 * sum_l w_l * mean squared difference of the layer-l Gram matrices.
template <typename Scalar>
double texture_loss(const GramSetT<Scalar>& style, const GramSetT<Scalar>& out, const std::array<double, 5>& weights);

struct LossTerms {
  double total = 0;
  double texture = 0;
  double content = 0;
};

/// Fixed targets of one optimization problem: the style Grams and the
/// content features.
template <typename Scalar>
struct TransferTargetsT {
  GramSetT<Scalar> style_grams;
  ContentFeaturesT<Scalar> content;

  static TransferTargetsT from_images(const FeatureExtractor& fx, const ImageT<Scalar>& style, const ImageT<Scalar>& content) {
    return {fx.extract_texture(style), fx.extract_content(content)};
  }
};
using TransferTargets = TransferTargetsT<float>;

/// alpha * texture + content for the output image.
template <typename Scalar>
LossTerms total_loss(const FeatureExtractor& fx, const TransferTargetsT<Scalar>& targets, const ImageT<Scalar>& out,
                     const TransferConfig& cfg);
LossTerms total_loss(const FeatureExtractor& fx, const Image& style, const Image& content, const Image& out,
                     const TransferConfig& cfg);

template <typename Scalar>
struct LossAndGradientT {
  LossTerms loss;
  ImageT<Scalar> gradient;  // d(total)/d(pixel), same layout as the image
};
using LossAndGradient = LossAndGradientT<float>;

template <typename Scalar>
LossAndGradientT<Scalar> total_loss_and_gradient(const FeatureExtractor& fx, const TransferTargetsT<Scalar>& targets,
                                                 const ImageT<Scalar>& out, const TransferConfig& cfg);

struct IterationRecord {
  int level = 0;
  int iteration = 0;
  LossTerms loss;
};

struct LevelResult {
  Image image;
  /// Loss at each iterate before its step; one entry per step taken.
  std::vector<IterationRecord> log;
  LossTerms initial;
  LossTerms final;
};

/// Called after every optimizer step with the record of that step.
using IterationCallback = std::function<void(const IterationRecord&)>;

LevelResult optimize_level(const FeatureExtractor& fx, const Image& init, const Image& style, const Image& content,
                           int iterations, const TransferConfig& cfg, int level = 0,
                           const IterationCallback& on_iteration = {});

struct TransferResult {
  Image image;
  /// One entry per pyramid level, coarsest first.
  std::vector<LevelResult> levels;
};

TransferResult multiscale_transfer(const FeatureExtractor& fx, const Image& content_warped, const Image& style,
                                   const TransferConfig& cfg, const IterationCallback& on_iteration = {});

}  // namespace gst
