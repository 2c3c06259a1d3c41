#pragma once

#include <Eigen/Core>

#include <array>
#include <memory>

#include "gst/backbone.hpp"
#include "gst/image.hpp"
#include "gst/nn.hpp"

namespace gst {

/// conv4_2 activations of one image.
template <typename Scalar>
struct ContentFeaturesT {
  nn::FeatureMapT<Scalar> map;
};
using ContentFeatures = ContentFeaturesT<float>;

/// Gram matrices at the five texture taps (conv1_1 ... conv5_1).
template <typename Scalar>
struct GramSetT {
  std::array<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>, 5> grams;
  [[nodiscard]] int layer_dim(int l) const { return static_cast<int>(grams[l].rows()); }
};
using GramSet = GramSetT<float>;

/// pool4 activations with every position's channel vector scaled to unit
/// length (or left at zero when the activations there are all zero).
struct GeoFeatureMap {
  nn::FeatureMap map;
  [[nodiscard]] int grid_w() const { return map.width; }
  [[nodiscard]] int grid_h() const { return map.height; }
};

/// Channel Gram matrix of a channels x positions map, divided by the number
/// of positions: D = F F^T / (W H).
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> gram_matrix(const Eigen::MatrixBase<Derived>& fmap) {
  using Scalar = typename Derived::Scalar;
  using Result = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (fmap.cols() < 1) throw ArgumentError("gram_matrix: feature map has no positions");
  Result g = Result::Zero(fmap.rows(), fmap.rows());
  g.template selfadjointView<Eigen::Lower>().rankUpdate(fmap.derived());
  Result full = g.template selfadjointView<Eigen::Lower>();
  return full / Scalar(fmap.cols());
}

/// Scales each column of a channels x positions map to unit L2 norm; all-zero
/// columns stay zero.
template <typename Derived>
void normalize_columns(Eigen::MatrixBase<Derived>& fmap) {
  for (Eigen::Index j = 0; j < fmap.cols(); ++j) {
    const auto n = fmap.col(j).norm();
    if (n > 0) fmap.col(j) /= n;
  }
}

/// Side of the fixed square analysis resolution for geometric features.
inline constexpr int kAnalysisSize = 240;

/// Feature extraction over a shared, frozen backbone. Inputs are plain [0,1]
/// RGB images; backbone normalization is applied internally.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(std::shared_ptr<const Vgg19> backbone) : backbone_(std::move(backbone)) {}

  template <typename Scalar>
  [[nodiscard]] ContentFeaturesT<Scalar> extract_content(const ImageT<Scalar>& img) const;
  template <typename Scalar>
  [[nodiscard]] GramSetT<Scalar> extract_texture(const ImageT<Scalar>& img) const;
  /// Content and texture features from a single forward pass.
  template <typename Scalar>
  [[nodiscard]] std::pair<ContentFeaturesT<Scalar>, GramSetT<Scalar>> extract_content_and_texture(const ImageT<Scalar>& img) const;
  /// Resizes to the analysis resolution when needed, then reads pool4.
  [[nodiscard]] GeoFeatureMap extract_geometric(const Image& img) const;

  [[nodiscard]] const Vgg19& backbone() const { return *backbone_; }
  [[nodiscard]] std::shared_ptr<const Vgg19> backbone_ptr() const { return backbone_; }

 private:
  std::shared_ptr<const Vgg19> backbone_;
};

}  // namespace gst
