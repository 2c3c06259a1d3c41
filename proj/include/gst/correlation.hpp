#pragma once

#include <Eigen/Core>

#include "gst/error.hpp"
#include "gst/features.hpp"

namespace gst {

/// Dense correlation between every content position and every style position.
/// `values(p, q)` correlates content position p = j * W + i with style
/// position q = l * W + k. Read as a feature map, rows are (W*H) channels
/// over the style grid, the layout the warp regressor consumes.
struct CorrelationTensor {
  int grid_w = 0;
  int grid_h = 0;
  Eigen::MatrixXf values;

  /// C[i,j,k,l]: content (i,j) against style (k,l), x before y.
  [[nodiscard]] float at(int i, int j, int k, int l) const {
    return values(Eigen::Index(j) * grid_w + i, Eigen::Index(l) * grid_w + k);
  }
  [[nodiscard]] nn::FeatureMap as_feature_map() const { return nn::FeatureMap(grid_h, grid_w, values); }
};

/// Positive part of the inner products between unit feature vectors.
template <typename DerivedA, typename DerivedB>
Eigen::Matrix<typename DerivedA::Scalar, Eigen::Dynamic, Eigen::Dynamic> correlate(const Eigen::MatrixBase<DerivedA>& content,
                                                                                const Eigen::MatrixBase<DerivedB>& style) {
  if (content.rows() != style.rows() || content.cols() != style.cols())
    throw ArgumentError("correlate: geometric feature maps differ in shape");
  return (content.transpose() * style).cwiseMax(typename DerivedA::Scalar(0));
}

inline CorrelationTensor correlate(const GeoFeatureMap& content, const GeoFeatureMap& style) {
  if (!content.map.same_shape(style.map)) throw ArgumentError("correlate: geometric feature maps differ in shape");
  return {content.grid_w(), content.grid_h(), correlate(content.map.data, style.map.data)};
}

}  // namespace gst
