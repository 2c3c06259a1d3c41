#include "gst/features.hpp"

namespace gst {
namespace {

template <typename Scalar>
void check_input(const ImageT<Scalar>& img) {
  if (img.height < kMinImageSide || img.width < kMinImageSide)
    throw ArgumentError("image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                        " is below the " + std::to_string(kMinImageSide) + " px minimum");
}

template <typename Scalar>
GramSetT<Scalar> grams_from(const Vgg19::TraceT<Scalar>& trace) {
  GramSetT<Scalar> set;
  for (std::size_t l = 0; l < kTextureStages.size(); ++l) set.grams[l] = gram_matrix(trace.at(kTextureStages[l]).data);
  return set;
}

}  // namespace

template <typename Scalar>
ContentFeaturesT<Scalar> FeatureExtractor::extract_content(const ImageT<Scalar>& img) const {
  check_input(img);
  const VggStage wanted[] = {kContentStage};
  auto trace = backbone_->forward(normalize_for_backbone(img), wanted);
  return {trace.at(kContentStage)};
}

template <typename Scalar>
GramSetT<Scalar> FeatureExtractor::extract_texture(const ImageT<Scalar>& img) const {
  check_input(img);
  return grams_from(backbone_->forward(normalize_for_backbone(img), kTextureStages));
}

template <typename Scalar>
std::pair<ContentFeaturesT<Scalar>, GramSetT<Scalar>> FeatureExtractor::extract_content_and_texture(
    const ImageT<Scalar>& img) const {
  check_input(img);
  const VggStage wanted[] = {VggStage::conv1_1, VggStage::conv2_1, VggStage::conv3_1,
                             VggStage::conv4_1, VggStage::conv4_2, VggStage::conv5_1};
  auto trace = backbone_->forward(normalize_for_backbone(img), wanted);
  return {ContentFeaturesT<Scalar>{trace.at(kContentStage)}, grams_from(trace)};
}

#define GST_FEATURES_INSTANTIATE(S)                                                                   \
  template ContentFeaturesT<S> FeatureExtractor::extract_content(const ImageT<S>&) const;           \
  template GramSetT<S> FeatureExtractor::extract_texture(const ImageT<S>&) const;                   \
  template std::pair<ContentFeaturesT<S>, GramSetT<S>> FeatureExtractor::extract_content_and_texture( \
      const ImageT<S>&) const;
GST_FEATURES_INSTANTIATE(float)
GST_FEATURES_INSTANTIATE(double)
#undef GST_FEATURES_INSTANTIATE

GeoFeatureMap FeatureExtractor::extract_geometric(const Image& img) const {
  check_input(img);
  const Image analysis = (img.width == kAnalysisSize && img.height == kAnalysisSize)
                             ? img
                             : resize(img, kAnalysisSize, kAnalysisSize);
  const VggStage wanted[] = {kGeometricStage};
  auto trace = backbone_->forward(normalize_for_backbone(analysis), wanted);
  GeoFeatureMap geo{trace.at(kGeometricStage)};
  normalize_columns(geo.map.data);
  return geo;
}

}  // namespace gst
