#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gst/image.hpp"
#include "gst/nn.hpp"

namespace gst {

/// Stages of the 19-layer VGG feature stack, in execution order. Every conv
/// stage reports its post-ReLU activation.
enum class VggStage : int {
  conv1_1, conv1_2, pool1,
  conv2_1, conv2_2, pool2,
  conv3_1, conv3_2, conv3_3, conv3_4, pool3,
  conv4_1, conv4_2, conv4_3, conv4_4, pool4,
  conv5_1, conv5_2, conv5_3, conv5_4, pool5,
};

inline constexpr int kVggStageCount = 21;
inline constexpr int kVggConvCount = 16;

std::string_view stage_name(VggStage s);
std::optional<VggStage> parse_stage(std::string_view name);

/// Texture taps, in order.
inline constexpr std::array<VggStage, 5> kTextureStages = {VggStage::conv1_1, VggStage::conv2_1, VggStage::conv3_1,
                                                           VggStage::conv4_1, VggStage::conv5_1};
inline constexpr VggStage kContentStage = VggStage::conv4_2;
inline constexpr VggStage kGeometricStage = VggStage::pool4;

/// Frozen VGG-19 convolutional stack. Immutable after construction; all
/// methods are const and may be called concurrently.
class Vgg19 {
 public:
  /// Seeded He initialization with zero-mean filters, used when no pretrained
  /// weights file is given.
  static Vgg19 seeded(std::uint64_t seed);
  /// Loads the binary weights file written by tools/export_vgg19_weights.py.
  static Vgg19 load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Activations kept by a forward pass. `outputs[s]` is set for every stage
  /// up to the deepest requested one when tracing, otherwise only for the
  /// requested stages.
  template <typename Scalar>
  struct TraceT {
    nn::FeatureMapT<Scalar> input;
    std::array<std::optional<nn::FeatureMapT<Scalar>>, kVggStageCount> outputs;
    [[nodiscard]] const nn::FeatureMapT<Scalar>& at(VggStage s) const {
      const auto& o = outputs[static_cast<int>(s)];
      if (!o) throw StateError("backbone trace has no activation for " + std::string(stage_name(s)));
      return *o;
    }
  };
  using Trace = TraceT<float>;

  /// Runs the network on an image already normalized for the backbone.
  template <typename Scalar>
  [[nodiscard]] TraceT<Scalar> forward(const ImageT<Scalar>& normalized, std::span<const VggStage> wanted,
                                       bool keep_all = false) const;

  /// Back-propagates gradients injected at `grads` (stage -> dL/d activation)
  /// to the normalized input image. `trace` must come from forward(keep_all=true).
  template <typename Scalar>
  [[nodiscard]] ImageT<Scalar> backward(const TraceT<Scalar>& trace,
                                        const std::map<VggStage, nn::FeatureMapT<Scalar>>& grads) const;

  [[nodiscard]] int channels(VggStage s) const;
  [[nodiscard]] const std::array<nn::Conv2d, kVggConvCount>& convs() const { return convs_; }
  /// Hex FNV-1a digest over all weights and biases.
  [[nodiscard]] std::string digest() const;

 private:
  Vgg19();
  std::array<nn::Conv2d, kVggConvCount> convs_;
};

template <typename Scalar>
nn::FeatureMapT<Scalar> to_feature_map(const ImageT<Scalar>& img) {
  return nn::FeatureMapT<Scalar>(img.height, img.width, typename nn::FeatureMapT<Scalar>::Matrix(img.pixels));
}

}  // namespace gst
