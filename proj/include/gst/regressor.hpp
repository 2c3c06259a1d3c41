#pragma once

// Regression network mapping a correlation tensor to warp parameters, its
// checkpoint format, and the affine -> TPS estimation cascade.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gst/correlation.hpp"
#include "gst/features.hpp"
#include "gst/nn.hpp"
#include "gst/transforms.hpp"

namespace gst {

/// Parameters of either transform family.
struct WarpParams {
  WarpKind kind = WarpKind::affine;
  Eigen::VectorXd values = Affine::identity().theta;

  static WarpParams identity(WarpKind k);
  static WarpParams from(const Affine& a) { return {WarpKind::affine, a.theta}; }
  static WarpParams from(const Tps& t) { return {WarpKind::tps, t.offsets}; }
  [[nodiscard]] Affine affine() const;
  [[nodiscard]] Tps tps() const;
  /// Where the transform sends each column of `pts`.
  [[nodiscard]] Points<double> apply(const Points<double>& pts) const;
};

/// Layer sizes of the regressor. The correlation enters as (W*H) channels
/// over the W x H style grid.
struct RegressorArch {
  /// Standardize every style position's correlation column before the first layer.
  bool normalize_input = false;
  /// Softmax over content positions of every style column at this
  /// temperature, applied before normalize_input; 0 disables it.
  double match_temperature = 0.0;
  int kernel1 = 7;
  int channels1 = 128;
  int kernel2 = 5;
  int channels2 = 64;
  /// Channels of an optional 1x1 projection in front of the dense head; 0 disables it.
  int reduce_channels = 0;

  [[nodiscard]] std::string describe() const;
  bool operator==(const RegressorArch&) const = default;
};

class Regressor {
 public:
  Regressor() = default;
  /// Freshly initialized network whose output is the identity transform for
  /// every input: the dense head starts with zero weights and identity bias.
  static Regressor create(WarpKind kind, int grid_w, int grid_h, std::uint64_t seed, const RegressorArch& arch = {});

  [[nodiscard]] WarpKind kind() const { return kind_; }
  [[nodiscard]] int param_count() const { return gst::param_count(kind_); }
  [[nodiscard]] int grid_w() const { return grid_w_; }
  [[nodiscard]] int grid_h() const { return grid_h_; }
  [[nodiscard]] const RegressorArch& arch() const { return arch_; }
  /// True once the weights came from training or a checkpoint.
  [[nodiscard]] bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  /// Evaluation-mode forward pass; uses the running normalization statistics.
  [[nodiscard]] WarpParams predict(const CorrelationTensor& c) const;

  /// Gradients of the trainable tensors, flattened, in parameters() order.
  struct Gradients {
    std::vector<Eigen::VectorXf> blocks;
  };
  struct BatchCache;
  /// Training-mode forward over a batch; returns p x B predictions and
  /// updates the normalization running statistics.
  Eigen::MatrixXf forward_train(const std::vector<const CorrelationTensor*>& batch, BatchCache& cache);
  /// Gradients of the loss for upstream d(loss)/d(predictions), p x B.
  [[nodiscard]] Gradients backward(const BatchCache& cache, const Eigen::MatrixXf& grad_out) const;

  /// Views of the trainable tensors, matching Gradients::blocks.
  std::vector<std::span<float>> parameters();
  [[nodiscard]] std::size_t parameter_count() const;
  /// Hex FNV-1a over every weight and running statistic.
  [[nodiscard]] std::string digest() const;

  /// Writes `path` (weights) and `path` + ".meta" (key = value metadata).
  void save(const std::filesystem::path& path, const std::string& config_digest = "",
            const std::string& prior_digest = "") const;
  /// Loads and validates a checkpoint. When `expect_kind` is given, a
  /// checkpoint of the other kind is rejected.
  static Regressor load(const std::filesystem::path& path, std::optional<WarpKind> expect_kind = std::nullopt);
  static std::filesystem::path metadata_path(const std::filesystem::path& path);
  /// Reads the metadata sidecar as a key/value map.
  static std::map<std::string, std::string> read_metadata(const std::filesystem::path& path);

 private:
  [[nodiscard]] nn::FeatureMap prepare(const CorrelationTensor& c) const;
  void check_input(const CorrelationTensor& c) const;

  WarpKind kind_ = WarpKind::affine;
  int grid_w_ = 0;
  int grid_h_ = 0;
  RegressorArch arch_;
  bool trained_ = false;
  nn::Conv2d conv1_, conv2_, reduce_;
  nn::BatchNorm bn1_, bn2_;
  nn::Linear head_;
};

struct Regressor::BatchCache {
  std::vector<nn::FeatureMap> input, act1, act2, reduced;
  nn::BatchNorm::Cache bn1, bn2;
};

/// Affine and TPS stages of one estimate; the rendering field is
/// affine(tps(x)).
struct WarpEstimate {
  Affine affine = Affine::identity();
  Tps tps = Tps::identity();
};

/// Correlation of two images at the analysis resolution.
CorrelationTensor correlate_images(const FeatureExtractor& fx, const Image& content, const Image& style);

/// Cascade: predicts the affine map from the analysis-resolution correlation,
/// warps the content by it, then predicts the TPS refinement from the
/// re-correlated pair. With no TPS stage the refinement is the identity.
/// Throws StateError for untrained or wrong-kind regressors.
WarpEstimate estimate_warp(const FeatureExtractor& fx, const Image& content, const Image& style, const Regressor& affine,
                           const Regressor* tps);

}  // namespace gst
