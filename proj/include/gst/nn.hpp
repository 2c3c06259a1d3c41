#pragma once

// Minimal dense network layers with hand-written backward passes. Every
// activation is a FeatureMap: a channels x (H*W) float matrix whose column
// `y * W + x` is the channel vector at spatial position (x, y).

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <vector>

#include "gst/error.hpp"

namespace gst::nn {

template <typename Scalar>
struct FeatureMapT {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  int channels = 0;
  int height = 0;
  int width = 0;
  Matrix data;

  FeatureMapT() = default;
  FeatureMapT(int c, int h, int w) : channels(c), height(h), width(w), data(Matrix::Zero(c, Eigen::Index(h) * w)) {}
  FeatureMapT(int h, int w, Matrix d) : channels(static_cast<int>(d.rows())), height(h), width(w), data(std::move(d)) {}

  [[nodiscard]] Eigen::Index positions() const { return Eigen::Index(height) * width; }
  [[nodiscard]] bool same_shape(const FeatureMapT& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  template <typename Other>
  [[nodiscard]] FeatureMapT<Other> cast() const {
    return FeatureMapT<Other>(height, width, data.template cast<Other>());
  }
};

using FeatureMap = FeatureMapT<float>;

/// Square-kernel convolution, stride 1, zero "same" padding of kernel / 2.
/// Weights are laid out as out x (kernel * kernel * in) with the input
/// channel varying fastest, then kx, then ky.
struct Conv2d {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  Eigen::MatrixXf weight;
  Eigen::VectorXf bias;

  Conv2d() = default;
  Conv2d(int in, int out, int k);

  /// Weights are kept in float; double inputs run the layer in double.
  template <typename Scalar>
  [[nodiscard]] FeatureMapT<Scalar> forward(const FeatureMapT<Scalar>& input) const;

  struct Grad {
    Eigen::MatrixXf weight;
    Eigen::VectorXf bias;
  };
  /// Returns d(loss)/d(input). Accumulates parameter gradients into `grad`
  /// when it is non-null; skips the input gradient when `need_input` is false.
  template <typename Scalar>
  FeatureMapT<Scalar> backward(const FeatureMapT<Scalar>& input, const FeatureMapT<Scalar>& grad_out, Grad* grad,
                               bool need_input = true) const;

  /// Gaussian weights with He scaling, zero bias. With `center`, every
  /// filter is shifted to have zero mean over its taps.
  void init_he(std::mt19937_64& rng, bool center = false);
};

template <typename Scalar>
FeatureMapT<Scalar> relu(const FeatureMapT<Scalar>& x);
/// Masks `grad` by the positive part of the ReLU *output*.
template <typename Scalar>
FeatureMapT<Scalar> relu_backward(const FeatureMapT<Scalar>& output, const FeatureMapT<Scalar>& grad);

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
template <typename Scalar>
FeatureMapT<Scalar> max_pool2(const FeatureMapT<Scalar>& x);
template <typename Scalar>
FeatureMapT<Scalar> max_pool2_backward(const FeatureMapT<Scalar>& input, const FeatureMapT<Scalar>& grad_out);

/// Per-channel batch normalization across all samples and positions.
struct BatchNorm {
  int channels = 0;
  float eps = 1e-5f;
  float momentum = 0.1f;
  Eigen::VectorXf gamma, beta;
  Eigen::VectorXf running_mean, running_var;

  BatchNorm() = default;
  explicit BatchNorm(int c);

  struct Cache {
    Eigen::VectorXf mean, inv_std;
    std::vector<Eigen::MatrixXf> normalized;
  };
  struct Grad {
    Eigen::VectorXf gamma, beta;
  };

  std::vector<FeatureMap> forward_train(const std::vector<FeatureMap>& x, Cache& cache);
  [[nodiscard]] FeatureMap forward_eval(const FeatureMap& x) const;
  std::vector<FeatureMap> backward(const Cache& cache, const std::vector<FeatureMap>& grad_out, Grad& grad) const;
};

struct Linear {
  int in_features = 0;
  int out_features = 0;
  Eigen::MatrixXf weight;
  Eigen::VectorXf bias;

  Linear() = default;
  Linear(int in, int out);

  [[nodiscard]] Eigen::VectorXf forward(const Eigen::Ref<const Eigen::VectorXf>& x) const { return weight * x + bias; }
};

/// Moment estimates for one parameter block.
struct AdamSlot {
  Eigen::ArrayXf m, v;
};

/// Adaptive-moment gradient descent. `step()` advances the shared time step;
/// call `update()` once per parameter block afterwards.
class Adam {
 public:
  explicit Adam(float lr = 1e-3f, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step() { ++t_; }
  void update(float* param, const float* grad, Eigen::Index n, AdamSlot& slot) const;

  template <typename Derived, typename GradDerived>
  void update(Eigen::PlainObjectBase<Derived>& param, const Eigen::PlainObjectBase<GradDerived>& grad, AdamSlot& slot) const {
    update(param.data(), grad.data(), param.size(), slot);
  }

  [[nodiscard]] std::int64_t time_step() const { return t_; }
  [[nodiscard]] float learning_rate() const { return lr_; }
  void set_learning_rate(float lr) { lr_ = lr; }

 private:
  float lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

/// FNV-1a over the raw bytes of a float block, chained through `seed`.
std::uint64_t fnv1a(const float* data, Eigen::Index n, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace gst::nn
