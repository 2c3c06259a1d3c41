#include "gst/nn.hpp"

#include <cmath>
#include <cstring>
#include <type_traits>

namespace gst::nn {
namespace {

// Positions per im2col block; bounds the scratch matrix to a few tens of MB.
constexpr Eigen::Index kColumnBlock = 4096;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
void im2col(const FeatureMapT<Scalar>& in, int kernel, Eigen::Index p0, Eigen::Index count, MatrixX<Scalar>& cols) {
  const int pad = kernel / 2;
  const int cin = in.channels;
  cols.resize(Eigen::Index(kernel) * kernel * cin, count);
  for (Eigen::Index j = 0; j < count; ++j) {
    const Eigen::Index p = p0 + j;
    const int y = static_cast<int>(p / in.width);
    const int x = static_cast<int>(p % in.width);
    Scalar* dst = cols.col(j).data();
    for (int ky = 0; ky < kernel; ++ky) {
      const int sy = y + ky - pad;
      for (int kx = 0; kx < kernel; ++kx, dst += cin) {
        const int sx = x + kx - pad;
        if (sy < 0 || sy >= in.height || sx < 0 || sx >= in.width) {
          std::memset(dst, 0, sizeof(Scalar) * cin);
        } else {
          std::memcpy(dst, in.data.col(Eigen::Index(sy) * in.width + sx).data(), sizeof(Scalar) * cin);
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const MatrixX<Scalar>& cols, int kernel, Eigen::Index p0, FeatureMapT<Scalar>& out) {
  const int pad = kernel / 2;
  const int cin = out.channels;
  for (Eigen::Index j = 0; j < cols.cols(); ++j) {
    const Eigen::Index p = p0 + j;
    const int y = static_cast<int>(p / out.width);
    const int x = static_cast<int>(p % out.width);
    const Scalar* src = cols.col(j).data();
    for (int ky = 0; ky < kernel; ++ky) {
      const int sy = y + ky - pad;
      for (int kx = 0; kx < kernel; ++kx, src += cin) {
        const int sx = x + kx - pad;
        if (sy < 0 || sy >= out.height || sx < 0 || sx >= out.width) continue;
        out.data.col(Eigen::Index(sy) * out.width + sx) += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(src, cin);
      }
    }
  }
}

// The float weights themselves, or a converted copy for other scalars.
template <typename Scalar, typename Derived>
decltype(auto) as_scalar(const Eigen::MatrixBase<Derived>& m) {
  if constexpr (std::is_same_v<Scalar, typename Derived::Scalar>)
    return (m.derived());
  else
    return Eigen::Matrix<Scalar, Derived::RowsAtCompileTime, Derived::ColsAtCompileTime>(m.template cast<Scalar>());
}

}  // namespace

Conv2d::Conv2d(int in, int out, int k)
    : in_channels(in),
      out_channels(out),
      kernel(k),
      weight(Eigen::MatrixXf::Zero(out, Eigen::Index(k) * k * in)),
      bias(Eigen::VectorXf::Zero(out)) {
  if (k % 2 == 0) throw ArgumentError("Conv2d: kernel size must be odd");
}

void Conv2d::init_he(std::mt19937_64& rng, bool center) {
  std::normal_distribution<float> normal(0.0f, std::sqrt(2.0f / float(kernel * kernel * in_channels)));
  for (Eigen::Index i = 0; i < weight.size(); ++i) weight.data()[i] = normal(rng);
  if (center) weight.colwise() -= weight.rowwise().mean();
  bias.setZero();
}

template <typename Scalar>
FeatureMapT<Scalar> Conv2d::forward(const FeatureMapT<Scalar>& input) const {
  if (input.channels != in_channels)
    throw ArgumentError("Conv2d: expected " + std::to_string(in_channels) + " input channels, got " +
                        std::to_string(input.channels));
  const auto& w = as_scalar<Scalar>(weight);
  FeatureMapT<Scalar> out(out_channels, input.height, input.width);
  MatrixX<Scalar> cols;
  const Eigen::Index n = input.positions();
  for (Eigen::Index p0 = 0; p0 < n; p0 += kColumnBlock) {
    const Eigen::Index count = std::min(kColumnBlock, n - p0);
    im2col(input, kernel, p0, count, cols);
    out.data.middleCols(p0, count).noalias() = w * cols;
  }
  out.data.colwise() += bias.cast<Scalar>();
  return out;
}

template <typename Scalar>
FeatureMapT<Scalar> Conv2d::backward(const FeatureMapT<Scalar>& input, const FeatureMapT<Scalar>& grad_out, Grad* grad,
                                     bool need_input) const {
  FeatureMapT<Scalar> grad_in;
  if (need_input) grad_in = FeatureMapT<Scalar>(in_channels, input.height, input.width);
  if (grad) {
    if (grad->weight.size() == 0) {
      grad->weight = Eigen::MatrixXf::Zero(weight.rows(), weight.cols());
      grad->bias = Eigen::VectorXf::Zero(bias.size());
    }
    grad->bias += grad_out.data.rowwise().sum().template cast<float>();
  }
  const auto& w = as_scalar<Scalar>(weight);
  MatrixX<Scalar> cols;
  MatrixX<Scalar> dcols;
  const Eigen::Index n = input.positions();
  for (Eigen::Index p0 = 0; p0 < n; p0 += kColumnBlock) {
    const Eigen::Index count = std::min(kColumnBlock, n - p0);
    const auto g = grad_out.data.middleCols(p0, count);
    if (grad) {
      im2col(input, kernel, p0, count, cols);
      grad->weight.noalias() += (g * cols.transpose()).template cast<float>();
    }
    if (need_input) {
      dcols.noalias() = w.transpose() * g;
      col2im_add(dcols, kernel, p0, grad_in);
    }
  }
  return grad_in;
}

template <typename Scalar>
FeatureMapT<Scalar> relu(const FeatureMapT<Scalar>& x) {
  return FeatureMapT<Scalar>(x.height, x.width, x.data.cwiseMax(Scalar(0)));
}

template <typename Scalar>
FeatureMapT<Scalar> relu_backward(const FeatureMapT<Scalar>& output, const FeatureMapT<Scalar>& grad) {
  return FeatureMapT<Scalar>(grad.height, grad.width, (output.data.array() > Scalar(0)).select(grad.data, Scalar(0)));
}

template <typename Scalar>
FeatureMapT<Scalar> max_pool2(const FeatureMapT<Scalar>& x) {
  const int h = x.height / 2;
  const int w = x.width / 2;
  if (h < 1 || w < 1) throw ArgumentError("max_pool2: input smaller than 2x2");
  FeatureMapT<Scalar> out(x.channels, h, w);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      const Eigen::Index a = Eigen::Index(2 * y) * x.width + 2 * xx;
      const Eigen::Index b = a + x.width;
      out.data.col(Eigen::Index(y) * w + xx) =
          x.data.col(a).cwiseMax(x.data.col(a + 1)).cwiseMax(x.data.col(b)).cwiseMax(x.data.col(b + 1));
    }
  return out;
}

template <typename Scalar>
FeatureMapT<Scalar> max_pool2_backward(const FeatureMapT<Scalar>& input, const FeatureMapT<Scalar>& grad_out) {
  FeatureMapT<Scalar> grad_in(input.channels, input.height, input.width);
  const int h = grad_out.height;
  const int w = grad_out.width;
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      const Eigen::Index q = Eigen::Index(y) * w + xx;
      const Eigen::Index cand[4] = {Eigen::Index(2 * y) * input.width + 2 * xx,
                                    Eigen::Index(2 * y) * input.width + 2 * xx + 1,
                                    Eigen::Index(2 * y + 1) * input.width + 2 * xx,
                                    Eigen::Index(2 * y + 1) * input.width + 2 * xx + 1};
      for (int c = 0; c < input.channels; ++c) {
        int best = 0;
        Scalar best_v = input.data(c, cand[0]);
        for (int k = 1; k < 4; ++k)
          if (input.data(c, cand[k]) > best_v) {
            best_v = input.data(c, cand[k]);
            best = k;
          }
        grad_in.data(c, cand[best]) += grad_out.data(c, q);
      }
    }
  return grad_in;
}

#define GST_NN_INSTANTIATE(S)                                                                             \
  template FeatureMapT<S> Conv2d::forward(const FeatureMapT<S>&) const;                                 \
  template FeatureMapT<S> Conv2d::backward(const FeatureMapT<S>&, const FeatureMapT<S>&, Grad*, bool) const; \
  template FeatureMapT<S> relu(const FeatureMapT<S>&);                                                  \
  template FeatureMapT<S> relu_backward(const FeatureMapT<S>&, const FeatureMapT<S>&);                  \
  template FeatureMapT<S> max_pool2(const FeatureMapT<S>&);                                             \
  template FeatureMapT<S> max_pool2_backward(const FeatureMapT<S>&, const FeatureMapT<S>&);
GST_NN_INSTANTIATE(float)
GST_NN_INSTANTIATE(double)
#undef GST_NN_INSTANTIATE

BatchNorm::BatchNorm(int c)
    : channels(c),
      gamma(Eigen::VectorXf::Ones(c)),
      beta(Eigen::VectorXf::Zero(c)),
      running_mean(Eigen::VectorXf::Zero(c)),
      running_var(Eigen::VectorXf::Ones(c)) {}

std::vector<FeatureMap> BatchNorm::forward_train(const std::vector<FeatureMap>& x, Cache& cache) {
  if (x.empty()) throw ArgumentError("BatchNorm: empty batch");
  double count = 0;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(channels);
  for (const auto& f : x) {
    sum += f.data.cast<double>().rowwise().sum();
    count += double(f.positions());
  }
  const Eigen::VectorXd mean = sum / count;
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(channels);
  for (const auto& f : x) sq += (f.data.cast<double>().colwise() - mean).array().square().matrix().rowwise().sum();
  const Eigen::VectorXd var = sq / count;

  cache.mean = mean.cast<float>();
  cache.inv_std = (var.array() + double(eps)).rsqrt().cast<float>().matrix();
  cache.normalized.clear();
  std::vector<FeatureMap> out;
  out.reserve(x.size());
  for (const auto& f : x) {
    Eigen::MatrixXf xn = ((f.data.colwise() - cache.mean).array().colwise() * cache.inv_std.array()).matrix();
    Eigen::MatrixXf y = ((xn.array().colwise() * gamma.array()).colwise() + beta.array()).matrix();
    cache.normalized.push_back(std::move(xn));
    out.emplace_back(f.height, f.width, std::move(y));
  }
  const double unbias = count > 1 ? count / (count - 1) : 1.0;
  running_mean = (1 - momentum) * running_mean + momentum * cache.mean;
  running_var = (1 - momentum) * running_var + momentum * (var * unbias).cast<float>();
  return out;
}

FeatureMap BatchNorm::forward_eval(const FeatureMap& x) const {
  const Eigen::ArrayXf scale = gamma.array() * (running_var.array() + eps).rsqrt();
  const Eigen::ArrayXf shift = beta.array() - running_mean.array() * scale;
  return FeatureMap(x.height, x.width, ((x.data.array().colwise() * scale).colwise() + shift).matrix());
}

std::vector<FeatureMap> BatchNorm::backward(const Cache& cache, const std::vector<FeatureMap>& grad_out, Grad& grad) const {
  if (grad.gamma.size() == 0) {
    grad.gamma = Eigen::VectorXf::Zero(channels);
    grad.beta = Eigen::VectorXf::Zero(channels);
  }
  double count = 0;
  Eigen::VectorXf sum_g = Eigen::VectorXf::Zero(channels);
  Eigen::VectorXf sum_gx = Eigen::VectorXf::Zero(channels);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    sum_g += grad_out[i].data.rowwise().sum();
    sum_gx += grad_out[i].data.cwiseProduct(cache.normalized[i]).rowwise().sum();
    count += double(grad_out[i].positions());
  }
  grad.beta += sum_g;
  grad.gamma += sum_gx;
  const Eigen::ArrayXf k = gamma.array() * cache.inv_std.array();
  const Eigen::ArrayXf mean_g = sum_g.array() / float(count);
  const Eigen::ArrayXf mean_gx = sum_gx.array() / float(count);
  std::vector<FeatureMap> out;
  out.reserve(grad_out.size());
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    Eigen::MatrixXf dx =
        (((grad_out[i].data.array().colwise() - mean_g) - cache.normalized[i].array().colwise() * mean_gx).colwise() * k)
            .matrix();
    out.emplace_back(grad_out[i].height, grad_out[i].width, std::move(dx));
  }
  return out;
}

Linear::Linear(int in, int out)
    : in_features(in),
      out_features(out),
      weight(Eigen::MatrixXf::Zero(out, in)),
      bias(Eigen::VectorXf::Zero(out)) {}

void Adam::update(float* param, const float* grad, Eigen::Index n, AdamSlot& slot) const {
  if (t_ < 1) throw StateError("Adam::update called before step()");
  if (slot.m.size() != n) {
    slot.m = Eigen::ArrayXf::Zero(n);
    slot.v = Eigen::ArrayXf::Zero(n);
  }
  Eigen::Map<Eigen::ArrayXf> p(param, n);
  Eigen::Map<const Eigen::ArrayXf> g(grad, n);
  slot.m = beta1_ * slot.m + (1 - beta1_) * g;
  slot.v = beta2_ * slot.v + (1 - beta2_) * g.square();
  const float bc1 = 1.0f - std::pow(beta1_, float(t_));
  const float bc2 = 1.0f - std::pow(beta2_, float(t_));
  const float step = lr_ * std::sqrt(bc2) / bc1;
  p -= step * slot.m / (slot.v.sqrt() + eps_ * std::sqrt(bc2));
}

std::uint64_t fnv1a(const float* data, Eigen::Index n, std::uint64_t seed) {
  std::uint64_t h = seed;
  const auto* bytes = reinterpret_cast<const unsigned char*>(data);
  for (Eigen::Index i = 0; i < n * Eigen::Index(sizeof(float)); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace gst::nn
