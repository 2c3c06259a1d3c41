#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <vector>

#include "gst/error.hpp"

namespace gst {

/// RGB image with values in [0,1]. Pixels are stored planar as a 3 x (H*W)
/// matrix; column `y * width + x` holds the pixel at (x, y).
template <typename Scalar>
struct ImageT {
  using Pixels = Eigen::Matrix<Scalar, 3, Eigen::Dynamic>;

  int height = 0;
  int width = 0;
  Pixels pixels;

  ImageT() = default;
  ImageT(int h, int w) : height(h), width(w), pixels(Pixels::Zero(3, Eigen::Index(h) * w)) {}
  ImageT(int h, int w, Pixels p) : height(h), width(w), pixels(std::move(p)) {}

  static ImageT constant(int h, int w, Scalar r, Scalar g, Scalar b) {
    ImageT img(h, w);
    img.pixels.row(0).setConstant(r);
    img.pixels.row(1).setConstant(g);
    img.pixels.row(2).setConstant(b);
    return img;
  }

  [[nodiscard]] Eigen::Index index(int y, int x) const { return Eigen::Index(y) * width + x; }
  Scalar& at(int c, int y, int x) { return pixels(c, index(y, x)); }
  [[nodiscard]] Scalar at(int c, int y, int x) const { return pixels(c, index(y, x)); }
  [[nodiscard]] Eigen::Index size() const { return Eigen::Index(height) * width; }
  [[nodiscard]] bool empty() const { return size() == 0; }

  template <typename Other>
  [[nodiscard]] ImageT<Other> cast() const {
    return ImageT<Other>(height, width, pixels.template cast<Other>());
  }

  void clamp01() { pixels = pixels.cwiseMax(Scalar(0)).cwiseMin(Scalar(1)); }
};

using Image = ImageT<float>;

/// Ordered Gaussian pyramid; levels[0] is the input, coarsest last.
template <typename Scalar>
struct PyramidT {
  std::vector<ImageT<Scalar>> levels;
  [[nodiscard]] int level_count() const { return static_cast<int>(levels.size()); }
};

using Pyramid = PyramidT<float>;

/// Smallest side accepted anywhere in the pipeline.
inline constexpr int kMinImageSide = 32;

// ImageNet pretraining statistics of the backbone.
inline constexpr std::array<double, 3> kBackboneMean = {0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kBackboneStd = {0.229, 0.224, 0.225};

Image load_image(const std::filesystem::path& path);
void save_image(const Image& img, const std::filesystem::path& path);

template <typename Scalar>
ImageT<Scalar> normalize_for_backbone(const ImageT<Scalar>& img) {
  ImageT<Scalar> out = img;
  for (int c = 0; c < 3; ++c)
    out.pixels.row(c) = (img.pixels.row(c).array() - Scalar(kBackboneMean[c])) / Scalar(kBackboneStd[c]);
  return out;
}

template <typename Scalar>
ImageT<Scalar> denormalize_from_backbone(const ImageT<Scalar>& img) {
  ImageT<Scalar> out = img;
  for (int c = 0; c < 3; ++c)
    out.pixels.row(c) = img.pixels.row(c).array() * Scalar(kBackboneStd[c]) + Scalar(kBackboneMean[c]);
  return out;
}

/// Bilinear resampling with half-pixel-center alignment and edge clamping.
template <typename Scalar>
ImageT<Scalar> resize(const ImageT<Scalar>& img, int width, int height) {
  if (width < 1 || height < 1) throw ArgumentError("resize: target size must be positive");
  if (width == img.width && height == img.height) return img;
  ImageT<Scalar> out(height, width);
  const double sx = double(img.width) / width;
  const double sy = double(img.height) / height;
  for (int y = 0; y < height; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(img.height - 1));
    int y0 = static_cast<int>(std::floor(fy));
    int y1 = std::min(y0 + 1, img.height - 1);
    auto wy = Scalar(fy - y0);
    for (int x = 0; x < width; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(img.width - 1));
      int x0 = static_cast<int>(std::floor(fx));
      int x1 = std::min(x0 + 1, img.width - 1);
      auto wx = Scalar(fx - x0);
      out.pixels.col(out.index(y, x)) =
          (Scalar(1) - wy) * ((Scalar(1) - wx) * img.pixels.col(img.index(y0, x0)) + wx * img.pixels.col(img.index(y0, x1))) +
          wy * ((Scalar(1) - wx) * img.pixels.col(img.index(y1, x0)) + wx * img.pixels.col(img.index(y1, x1)));
    }
  }
  return out;
}

namespace detail {

// Mirror index without repeating the edge sample (…2 1 | 0 1 2 … n-1 | n-2 …).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

}  // namespace detail

/// Separable 5-tap binomial blur (1 4 6 4 1)/16 per axis with reflect padding.
template <typename Scalar>
ImageT<Scalar> gaussian_blur(const ImageT<Scalar>& img) {
  static constexpr std::array<double, 5> taps = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
  ImageT<Scalar> tmp(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      Eigen::Matrix<Scalar, 3, 1> acc = Eigen::Matrix<Scalar, 3, 1>::Zero();
      for (int k = -2; k <= 2; ++k)
        acc += Scalar(taps[k + 2]) * img.pixels.col(img.index(y, detail::reflect_index(x + k, img.width)));
      tmp.pixels.col(tmp.index(y, x)) = acc;
    }
  ImageT<Scalar> out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      Eigen::Matrix<Scalar, 3, 1> acc = Eigen::Matrix<Scalar, 3, 1>::Zero();
      for (int k = -2; k <= 2; ++k)
        acc += Scalar(taps[k + 2]) * tmp.pixels.col(tmp.index(detail::reflect_index(y + k, img.height), x));
      out.pixels.col(out.index(y, x)) = acc;
    }
  return out;
}

/// Keeps every second sample starting at 0; output side is ceil(n / 2).
template <typename Scalar>
ImageT<Scalar> decimate(const ImageT<Scalar>& img) {
  const int h = (img.height + 1) / 2;
  const int w = (img.width + 1) / 2;
  ImageT<Scalar> out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.pixels.col(out.index(y, x)) = img.pixels.col(img.index(2 * y, 2 * x));
  return out;
}

template <typename Scalar>
PyramidT<Scalar> gaussian_pyramid(const ImageT<Scalar>& img, int levels) {
  if (levels < 1) throw ArgumentError("gaussian_pyramid: levels must be >= 1");
  int h = img.height, w = img.width;
  for (int l = 1; l < levels; ++l) {
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  if (h < kMinImageSide || w < kMinImageSide)
    throw ArgumentError("gaussian_pyramid: coarsest level " + std::to_string(w) + "x" + std::to_string(h) +
                        " is below the " + std::to_string(kMinImageSide) + " px minimum");
  PyramidT<Scalar> pyr;
  pyr.levels.reserve(levels);
  pyr.levels.push_back(img);
  for (int l = 1; l < levels; ++l) pyr.levels.push_back(decimate(gaussian_blur(pyr.levels.back())));
  return pyr;
}

/// Center square crop followed by a resize to `side` x `side`.
template <typename Scalar>
ImageT<Scalar> center_square(const ImageT<Scalar>& img, int side) {
  const int s = std::min(img.height, img.width);
  const int y0 = (img.height - s) / 2;
  const int x0 = (img.width - s) / 2;
  ImageT<Scalar> crop(s, s);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) crop.pixels.col(crop.index(y, x)) = img.pixels.col(img.index(y + y0, x + x0));
  return resize(crop, side, side);
}

}  // namespace gst
