#pragma once

// Parametric backward maps R^2 -> R^2 on the normalized frame [-1,1]^2 and
// bilinear image warping through them. A sampling field sends each output
// pixel center to the source coordinate it reads from.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <string_view>

#include "gst/error.hpp"
#include "gst/image.hpp"

namespace gst {

/// 2 x N matrix of points, one (x, y) per column.
template <typename Scalar>
using Points = Eigen::Matrix<Scalar, 2, Eigen::Dynamic>;

template <typename Scalar>
struct AffineParams {
  using Vector = Eigen::Matrix<Scalar, 6, 1>;
  /// [a11, a12, tx, a21, a22, ty]
  Vector theta = identity().theta;

  static AffineParams identity() {
    AffineParams p{Vector::Zero()};
    p.theta << 1, 0, 0, 0, 1, 0;
    return p;
  }
  static AffineParams from(const Eigen::Matrix<Scalar, 2, 3>& m) {
    AffineParams p{Vector::Zero()};
    p.theta << m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2);
    return p;
  }

  [[nodiscard]] Eigen::Matrix<Scalar, 2, 2> linear() const {
    Eigen::Matrix<Scalar, 2, 2> a;
    a << theta[0], theta[1], theta[3], theta[4];
    return a;
  }
  [[nodiscard]] Eigen::Matrix<Scalar, 2, 1> translation() const { return {theta[2], theta[5]}; }
  [[nodiscard]] Scalar determinant() const { return theta[0] * theta[4] - theta[1] * theta[3]; }

  template <typename Other>
  [[nodiscard]] AffineParams<Other> cast() const {
    return {theta.template cast<Other>()};
  }
};

/// Displacements of the 3x3 control grid {-1,0,1}^2 (row-major, x fastest):
/// offsets[0..8] are the x displacements, offsets[9..17] the y ones.
template <typename Scalar>
struct TpsParams {
  using Vector = Eigen::Matrix<Scalar, 18, 1>;
  Vector offsets = Vector::Zero();

  static TpsParams identity() { return {}; }
  [[nodiscard]] auto dx() const { return offsets.template head<9>(); }
  [[nodiscard]] auto dy() const { return offsets.template tail<9>(); }

  template <typename Other>
  [[nodiscard]] TpsParams<Other> cast() const {
    return {offsets.template cast<Other>()};
  }
};

using Affine = AffineParams<double>;
using Tps = TpsParams<double>;

enum class WarpKind { affine, tps };

inline std::string_view to_string(WarpKind k) { return k == WarpKind::affine ? "affine" : "tps"; }
inline WarpKind parse_warp_kind(std::string_view s) {
  if (s == "affine") return WarpKind::affine;
  if (s == "tps") return WarpKind::tps;
  throw ArgumentError("unknown transform kind '" + std::string(s) + "' (expected affine|tps)");
}
inline int param_count(WarpKind k) { return k == WarpKind::affine ? 6 : 18; }

/// nx x ny points spanning [-1,1]^2 inclusive, x fastest.
template <typename Scalar = double>
Points<Scalar> uniform_grid(int nx = 20, int ny = 20) {
  if (nx < 2 || ny < 2) throw ArgumentError("uniform_grid: need at least 2 points per axis");
  Points<Scalar> pts(2, Eigen::Index(nx) * ny);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      pts(0, Eigen::Index(j) * nx + i) = Scalar(-1) + Scalar(2 * i) / Scalar(nx - 1);
      pts(1, Eigen::Index(j) * nx + i) = Scalar(-1) + Scalar(2 * j) / Scalar(ny - 1);
    }
  return pts;
}

/// Normalized pixel centers of a height x width canvas, column y * width + x.
template <typename Scalar = double>
Points<Scalar> pixel_lattice(int height, int width) {
  Points<Scalar> pts(2, Eigen::Index(height) * width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      pts(0, Eigen::Index(y) * width + x) = Scalar(2) * (Scalar(x) + Scalar(0.5)) / Scalar(width) - Scalar(1);
      pts(1, Eigen::Index(y) * width + x) = Scalar(2) * (Scalar(y) + Scalar(0.5)) / Scalar(height) - Scalar(1);
    }
  return pts;
}

template <typename Scalar, typename Derived>
Points<Scalar> affine_apply(const AffineParams<Scalar>& p, const Eigen::MatrixBase<Derived>& pts) {
  return (p.linear() * pts).colwise() + p.translation();
}

/// Control points of the TPS grid, 2 x 9.
template <typename Scalar = double>
Points<Scalar> tps_control_points() {
  return uniform_grid<Scalar>(3, 3);
}

namespace detail {

inline double tps_kernel(double r2) { return r2 > 0 ? r2 * std::log(r2) : 0.0; }

/// Inverse of the 12x12 TPS system [[K, P], [P^T, 0]] for the fixed grid.
inline const Eigen::Matrix<double, 12, 12>& tps_system_inverse() {
  static const Eigen::Matrix<double, 12, 12> inverse = [] {
    const Points<double> c = tps_control_points<double>();
    Eigen::Matrix<double, 12, 12> L = Eigen::Matrix<double, 12, 12>::Zero();
    for (int i = 0; i < 9; ++i) {
      for (int j = 0; j < 9; ++j) L(i, j) = tps_kernel((c.col(i) - c.col(j)).squaredNorm());
      L(i, 9) = L(9, i) = 1.0;
      L(i, 10) = L(10, i) = c(0, i);
      L(i, 11) = L(11, i) = c(1, i);
    }
    Eigen::FullPivLU<Eigen::Matrix<double, 12, 12>> lu(L);
    if (!lu.isInvertible()) throw InternalError("TPS system is singular");
    return Eigen::Matrix<double, 12, 12>(lu.inverse());
  }();
  return inverse;
}

}  // namespace detail

/// 9 x N matrix M with tps_apply(p, pts) = pts + [dx^T M; dy^T M]: column n
/// holds the TPS interpolation weights of the control displacements at pts[n].
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, 9, Eigen::Dynamic> tps_weights(const Eigen::MatrixBase<Derived>& pts) {
  const Eigen::Matrix<double, 12, 12>& inv = detail::tps_system_inverse();
  const Points<double> c = tps_control_points<double>();
  // Rows 0..8 of inv map targets to kernel weights, rows 9..11 to the affine part.
  const Eigen::Matrix<double, 9, 9> kernel_map = inv.topLeftCorner<9, 9>();
  const Eigen::Matrix<double, 3, 9> affine_map = inv.bottomLeftCorner<3, 9>();
  Eigen::Matrix<Scalar, 9, Eigen::Dynamic> m(9, pts.cols());
  for (Eigen::Index n = 0; n < pts.cols(); ++n) {
    const Eigen::Vector2d x(double(pts(0, n)), double(pts(1, n)));
    Eigen::Matrix<double, 9, 1> phi;
    for (int i = 0; i < 9; ++i) phi[i] = detail::tps_kernel((x - c.col(i)).squaredNorm());
    const Eigen::Vector3d lin(1.0, x[0], x[1]);
    m.col(n) = (kernel_map.transpose() * phi + affine_map.transpose() * lin).template cast<Scalar>();
  }
  return m;
}

template <typename Scalar, typename Derived>
Points<Scalar> tps_apply(const TpsParams<Scalar>& p, const Eigen::MatrixBase<Derived>& pts) {
  const Eigen::Matrix<Scalar, 9, Eigen::Dynamic> m = tps_weights<Scalar>(pts);
  Points<Scalar> out = pts;
  out.row(0) += p.dx().transpose() * m;
  out.row(1) += p.dy().transpose() * m;
  return out;
}

/// Backward sampling coordinates for an out_h x out_w canvas.
template <typename Scalar>
struct SamplingField {
  int height = 0;
  int width = 0;
  Points<Scalar> coords;

  template <typename Other>
  [[nodiscard]] SamplingField<Other> cast() const {
    return {height, width, coords.template cast<Other>()};
  }
};

template <typename Scalar>
SamplingField<Scalar> make_sampling_field(const AffineParams<Scalar>& p, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ArgumentError("make_sampling_field: canvas must be at least 1x1");
  return {out_h, out_w, affine_apply(p, pixel_lattice<Scalar>(out_h, out_w))};
}

template <typename Scalar>
SamplingField<Scalar> make_sampling_field(const TpsParams<Scalar>& p, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ArgumentError("make_sampling_field: canvas must be at least 1x1");
  return {out_h, out_w, tps_apply(p, pixel_lattice<Scalar>(out_h, out_w))};
}

/// Cascaded field: TPS refinement first, then the affine stage, so the output
/// reads content at affine(tps(x)).
template <typename Scalar>
SamplingField<Scalar> make_sampling_field(const AffineParams<Scalar>& aff, const TpsParams<Scalar>& tps, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ArgumentError("make_sampling_field: canvas must be at least 1x1");
  return {out_h, out_w, affine_apply(aff, tps_apply(tps, pixel_lattice<Scalar>(out_h, out_w)))};
}

enum class FillPolicy { replicate, zeros };

inline FillPolicy parse_fill_policy(std::string_view s) {
  if (s == "replicate") return FillPolicy::replicate;
  if (s == "zeros") return FillPolicy::zeros;
  throw ArgumentError("unknown fill policy '" + std::string(s) + "' (expected replicate|zeros)");
}

namespace detail {

// Bilinear footprint of one normalized coordinate.
template <typename Scalar>
struct Footprint {
  int x0, y0;
  Scalar wx, wy;
};

template <typename Scalar>
Footprint<Scalar> footprint(Scalar nx, Scalar ny, int width, int height) {
  const Scalar px = (nx + Scalar(1)) * Scalar(width) / Scalar(2) - Scalar(0.5);
  const Scalar py = (ny + Scalar(1)) * Scalar(height) / Scalar(2) - Scalar(0.5);
  const Scalar fx = std::floor(px);
  const Scalar fy = std::floor(py);
  return {static_cast<int>(fx), static_cast<int>(fy), px - fx, py - fy};
}

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> fetch(const ImageT<Scalar>& img, int x, int y, FillPolicy fill) {
  if (fill == FillPolicy::replicate) {
    x = std::clamp(x, 0, img.width - 1);
    y = std::clamp(y, 0, img.height - 1);
  } else if (x < 0 || y < 0 || x >= img.width || y >= img.height) {
    return Eigen::Matrix<Scalar, 3, 1>::Zero();
  }
  return img.pixels.col(img.index(y, x));
}

}  // namespace detail

/// Bilinear sampling of `img` at every field coordinate.
template <typename Scalar>
ImageT<Scalar> warp_image(const ImageT<Scalar>& img, const SamplingField<Scalar>& field, FillPolicy fill = FillPolicy::replicate) {
  if (img.empty()) throw ArgumentError("warp_image: empty source image");
  ImageT<Scalar> out(field.height, field.width);
  for (Eigen::Index n = 0; n < field.coords.cols(); ++n) {
    const auto f = detail::footprint(field.coords(0, n), field.coords(1, n), img.width, img.height);
    out.pixels.col(n) =
        (Scalar(1) - f.wy) * ((Scalar(1) - f.wx) * detail::fetch(img, f.x0, f.y0, fill) + f.wx * detail::fetch(img, f.x0 + 1, f.y0, fill)) +
        f.wy * ((Scalar(1) - f.wx) * detail::fetch(img, f.x0, f.y0 + 1, fill) + f.wx * detail::fetch(img, f.x0 + 1, f.y0 + 1, fill));
  }
  return out;
}

template <typename Scalar>
struct WarpGradients {
  ImageT<Scalar> image;  // d(loss)/d(source pixels)
  Points<Scalar> coords; // d(loss)/d(field coordinates)
};

/// Vector-Jacobian product of warp_image for an upstream gradient shaped like
/// the warped output.
template <typename Scalar>
WarpGradients<Scalar> warp_image_backward(const ImageT<Scalar>& img, const SamplingField<Scalar>& field,
                                          const ImageT<Scalar>& grad_out, FillPolicy fill = FillPolicy::replicate) {
  WarpGradients<Scalar> g{ImageT<Scalar>(img.height, img.width), Points<Scalar>::Zero(2, field.coords.cols())};
  auto scatter = [&](int x, int y, const Eigen::Matrix<Scalar, 3, 1>& v) {
    if (fill == FillPolicy::replicate) {
      x = std::clamp(x, 0, img.width - 1);
      y = std::clamp(y, 0, img.height - 1);
    } else if (x < 0 || y < 0 || x >= img.width || y >= img.height) {
      return;
    }
    g.image.pixels.col(img.index(y, x)) += v;
  };
  const Scalar sx = Scalar(img.width) / Scalar(2);
  const Scalar sy = Scalar(img.height) / Scalar(2);
  for (Eigen::Index n = 0; n < field.coords.cols(); ++n) {
    const auto f = detail::footprint(field.coords(0, n), field.coords(1, n), img.width, img.height);
    const Eigen::Matrix<Scalar, 3, 1> go = grad_out.pixels.col(n);
    const auto v00 = detail::fetch(img, f.x0, f.y0, fill);
    const auto v10 = detail::fetch(img, f.x0 + 1, f.y0, fill);
    const auto v01 = detail::fetch(img, f.x0, f.y0 + 1, fill);
    const auto v11 = detail::fetch(img, f.x0 + 1, f.y0 + 1, fill);
    scatter(f.x0, f.y0, (Scalar(1) - f.wx) * (Scalar(1) - f.wy) * go);
    scatter(f.x0 + 1, f.y0, f.wx * (Scalar(1) - f.wy) * go);
    scatter(f.x0, f.y0 + 1, (Scalar(1) - f.wx) * f.wy * go);
    scatter(f.x0 + 1, f.y0 + 1, f.wx * f.wy * go);
    const Eigen::Matrix<Scalar, 3, 1> dpx = (Scalar(1) - f.wy) * (v10 - v00) + f.wy * (v11 - v01);
    const Eigen::Matrix<Scalar, 3, 1> dpy = (Scalar(1) - f.wx) * (v01 - v00) + f.wx * (v11 - v10);
    g.coords(0, n) = go.dot(dpx) * sx;
    g.coords(1, n) = go.dot(dpy) * sy;
  }
  return g;
}

}  // namespace gst
