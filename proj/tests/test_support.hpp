#pragma once

// Shared helpers and brute-force oracles for the test suites. The oracles are
// plain loops over std::vector and never call into the library code they check.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "gst/image.hpp"

namespace gst::test {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("gst_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = u(rng);
  return img;
}

/// Smooth two-tone pattern with diagonal structure, deterministic.
inline Image pattern_image(int h, int w, double phase = 0.0) {
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = double(x) / w, v = double(y) / h;
      img.at(0, y, x) = float(0.5 + 0.4 * std::sin(12.0 * u + 5.0 * v + phase));
      img.at(1, y, x) = float(0.5 + 0.4 * std::cos(9.0 * v - 3.0 * u));
      img.at(2, y, x) = float(0.5 + 0.4 * std::sin(20.0 * (u - 0.3) * (v + 0.2)));
    }
  return img;
}

using Table = std::vector<std::vector<double>>;  // [channel][position]

inline Table random_table(int rows, int cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Table t(rows, std::vector<double>(cols));
  for (auto& r : t)
    for (auto& v : r) v = u(rng);
  return t;
}

/// D[a][b] = sum_p f[a][p] f[b][p] / P
inline Table gram_oracle(const Table& f) {
  const std::size_t n = f.size(), p = f[0].size();
  Table d(n, std::vector<double>(n, 0.0));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      double s = 0;
      for (std::size_t q = 0; q < p; ++q) s += f[a][q] * f[b][q];
      d[a][b] = s / double(p);
    }
  return d;
}

/// Scales every position (column) of a [channel][position] table to unit norm.
inline void normalize_positions(Table& f) {
  for (std::size_t q = 0; q < f[0].size(); ++q) {
    double n = 0;
    for (auto& row : f) n += row[q] * row[q];
    n = std::sqrt(n);
    if (n > 0)
      for (auto& row : f) row[q] /= n;
  }
}

/// C[i][j][k][l] = max(0, <gc(i,j), gs(k,l)>) with position index y * w + x.
inline std::vector<double> correlate_oracle(const Table& gc, const Table& gs, int w, int h) {
  std::vector<double> out(std::size_t(w) * h * w * h);
  for (int i = 0; i < w; ++i)
    for (int j = 0; j < h; ++j)
      for (int k = 0; k < w; ++k)
        for (int l = 0; l < h; ++l) {
          double dot = 0;
          for (std::size_t c = 0; c < gc.size(); ++c) dot += gc[c][j * w + i] * gs[c][l * w + k];
          out[((std::size_t(i) * h + j) * w + k) * h + l] = dot > 0 ? dot : 0.0;
        }
  return out;
}

inline double content_loss_oracle(const Table& a, const Table& b) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < a.size(); ++c)
    for (std::size_t q = 0; q < a[c].size(); ++q, ++n) s += (a[c][q] - b[c][q]) * (a[c][q] - b[c][q]);
  return 0.5 * s / double(n);
}

inline double texture_loss_oracle(const std::vector<Table>& ds, const std::vector<Table>& dout, const std::vector<double>& w) {
  double total = 0;
  for (std::size_t l = 0; l < ds.size(); ++l) {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t a = 0; a < ds[l].size(); ++a)
      for (std::size_t b = 0; b < ds[l][a].size(); ++b, ++n) s += (ds[l][a][b] - dout[l][a][b]) * (ds[l][a][b] - dout[l][a][b]);
    total += w[l] * s / double(n);
  }
  return 0.5 * total;
}

/// Mean squared point distance between two point lists.
inline double grid_loss_oracle(const std::vector<std::array<double, 2>>& a, const std::vector<std::array<double, 2>>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dx = a[i][0] - b[i][0], dy = a[i][1] - b[i][1];
    s += dx * dx + dy * dy;
  }
  return s / double(a.size());
}

/// (x, y) -> (a11 x + a12 y + tx, a21 x + a22 y + ty) via an explicit 2x3 product.
inline std::array<double, 2> affine_oracle(const double theta[6], double x, double y) {
  const double m[2][3] = {{theta[0], theta[1], theta[2]}, {theta[3], theta[4], theta[5]}};
  const double v[3] = {x, y, 1.0};
  std::array<double, 2> out{0, 0};
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) out[r] += m[r][c] * v[c];
  return out;
}

}  // namespace gst::test
