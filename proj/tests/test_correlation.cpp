#include "doctest.h"

#include <Eigen/Eigenvalues>

#include <random>

#include "gst/correlation.hpp"
#include "gst/features.hpp"
#include "test_support.hpp"

using namespace gst;

namespace {

Eigen::MatrixXd to_matrix(const test::Table& t) {
  Eigen::MatrixXd m(t.size(), t[0].size());
  for (std::size_t r = 0; r < t.size(); ++r)
    for (std::size_t c = 0; c < t[r].size(); ++c) m(r, c) = t[r][c];
  return m;
}

}  // namespace

TEST_CASE("gram_matrix matches the brute-force oracle") {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> dim(1, 4);
  for (int trial = 0; trial < 25; ++trial) {
    const int c = dim(rng), h = dim(rng), w = dim(rng);
    const test::Table f = test::random_table(c, h * w, rng);
    const Eigen::MatrixXd g = gram_matrix(to_matrix(f));
    const test::Table ref = test::gram_oracle(f);
    for (int a = 0; a < c; ++a)
      for (int b = 0; b < c; ++b) CHECK(std::abs(g(a, b) - ref[a][b]) < 1e-12);
  }
  CHECK_THROWS_AS(gram_matrix(Eigen::MatrixXd(3, 0)), ArgumentError);
}

TEST_CASE("gram_matrix properties") {
  std::mt19937_64 rng(102);
  const Eigen::MatrixXd f = to_matrix(test::random_table(6, 20, rng));
  const Eigen::MatrixXd g = gram_matrix(f);
  CHECK((g - g.transpose()).cwiseAbs().maxCoeff() == 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
  CHECK(es.eigenvalues().minCoeff() > -1e-12);
  // Invariant to permuting positions.
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(20);
  perm.setIdentity();
  std::shuffle(perm.indices().data(), perm.indices().data() + 20, rng);
  CHECK((gram_matrix(Eigen::MatrixXd(f * perm)) - g).cwiseAbs().maxCoeff() < 1e-12);
  // Quadratic in the features.
  CHECK((gram_matrix(Eigen::MatrixXd(3.0 * f)) - 9.0 * g).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("correlate matches the brute-force oracle") {
  std::mt19937_64 rng(103);
  std::uniform_int_distribution<int> dim(1, 4);
  for (int trial = 0; trial < 25; ++trial) {
    const int c = dim(rng), h = dim(rng), w = dim(rng);
    test::Table a = test::random_table(c, h * w, rng), b = test::random_table(c, h * w, rng);
    test::normalize_positions(a);
    test::normalize_positions(b);
    const std::vector<double> ref = test::correlate_oracle(a, b, w, h);

    GeoFeatureMap ga{nn::FeatureMap(h, w, to_matrix(a).cast<float>())};
    GeoFeatureMap gb{nn::FeatureMap(h, w, to_matrix(b).cast<float>())};
    const CorrelationTensor t = correlate(ga, gb);
    const Eigen::MatrixXd exact = correlate(to_matrix(a), to_matrix(b));
    for (int i = 0; i < w; ++i)
      for (int j = 0; j < h; ++j)
        for (int k = 0; k < w; ++k)
          for (int l = 0; l < h; ++l) {
            const double r = ref[((std::size_t(i) * h + j) * w + k) * h + l];
            CHECK(std::abs(t.at(i, j, k, l) - r) < 1e-6);
            CHECK(std::abs(exact(j * w + i, l * w + k) - r) < 1e-12);
          }
  }
}

TEST_CASE("correlation of unit vectors lies in [0,1]") {
  std::mt19937_64 rng(104);
  test::Table a = test::random_table(16, 9, rng);
  test::normalize_positions(a);
  const Eigen::MatrixXd m = to_matrix(a);
  const Eigen::MatrixXd self = correlate(m, m);
  CHECK(self.minCoeff() >= 0.0);
  CHECK(self.maxCoeff() <= 1.0 + 1e-12);
  CHECK((self.diagonal().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK((self - self.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(correlate(m, Eigen::MatrixXd(16, 8)), ArgumentError);
}

TEST_CASE("normalize_columns") {
  Eigen::MatrixXd m(2, 3);
  m << 3, 0, 1, 4, 0, -1;
  normalize_columns(m);
  CHECK(m(0, 0) == doctest::Approx(0.6));
  CHECK(m(1, 0) == doctest::Approx(0.8));
  CHECK(m.col(1).norm() == 0.0);
  CHECK(m.col(2).norm() == doctest::Approx(1.0));
}

TEST_CASE("feature extractor shapes") {
  FeatureExtractor fx(std::make_shared<Vgg19>(Vgg19::seeded(3)));
  const Image img = test::pattern_image(64, 96);

  const GramSet grams = fx.extract_texture(img);
  const int dims[5] = {64, 128, 256, 512, 512};
  for (int l = 0; l < 5; ++l) CHECK(grams.layer_dim(l) == dims[l]);

  const ContentFeatures content = fx.extract_content(img);
  CHECK(content.map.channels == 512);
  CHECK(content.map.height == 8);
  CHECK(content.map.width == 12);

  auto [c2, g2] = fx.extract_content_and_texture(img);
  CHECK((c2.map.data - content.map.data).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((g2.grams[2] - grams.grams[2]).cwiseAbs().maxCoeff() == 0.0f);

  CHECK_THROWS_AS((void)fx.extract_texture(test::random_image(16, 40, 1)), ArgumentError);
}

TEST_CASE("geometric features are unit vectors on a 15x15 grid") {
  FeatureExtractor fx(std::make_shared<Vgg19>(Vgg19::seeded(3)));
  const GeoFeatureMap g = fx.extract_geometric(test::pattern_image(100, 130));
  CHECK(g.grid_w() == 15);
  CHECK(g.grid_h() == 15);
  CHECK(g.map.channels == 512);
  for (Eigen::Index p = 0; p < g.map.positions(); ++p) {
    const float n = g.map.data.col(p).norm();
    CHECK((n == 0.0f || std::abs(n - 1.0f) < 1e-5f));
  }
  const CorrelationTensor t = correlate(g, g);
  CHECK(t.values.rows() == 225);
  CHECK(t.values.cols() == 225);
  const nn::FeatureMap fm = t.as_feature_map();
  CHECK(fm.channels == 225);
  CHECK(fm.height == 15);
}
