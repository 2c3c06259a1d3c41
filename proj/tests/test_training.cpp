#include "doctest.h"

#include <fstream>
#include <random>

#include "gst/training.hpp"
#include "test_support.hpp"

using namespace gst;

namespace {

std::vector<std::array<double, 2>> columns(const Points<double>& p) {
  std::vector<std::array<double, 2>> out;
  for (Eigen::Index i = 0; i < p.cols(); ++i) out.push_back({p(0, i), p(1, i)});
  return out;
}

Eigen::VectorXd random_vector(int n, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::VectorXd v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

WarpParams random_affine(std::mt19937_64& rng) {
  WarpParams p = WarpParams::identity(WarpKind::affine);
  p.values += random_vector(6, rng, 0.3);
  return p;
}

WarpParams random_tps(std::mt19937_64& rng) { return {WarpKind::tps, random_vector(18, rng, 0.4)}; }

template <typename F>
Eigen::VectorXd numeric_gradient(F f, Eigen::VectorXd x, double h = 1e-6) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

}  // namespace

TEST_CASE("affine sampler draws within its ranges and is reproducible") {
  TransformSampler s;
  s.seed = 17;
  for (std::uint64_t i = 0; i < 200; ++i) {
    const WarpParams p = s.sample(i);
    REQUIRE(p.kind == WarpKind::affine);
    CHECK(std::abs(p.values[2]) <= 0.25);
    CHECK(std::abs(p.values[5]) <= 0.25);
    const Eigen::Matrix2d m = p.affine().linear();
    // det(R Sh S) = sx sy.
    CHECK(m.determinant() >= 0.75 * 0.75 - 1e-12);
    CHECK(m.determinant() <= 1.25 * 1.25 + 1e-12);
    CHECK(fraction_inside(p, 1.3) >= 0.6);
    CHECK(s.sample(i).values == p.values);
  }
  CHECK(s.sample(0).values != s.sample(1).values);
  TransformSampler other = s;
  other.seed = 18;
  CHECK(other.sample(0).values != s.sample(0).values);
}

TEST_CASE("pure rotations and scales come out as drawn") {
  TransformSampler s;
  s.affine = {0.0, 30.0, 1.0, 1.0, 0.0};
  for (std::uint64_t i = 0; i < 20; ++i) {
    const Eigen::Matrix2d m = s.sample(i).affine().linear();
    CHECK((m.transpose() * m - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(std::atan2(m(1, 0), m(0, 0))) <= 30.0 * std::numbers::pi / 180.0 + 1e-12);
  }
}

TEST_CASE("tps sampler draws bounded offsets") {
  TransformSampler s;
  s.kind = WarpKind::tps;
  s.seed = 3;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const WarpParams p = s.sample(i);
    REQUIRE(p.kind == WarpKind::tps);
    REQUIRE(p.values.size() == 18);
    CHECK(p.values.cwiseAbs().maxCoeff() <= 0.4);
    CHECK(fraction_inside(p, 1.3) >= 0.6);
  }
}

TEST_CASE("a sampler that cannot keep the image in frame fails loudly") {
  TransformSampler s;
  s.affine.translation = 0.0;
  s.affine.scale_min = 3.0;
  s.affine.scale_max = 3.5;
  CHECK_THROWS_AS((void)s.sample(0), ConfigError);
}

TEST_CASE("grid loss and error match the oracle") {
  std::mt19937_64 rng(8);
  const Points<double> grid = uniform_grid();
  REQUIRE(grid.cols() == 400);
  for (int trial = 0; trial < 20; ++trial) {
    const WarpParams a = random_affine(rng), b = random_affine(rng);
    std::vector<std::array<double, 2>> pa, pb;
    for (Eigen::Index i = 0; i < grid.cols(); ++i) {
      pa.push_back(test::affine_oracle(a.values.data(), grid(0, i), grid(1, i)));
      pb.push_back(test::affine_oracle(b.values.data(), grid(0, i), grid(1, i)));
    }
    CHECK(std::abs(grid_loss(a, b) - test::grid_loss_oracle(pa, pb)) < 1e-12);
    double err = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) err += std::hypot(pa[i][0] - pb[i][0], pa[i][1] - pb[i][1]);
    CHECK(std::abs(grid_error(a, b) - err / double(pa.size())) < 1e-12);

    const WarpParams t = random_tps(rng);
    CHECK(std::abs(grid_loss(t, a) - test::grid_loss_oracle(columns(tps_apply(t.tps(), grid)), pa)) < 1e-12);
  }
  const WarpParams id = WarpParams::identity(WarpKind::affine);
  CHECK(grid_loss(id, id) == 0.0);
}

TEST_CASE("grid loss gradients match finite differences") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const WarpParams truth = random_tps(rng);
    const WarpParams aff = random_affine(rng);
    const auto fa = [&](const Eigen::VectorXd& v) { return grid_loss({WarpKind::affine, v}, truth); };
    const Eigen::VectorXd ga = grid_loss_gradient(aff, truth);
    CHECK((ga - numeric_gradient(fa, aff.values)).cwiseAbs().maxCoeff() < 1e-7);

    const WarpParams tps = random_tps(rng);
    const auto ft = [&](const Eigen::VectorXd& v) { return grid_loss({WarpKind::tps, v}, truth); };
    const Eigen::VectorXd gt = grid_loss_gradient(tps, truth);
    CHECK((gt - numeric_gradient(ft, tps.values)).cwiseAbs().maxCoeff() < 1e-7);

    const Affine prior = aff.affine();
    const auto fc = [&](const Eigen::VectorXd& v) { return cascade_grid_loss(prior, Tps{v}, truth); };
    const Eigen::VectorXd gc = cascade_grid_loss_gradient(prior, tps.tps(), truth);
    CHECK((gc - numeric_gradient(fc, tps.values)).cwiseAbs().maxCoeff() < 1e-7);
    CHECK(cascade_grid_loss(Affine::identity(), tps.tps(), truth) == doctest::Approx(grid_loss(tps, truth)).epsilon(1e-12));
  }
}

TEST_CASE("jitter with empty ranges is the identity, and always stays in range") {
  const Image img = test::random_image(16, 16, 4);
  std::mt19937_64 rng(1);
  const Image same = jitter(img, rng, {0.0, 1.0, 1.0, 0.0});
  CHECK((same.pixels - img.pixels).cwiseAbs().maxCoeff() < 1e-6);
  for (int i = 0; i < 10; ++i) {
    const Image j = jitter(img, rng, {0.5, 0.2, 3.0, 0.3});
    CHECK(j.pixels.minCoeff() >= 0.0f);
    CHECK(j.pixels.maxCoeff() <= 1.0f);
  }
  std::mt19937_64 r1(9), r2(9);
  CHECK(jitter(img, r1).pixels == jitter(img, r2).pixels);
}

TEST_CASE("augmentation policies") {
  CHECK(parse_augment_policy("none") == AugmentPolicy::none);
  CHECK(parse_augment_policy("jitter") == AugmentPolicy::jitter);
  CHECK(parse_augment_policy("style_bank") == AugmentPolicy::style_bank);
  CHECK_THROWS_AS((void)parse_augment_policy("mixup"), ArgumentError);
  CHECK(to_string(AugmentPolicy::style_bank) == "style_bank");

  const Image img = test::random_image(16, 16, 2);
  std::mt19937_64 rng(0);
  CHECK(texture_augment(img, AugmentPolicy::none, rng).pixels == img.pixels);
  CHECK_THROWS_AS((void)texture_augment(img, AugmentPolicy::style_bank, rng, nullptr, "x"), StateError);

  const auto dir = test::temp_dir("style_bank");
  const Image r0 = test::random_image(16, 16, 30), r1 = test::random_image(16, 16, 31);
  save_image(r0, dir / "cat__0.png");
  save_image(r1, dir / "cat__1.png");
  save_image(r0, dir / "ignored.png");
  const StyleBank bank = StyleBank::load(dir);
  for (int i = 0; i < 5; ++i) {
    const Image got = texture_augment(img, AugmentPolicy::style_bank, rng, &bank, "cat");
    const double d0 = (got.pixels - load_image(dir / "cat__0.png").pixels).cwiseAbs().maxCoeff();
    const double d1 = (got.pixels - load_image(dir / "cat__1.png").pixels).cwiseAbs().maxCoeff();
    CHECK(std::min(d0, d1) == 0.0);
  }
  CHECK_THROWS_AS((void)texture_augment(img, AugmentPolicy::style_bank, rng, &bank, "dog"), StateError);
  CHECK_THROWS_AS((void)StyleBank::load(dir / "nope"), StateError);
}

TEST_CASE("training pairs are the source warped by the truth") {
  const Image a = test::pattern_image(48, 48);
  TransformSampler s;
  s.seed = 5;
  std::mt19937_64 rng(0);
  const TrainingPair pair = make_training_pair(a, s, 7, AugmentPolicy::none, rng);
  CHECK(pair.a.pixels == a.pixels);
  CHECK(pair.truth.values == s.sample(7).values);
  const Image expect = warp_image(a, make_sampling_field(pair.truth.affine().cast<float>(), 48, 48));
  CHECK(pair.b.pixels == expect.pixels);

  // A pure translation by two pixels moves a ramp by two pixels.
  TransformSampler shift;
  shift.affine = {0.0, 0.0, 1.0, 1.0, 0.0};
  Image ramp(48, 48);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) ramp.pixels.col(ramp.index(y, x)).setConstant(float(x) / 47.0f);
  const TrainingPair still = make_training_pair(ramp, shift, 0, AugmentPolicy::none, rng);
  CHECK((still.b.pixels - ramp.pixels).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("train config validation and digest") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  const std::string d = cfg.digest();
  CHECK(d.size() == 16);
  CHECK(cfg.digest() == d);
  auto other = cfg;
  other.learning_rate = 2e-3;
  CHECK(other.digest() != d);
  other = cfg;
  other.checkpoint_path = "elsewhere.bin";
  CHECK(other.digest() == d);

  auto bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ArgumentError);
  bad = cfg;
  bad.learning_rate = -1;
  CHECK_THROWS_AS(bad.validate(), ArgumentError);
  bad = cfg;
  bad.validation_fraction = 1.0;
  CHECK_THROWS_AS(bad.validate(), ArgumentError);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ArgumentError);
}

TEST_CASE("synthetic corpus is deterministic and round trips through disk") {
  const Corpus a = synthetic_corpus(3, 40, 7), b = synthetic_corpus(3, 40, 7);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.images[i].pixels == b.images[i].pixels);
    CHECK(a.images[i].width == 40);
    CHECK(a.images[i].pixels.minCoeff() >= 0.0f);
    CHECK(a.images[i].pixels.maxCoeff() <= 1.0f);
  }
  CHECK(a.images[0].pixels != a.images[1].pixels);

  const auto dir = test::temp_dir("corpus");
  a.save(dir);
  const Corpus back = Corpus::load(dir, 40);
  REQUIRE(back.size() == 3);
  CHECK(back.names == a.names);
  CHECK((back.images[2].pixels - a.images[2].pixels).cwiseAbs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);
  CHECK_THROWS_AS((void)Corpus::load(dir / "missing", 40), IoError);
}

TEST_CASE("a short training run logs, checkpoints and is reproducible") {
  const FeatureExtractor fx(std::make_shared<Vgg19>(Vgg19::seeded(42)));
  const Corpus corpus = synthetic_corpus(5, 64, 1);
  const auto dir = test::temp_dir("train_run");

  TrainConfig cfg;
  cfg.image_size = 64;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.validation_fraction = 0.2;
  cfg.arch.kernel1 = 3;
  cfg.arch.channels1 = 8;
  cfg.arch.kernel2 = 3;
  cfg.arch.channels2 = 4;
  cfg.checkpoint_path = dir / "affine.bin";
  cfg.log_path = dir / "train.log";

  std::vector<double> losses;
  const TrainResult r = train(fx, corpus, cfg, WarpKind::affine, nullptr,
                              [&](int, int, double loss) { losses.push_back(loss); });
  CHECK(losses.size() == 4);
  CHECK(r.epochs.size() == 2);
  CHECK(std::isfinite(r.first_batch_loss));
  CHECK(r.first_batch_loss == losses.front());
  CHECK(r.regressor.trained());
  CHECK(r.best_epoch >= 0);

  std::ifstream log(cfg.log_path);
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 4);

  const Regressor saved = Regressor::load(cfg.checkpoint_path, WarpKind::affine);
  CHECK(saved.digest() == r.regressor.digest());
  CHECK(Regressor::read_metadata(cfg.checkpoint_path).at("config_digest") == cfg.digest());
  CHECK(Regressor::read_metadata(cfg.checkpoint_path).at("prior_digest") == "none");
  CHECK(std::filesystem::exists(cfg.checkpoint_path.string() + ".last"));

  auto again = cfg;
  again.checkpoint_path.clear();
  again.log_path.clear();
  CHECK(train(fx, corpus, again, WarpKind::affine).regressor.digest() == r.regressor.digest());

  CHECK_THROWS_AS((void)train(fx, corpus, again, WarpKind::tps), PreconditionError);
  auto wrong = again;
  wrong.image_size = 32;
  CHECK_THROWS_AS((void)train(fx, corpus, wrong, WarpKind::affine), ArgumentError);
}
