#include "doctest.h"

#include <fstream>
#include <random>

#include "gst/backbone.hpp"
#include "gst/nn.hpp"
#include "test_support.hpp"

using namespace gst;
using nn::FeatureMap;

namespace {

FeatureMap random_map(int c, int h, int w, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  FeatureMap m(c, h, w);
  for (Eigen::Index i = 0; i < m.data.size(); ++i) m.data.data()[i] = n(rng);
  return m;
}

// Direct nested-loop convolution with zero padding.
FeatureMap conv_oracle(const nn::Conv2d& conv, const FeatureMap& x) {
  const int pad = conv.kernel / 2;
  FeatureMap out(conv.out_channels, x.height, x.width);
  for (int o = 0; o < conv.out_channels; ++o)
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx) {
        double s = conv.bias[o];
        for (int ky = 0; ky < conv.kernel; ++ky)
          for (int kx = 0; kx < conv.kernel; ++kx) {
            const int sy = y + ky - pad, sx = xx + kx - pad;
            if (sy < 0 || sy >= x.height || sx < 0 || sx >= x.width) continue;
            for (int i = 0; i < conv.in_channels; ++i)
              s += double(conv.weight(o, (ky * conv.kernel + kx) * conv.in_channels + i)) * x.data(i, sy * x.width + sx);
          }
        out.data(o, y * x.width + xx) = float(s);
      }
  return out;
}

double dot(const FeatureMap& a, const FeatureMap& b) { return a.data.cast<double>().cwiseProduct(b.data.cast<double>()).sum(); }

}  // namespace

TEST_CASE("Conv2d forward matches a direct convolution") {
  std::mt19937_64 rng(1);
  for (int k : {1, 3, 5}) {
    nn::Conv2d conv(3, 4, k);
    conv.init_he(rng);
    std::normal_distribution<float> n(0.0f, 0.1f);
    for (int o = 0; o < 4; ++o) conv.bias[o] = n(rng);
    const FeatureMap x = random_map(3, 6, 7, rng);
    const FeatureMap got = conv.forward(x);
    CHECK((got.data - conv_oracle(conv, x).data).cwiseAbs().maxCoeff() < 1e-4f);
  }
  nn::Conv2d conv(3, 2, 3);
  CHECK_THROWS_AS((void)conv.forward(random_map(4, 3, 3, rng)), ArgumentError);
  CHECK_THROWS_AS(nn::Conv2d(1, 1, 2), ArgumentError);
}

TEST_CASE("Conv2d backward is the adjoint of forward") {
  // <conv(x), g> is linear in x and in the weights, so the gradients are exact
  // up to float rounding.
  std::mt19937_64 rng(2);
  nn::Conv2d conv(3, 5, 3);
  conv.init_he(rng);
  const FeatureMap x = random_map(3, 5, 6, rng);
  const FeatureMap g = random_map(5, 5, 6, rng);
  nn::Conv2d::Grad grad;
  const FeatureMap gx = conv.backward(x, g, &grad);

  const FeatureMap dx = random_map(3, 5, 6, rng);
  nn::Conv2d no_bias = conv;
  no_bias.bias.setZero();
  CHECK(dot(no_bias.forward(dx), g) == doctest::Approx(dot(dx, gx)).epsilon(1e-4));

  nn::Conv2d dw(3, 5, 3);
  dw.weight = random_map(5, 1, 27, rng).data;
  dw.bias = Eigen::VectorXf::Random(5);
  const double lhs = dot(dw.forward(x), g);
  const double rhs = dw.weight.cast<double>().cwiseProduct(grad.weight.cast<double>()).sum() +
                     dw.bias.cast<double>().dot(grad.bias.cast<double>());
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-4));
}

TEST_CASE("relu and max pooling") {
  FeatureMap x(1, 2, 3);
  x.data << -1, 2, 0, 3, -4, 5;
  const FeatureMap r = nn::relu(x);
  CHECK(r.data(0, 0) == 0.0f);
  CHECK(r.data(0, 1) == 2.0f);
  FeatureMap g(1, 2, 3);
  g.data.setOnes();
  const FeatureMap rb = nn::relu_backward(r, g);
  CHECK(rb.data.sum() == 3.0f);

  FeatureMap p(1, 5, 5);
  for (int i = 0; i < 25; ++i) p.data(0, i) = float(i);
  const FeatureMap pooled = nn::max_pool2(p);
  CHECK(pooled.height == 2);
  CHECK(pooled.width == 2);
  CHECK(pooled.data(0, 0) == 6.0f);
  CHECK(pooled.data(0, 3) == 18.0f);

  FeatureMap gp(1, 2, 2);
  gp.data << 1, 2, 3, 4;
  const FeatureMap back = nn::max_pool2_backward(p, gp);
  CHECK(back.data(0, 6) == 1.0f);
  CHECK(back.data(0, 18) == 4.0f);
  CHECK(back.data.sum() == 10.0f);
  CHECK(back.data(0, 24) == 0.0f);
}

TEST_CASE("BatchNorm gradients match finite differences") {
  std::mt19937_64 rng(3);
  nn::BatchNorm bn(3);
  bn.gamma << 1.5f, 0.5f, -1.0f;
  bn.beta << 0.1f, -0.2f, 0.3f;
  std::vector<FeatureMap> xs = {random_map(3, 2, 3, rng), random_map(3, 2, 3, rng)};
  std::vector<FeatureMap> gs = {random_map(3, 2, 3, rng), random_map(3, 2, 3, rng)};
  auto objective = [&](const std::vector<FeatureMap>& in) {
    nn::BatchNorm copy = bn;
    nn::BatchNorm::Cache c;
    const auto out = copy.forward_train(in, c);
    return dot(out[0], gs[0]) + dot(out[1], gs[1]);
  };
  nn::BatchNorm work = bn;
  nn::BatchNorm::Cache cache;
  const auto out = work.forward_train(xs, cache);
  // Normalized channels have zero mean and unit variance across the batch.
  for (int c = 0; c < 3; ++c) {
    double m = 0;
    for (const auto& o : out) m += (o.data.row(c).array() - bn.beta[c]).sum();
    CHECK(std::abs(m) < 1e-4);
  }
  nn::BatchNorm::Grad grad;
  const auto gx = work.backward(cache, gs, grad);
  const float h = 1e-2f;
  for (int s = 0; s < 2; ++s)
    for (Eigen::Index i = 0; i < 18; i += 5) {
      auto plus = xs, minus = xs;
      plus[s].data.data()[i] += h;
      minus[s].data.data()[i] -= h;
      const double fd = (objective(plus) - objective(minus)) / (2 * h);
      CHECK(fd == doctest::Approx(gx[s].data.data()[i]).epsilon(2e-2).scale(1.0));
    }
  CHECK(work.running_mean.cwiseAbs().maxCoeff() > 0.0f);

  const FeatureMap eval = work.forward_eval(xs[0]);
  CHECK(eval.same_shape(xs[0]));
}

TEST_CASE("Adam moves against the gradient") {
  nn::Adam adam(0.1f);
  nn::AdamSlot slot;
  Eigen::VectorXf p = Eigen::VectorXf::Zero(3);
  Eigen::VectorXf g(3);
  g << 1, -2, 0;
  adam.step();
  adam.update(p, g, slot);
  CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(0.1).epsilon(1e-4));
  CHECK(p[2] == 0.0f);
  CHECK(adam.time_step() == 1);
}

TEST_CASE("VGG-19 stage names and shapes") {
  for (int s = 0; s < kVggStageCount; ++s) {
    const auto stage = static_cast<VggStage>(s);
    CHECK(parse_stage(stage_name(stage)) == stage);
  }
  CHECK_FALSE(parse_stage("conv6_1").has_value());

  const Vgg19 net = Vgg19::seeded(7);
  const int expected[5] = {64, 128, 256, 512, 512};
  for (int l = 0; l < 5; ++l) CHECK(net.channels(kTextureStages[l]) == expected[l]);
  CHECK(net.channels(kContentStage) == 512);
  CHECK(net.channels(kGeometricStage) == 512);

  const Image img = test::random_image(48, 64, 5);
  const VggStage wanted[] = {VggStage::conv1_1, VggStage::conv4_2, VggStage::pool4};
  const auto trace = net.forward(normalize_for_backbone(img), wanted);
  CHECK(trace.at(VggStage::conv1_1).height == 48);
  CHECK(trace.at(VggStage::conv4_2).width == 8);
  CHECK(trace.at(VggStage::pool4).height == 3);
  CHECK(trace.at(VggStage::pool4).width == 4);
  CHECK_FALSE(trace.outputs[int(VggStage::conv2_1)].has_value());
  CHECK(trace.at(VggStage::conv4_2).data.minCoeff() >= 0.0f);
}

TEST_CASE("seeded backbones are reproducible and filters are centered") {
  const Vgg19 a = Vgg19::seeded(11), b = Vgg19::seeded(11), c = Vgg19::seeded(12);
  CHECK(a.digest() == b.digest());
  CHECK(a.digest() != c.digest());
  for (const auto& conv : a.convs()) CHECK(conv.weight.rowwise().mean().cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("weights file round trip and errors") {
  const auto dir = test::temp_dir("backbone");
  const Vgg19 a = Vgg19::seeded(21);
  a.save(dir / "w.bin");
  const Vgg19 b = Vgg19::load(dir / "w.bin");
  CHECK(a.digest() == b.digest());

  CHECK_THROWS_AS(Vgg19::load(dir / "missing.bin"), InitializationError);
  std::ofstream(dir / "bad.bin") << "GSTVGG19 but not really";
  CHECK_THROWS_AS(Vgg19::load(dir / "bad.bin"), InitializationError);
  {
    std::ifstream in(dir / "w.bin", std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
    bytes.resize(bytes.size() / 2);
    std::ofstream(dir / "half.bin", std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
  }
  CHECK_THROWS_AS(Vgg19::load(dir / "half.bin"), InitializationError);
}

TEST_CASE("backbone backward matches finite differences") {
  const Vgg19 net = Vgg19::seeded(5);
  const auto img = normalize_for_backbone(test::random_image(16, 16, 8)).cast<double>();
  std::mt19937_64 rng(4);
  const VggStage wanted[] = {VggStage::conv1_1, VggStage::conv3_1};
  const auto trace = net.forward(img, wanted, true);
  std::map<VggStage, nn::FeatureMapT<double>> grads;
  grads[VggStage::conv1_1] = random_map(64, 16, 16, rng).cast<double>();
  grads[VggStage::conv3_1] = random_map(256, 4, 4, rng).cast<double>();
  const auto g = net.backward(trace, grads);

  auto objective = [&](const ImageT<double>& x) {
    const auto t = net.forward(x, wanted);
    double s = 0;
    for (auto& [stage, gm] : grads) s += t.at(stage).data.cwiseProduct(gm.data).sum();
    return s;
  };
  std::uniform_int_distribution<Eigen::Index> pick(0, img.pixels.size() - 1);
  for (int t = 0; t < 12; ++t) {
    const Eigen::Index i = pick(rng);
    auto plus = img, minus = img;
    plus.pixels.data()[i] += 1e-6;
    minus.pixels.data()[i] -= 1e-6;
    const double fd = (objective(plus) - objective(minus)) / 2e-6;
    CHECK(std::abs(fd - g.pixels.data()[i]) <= 1e-5 * std::max(1.0, std::abs(fd)));
  }
}
