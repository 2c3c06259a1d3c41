#include "gst/texture.hpp"

#include <cmath>
#include <deque>
#include <map>
#include <sstream>

namespace gst {
namespace {

constexpr std::array<VggStage, 6> kTransferStages = {VggStage::conv1_1, VggStage::conv2_1, VggStage::conv3_1,
                                                     VggStage::conv4_1, VggStage::conv4_2, VggStage::conv5_1};

void check_finite(const LossTerms& l, int level, int iteration) {
  if (!std::isfinite(l.total)) {
    std::ostringstream os;
    os << "non-finite loss at level " << level << " iteration " << iteration << " (texture=" << l.texture
       << ", content=" << l.content << ")";
    throw NumericError(os.str());
  }
}

void check_same_size(const Image& a, const Image& b, const char* what) {
  if (a.height != b.height || a.width != b.width) throw ArgumentError(std::string(what) + ": image sizes differ");
}

}  // namespace

PixelOptimizer parse_pixel_optimizer(std::string_view s) {
  if (s == "adam") return PixelOptimizer::adam;
  if (s == "lbfgs") return PixelOptimizer::lbfgs;
  throw ArgumentError("unknown pixel optimizer '" + std::string(s) + "' (expected adam|lbfgs)");
}

void TransferConfig::validate() const {
  double sum = 0;
  for (double w : layer_weights) {
    if (!(w >= 0)) throw ArgumentError("layer weights must be non-negative");
    sum += w;
  }
  if (!(sum > 0)) throw ArgumentError("layer weights must not all be zero");
  if (!(alpha_over_beta > 0)) throw ArgumentError("alpha_over_beta must be positive");
  if (pyramid_levels < 1) throw ArgumentError("pyramid_levels must be >= 1");
  if (iterations_per_level.empty()) throw ArgumentError("iterations_per_level must not be empty");
  for (int it : iterations_per_level)
    if (it < 1) throw ArgumentError("iterations per level must be >= 1");
  if (!(step_size > 0)) throw ArgumentError("step_size must be positive");
}

int TransferConfig::iterations_for_level(int level) const {
  if (iterations_per_level.empty()) throw ArgumentError("iterations_per_level must not be empty");
  const auto i = std::min<std::size_t>(std::size_t(level), iterations_per_level.size() - 1);
  return iterations_per_level[i];
}

template <typename Scalar>
double content_loss(const ContentFeaturesT<Scalar>& target, const ContentFeaturesT<Scalar>& out) {
  if (!target.map.same_shape(out.map)) throw ArgumentError("content_loss: feature maps differ in shape");
  return 0.5 * (target.map.data - out.map.data).template cast<double>().squaredNorm() / double(target.map.data.size());
}

template <typename Scalar>
double texture_loss(const GramSetT<Scalar>& style, const GramSetT<Scalar>& out, const std::array<double, 5>& weights) {
  double total = 0;
  for (int l = 0; l < 5; ++l) {
    if (style.grams[l].rows() != out.grams[l].rows() || style.grams[l].cols() != out.grams[l].cols())
      throw ArgumentError("texture_loss: Gram sets differ in layer structure");
    total += weights[l] * (style.grams[l] - out.grams[l]).template cast<double>().squaredNorm() / double(style.grams[l].size());
  }
  return 0.5 * total;
}

template <typename Scalar>
LossTerms total_loss(const FeatureExtractor& fx, const TransferTargetsT<Scalar>& targets, const ImageT<Scalar>& out,
                     const TransferConfig& cfg) {
  auto [content, grams] = fx.extract_content_and_texture(out);
  LossTerms l;
  l.texture = texture_loss(targets.style_grams, grams, cfg.layer_weights);
  l.content = content_loss(targets.content, content);
  l.total = cfg.alpha_over_beta * l.texture + l.content;
  return l;
}

LossTerms total_loss(const FeatureExtractor& fx, const Image& style, const Image& content, const Image& out,
                     const TransferConfig& cfg) {
  return total_loss(fx, TransferTargets::from_images(fx, style, content), out, cfg);
}

template <typename Scalar>
LossAndGradientT<Scalar> total_loss_and_gradient(const FeatureExtractor& fx, const TransferTargetsT<Scalar>& targets,
                                                 const ImageT<Scalar>& out, const TransferConfig& cfg) {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const auto trace = fx.backbone().forward(normalize_for_backbone(out), kTransferStages, /*keep_all=*/true);
  const double alpha = cfg.alpha_over_beta;

  LossAndGradientT<Scalar> r;
  std::map<VggStage, nn::FeatureMapT<Scalar>> grads;
  for (int l = 0; l < 5; ++l) {
    const auto& f = trace.at(kTextureStages[l]);
    const Matrix gram = gram_matrix(f.data);
    const Matrix diff = gram - targets.style_grams.grams[l];
    const double n2 = double(diff.size());
    r.loss.texture += 0.5 * cfg.layer_weights[l] * diff.template cast<double>().squaredNorm() / n2;
    // d/dF of 0.5 w |F F^T / M - S|^2 / N^2 = 2 w (G - S) F / (M N^2) for symmetric G - S.
    const auto scale = Scalar(alpha * 2.0 * cfg.layer_weights[l] / (double(f.positions()) * n2));
    grads[kTextureStages[l]] = nn::FeatureMapT<Scalar>(f.height, f.width, scale * (diff * f.data));
  }
  {
    const auto& f = trace.at(kContentStage);
    if (!f.same_shape(targets.content.map)) throw ArgumentError("content target does not match the output image size");
    const Matrix diff = f.data - targets.content.map.data;
    r.loss.content = 0.5 * diff.template cast<double>().squaredNorm() / double(diff.size());
    grads[kContentStage] = nn::FeatureMapT<Scalar>(f.height, f.width, diff / Scalar(diff.size()));
  }
  r.loss.total = alpha * r.loss.texture + r.loss.content;

  ImageT<Scalar> g = fx.backbone().backward(trace, grads);
  for (int c = 0; c < 3; ++c) g.pixels.row(c) /= Scalar(kBackboneStd[c]);
  r.gradient = std::move(g);
  return r;
}

#define GST_TEXTURE_INSTANTIATE(S)                                                                                \
  template double content_loss(const ContentFeaturesT<S>&, const ContentFeaturesT<S>&);                         \
  template double texture_loss(const GramSetT<S>&, const GramSetT<S>&, const std::array<double, 5>&);           \
  template LossTerms total_loss(const FeatureExtractor&, const TransferTargetsT<S>&, const ImageT<S>&,          \
                                const TransferConfig&);                                                         \
  template LossAndGradientT<S> total_loss_and_gradient(const FeatureExtractor&, const TransferTargetsT<S>&,     \
                                                       const ImageT<S>&, const TransferConfig&);
GST_TEXTURE_INSTANTIATE(float)
GST_TEXTURE_INSTANTIATE(double)
#undef GST_TEXTURE_INSTANTIATE

namespace {

LevelResult run_adam(const FeatureExtractor& fx, const TransferTargets& targets, Image x, int iterations,
                     const TransferConfig& cfg, int level, const IterationCallback& cb) {
  LevelResult res;
  nn::Adam adam(float(cfg.step_size));
  nn::AdamSlot slot;
  // A step that raises the loss is undone and the step size halved.
  Image best;
  Image best_grad;
  for (int it = 0; it < iterations; ++it) {
    auto lg = total_loss_and_gradient(fx, targets, x, cfg);
    check_finite(lg.loss, level, it);
    if (it == 0) res.initial = lg.loss;
    if (it == 0 || lg.loss.total < res.final.total) {
      res.final = lg.loss;
      best = x;
      best_grad = std::move(lg.gradient);
    } else {
      x = best;
      adam.set_learning_rate(0.5f * adam.learning_rate());
    }
    IterationRecord rec{level, it, lg.loss};
    res.log.push_back(rec);
    adam.step();
    adam.update(x.pixels, best_grad.pixels, slot);
    x.clamp01();
    if (cb) cb(rec);
  }
  const LossTerms last = total_loss(fx, targets, x, cfg);
  check_finite(last, level, iterations);
  if (last.total < res.final.total) {
    res.final = last;
    best = std::move(x);
  }
  res.image = std::move(best);
  return res;
}

// Projected L-BFGS with backtracking on the [0,1] box.
LevelResult run_lbfgs(const FeatureExtractor& fx, const TransferTargets& targets, Image x, int iterations,
                      const TransferConfig& cfg, int level, const IterationCallback& cb) {
  using Vec = Eigen::VectorXf;
  LevelResult res;
  std::deque<std::pair<Vec, Vec>> history;  // (s, y)
  auto lg = total_loss_and_gradient(fx, targets, x, cfg);
  check_finite(lg.loss, level, 0);
  res.initial = lg.loss;
  for (int it = 0; it < iterations; ++it) {
    IterationRecord rec{level, it, lg.loss};
    res.log.push_back(rec);
    const Vec g = Eigen::Map<const Vec>(lg.gradient.pixels.data(), lg.gradient.pixels.size());
    Vec q = g;
    std::vector<float> alphas(history.size());
    for (std::size_t i = history.size(); i-- > 0;) {
      const auto& [s, y] = history[i];
      alphas[i] = s.dot(q) / y.dot(s);
      q -= alphas[i] * y;
    }
    if (!history.empty()) {
      const auto& [s, y] = history.back();
      q *= s.dot(y) / y.dot(y);
    } else {
      q *= float(cfg.step_size) / std::max(g.cwiseAbs().maxCoeff(), 1e-12f);
    }
    for (std::size_t i = 0; i < history.size(); ++i) {
      const auto& [s, y] = history[i];
      const float beta = y.dot(q) / y.dot(s);
      q += (alphas[i] - beta) * s;
    }
    if (g.dot(q) <= 0) {  // not a descent direction; restart from steepest descent
      history.clear();
      q = g * (float(cfg.step_size) / std::max(g.cwiseAbs().maxCoeff(), 1e-12f));
    }

    float t = 1.0f;
    Image candidate = x;
    LossAndGradient next;
    for (int ls = 0; ls < 12; ++ls, t *= 0.5f) {
      Eigen::Map<Vec>(candidate.pixels.data(), candidate.pixels.size()) =
          Eigen::Map<const Vec>(x.pixels.data(), x.pixels.size()) - t * q;
      candidate.clamp01();
      next = total_loss_and_gradient(fx, targets, candidate, cfg);
      if (std::isfinite(next.loss.total) && next.loss.total <= lg.loss.total) break;
    }
    check_finite(next.loss, level, it + 1);
    if (next.loss.total > lg.loss.total) {  // line search failed: keep the iterate
      if (cb) cb(rec);
      continue;
    }
    Vec s = Eigen::Map<const Vec>(candidate.pixels.data(), candidate.pixels.size()) -
            Eigen::Map<const Vec>(x.pixels.data(), x.pixels.size());
    Vec y = Eigen::Map<const Vec>(next.gradient.pixels.data(), next.gradient.pixels.size()) - g;
    if (s.dot(y) > 1e-10f) {
      history.emplace_back(std::move(s), std::move(y));
      if (int(history.size()) > cfg.lbfgs_history) history.pop_front();
    }
    x = std::move(candidate);
    lg = std::move(next);
    if (cb) cb(rec);
  }
  res.final = lg.loss;
  res.image = std::move(x);
  return res;
}

}  // namespace

LevelResult optimize_level(const FeatureExtractor& fx, const Image& init, const Image& style, const Image& content,
                           int iterations, const TransferConfig& cfg, int level, const IterationCallback& on_iteration) {
  check_same_size(init, style, "optimize_level");
  check_same_size(init, content, "optimize_level");
  if (iterations < 1) throw ArgumentError("optimize_level: iterations must be >= 1");
  cfg.validate();
  const TransferTargets targets = TransferTargets::from_images(fx, style, content);
  Image x = init;
  x.clamp01();
  return cfg.optimizer == PixelOptimizer::adam ? run_adam(fx, targets, std::move(x), iterations, cfg, level, on_iteration)
                                               : run_lbfgs(fx, targets, std::move(x), iterations, cfg, level, on_iteration);
}

TransferResult multiscale_transfer(const FeatureExtractor& fx, const Image& content_warped, const Image& style,
                                   const TransferConfig& cfg, const IterationCallback& on_iteration) {
  check_same_size(content_warped, style, "multiscale_transfer");
  cfg.validate();
  const Pyramid content_pyr = gaussian_pyramid(content_warped, cfg.pyramid_levels);
  const Pyramid style_pyr = gaussian_pyramid(style, cfg.pyramid_levels);

  TransferResult result;
  Image init = content_pyr.levels.back();
  for (int level = cfg.pyramid_levels - 1; level >= 0; --level) {
    const Image& c = content_pyr.levels[level];
    const Image& s = style_pyr.levels[level];
    if (init.width != c.width || init.height != c.height) init = resize(init, c.width, c.height);
    LevelResult lr = optimize_level(fx, init, s, c, cfg.iterations_for_level(level), cfg, level, on_iteration);
    init = lr.image;
    result.levels.push_back(std::move(lr));
  }
  result.image = std::move(init);
  result.image.clamp01();
  return result;
}

}  // namespace gst
