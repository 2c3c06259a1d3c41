#include "gst/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

namespace gst {
namespace {

// Independent stream per (seed, tag, index) so draws never depend on call order.
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(tag), std::uint32_t(index),
                    std::uint32_t(index >> 32)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kTagTransform = 1;
constexpr std::uint64_t kTagAugment = 2;
constexpr std::uint64_t kTagSplit = 3;
constexpr std::uint64_t kTagOrder = 4;
constexpr std::uint64_t kTagValidation = 5;
constexpr std::uint64_t kTagInit = 6;

Affine sample_affine(const AffineRanges& r, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto in = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const double tx = in(-r.translation, r.translation), ty = in(-r.translation, r.translation);
  const double angle = in(-r.rotation_deg, r.rotation_deg) * std::numbers::pi / 180.0;
  const double sx = in(r.scale_min, r.scale_max), sy = in(r.scale_min, r.scale_max);
  const double shear = in(-r.shear, r.shear);
  Eigen::Matrix2d rot, sh, sc;
  rot << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  sh << 1, shear, 0, 1;
  sc << sx, 0, 0, sy;
  const Eigen::Matrix2d m = rot * sh * sc;
  Affine a;
  a.theta << m(0, 0), m(0, 1), tx, m(1, 0), m(1, 1), ty;
  return a;
}

Eigen::VectorXd affine_gradient(const Points<double>& grid, const Points<double>& residual) {
  const double k = 2.0 / double(grid.cols());
  Eigen::VectorXd g(6);
  g << residual.row(0).dot(grid.row(0)), residual.row(0).dot(grid.row(1)), residual.row(0).sum(),
      residual.row(1).dot(grid.row(0)), residual.row(1).dot(grid.row(1)), residual.row(1).sum();
  return k * g;
}

Eigen::VectorXd tps_gradient(const Points<double>& grid, const Points<double>& residual) {
  const auto m = tps_weights<double>(grid);
  const double k = 2.0 / double(grid.cols());
  Eigen::VectorXd g(18);
  g.head<9>() = k * (m * residual.row(0).transpose());
  g.tail<9>() = k * (m * residual.row(1).transpose());
  return g;
}

bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

double fraction_inside(const WarpParams& p, double bound) {
  const Points<double> mapped = p.apply(uniform_grid());
  const auto inside = (mapped.cwiseAbs().colwise().maxCoeff().array() <= bound).count();
  return double(inside) / double(mapped.cols());
}

WarpParams TransformSampler::sample(std::uint64_t index) const {
  auto rng = stream(seed, kTagTransform, index);
  std::uniform_real_distribution<double> u(-tps_offset, tps_offset);
  for (int attempt = 0; attempt < 100; ++attempt) {
    WarpParams p;
    if (kind == WarpKind::affine) {
      p = WarpParams::from(sample_affine(affine, rng));
    } else {
      Tps t;
      for (int i = 0; i < 18; ++i) t.offsets[i] = u(rng);
      p = WarpParams::from(t);
    }
    if (fraction_inside(p, inside_bound) >= min_inside) return p;
  }
  throw ConfigError("transform sampler rejected 100 consecutive draws; the sampling ranges keep too little of the image in frame");
}

AugmentPolicy parse_augment_policy(std::string_view s) {
  if (s == "none") return AugmentPolicy::none;
  if (s == "jitter") return AugmentPolicy::jitter;
  if (s == "style_bank") return AugmentPolicy::style_bank;
  throw ArgumentError("unknown augmentation policy '" + std::string(s) + "' (expected none|jitter|style_bank)");
}

std::string_view to_string(AugmentPolicy p) {
  switch (p) {
    case AugmentPolicy::none: return "none";
    case AugmentPolicy::jitter: return "jitter";
    case AugmentPolicy::style_bank: return "style_bank";
  }
  return "none";
}

Image jitter(const Image& img, std::mt19937_64& rng, const JitterRanges& r) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  auto in = [&](double lo, double hi) { return float(lo + (hi - lo) * u(rng)); };
  const float contrast = in(r.contrast_min, r.contrast_max);
  Eigen::Vector3f shift;
  for (int c = 0; c < 3; ++c) shift[c] = in(-r.color_shift, r.color_shift);
  const float sigma = in(0.0, r.noise_sigma_max);
  Image out = img;
  out.pixels = ((img.pixels.array() - 0.5f) * contrast + 0.5f).matrix().colwise() + shift;
  if (sigma > 0) {
    std::normal_distribution<float> noise(0.0f, sigma);
    for (Eigen::Index i = 0; i < out.pixels.size(); ++i) out.pixels.data()[i] += noise(rng);
  }
  out.clamp01();
  return out;
}

StyleBank StyleBank::load(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw StateError("style bank directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  StyleBank bank;
  for (const auto& f : files) {
    const std::string stem = f.stem().string();
    const auto sep = stem.find("__");
    if (sep == std::string::npos) continue;
    bank.add(stem.substr(0, sep), load_image(f));
  }
  if (bank.empty()) throw StateError("style bank '" + dir.string() + "' holds no <name>__<k> renditions");
  return bank;
}

void StyleBank::add(const std::string& name, Image rendition) { bank_[name].push_back(std::move(rendition)); }

const Image& StyleBank::pick(const std::string& name, std::mt19937_64& rng) const {
  auto it = bank_.find(name);
  if (it == bank_.end() || it->second.empty()) throw StateError("style bank has no rendition of '" + name + "'");
  std::uniform_int_distribution<std::size_t> d(0, it->second.size() - 1);
  return it->second[d(rng)];
}

Image texture_augment(const Image& img, AugmentPolicy policy, std::mt19937_64& rng, const StyleBank* bank,
                      const std::string& name) {
  switch (policy) {
    case AugmentPolicy::none: return img;
    case AugmentPolicy::jitter: return jitter(img, rng);
    case AugmentPolicy::style_bank: {
      if (!bank || bank->empty()) throw StateError("style_bank augmentation selected but no style bank is loaded");
      const Image& r = bank->pick(name, rng);
      return r.width == img.width && r.height == img.height ? r : resize(r, img.width, img.height);
    }
  }
  return img;
}

TrainingPair make_training_pair(const Image& a, const TransformSampler& sampler, std::uint64_t index, AugmentPolicy policy,
                                std::mt19937_64& rng, const StyleBank* bank, const std::string& name) {
  TrainingPair pair{a, Image(), sampler.sample(index)};
  auto field = [&](const Image& src) {
    return pair.truth.kind == WarpKind::affine
               ? warp_image(src, make_sampling_field(pair.truth.affine().cast<float>(), src.height, src.width))
               : warp_image(src, make_sampling_field(pair.truth.tps().cast<float>(), src.height, src.width));
  };
  if (policy == AugmentPolicy::style_bank)
    pair.b = field(texture_augment(a, policy, rng, bank, name));
  else
    pair.b = texture_augment(field(a), policy, rng, bank, name);
  return pair;
}

double grid_loss(const WarpParams& pred, const WarpParams& truth, const Points<double>& grid) {
  return (pred.apply(grid) - truth.apply(grid)).colwise().squaredNorm().mean();
}

double grid_error(const WarpParams& pred, const WarpParams& truth, const Points<double>& grid) {
  return (pred.apply(grid) - truth.apply(grid)).colwise().norm().mean();
}

Eigen::VectorXd grid_loss_gradient(const WarpParams& pred, const WarpParams& truth, const Points<double>& grid) {
  const Points<double> residual = pred.apply(grid) - truth.apply(grid);
  return pred.kind == WarpKind::affine ? affine_gradient(grid, residual) : tps_gradient(grid, residual);
}

double cascade_grid_loss(const Affine& affine, const Tps& tps, const WarpParams& truth, const Points<double>& grid) {
  return (affine_apply(affine, tps_apply(tps, grid)) - truth.apply(grid)).colwise().squaredNorm().mean();
}

double cascade_grid_error(const Affine& affine, const Tps& tps, const WarpParams& truth, const Points<double>& grid) {
  return (affine_apply(affine, tps_apply(tps, grid)) - truth.apply(grid)).colwise().norm().mean();
}

Eigen::VectorXd cascade_grid_loss_gradient(const Affine& affine, const Tps& tps, const WarpParams& truth,
                                           const Points<double>& grid) {
  const Points<double> residual = affine_apply(affine, tps_apply(tps, grid)) - truth.apply(grid);
  return tps_gradient(grid, affine.linear().transpose() * residual);
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ArgumentError("learning_rate must be positive");
  if (image_size < kMinImageSide) throw ArgumentError("image_size must be >= " + std::to_string(kMinImageSide));
  if (grid_points < 2) throw ArgumentError("grid_points must be >= 2");
  if (epochs < 1) throw ArgumentError("epochs must be >= 1");
  if (pairs_per_image < 1) throw ArgumentError("pairs_per_image must be >= 1");
  if (!(validation_fraction >= 0 && validation_fraction < 1)) throw ArgumentError("validation_fraction must be in [0,1)");
}

std::string TrainConfig::digest() const {
  std::ostringstream os;
  os << std::setprecision(17) << batch_size << '|' << learning_rate << '|' << image_size << '|' << grid_points << '|' << epochs
     << '|' << pairs_per_image << '|' << validation_fraction << '|' << to_string(augment) << '|' << to_string(sampler.kind)
     << '|' << sampler.affine.translation << '|' << sampler.affine.rotation_deg << '|' << sampler.affine.scale_min << '|'
     << sampler.affine.scale_max << '|' << sampler.affine.shear << '|' << sampler.tps_offset << '|' << sampler.seed << '|'
     << sampler.min_inside << '|' << sampler.inside_bound << '|' << arch.describe() << '|' << seed;
  const std::string s = os.str();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << h;
  return hex.str();
}

Corpus Corpus::load(const std::filesystem::path& dir, int size) {
  if (!std::filesystem::is_directory(dir)) throw IoError("corpus directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ArgumentError("corpus '" + dir.string() + "' contains no PNG or JPEG images");
  Corpus c;
  for (const auto& f : files) {
    c.names.push_back(f.stem().string());
    c.images.push_back(center_square(load_image(f), size));
  }
  return c;
}

void Corpus::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < images.size(); ++i) save_image(images[i], dir / (names[i] + ".png"));
}

Image synthetic_image(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto in = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  Image coarse(6, 6);
  for (Eigen::Index i = 0; i < coarse.pixels.size(); ++i) coarse.pixels.data()[i] = float(u(rng));
  Image img = resize(coarse, size, size);

  const int shapes = 12 + int(u(rng) * 13);
  for (int s = 0; s < shapes; ++s) {
    const double cx = u(rng), cy = u(rng), rx = in(0.03, 0.25), ry = in(0.03, 0.25), th = in(0, std::numbers::pi);
    Eigen::Vector3f col, col2;
    for (int c = 0; c < 3; ++c) col[c] = float(u(rng));
    for (int c = 0; c < 3; ++c) col2[c] = float(u(rng));
    const int outline = int(u(rng) * 3), fill = int(u(rng) * 3);
    const double freq = fill == 1 ? in(10, 40) : in(8, 30), phase = in(0, 6.3);
    const double ct = std::cos(th), st = std::sin(th);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double px = double(x) / size - cx, py = double(y) / size - cy;
        const double a = px * ct + py * st, b = -px * st + py * ct;
        const bool inside = outline == 0   ? (a / rx) * (a / rx) + (b / ry) * (b / ry) < 1
                            : outline == 1 ? std::abs(a) < rx && std::abs(b) < ry
                                           : std::abs(a) / rx + std::abs(b) / ry < 1;
        if (!inside) continue;
        float t = 1.0f;
        if (fill == 1) t = float(0.5 + 0.5 * std::sin(freq * a + phase));
        if (fill == 2) t = float(std::fmod(std::floor(freq * a) + std::floor(freq * b), 2.0) != 0.0);
        img.pixels.col(img.index(y, x)) = t * col + (1 - t) * col2;
      }
  }
  img.clamp01();
  return img;
}

Corpus synthetic_corpus(int count, int size, std::uint64_t seed) {
  Corpus c;
  for (int i = 0; i < count; ++i) {
    auto rng = stream(seed, 0, std::uint64_t(i));
    std::ostringstream name;
    name << "synth_" << std::setw(4) << std::setfill('0') << i;
    c.names.push_back(name.str());
    c.images.push_back(synthetic_image(size, rng));
  }
  return c;
}

namespace {

// One regressor input with everything needed to score a prediction.
struct Sample {
  CorrelationTensor corr;
  WarpParams truth;
  Affine prior = Affine::identity();  // frozen affine stage, TPS training only
};

class SampleFactory {
 public:
  SampleFactory(const FeatureExtractor& fx, const Corpus& corpus, const TrainConfig& cfg, WarpKind kind,
                const Regressor* prior)
      : fx_(fx), corpus_(corpus), cfg_(cfg), kind_(kind), prior_(prior), sampler_(cfg.sampler) {
    sampler_.kind = kind;
    geo_.resize(corpus.size());
    if (cfg.augment == AugmentPolicy::style_bank) {
      if (cfg.style_bank_dir.empty()) throw StateError("style_bank augmentation needs a style bank directory");
      bank_ = StyleBank::load(cfg.style_bank_dir);
    }
  }

  Sample make(std::size_t image, std::uint64_t draw, std::uint64_t tag) {
    auto rng = stream(cfg_.seed, kTagAugment ^ (tag << 8), draw);
    TransformSampler s = sampler_;
    s.seed = cfg_.sampler.seed ^ (tag * 0x9e3779b97f4a7c15ULL);
    const TrainingPair pair = make_training_pair(corpus_.images[image], s, draw, cfg_.augment, rng, &bank_, corpus_.names[image]);
    const GeoFeatureMap gb = fx_.extract_geometric(pair.b);
    Sample out{{}, pair.truth, Affine::identity()};
    if (kind_ == WarpKind::affine) {
      out.corr = correlate(geo_a(image), gb);
    } else {
      out.prior = prior_->predict(correlate(geo_a(image), gb)).affine();
      const Image& a = corpus_.images[image];
      const Image prewarped = warp_image(a, make_sampling_field(out.prior.cast<float>(), a.height, a.width));
      out.corr = correlate(fx_.extract_geometric(prewarped), gb);
    }
    return out;
  }

 private:
  const GeoFeatureMap& geo_a(std::size_t i) {
    if (!geo_[i]) geo_[i] = fx_.extract_geometric(corpus_.images[i]);
    return *geo_[i];
  }

  const FeatureExtractor& fx_;
  const Corpus& corpus_;
  const TrainConfig& cfg_;
  WarpKind kind_;
  const Regressor* prior_;
  TransformSampler sampler_;
  StyleBank bank_;
  std::vector<std::optional<GeoFeatureMap>> geo_;
};

double sample_loss(const Sample& s, const WarpParams& pred, const Points<double>& grid) {
  return s.truth.kind == WarpKind::affine || pred.kind == WarpKind::affine
             ? grid_loss(pred, s.truth, grid)
             : cascade_grid_loss(s.prior, pred.tps(), s.truth, grid);
}

double sample_error(const Sample& s, const WarpParams& pred, const Points<double>& grid) {
  return pred.kind == WarpKind::affine ? grid_error(pred, s.truth, grid) : cascade_grid_error(s.prior, pred.tps(), s.truth, grid);
}

Eigen::VectorXd sample_gradient(const Sample& s, const WarpParams& pred, const Points<double>& grid) {
  return pred.kind == WarpKind::affine ? grid_loss_gradient(pred, s.truth, grid)
                                       : cascade_grid_loss_gradient(s.prior, pred.tps(), s.truth, grid);
}

}  // namespace

TrainResult train(const FeatureExtractor& fx, const Corpus& corpus, const TrainConfig& cfg, WarpKind kind,
                  const Regressor* prior_affine, const BatchCallback& on_batch) {
  cfg.validate();
  if (corpus.size() == 0) throw ArgumentError("training corpus is empty");
  if (kind == WarpKind::tps) {
    if (!prior_affine || prior_affine->kind() != WarpKind::affine || !prior_affine->trained())
      throw PreconditionError("TPS training needs a trained affine regressor (pass --affine-ckpt)");
  }
  for (const auto& img : corpus.images)
    if (img.width != cfg.image_size || img.height != cfg.image_size)
      throw ArgumentError("corpus images must be " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  const std::string prior_digest = kind == WarpKind::tps ? prior_affine->digest() : "";

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, std::ios::app);
    if (!log) throw IoError("cannot open training log '" + cfg.log_path.string() + "'");
  }

  // Seeded split: the first n_val of a shuffled index list are held out.
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  {
    auto rng = stream(cfg.seed, kTagSplit, 0);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::size_t n_val = std::size_t(std::lround(cfg.validation_fraction * double(corpus.size())));
  if (cfg.validation_fraction > 0 && n_val == 0 && corpus.size() > 1) n_val = 1;
  const std::vector<std::size_t> val_idx(order.begin(), order.begin() + std::ptrdiff_t(n_val));
  const std::vector<std::size_t> train_idx(order.begin() + std::ptrdiff_t(n_val), order.end());
  if (train_idx.empty()) throw ArgumentError("training corpus leaves no images after the validation split");

  const Points<double> grid = uniform_grid(cfg.grid_points, cfg.grid_points);
  SampleFactory factory(fx, corpus, cfg, kind, prior_affine);
  std::vector<Sample> validation;
  for (std::size_t i = 0; i < val_idx.size(); ++i) validation.push_back(factory.make(val_idx[i], i, kTagValidation));

  const auto grid_dims = [&] {
    const GeoFeatureMap g = fx.extract_geometric(corpus.images[0]);
    return std::pair{g.grid_w(), g.grid_h()};
  }();
  TrainResult result;
  Regressor net = Regressor::create(kind, grid_dims.first, grid_dims.second, stream(cfg.seed, kTagInit, 0)(), cfg.arch);
  result.regressor = net;
  nn::Adam adam(float(cfg.learning_rate));
  std::vector<nn::AdamSlot> slots(net.parameters().size());
  double best = std::numeric_limits<double>::infinity();

  auto evaluate = [&](const Regressor& r, double& loss, double& error) {
    loss = error = 0;
    for (const auto& s : validation) {
      const WarpParams p = r.predict(s.corr);
      loss += sample_loss(s, p, grid);
      error += sample_error(s, p, grid);
    }
    if (!validation.empty()) {
      loss /= double(validation.size());
      error /= double(validation.size());
    }
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // (image, draw) jobs for this epoch in a seeded order.
    std::vector<std::pair<std::size_t, std::uint64_t>> jobs;
    for (std::size_t i = 0; i < train_idx.size(); ++i)
      for (int k = 0; k < cfg.pairs_per_image; ++k)
        jobs.emplace_back(train_idx[i], (std::uint64_t(epoch) * corpus.size() + train_idx[i]) * std::uint64_t(cfg.pairs_per_image) + std::uint64_t(k));
    {
      auto rng = stream(cfg.seed, kTagOrder, std::uint64_t(epoch));
      std::shuffle(jobs.begin(), jobs.end(), rng);
    }

    double epoch_loss = 0;
    std::size_t seen = 0;
    int batch_no = 0;
    for (std::size_t start = 0; start < jobs.size(); start += std::size_t(cfg.batch_size), ++batch_no) {
      const std::size_t end = std::min(jobs.size(), start + std::size_t(cfg.batch_size));
      std::vector<Sample> batch;
      for (std::size_t j = start; j < end; ++j) batch.push_back(factory.make(jobs[j].first, jobs[j].second, 0));
      std::vector<const CorrelationTensor*> inputs;
      for (const auto& s : batch) inputs.push_back(&s.corr);

      Regressor::BatchCache cache;
      const Eigen::MatrixXf out = net.forward_train(inputs, cache);
      Eigen::MatrixXf grad(out.rows(), out.cols());
      double loss = 0;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const WarpParams pred{kind, out.col(Eigen::Index(b)).cast<double>()};
        loss += sample_loss(batch[b], pred, grid);
        grad.col(Eigen::Index(b)) = (sample_gradient(batch[b], pred, grid) / double(batch.size())).cast<float>();
      }
      loss /= double(batch.size());
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "non-finite training loss at epoch " << epoch << " batch " << batch_no << " (max |prediction| "
           << out.cwiseAbs().maxCoeff() << ")";
        throw NumericError(os.str());
      }
      if (epoch == 0 && batch_no == 0) result.first_batch_loss = loss;

      const Regressor::Gradients g = net.backward(cache, grad);
      auto params = net.parameters();
      adam.step();
      for (std::size_t i = 0; i < params.size(); ++i)
        adam.update(params[i].data(), g.blocks[i].data(), Eigen::Index(params[i].size()), slots[i]);

      epoch_loss += loss * double(batch.size());
      seen += batch.size();
      if (log) log << epoch << ',' << batch_no << ',' << std::setprecision(9) << loss << '\n' << std::flush;
      if (on_batch) on_batch(epoch, batch_no, loss);
    }

    EpochStats stats{epoch, epoch_loss / double(seen), 0, 0};
    evaluate(net, stats.validation_loss, stats.validation_error);
    result.epochs.push_back(stats);
    // Without a validation split the latest weights are the best ones.
    const double score = validation.empty() ? -double(epoch) : stats.validation_loss;
    Regressor snapshot = net;
    snapshot.mark_trained();
    if (!cfg.checkpoint_path.empty()) snapshot.save(cfg.checkpoint_path.string() + ".last", cfg.digest(), prior_digest);
    if (score < best) {
      best = score;
      result.regressor = snapshot;
      result.best_epoch = epoch;
      if (!cfg.checkpoint_path.empty()) snapshot.save(cfg.checkpoint_path, cfg.digest(), prior_digest);
    }
  }
  return result;
}

}  // namespace gst
