#include "gst/pipeline.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gst {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + key + "': cannot parse '" + v + "' as a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "': expected true or false, got '" + v + "'");
}

void require_file(const std::filesystem::path& p, const char* what) {
  if (p.empty()) throw ArgumentError(std::string(what) + " path is required");
  if (!std::filesystem::is_regular_file(p)) throw IoError(std::string(what) + " '" + p.string() + "' not found");
}

Regressor load_stage(const std::filesystem::path& path, WarpKind kind) {
  if (path.empty())
    throw StateError(std::string(to_string(kind)) + " checkpoint is required; pass --" + std::string(to_string(kind)) +
                     "-ckpt or train one with `gst train --kind " + std::string(to_string(kind)) + "`");
  return Regressor::load(path, kind);
}

void write_warp(const WarpEstimate& w, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << std::setprecision(17) << "affine =";
  for (double v : w.affine.theta) out << ' ' << v;
  out << "\ntps =";
  for (double v : w.tps.offsets) out << ' ' << v;
  out << '\n';
}

}  // namespace

WarpMode parse_warp_mode(std::string_view s) {
  if (s == "none") return WarpMode::none;
  if (s == "affine") return WarpMode::affine;
  if (s == "tps") return WarpMode::tps;
  throw ArgumentError("unknown warp mode '" + std::string(s) + "' (expected none|affine|tps)");
}

std::string_view to_string(WarpMode m) {
  switch (m) {
    case WarpMode::none: return "none";
    case WarpMode::affine: return "affine";
    case WarpMode::tps: return "tps";
  }
  return "none";
}

FeatureExtractor BackboneSpec::make_extractor() const {
  return FeatureExtractor(std::make_shared<Vgg19>(weights.empty() ? Vgg19::seeded(seed) : Vgg19::load(weights)));
}

void JobSpec::validate() const {
  require_file(content_path, "content image");
  require_file(style_path, "style image");
  if (geometry_style_path) require_file(*geometry_style_path, "geometry style image");
  if (output_path.empty()) throw ArgumentError("output path is required");
  if (warp_mode != WarpMode::none && affine_checkpoint.empty())
    throw StateError("warp mode '" + std::string(to_string(warp_mode)) +
                     "' needs an affine checkpoint; pass --affine-ckpt or train one with `gst train --kind affine`");
  if (warp_mode == WarpMode::tps && tps_checkpoint.empty())
    throw StateError("warp mode 'tps' needs a TPS checkpoint; pass --tps-ckpt or train one with `gst train --kind tps`");
  transfer.validate();
}

Image render_warped_content(const Image& content, const WarpEstimate& warp, int style_h, int style_w) {
  return warp_image(content, make_sampling_field(warp.affine.cast<float>(), warp.tps.cast<float>(), style_h, style_w));
}

TransferReport run_transfer_report(const JobSpec& job, const IterationCallback& on_iteration) {
  job.validate();
  const FeatureExtractor fx = job.backbone.make_extractor();
  const Image content = load_image(job.content_path);
  const Image style = load_image(job.style_path);

  TransferReport report;
  report.output = job.output_path;
  if (job.warp_mode == WarpMode::none) {
    report.warped_content = resize(content, style.width, style.height);
  } else {
    const Regressor affine = load_stage(job.affine_checkpoint, WarpKind::affine);
    std::optional<Regressor> tps;
    if (job.warp_mode == WarpMode::tps) tps = load_stage(job.tps_checkpoint, WarpKind::tps);
    const Image geometry = job.geometry_style_path ? load_image(*job.geometry_style_path) : style;
    report.warp = estimate_warp(fx, content, geometry, affine, tps ? &*tps : nullptr);
    report.warped_content = render_warped_content(content, report.warp, style.height, style.width);
  }

  std::ofstream log;
  if (!job.loss_log_path.empty()) {
    log.open(job.loss_log_path);
    if (!log) throw IoError("cannot write loss log '" + job.loss_log_path.string() + "'");
    log << "level,iter,total,texture,content\n";
  }
  report.result = multiscale_transfer(fx, report.warped_content, style, job.transfer, [&](const IterationRecord& r) {
    if (log)
      log << r.level << ',' << r.iteration << ',' << std::setprecision(9) << r.loss.total << ',' << r.loss.texture << ','
          << r.loss.content << '\n';
    if (on_iteration) on_iteration(r);
  });

  if (!job.intermediates_dir.empty()) {
    std::filesystem::create_directories(job.intermediates_dir);
    save_image(report.warped_content, job.intermediates_dir / "warped_content.png");
    const int n = int(report.result.levels.size());
    for (int i = 0; i < n; ++i)
      save_image(report.result.levels[std::size_t(i)].image, job.intermediates_dir / ("level_" + std::to_string(n - 1 - i) + ".png"));
    write_warp(report.warp, job.intermediates_dir / "warp.txt");
  }
  if (job.output_path.has_parent_path()) std::filesystem::create_directories(job.output_path.parent_path());
  save_image(report.result.image, job.output_path);
  return report;
}

std::filesystem::path run_transfer(const JobSpec& job) { return run_transfer_report(job).output; }

void TrainJob::validate() const {
  if (synthetic_count < 0) throw ArgumentError("synthetic image count must be >= 0");
  if (synthetic_count == 0 && corpus_dir.empty()) throw ArgumentError("a corpus directory is required");
  if (out_checkpoint.empty()) throw ArgumentError("output checkpoint path is required");
  if (kind == WarpKind::tps && affine_checkpoint.empty())
    throw PreconditionError("TPS training needs a trained affine checkpoint; pass --affine-ckpt");
  config.validate();
}

std::filesystem::path run_train(const TrainJob& job, const BatchCallback& on_batch) {
  job.validate();
  const FeatureExtractor fx = job.backbone.make_extractor();
  std::optional<Regressor> prior;
  if (job.kind == WarpKind::tps) {
    if (!std::filesystem::exists(job.affine_checkpoint))
      throw PreconditionError("affine checkpoint '" + job.affine_checkpoint.string() +
                              "' not found; train one with `gst train --kind affine`");
    prior = Regressor::load(job.affine_checkpoint, WarpKind::affine);
  }
  const Corpus corpus = job.synthetic_count > 0
                            ? synthetic_corpus(job.synthetic_count, job.config.image_size, job.config.seed)
                            : Corpus::load(job.corpus_dir, job.config.image_size);
  TrainConfig cfg = job.config;
  cfg.checkpoint_path = job.out_checkpoint;
  if (job.out_checkpoint.has_parent_path()) std::filesystem::create_directories(job.out_checkpoint.parent_path());
  (void)train(fx, corpus, cfg, job.kind, prior ? &*prior : nullptr, on_batch);
  return job.out_checkpoint;
}

KeyValues parse_config(std::string_view text) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected `key = value`");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(number) + ": empty key");
    kv[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config file '" + path.string() + "' not found");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::vector<int> parse_int_list(std::string_view s) {
  std::vector<int> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string item = trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    out.push_back(parse_number<int>("list", item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

void apply_config(const KeyValues& kv, JobSpec& job) {
  for (const auto& [k, v] : kv) {
    if (k == "content") job.content_path = v;
    else if (k == "style") job.style_path = v;
    else if (k == "geometry_style") job.geometry_style_path = std::filesystem::path(v);
    else if (k == "out") job.output_path = v;
    else if (k == "warp") job.warp_mode = parse_warp_mode(v);
    else if (k == "affine_ckpt") job.affine_checkpoint = v;
    else if (k == "tps_ckpt") job.tps_checkpoint = v;
    else if (k == "levels") job.transfer.pyramid_levels = parse_number<int>(k, v);
    else if (k == "iters") job.transfer.iterations_per_level = parse_int_list(v);
    else if (k == "alpha_over_beta") job.transfer.alpha_over_beta = parse_number<double>(k, v);
    else if (k == "optimizer") job.transfer.optimizer = parse_pixel_optimizer(v);
    else if (k == "step_size") job.transfer.step_size = parse_number<double>(k, v);
    else if (k == "seed") job.transfer.seed = parse_number<std::uint64_t>(k, v);
    else if (k == "emit_intermediates") job.intermediates_dir = v;
    else if (k == "loss_log") job.loss_log_path = v;
    else if (k == "backbone_weights") job.backbone.weights = v;
    else if (k == "backbone_seed") job.backbone.seed = parse_number<std::uint64_t>(k, v);
    else if (k == "layer_weights") {
      std::istringstream in(v);
      std::string item;
      std::size_t i = 0;
      while (std::getline(in, item, ',')) {
        if (i >= 5) throw ConfigError("layer_weights: expected 5 values");
        job.transfer.layer_weights[i++] = parse_number<double>(k, trim(item));
      }
      if (i != 5) throw ConfigError("layer_weights: expected 5 values");
    } else throw ConfigError("unknown transfer config key '" + k + "'");
  }
}

void apply_config(const KeyValues& kv, TrainJob& job) {
  auto& c = job.config;
  for (const auto& [k, v] : kv) {
    if (k == "kind") job.kind = parse_warp_kind(v);
    else if (k == "corpus") job.corpus_dir = v;
    else if (k == "synthetic") job.synthetic_count = parse_number<int>(k, v);
    else if (k == "out_ckpt") job.out_checkpoint = v;
    else if (k == "affine_ckpt") job.affine_checkpoint = v;
    else if (k == "epochs") c.epochs = parse_number<int>(k, v);
    else if (k == "seed") c.seed = c.sampler.seed = parse_number<std::uint64_t>(k, v);
    else if (k == "batch_size") c.batch_size = parse_number<int>(k, v);
    else if (k == "learning_rate") c.learning_rate = parse_number<double>(k, v);
    else if (k == "image_size") c.image_size = parse_number<int>(k, v);
    else if (k == "pairs_per_image") c.pairs_per_image = parse_number<int>(k, v);
    else if (k == "validation_fraction") c.validation_fraction = parse_number<double>(k, v);
    else if (k == "augment") c.augment = parse_augment_policy(v);
    else if (k == "style_bank") c.style_bank_dir = v;
    else if (k == "log") c.log_path = v;
    else if (k == "tps_offset") c.sampler.tps_offset = parse_number<double>(k, v);
    else if (k == "normalize_input") c.arch.normalize_input = parse_bool(k, v);
    else if (k == "match_temperature") c.arch.match_temperature = parse_number<double>(k, v);
    else if (k == "kernel1") c.arch.kernel1 = parse_number<int>(k, v);
    else if (k == "channels1") c.arch.channels1 = parse_number<int>(k, v);
    else if (k == "kernel2") c.arch.kernel2 = parse_number<int>(k, v);
    else if (k == "channels2") c.arch.channels2 = parse_number<int>(k, v);
    else if (k == "reduce_channels") c.arch.reduce_channels = parse_number<int>(k, v);
    else if (k == "backbone_weights") job.backbone.weights = v;
    else if (k == "backbone_seed") job.backbone.seed = parse_number<std::uint64_t>(k, v);
    else throw ConfigError("unknown train config key '" + k + "'");
  }
}

}  // namespace gst
