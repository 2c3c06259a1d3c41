#include "gst/regressor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace gst {
namespace {

constexpr char kMagic[8] = {'G', 'S', 'T', 'W', 'R', 'E', 'G', '1'};
constexpr int kFormatVersion = 1;

std::string hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

int parse_int(const std::map<std::string, std::string>& meta, const std::string& key, const std::filesystem::path& path) {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint metadata '" + path.string() + "' lacks key '" + key + "'");
  try {
    std::size_t used = 0;
    const int v = std::stoi(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint metadata key '" + key + "' is not an integer: '" + it->second + "'");
  }
}

double parse_double(const std::map<std::string, std::string>& meta, const std::string& key,
                    const std::filesystem::path& path) {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint metadata '" + path.string() + "' lacks key '" + key + "'");
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint metadata key '" + key + "' is not a number: '" + it->second + "'");
  }
}

}  // namespace

WarpParams WarpParams::identity(WarpKind k) {
  return k == WarpKind::affine ? from(Affine::identity()) : from(Tps::identity());
}

Affine WarpParams::affine() const {
  if (kind != WarpKind::affine || values.size() != 6) throw ArgumentError("WarpParams: not an affine parameter set");
  return {values};
}

Tps WarpParams::tps() const {
  if (kind != WarpKind::tps || values.size() != 18) throw ArgumentError("WarpParams: not a TPS parameter set");
  return {values};
}

Points<double> WarpParams::apply(const Points<double>& pts) const {
  return kind == WarpKind::affine ? affine_apply(affine(), pts) : tps_apply(tps(), pts);
}

std::string RegressorArch::describe() const {
  std::ostringstream os;
  if (match_temperature > 0) os << "softmax" << match_temperature << ",";
  os << (normalize_input ? "zscore," : "") << "conv" << kernel1 << "x" << kernel1 << ":" << channels1 << ",conv" << kernel2
     << "x" << kernel2 << ":" << channels2;
  if (reduce_channels > 0) os << ",conv1x1:" << reduce_channels;
  os << ",dense";
  return os.str();
}

Regressor Regressor::create(WarpKind kind, int grid_w, int grid_h, std::uint64_t seed, const RegressorArch& arch) {
  if (grid_w < 1 || grid_h < 1) throw ArgumentError("Regressor: grid must be at least 1x1");
  if (arch.kernel1 % 2 == 0 || arch.kernel2 % 2 == 0 || arch.channels1 < 1 || arch.channels2 < 1 || arch.reduce_channels < 0 ||
      !(arch.match_temperature >= 0) || !std::isfinite(arch.match_temperature))
    throw ArgumentError("Regressor: invalid architecture " + arch.describe());
  Regressor r;
  r.kind_ = kind;
  r.grid_w_ = grid_w;
  r.grid_h_ = grid_h;
  r.arch_ = arch;
  const int positions = grid_w * grid_h;
  std::mt19937_64 rng(seed);
  r.conv1_ = nn::Conv2d(positions, arch.channels1, arch.kernel1);
  r.conv1_.init_he(rng);
  r.bn1_ = nn::BatchNorm(arch.channels1);
  r.conv2_ = nn::Conv2d(arch.channels1, arch.channels2, arch.kernel2);
  r.conv2_.init_he(rng);
  r.bn2_ = nn::BatchNorm(arch.channels2);
  int head_channels = arch.channels2;
  if (arch.reduce_channels > 0) {
    r.reduce_ = nn::Conv2d(arch.channels2, arch.reduce_channels, 1);
    r.reduce_.init_he(rng);
    head_channels = arch.reduce_channels;
  }
  r.head_ = nn::Linear(head_channels * positions, r.param_count());
  r.head_.bias = WarpParams::identity(kind).values.cast<float>();
  return r;
}

void Regressor::check_input(const CorrelationTensor& c) const {
  if (head_.out_features == 0) throw StateError("Regressor is not initialized");
  if (c.grid_w != grid_w_ || c.grid_h != grid_h_ || c.values.rows() != Eigen::Index(grid_w_) * grid_h_ ||
      c.values.cols() != Eigen::Index(grid_w_) * grid_h_)
    throw ArgumentError("Regressor expects a " + std::to_string(grid_w_) + "x" + std::to_string(grid_h_) +
                        " correlation grid, got " + std::to_string(c.grid_w) + "x" + std::to_string(c.grid_h));
}

nn::FeatureMap Regressor::prepare(const CorrelationTensor& c) const {
  nn::FeatureMap x = c.as_feature_map();
  if (arch_.match_temperature > 0) {
    const float inv_t = float(1.0 / arch_.match_temperature);
    for (Eigen::Index q = 0; q < x.data.cols(); ++q) {
      auto col = x.data.col(q);
      col = ((col.array() - col.maxCoeff()) * inv_t).exp().matrix();
      col /= col.sum();
    }
  }
  if (arch_.normalize_input) {
    const auto n = float(x.data.rows());
    for (Eigen::Index q = 0; q < x.data.cols(); ++q) {
      auto col = x.data.col(q);
      const float mean = col.mean();
      col.array() -= mean;
      const float sd = n > 1 ? std::sqrt(col.squaredNorm() / (n - 1)) : 0.0f;
      col /= sd + 1e-6f;
    }
  }
  return x;
}

WarpParams Regressor::predict(const CorrelationTensor& c) const {
  check_input(c);
  nn::FeatureMap h = nn::relu(bn1_.forward_eval(conv1_.forward(prepare(c))));
  h = nn::relu(bn2_.forward_eval(conv2_.forward(h)));
  if (arch_.reduce_channels > 0) h = reduce_.forward(h);
  const Eigen::Map<const Eigen::VectorXf> flat(h.data.data(), h.data.size());
  return {kind_, head_.forward(flat).cast<double>()};
}

Eigen::MatrixXf Regressor::forward_train(const std::vector<const CorrelationTensor*>& batch, BatchCache& cache) {
  if (batch.empty()) throw ArgumentError("Regressor::forward_train: empty batch");
  cache = BatchCache{};
  std::vector<nn::FeatureMap> pre;
  for (const auto* c : batch) {
    check_input(*c);
    cache.input.push_back(prepare(*c));
    pre.push_back(conv1_.forward(cache.input.back()));
  }
  for (auto& f : bn1_.forward_train(pre, cache.bn1)) cache.act1.push_back(nn::relu(f));
  pre.clear();
  for (const auto& a : cache.act1) pre.push_back(conv2_.forward(a));
  for (auto& f : bn2_.forward_train(pre, cache.bn2)) cache.act2.push_back(nn::relu(f));

  Eigen::MatrixXf out(param_count(), Eigen::Index(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (arch_.reduce_channels > 0) cache.reduced.push_back(reduce_.forward(cache.act2[b]));
    const nn::FeatureMap& h = arch_.reduce_channels > 0 ? cache.reduced[b] : cache.act2[b];
    out.col(Eigen::Index(b)) = head_.forward(Eigen::Map<const Eigen::VectorXf>(h.data.data(), h.data.size()));
  }
  return out;
}

Regressor::Gradients Regressor::backward(const BatchCache& cache, const Eigen::MatrixXf& grad_out) const {
  const std::size_t n = cache.input.size();
  if (grad_out.rows() != param_count() || grad_out.cols() != Eigen::Index(n))
    throw ArgumentError("Regressor::backward: gradient shape does not match the batch");

  Eigen::MatrixXf head_w = Eigen::MatrixXf::Zero(head_.weight.rows(), head_.weight.cols());
  Eigen::VectorXf head_b = grad_out.rowwise().sum();
  nn::Conv2d::Grad g1, g2, gr;
  std::vector<nn::FeatureMap> grads(n);
  for (std::size_t b = 0; b < n; ++b) {
    const nn::FeatureMap& h = arch_.reduce_channels > 0 ? cache.reduced[b] : cache.act2[b];
    const Eigen::Map<const Eigen::VectorXf> flat(h.data.data(), h.data.size());
    head_w.noalias() += grad_out.col(Eigen::Index(b)) * flat.transpose();
    Eigen::MatrixXf gflat = head_.weight.transpose() * grad_out.col(Eigen::Index(b));
    gflat.resize(h.data.rows(), h.data.cols());
    nn::FeatureMap g(h.height, h.width, std::move(gflat));
    if (arch_.reduce_channels > 0) g = reduce_.backward(cache.act2[b], g, &gr);
    grads[b] = nn::relu_backward(cache.act2[b], g);
  }
  nn::BatchNorm::Grad gb2;
  grads = bn2_.backward(cache.bn2, grads, gb2);
  for (std::size_t b = 0; b < n; ++b) grads[b] = nn::relu_backward(cache.act1[b], conv2_.backward(cache.act1[b], grads[b], &g2));
  nn::BatchNorm::Grad gb1;
  grads = bn1_.backward(cache.bn1, grads, gb1);
  for (std::size_t b = 0; b < n; ++b) (void)conv1_.backward(cache.input[b], grads[b], &g1, /*need_input=*/false);

  auto flat = [](const auto& m) { return Eigen::VectorXf(Eigen::Map<const Eigen::VectorXf>(m.data(), m.size())); };
  Gradients out;
  out.blocks = {flat(g1.weight), g1.bias, gb1.gamma, gb1.beta, flat(g2.weight), g2.bias, gb2.gamma, gb2.beta};
  if (arch_.reduce_channels > 0) {
    out.blocks.push_back(flat(gr.weight));
    out.blocks.push_back(gr.bias);
  }
  out.blocks.push_back(flat(head_w));
  out.blocks.push_back(head_b);
  return out;
}

std::vector<std::span<float>> Regressor::parameters() {
  auto view = [](auto& m) { return std::span<float>(m.data(), std::size_t(m.size())); };
  std::vector<std::span<float>> p = {view(conv1_.weight), view(conv1_.bias), view(bn1_.gamma), view(bn1_.beta),
                                     view(conv2_.weight), view(conv2_.bias), view(bn2_.gamma), view(bn2_.beta)};
  if (arch_.reduce_channels > 0) {
    p.push_back(view(reduce_.weight));
    p.push_back(view(reduce_.bias));
  }
  p.push_back(view(head_.weight));
  p.push_back(view(head_.bias));
  return p;
}

std::size_t Regressor::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : const_cast<Regressor*>(this)->parameters()) n += s.size();
  return n;
}

std::string Regressor::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& s : const_cast<Regressor*>(this)->parameters()) h = nn::fnv1a(s.data(), Eigen::Index(s.size()), h);
  for (const auto* v : {&bn1_.running_mean, &bn1_.running_var, &bn2_.running_mean, &bn2_.running_var})
    h = nn::fnv1a(v->data(), v->size(), h);
  return hex(h);
}

std::filesystem::path Regressor::metadata_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta");
}

void Regressor::save(const std::filesystem::path& path, const std::string& config_digest,
                     const std::string& prior_digest) const {
  auto* self = const_cast<Regressor*>(this);
  std::vector<std::span<float>> blocks = self->parameters();
  for (auto* v : {&self->bn1_.running_mean, &self->bn1_.running_var, &self->bn2_.running_mean, &self->bn2_.running_var})
    blocks.emplace_back(v->data(), std::size_t(v->size()));
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    const std::uint32_t header[2] = {kFormatVersion, std::uint32_t(blocks.size())};
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    for (const auto& b : blocks) {
      const std::uint64_t n = b.size();
      out.write(reinterpret_cast<const char*>(&n), sizeof(n));
      out.write(reinterpret_cast<const char*>(b.data()), std::streamsize(n * sizeof(float)));
    }
    if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
  }
  std::ofstream meta(metadata_path(path));
  if (!meta) throw IoError("cannot write checkpoint metadata '" + metadata_path(path).string() + "'");
  meta << "format_version = " << kFormatVersion << "\n"
       << "kind = " << to_string(kind_) << "\n"
       << "grid_w = " << grid_w_ << "\n"
       << "grid_h = " << grid_h_ << "\n"
       << "param_count = " << param_count() << "\n"
       << "normalize_input = " << (arch_.normalize_input ? 1 : 0) << "\n"
       << "match_temperature = " << std::setprecision(17) << arch_.match_temperature << "\n"
       << "kernel1 = " << arch_.kernel1 << "\n"
       << "channels1 = " << arch_.channels1 << "\n"
       << "kernel2 = " << arch_.kernel2 << "\n"
       << "channels2 = " << arch_.channels2 << "\n"
       << "reduce_channels = " << arch_.reduce_channels << "\n"
       << "config_digest = " << (config_digest.empty() ? "none" : config_digest) << "\n"
       << "prior_digest = " << (prior_digest.empty() ? "none" : prior_digest) << "\n"
       << "weights_digest = " << digest() << "\n";
  if (!meta) throw IoError("failed writing checkpoint metadata '" + metadata_path(path).string() + "'");
}

std::map<std::string, std::string> Regressor::read_metadata(const std::filesystem::path& path) {
  std::ifstream in(metadata_path(path));
  if (!in) throw StateError("checkpoint metadata '" + metadata_path(path).string() + "' not found");
  std::map<std::string, std::string> meta;
  std::string line;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed checkpoint metadata line: '" + line + "'");
    meta[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return meta;
}

Regressor Regressor::load(const std::filesystem::path& path, std::optional<WarpKind> expect_kind) {
  if (!std::filesystem::exists(path))
    throw StateError("checkpoint '" + path.string() + "' not found; train one with `gst train`");
  const auto meta = read_metadata(path);
  if (parse_int(meta, "format_version", path) != kFormatVersion)
    throw FormatError("checkpoint '" + path.string() + "' has an unsupported format version");
  auto kind_it = meta.find("kind");
  if (kind_it == meta.end()) throw FormatError("checkpoint metadata lacks key 'kind'");
  const WarpKind kind = parse_warp_kind(kind_it->second);
  if (expect_kind && *expect_kind != kind)
    throw StateError("checkpoint '" + path.string() + "' holds a " + std::string(to_string(kind)) + " regressor, expected " +
                     std::string(to_string(*expect_kind)));
  if (parse_int(meta, "param_count", path) != gst::param_count(kind))
    throw FormatError("checkpoint '" + path.string() + "' param_count disagrees with its kind");

  RegressorArch arch;
  arch.normalize_input = parse_int(meta, "normalize_input", path) != 0;
  arch.match_temperature = parse_double(meta, "match_temperature", path);
  arch.kernel1 = parse_int(meta, "kernel1", path);
  arch.channels1 = parse_int(meta, "channels1", path);
  arch.kernel2 = parse_int(meta, "kernel2", path);
  arch.channels2 = parse_int(meta, "channels2", path);
  arch.reduce_channels = parse_int(meta, "reduce_channels", path);
  Regressor r = create(kind, parse_int(meta, "grid_w", path), parse_int(meta, "grid_h", path), 0, arch);

  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  std::uint32_t header[2];
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  std::vector<std::span<float>> blocks = r.parameters();
  for (auto* v : {&r.bn1_.running_mean, &r.bn1_.running_var, &r.bn2_.running_mean, &r.bn2_.running_var})
    blocks.emplace_back(v->data(), std::size_t(v->size()));
  if (!in || std::memcmp(magic, kMagic, 8) != 0 || header[0] != std::uint32_t(kFormatVersion) || header[1] != blocks.size())
    throw FormatError("'" + path.string() + "' is not a compatible regressor checkpoint");
  for (auto& b : blocks) {
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (!in || n != b.size()) throw FormatError("checkpoint '" + path.string() + "' does not match its metadata");
    in.read(reinterpret_cast<char*>(b.data()), std::streamsize(n * sizeof(float)));
  }
  if (!in) throw FormatError("checkpoint '" + path.string() + "' is truncated");
  if (auto it = meta.find("weights_digest"); it != meta.end() && it->second != r.digest())
    throw FormatError("checkpoint '" + path.string() + "' weights do not match the metadata digest");
  r.trained_ = true;
  return r;
}

CorrelationTensor correlate_images(const FeatureExtractor& fx, const Image& content, const Image& style) {
  return correlate(fx.extract_geometric(content), fx.extract_geometric(style));
}

WarpEstimate estimate_warp(const FeatureExtractor& fx, const Image& content, const Image& style, const Regressor& affine,
                           const Regressor* tps) {
  if (affine.kind() != WarpKind::affine) throw StateError("estimate_warp: first stage must be an affine regressor");
  if (!affine.trained()) throw StateError("estimate_warp: affine regressor is untrained (checkpoint missing)");
  if (tps) {
    if (tps->kind() != WarpKind::tps) throw StateError("estimate_warp: second stage must be a TPS regressor");
    if (!tps->trained()) throw StateError("estimate_warp: TPS regressor is untrained (checkpoint missing)");
  }
  auto analysis = [](const Image& img) {
    return img.width == kAnalysisSize && img.height == kAnalysisSize ? img : resize(img, kAnalysisSize, kAnalysisSize);
  };
  const Image content_a = analysis(content);
  const GeoFeatureMap style_geo = fx.extract_geometric(analysis(style));

  WarpEstimate est;
  est.affine = affine.predict(correlate(fx.extract_geometric(content_a), style_geo)).affine();
  if (tps) {
    const Image prewarped =
        warp_image(content_a, make_sampling_field(est.affine.cast<float>(), kAnalysisSize, kAnalysisSize));
    est.tps = tps->predict(correlate(fx.extract_geometric(prewarped), style_geo)).tps();
  }
  return est;
}

}  // namespace gst
