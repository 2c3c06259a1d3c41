#include "gst/backbone.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gst {
namespace {

constexpr std::array<std::string_view, kVggStageCount> kStageNames = {
    "conv1_1", "conv1_2", "pool1",   "conv2_1", "conv2_2", "pool2",   "conv3_1",
    "conv3_2", "conv3_3", "conv3_4", "pool3",   "conv4_1", "conv4_2", "conv4_3",
    "conv4_4", "pool4",   "conv5_1", "conv5_2", "conv5_3", "conv5_4", "pool5"};

// Conv layer index per stage, -1 for pooling stages.
constexpr std::array<int, kVggStageCount> kStageConv = {0,  1,  -1, 2,  3,  -1, 4,  5,  6,  7, -1,
                                                        8,  9,  10, 11, -1, 12, 13, 14, 15, -1};

constexpr std::array<std::array<int, 2>, kVggConvCount> kConvShapes = {{{3, 64},
                                                                        {64, 64},
                                                                        {64, 128},
                                                                        {128, 128},
                                                                        {128, 256},
                                                                        {256, 256},
                                                                        {256, 256},
                                                                        {256, 256},
                                                                        {256, 512},
                                                                        {512, 512},
                                                                        {512, 512},
                                                                        {512, 512},
                                                                        {512, 512},
                                                                        {512, 512},
                                                                        {512, 512},
                                                                        {512, 512}}};

constexpr char kMagic[8] = {'G', 'S', 'T', 'V', 'G', 'G', '1', '9'};
constexpr std::uint32_t kFormatVersion = 1;

int stage_index(VggStage s) { return static_cast<int>(s); }

}  // namespace

std::string_view stage_name(VggStage s) { return kStageNames[stage_index(s)]; }

std::optional<VggStage> parse_stage(std::string_view name) {
  for (int i = 0; i < kVggStageCount; ++i)
    if (kStageNames[i] == name) return static_cast<VggStage>(i);
  return std::nullopt;
}

Vgg19::Vgg19() {
  for (int i = 0; i < kVggConvCount; ++i) convs_[i] = nn::Conv2d(kConvShapes[i][0], kConvShapes[i][1], 3);
}

Vgg19 Vgg19::seeded(std::uint64_t seed) {
  Vgg19 net;
  std::mt19937_64 rng(seed);
  for (auto& c : net.convs_) c.init_he(rng, /*center=*/true);
  return net;
}

Vgg19 Vgg19::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InitializationError("backbone weights unavailable: cannot open '" + path.string() + "'");
  char magic[8];
  std::uint32_t version = 0, count = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&count), 4);
  if (!in || std::memcmp(magic, kMagic, 8) != 0 || version != kFormatVersion || count != kVggConvCount)
    throw InitializationError("'" + path.string() + "' is not a VGG-19 weights file (format v1)");
  Vgg19 net;
  for (auto& conv : net.convs_) {
    std::uint32_t shape[3];
    in.read(reinterpret_cast<char*>(shape), sizeof(shape));
    if (!in || int(shape[0]) != conv.out_channels || int(shape[1]) != conv.in_channels || shape[2] != 3)
      throw InitializationError("weights file '" + path.string() + "' has unexpected layer shape");
    // File order is (out, in, ky, kx); internal order is (out, ky, kx, in).
    std::vector<float> raw(std::size_t(conv.out_channels) * conv.in_channels * 9);
    in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size() * sizeof(float)));
    in.read(reinterpret_cast<char*>(conv.bias.data()), std::streamsize(conv.out_channels * sizeof(float)));
    if (!in) throw InitializationError("weights file '" + path.string() + "' is truncated");
    for (int o = 0; o < conv.out_channels; ++o)
      for (int i = 0; i < conv.in_channels; ++i)
        for (int k = 0; k < 9; ++k)
          conv.weight(o, Eigen::Index(k) * conv.in_channels + i) = raw[(std::size_t(o) * conv.in_channels + i) * 9 + k];
  }
  return net;
}

void Vgg19::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  const std::uint32_t version = kFormatVersion, count = kVggConvCount;
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& conv : convs_) {
    const std::uint32_t shape[3] = {std::uint32_t(conv.out_channels), std::uint32_t(conv.in_channels), 3};
    out.write(reinterpret_cast<const char*>(shape), sizeof(shape));
    std::vector<float> raw(std::size_t(conv.out_channels) * conv.in_channels * 9);
    for (int o = 0; o < conv.out_channels; ++o)
      for (int i = 0; i < conv.in_channels; ++i)
        for (int k = 0; k < 9; ++k)
          raw[(std::size_t(o) * conv.in_channels + i) * 9 + k] = conv.weight(o, Eigen::Index(k) * conv.in_channels + i);
    out.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(conv.bias.data()), std::streamsize(conv.out_channels * sizeof(float)));
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

template <typename Scalar>
Vgg19::TraceT<Scalar> Vgg19::forward(const ImageT<Scalar>& normalized, std::span<const VggStage> wanted,
                                     bool keep_all) const {
  if (wanted.empty()) throw ArgumentError("Vgg19::forward: no stages requested");
  const int last = stage_index(*std::max_element(wanted.begin(), wanted.end()));
  auto is_wanted = [&](int s) {
    return keep_all || std::find(wanted.begin(), wanted.end(), static_cast<VggStage>(s)) != wanted.end();
  };

  TraceT<Scalar> trace;
  trace.input = to_feature_map(normalized);
  nn::FeatureMapT<Scalar> current = trace.input;
  for (int s = 0; s <= last; ++s) {
    const int ci = kStageConv[s];
    current = ci >= 0 ? nn::relu(convs_[ci].forward(current)) : nn::max_pool2(current);
    if (is_wanted(s)) trace.outputs[s] = current;
  }
  return trace;
}

template <typename Scalar>
ImageT<Scalar> Vgg19::backward(const TraceT<Scalar>& trace,
                               const std::map<VggStage, nn::FeatureMapT<Scalar>>& grads) const {
  if (grads.empty()) throw ArgumentError("Vgg19::backward: no gradients");
  const int last = stage_index(grads.rbegin()->first);
  std::optional<nn::FeatureMapT<Scalar>> g;
  for (int s = last; s >= 0; --s) {
    if (auto it = grads.find(static_cast<VggStage>(s)); it != grads.end()) {
      if (g)
        g->data += it->second.data;
      else
        g = it->second;
    }
    if (!g) continue;
    const nn::FeatureMapT<Scalar>& output = trace.at(static_cast<VggStage>(s));
    const nn::FeatureMapT<Scalar>& input = s == 0 ? trace.input : trace.at(static_cast<VggStage>(s - 1));
    const int ci = kStageConv[s];
    if (ci >= 0)
      g = convs_[ci].backward(input, nn::relu_backward(output, *g), nullptr);
    else
      g = nn::max_pool2_backward(input, *g);
  }
  return ImageT<Scalar>(trace.input.height, trace.input.width, g->data);
}

template Vgg19::TraceT<float> Vgg19::forward(const ImageT<float>&, std::span<const VggStage>, bool) const;
template Vgg19::TraceT<double> Vgg19::forward(const ImageT<double>&, std::span<const VggStage>, bool) const;
template ImageT<float> Vgg19::backward(const TraceT<float>&, const std::map<VggStage, nn::FeatureMapT<float>>&) const;
template ImageT<double> Vgg19::backward(const TraceT<double>&, const std::map<VggStage, nn::FeatureMapT<double>>&) const;

int Vgg19::channels(VggStage s) const {
  for (int i = stage_index(s); i >= 0; --i)
    if (kStageConv[i] >= 0) return convs_[kStageConv[i]].out_channels;
  return 3;
}

std::string Vgg19::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& c : convs_) {
    h = nn::fnv1a(c.weight.data(), c.weight.size(), h);
    h = nn::fnv1a(c.bias.data(), c.bias.size(), h);
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace gst
