#include "pcisr/unet.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "pcisr/io.hpp"
#include "pcisr/ops.hpp"

namespace pcisr {

namespace {

constexpr std::size_t kKernel = 3;

struct LayerSpec {
  std::string name;
  std::size_t c_out, c_in, stride;
};

std::vector<LayerSpec> architecture(const UNetConfig& cfg) {
  std::vector<LayerSpec> specs;
  specs.push_back({"stem", cfg.channels(0), 1, 1});
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    specs.push_back({"enc" + std::to_string(l), cfg.channels(l), cfg.channels(l), 1});
    specs.push_back({"down" + std::to_string(l), cfg.channels(l + 1), cfg.channels(l), 2});
  }
  specs.push_back({"bottleneck", cfg.channels(cfg.depth), cfg.channels(cfg.depth), 1});
  for (std::size_t d = cfg.depth; d-- > 0;) {
    specs.push_back({"up" + std::to_string(d), cfg.channels(d), cfg.channels(d + 1), 1});
    specs.push_back({"merge" + std::to_string(d), cfg.channels(d), 2 * cfg.channels(d), 1});
  }
  specs.push_back({"head", 1, cfg.channels(0), 1});
  return specs;
}

UNetParams build(const UNetConfig& config, const std::function<double(std::size_t fan_in)>& draw) {
  config.validate();
  UNetParams params;
  params.config = config;
  for (const auto& s : architecture(config)) {
    const std::size_t fan_in = s.c_in * kKernel * kKernel;
    std::vector<double> w(s.c_out * fan_in);
    for (auto& v : w) v = draw(fan_in);
    params.layers.push_back({s.name, Tensor(Shape{s.c_out, s.c_in, kKernel, kKernel}, std::move(w), true),
                             Tensor::zeros(Shape{s.c_out}, true), s.stride});
  }
  params.finetune_subset = {0, 1, 2};
  return params;
}

const ConvLayer& layer(const UNetParams& p, std::size_t& cursor) { return p.layers.at(cursor++); }

Tensor conv(const ConvLayer& l, const Tensor& x) { return conv2d(x, l.kernel, l.bias, l.stride, 1); }

}  // namespace

void UNetConfig::validate() const {
  if (depth < 1) throw ConfigError("U-Net depth must be at least 1");
  if (base_channels < 1) throw ConfigError("U-Net base_channels must be at least 1");
  if (depth > 16) throw ConfigError("U-Net depth too large");
}

std::size_t UNetParams::layer_index(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  throw ConfigError("no layer named " + name);
}

std::size_t UNetParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.kernel.numel() + l.bias.numel();
  return n;
}

std::vector<Tensor> UNetParams::tensors() const {
  std::vector<Tensor> out;
  for (const auto& l : layers) {
    out.push_back(l.kernel);
    out.push_back(l.bias);
  }
  return out;
}

std::vector<Tensor> UNetParams::tensors(const std::vector<std::size_t>& layer_indices) const {
  std::vector<Tensor> out;
  for (auto i : layer_indices) {
    out.push_back(layers.at(i).kernel);
    out.push_back(layers.at(i).bias);
  }
  return out;
}

UNetParams UNetParams::clone(bool trainable) const {
  UNetParams copy = *this;
  for (auto& l : copy.layers) {
    l.kernel = l.kernel.clone(trainable);
    l.bias = l.bias.clone(trainable);
  }
  return copy;
}

void UNetParams::set_trainable(bool trainable) {
  for (auto& l : layers) {
    l.kernel.set_requires_grad(trainable);
    l.bias.set_requires_grad(trainable);
  }
}

UNetParams init_params(std::uint64_t seed, const UNetConfig& config) {
  std::mt19937_64 rng(seed);
  return build(config, [&rng](std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return std::uniform_real_distribution<double>(-bound, bound)(rng);
  });
}

UNetParams zero_params(const UNetConfig& config) {
  return build(config, [](std::size_t) { return 0.0; });
}

Tensor unet_forward(const UNetParams& params, const Tensor& x, std::vector<Tensor>* stages) {
  const auto& cfg = params.config;
  if (params.layers.size() != architecture(cfg).size()) throw ShapeError("U-Net parameters do not match the config");
  Tensor h;
  if (x.ndim() == 2) {
    h = reshape(x, Shape{1, x.extent(0), x.extent(1)});
  } else if (x.ndim() == 3 && x.extent(0) == 1) {
    h = x;
  } else {
    throw ShapeError("U-Net input must be [1 x H x W] or [H x W], got " + shape_string(x.shape()));
  }
  const std::size_t unit = std::size_t{1} << cfg.depth;
  if (h.extent(1) % unit != 0 || h.extent(2) % unit != 0) {
    throw ShapeError("U-Net input " + shape_string(x.shape()) + " is not divisible by " + std::to_string(unit));
  }

  std::size_t cursor = 0;
  std::vector<Tensor> skips;
  h = relu(conv(layer(params, cursor), h));
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    h = relu(conv(layer(params, cursor), h));
    skips.push_back(h);
    if (stages) stages->push_back(h);
    h = relu(conv(layer(params, cursor), h));
  }
  h = relu(conv(layer(params, cursor), h));
  if (stages) stages->push_back(h);
  for (std::size_t d = cfg.depth; d-- > 0;) {
    h = relu(conv(layer(params, cursor), upsample_nearest2x(h)));
    h = relu(conv(layer(params, cursor), concat_channels(h, skips[d])));
    if (stages) stages->push_back(h);
  }
  h = sigmoid(conv(layer(params, cursor), h));
  return reshape(h, x.shape());
}

FinetuneView select_finetune(const UNetParams& params) {
  FinetuneView view{params.clone(false), {}};
  for (auto i : view.params.finetune_subset) view.params.layers.at(i).kernel.set_requires_grad(true);
  for (auto i : view.params.finetune_subset) view.params.layers.at(i).bias.set_requires_grad(true);
  view.trainable = view.params.tensors(view.params.finetune_subset);
  return view;
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& base, const char* suffix) {
  return std::filesystem::path(base.string() + suffix);
}

}  // namespace

void save_params(const std::filesystem::path& base, const UNetParams& params) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : params.layers) {
    layers.push_back({{"name", l.name}, {"kernel", l.kernel.shape()}, {"bias", l.bias.shape()}, {"stride", l.stride}});
  }
  const nlohmann::json manifest{{"format", "pcisr-unet"},
                                {"version", 1},
                                {"depth", params.config.depth},
                                {"base_channels", params.config.base_channels},
                                {"layers", layers},
                                {"finetune_subset", params.finetune_subset},
                                {"weights", with_suffix(base, ".pcit").filename().string()}};
  save_tensors(with_suffix(base, ".pcit"), params.tensors());
  std::ofstream out(with_suffix(base, ".json"), std::ios::trunc);
  if (!out) throw FormatError("cannot write " + with_suffix(base, ".json").string());
  out << manifest.dump(2) << '\n';
}

UNetParams load_params(const std::filesystem::path& base) {
  std::ifstream in(with_suffix(base, ".json"));
  if (!in) throw FormatError("cannot open " + with_suffix(base, ".json").string());
  nlohmann::json manifest;
  UNetConfig cfg;
  std::vector<std::size_t> subset;
  try {
    manifest = nlohmann::json::parse(in);
    if (manifest.at("format") != "pcisr-unet") throw FormatError("not a U-Net manifest");
    cfg.depth = manifest.at("depth").get<std::size_t>();
    cfg.base_channels = manifest.at("base_channels").get<std::size_t>();
    subset = manifest.at("finetune_subset").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed U-Net manifest: ") + e.what());
  }
  UNetParams params = zero_params(cfg);
  const auto tensors = load_tensors(with_suffix(base, ".pcit"));
  if (tensors.size() != 2 * params.layers.size()) {
    throw FormatError(with_suffix(base, ".pcit").string() + " holds " + std::to_string(tensors.size()) +
                      " tensors, expected " + std::to_string(2 * params.layers.size()));
  }
  const auto& layers = manifest.at("layers");
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto& l = params.layers[i];
    if (layers.at(i).at("name") != l.name || tensors[2 * i].shape() != l.kernel.shape() ||
        tensors[2 * i + 1].shape() != l.bias.shape()) {
      throw FormatError("layer " + std::to_string(i) + " in " + base.string() + " does not match the architecture");
    }
    l.kernel = tensors[2 * i].clone(true);
    l.bias = tensors[2 * i + 1].clone(true);
  }
  if (subset != params.finetune_subset) throw FormatError("unexpected fine-tune subset in " + base.string());
  return params;
}

std::uint64_t checksum(const std::vector<Tensor>& tensors) {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& t : tensors) {
    for (double v : t.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
      }
    }
  }
  return h;
}

}  // namespace pcisr
