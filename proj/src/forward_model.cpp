#include "pcisr/forward_model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "pcisr/io.hpp"
#include "pcisr/ops.hpp"
#include "pcisr/serialize.hpp"

namespace pcisr {

void NoiseConfig::validate() const {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("noise sigma must be nonnegative");
}

double noise_scale(double frames_mean, const NoiseConfig& noise) {
  noise.validate();
  if (!(frames_mean >= 0.0)) throw ConfigError("mean measurement must be nonnegative");
  return (noise.squared_convention ? noise.sigma * noise.sigma : noise.sigma) * frames_mean;
}

Tensor noise_draws(std::size_t n_masks, Extent2 detector, std::uint64_t seed) {
  std::vector<double> draws(n_masks * detector.count());
  for (std::size_t m = 0; m < n_masks; ++m) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(m)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < detector.count(); ++i) draws[m * detector.count() + i] = normal(rng);
  }
  return Tensor(Shape{n_masks, detector.rows, detector.cols}, std::move(draws));
}

Tensor pci_measure(const SparseOTF& otf, const Tensor& masks, const Tensor& object, const NoiseConfig& noise) {
  noise.validate();
  if (masks.ndim() != 3) throw ShapeError("pci_measure: masks must be [N x P x Q], got " + shape_string(masks.shape()));
  const Extent2 dmd = otf.dmd_shape();
  if (object.shape() != Shape{dmd.rows, dmd.cols}) {
    throw ShapeError("pci_measure: object " + shape_string(object.shape()) + " does not match the OTF DMD shape");
  }
  if (masks.extent(1) != dmd.rows || masks.extent(2) != dmd.cols) {
    throw ShapeError("pci_measure: masks " + shape_string(masks.shape()) + " do not match the OTF DMD shape");
  }
  for (double v : object.data()) {
    if (v < 0.0 || v > 1.0) throw ShapeError("pci_measure: object values must lie in [0, 1]");
  }
  const std::size_t n = masks.extent(0);
  Tensor clean = otf_apply(otf, mul(masks, expand_leading(object, n)));
  if (noise.sigma == 0.0) return clean;

  double total = 0.0;
  for (double v : clean.data()) total += v;
  const double scale = noise_scale(total / static_cast<double>(clean.numel()), noise);
  Tensor draws = noise_draws(n, otf.detector_shape(), noise.seed);
  std::vector<double> scaled(draws.numel());
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = scale * draws[i];
  return add(clean, Tensor(draws.shape(), std::move(scaled)));
}

MeasurementSet pci_measure(const SparseOTF& otf, const MaskSet& masks, const Tensor& object,
                           const NoiseConfig& noise, const RegionSpec& region) {
  MeasurementSet set;
  set.frames = pci_measure(otf, masks.realize(otf.dmd_shape()), object, noise);
  set.noise_sigma = noise.sigma;
  set.squared_convention = noise.squared_convention;
  set.seed = noise.seed;
  set.region = region;
  return set;
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& base, const char* suffix) {
  return std::filesystem::path(base.string() + suffix);
}

}  // namespace

void save_measurements(const std::filesystem::path& base, const MeasurementSet& set) {
  save_tensor(with_suffix(base, ".pcit"), set.frames);
  nlohmann::json meta{{"sigma", set.noise_sigma},
                      {"convention", set.squared_convention ? "squared" : "linear"},
                      {"seed", set.seed},
                      {"region", set.region}};
  std::ofstream out(with_suffix(base, ".json"), std::ios::trunc);
  if (!out) throw FormatError("cannot write " + with_suffix(base, ".json").string());
  out << meta.dump(2) << '\n';
}

MeasurementSet load_measurements(const std::filesystem::path& base) {
  MeasurementSet set;
  set.frames = load_tensor(with_suffix(base, ".pcit"));
  if (set.frames.ndim() != 3) throw FormatError("measurement frames must be [N x p x q]");
  std::ifstream in(with_suffix(base, ".json"));
  if (!in) throw FormatError("cannot open " + with_suffix(base, ".json").string());
  try {
    const auto meta = nlohmann::json::parse(in);
    set.noise_sigma = meta.at("sigma").get<double>();
    const auto convention = meta.at("convention").get<std::string>();
    if (convention != "squared" && convention != "linear") throw FormatError("unknown noise convention " + convention);
    set.squared_convention = convention == "squared";
    set.seed = meta.at("seed").get<std::uint64_t>();
    set.region = meta.at("region").get<RegionSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed measurement metadata: ") + e.what());
  }
  return set;
}

}  // namespace pcisr
