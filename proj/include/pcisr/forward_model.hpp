#pragma once

#include <cstdint>
#include <filesystem>

#include "pcisr/masks.hpp"
#include "pcisr/otf.hpp"
#include "pcisr/tensor.hpp"

namespace pcisr {

// Additive Gaussian measurement noise, noise = scale * N(0, 1) with
// scale = sigma^2 * mean(y) (squared convention, as printed) or
// sigma * mean(y) (sigma read as a plain standard deviation).
struct NoiseConfig {
  double sigma = 0.0;
  bool squared_convention = true;
  std::uint64_t seed = 0;

  void validate() const;
};

double noise_scale(double frames_mean, const NoiseConfig& noise);

struct MeasurementSet {
  Tensor frames;  // [N x p x q]
  double noise_sigma = 0.0;
  bool squared_convention = true;
  std::uint64_t seed = 0;
  RegionSpec region;

  std::size_t n_masks() const { return frames.extent(0); }
  Extent2 detector_shape() const { return {frames.extent(1), frames.extent(2)}; }
  NoiseConfig noise() const { return NoiseConfig{noise_sigma, squared_convention, seed}; }
};

// Noise draws for an [N x p x q] measurement: mask m uses an engine seeded
// with (seed, m) and draws detector pixels in row-major order.
Tensor noise_draws(std::size_t n_masks, Extent2 detector, std::uint64_t seed);

// y[m, i] = row_i(C) . col(M_m * X) + noise[m, i]. masks [N x P x Q] and
// object [P x Q] may both be tracked; the noise is a constant. object values
// must lie in [0, 1].
Tensor pci_measure(const SparseOTF& otf, const Tensor& masks, const Tensor& object, const NoiseConfig& noise);

MeasurementSet pci_measure(const SparseOTF& otf, const MaskSet& masks, const Tensor& object,
                           const NoiseConfig& noise, const RegionSpec& region = {});

// Frames go to `<base>.pcit`, metadata to `<base>.json`.
void save_measurements(const std::filesystem::path& base, const MeasurementSet& set);
MeasurementSet load_measurements(const std::filesystem::path& base);

}  // namespace pcisr
