#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "pcisr/forward_model.hpp"
#include "pcisr/masks.hpp"
#include "pcisr/metrics.hpp"
#include "pcisr/otf.hpp"
#include "pcisr/unet.hpp"

namespace pcisr {

// Procedural grayscale images in [0, 1]: random rectangles, disks, stripe
// gratings (periods 2-8) and glyph-like strokes over a dim background. When
// size is at least 32 x 32, image 0 is the stripe resolution chart.
std::vector<Tensor> make_synthetic_dataset(std::size_t n, Extent2 size, std::uint64_t seed);

struct DatasetSplit {
  std::vector<Tensor> train, validation, test;
  std::vector<std::size_t> train_ids, validation_ids, test_ids;  // indices into the source collection
};

// Shuffled split with the given fractions (the remainder is the test set).
// Index 0 (the chart) always goes to the test set.
DatasetSplit split_dataset(const std::vector<Tensor>& images, std::uint64_t seed, double train_fraction = 0.8,
                           double validation_fraction = 0.15);

struct TrainConfig {
  double learning_rate = 2e-4;
  std::size_t batch_size = 15;
  std::size_t epochs = 30;
  double noise_sigma = 0.3;
  bool squared_convention = true;
  std::uint64_t seed = 0;
  RegionSpec region;
  std::size_t n_masks = 3;
  Extent2 mask_element{4, 4};
  UNetConfig unet;
  std::size_t max_steps = 0;  // optimizer steps; 0 = no limit beyond epochs
  bool select_best = true;    // return the best-validation checkpoint

  void validate() const;
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean per-image squared error
  std::vector<double> val_psnr;    // NaN when there is no validation set
  std::vector<double> val_ssim;
  std::size_t best_epoch = 0;      // 1-based
  std::size_t steps = 0;
  double t1_seconds = 0.0;
};

struct TrainResult {
  MaskSet masks;
  UNetParams params;
  TrainReport report;
};

// Network estimate U(GI(C, M, frames)); masks realized from `masks`.
Tensor reconstruct_net(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf, const Tensor& frames);

// Per-image loss ||U(GI(C, M, PCI(C, M, X))) - X||^2, recorded on the active
// tape.
Tensor pipeline_loss(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf, const Tensor& object,
                     const NoiseConfig& noise);

// Mean of pipeline_loss over a batch; noise for image k uses seed noise_seed + k.
double batch_loss(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf,
                  const std::vector<Tensor>& batch, double sigma, bool squared_convention, std::uint64_t noise_seed);

// Adam on the mask logits and all network parameters starting from the given
// state. Throws NumericError naming the epoch if the loss becomes NaN.
TrainResult train(const std::vector<Tensor>& train_set, const std::vector<Tensor>& validation_set,
                  const SparseOTF& otf, const TrainConfig& cfg, MaskSet masks, UNetParams params);
// Same, from random masks and freshly initialized parameters drawn from cfg.seed.
TrainResult train(const std::vector<Tensor>& train_set, const std::vector<Tensor>& validation_set,
                  const SparseOTF& otf, const TrainConfig& cfg);

// Header "epoch,train_loss,val_psnr,val_ssim".
void write_report_csv(std::ostream& out, const TrainReport& report);

// Deterministic seed derived from a base seed and a tuple of counters.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts);

}  // namespace pcisr
