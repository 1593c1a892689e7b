#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pcisr/forward_model.hpp"
#include "pcisr/masks.hpp"
#include "pcisr/otf.hpp"
#include "pcisr/unet.hpp"

namespace pcisr {

enum class FinetuneMode {
  per_measurement,  // adapt once for every measurement set
  per_region,       // adapt once per region over all of its measurement sets
};

std::string to_string(FinetuneMode m);
FinetuneMode parse_finetune_mode(const std::string& s);

struct FinetuneConfig {
  double learning_rate = 2e-4;
  std::size_t max_steps = 300;
  double tol = 1e-4;           // stop when the loss fell by less than this fraction over `patience` steps
  std::size_t patience = 20;
  std::uint64_t seed = 0;
  bool line_search = false;    // monotone mode: shrink each step until the loss does not increase
  FinetuneMode mode = FinetuneMode::per_measurement;

  void validate() const;
};

struct FinetuneResult {
  UNetParams params;            // adapted copy; only the fine-tune subset differs from the input
  std::vector<Tensor> images;   // X_out* per measurement set, from the best parameters
  std::vector<double> history;  // loss before each step, then the final loss
  std::size_t steps = 0;
  bool early_stopped = false;
  double t2_seconds = 0.0;
  FinetuneMode mode = FinetuneMode::per_measurement;
};

// Measurement-consistency loss ||Y* - PCI(C, M, U(X_GI*))||^2 summed over the
// given sets, where X_GI* = GI(C, M, Y*) and the re-simulation is noiseless.
// Adam updates touch only the fine-tune subset. The returned parameters are
// those with the lowest loss seen, so the final loss never exceeds the
// initial one.
FinetuneResult finetune_region(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf_mu,
                               const MeasurementSet& y_star, const FinetuneConfig& cfg);

// Several measurement sets of one region. per_measurement mode returns one
// result per set; per_region mode optimizes the summed loss once and returns a
// single result holding every set's image.
std::vector<FinetuneResult> finetune_sets(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf_mu,
                                          const std::vector<MeasurementSet>& y_star, const FinetuneConfig& cfg);

// Value of the fine-tuning objective for fixed parameters.
double consistency_loss(const UNetParams& params, const Tensor& binary_masks, const SparseOTF& otf_mu,
                        const Tensor& frames);

struct FovTiming {
  double t1 = 0.0;
  std::vector<double> t2;
  double ratio = 0.0;  // (t1 + sum t2) / (n t1)
};

double timing_ratio(double t1, const std::vector<double>& t2);

struct FovResult {
  Tensor mosaic;                       // [P_fov x Q_fov]
  std::vector<RegionSpec> regions;     // row-major tiling
  std::vector<FinetuneResult> results; // one per region
  FovTiming timing;
};

// Fine-tunes every region independently from the same base parameters and
// stitches the per-region outputs without blending. Each region's OTF is
// extracted from `full_otf`; `measurements` must hold exactly one set whose
// `region` equals each tile of split_fov(fov, region_size).
FovResult reconstruct_fov(const RegionSpec& fov, Extent2 region_size, const SparseOTF& full_otf, const MaskSet& masks,
                          const UNetParams& params, const std::vector<MeasurementSet>& measurements,
                          const FinetuneConfig& cfg, double t1_seconds);

// {"T1": ..., "T2_list": [...], "ratio": ...}
void write_timing_json(std::ostream& out, const FovTiming& timing);

}  // namespace pcisr
