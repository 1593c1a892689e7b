#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "pcisr/tensor.hpp"

namespace pcisr {

struct Extent2 {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t count() const noexcept { return rows * cols; }
  friend bool operator==(const Extent2&, const Extent2&) = default;
};

struct Index2 {
  std::size_t row = 0;
  std::size_t col = 0;

  friend bool operator==(const Index2&, const Index2&) = default;
};

// A rectangular region of the DMD plane and the detector pixels observing it.
struct RegionSpec {
  Index2 origin;           // DMD pixel coordinates
  Extent2 size;            // DMD extents (P, Q)
  Index2 detector_origin;  // detector pixel coordinates
  Extent2 detector_size;   // detector extents (p, q)

  friend bool operator==(const RegionSpec&, const RegionSpec&) = default;
};

// Row-sparse nonnegative operator of shape (p*q) x (P*Q): row i holds the
// contribution of every DMD pixel to detector pixel i. Rows are stored in
// compressed form with strictly increasing column indices. Every row's
// support lies within `support_radius` DMD pixels (Chebyshev distance) of the
// row's nominal anchor, the centre of its ideal under-sampling block.
// Copies share the immutable storage.
class SparseOTF {
 public:
  SparseOTF(Extent2 detector, Extent2 dmd, std::vector<std::size_t> row_offsets,
            std::vector<std::size_t> col_indices, std::vector<double> values, double support_radius);

  // Same as the constructor, with the smallest radius that covers every entry.
  static SparseOTF with_fitted_radius(Extent2 detector, Extent2 dmd, std::vector<std::size_t> row_offsets,
                                      std::vector<std::size_t> col_indices, std::vector<double> values);

  Extent2 detector_shape() const noexcept { return data_->detector; }
  Extent2 dmd_shape() const noexcept { return data_->dmd; }
  std::size_t rows() const noexcept { return data_->detector.count(); }
  std::size_t cols() const noexcept { return data_->dmd.count(); }
  std::size_t nnz() const noexcept { return data_->values.size(); }
  double support_radius() const noexcept { return data_->support_radius; }

  std::span<const std::size_t> row_offsets() const noexcept { return data_->row_offsets; }
  std::span<const std::size_t> col_indices() const noexcept { return data_->col_indices; }
  std::span<const double> values() const noexcept { return data_->values; }

  std::span<const std::size_t> row_cols(std::size_t i) const;
  std::span<const double> row_values(std::size_t i) const;
  double row_sum(std::size_t i) const;

  // Nominal anchor (DMD row, DMD col) of detector pixel i.
  std::pair<double, double> anchor(std::size_t i) const;

  // Dense (p*q) x (P*Q) row-major copy.
  std::vector<double> dense() const;

  // out[i] = row_i . image for one DMD image (length P*Q -> p*q).
  void apply(std::span<const double> image, std::span<double> out) const;
  // out[j] += sum_i C[i, j] * frame[i] (length p*q -> P*Q).
  void apply_transpose_add(std::span<const double> frame, std::span<double> out) const;

 private:
  struct Data {
    Extent2 detector;
    Extent2 dmd;
    std::vector<std::size_t> row_offsets;
    std::vector<std::size_t> col_indices;
    std::vector<double> values;
    double support_radius = 0.0;
  };
  std::shared_ptr<const Data> data_;
};

// Differentiable batched application: [N x P x Q] -> [N x p x q] (a rank-2
// [P x Q] input gives a rank-2 [p x q] output).
Tensor otf_apply(const SparseOTF& otf, const Tensor& images);
// Adjoint of otf_apply: [N x p x q] -> [N x P x Q].
Tensor otf_apply_transpose(const SparseOTF& otf, const Tensor& frames);

// Ideal under-sampling OTF: detector pixel (r, c) sums the fy x fx DMD block
// it covers with weight 1.
SparseOTF make_ideal_otf(Extent2 dmd, Extent2 factor);

// Geometric mismatch between the DMD and detector planes.
struct OTFPerturbation {
  double shift_y = 0.0;  // DMD pixels
  double shift_x = 0.0;
  double rotation = 0.0;  // radians, about the DMD centre
  double scale = 1.0;
  double blur_sigma = 0.0;   // DMD pixels
  double gain_jitter = 0.0;  // relative std-dev per detector pixel

  void validate() const;
  bool is_geometric_identity() const noexcept {
    return shift_y == 0.0 && shift_x == 0.0 && rotation == 0.0 && scale == 1.0 && blur_sigma == 0.0;
  }
};

struct PerturbedOTF {
  SparseOTF otf;
  std::vector<double> row_gains;  // multiplicative factor applied to each row
};

// Resamples each row footprint under the affine map, blurs it with a Gaussian
// truncated at 3 sigma, renormalizes to the original row sum and applies the
// per-row gain 1 + gain_jitter * N(0, 1) (clamped at zero). Mass leaving the
// DMD is clipped; a row that loses all of its mass is an error.
PerturbedOTF perturb_otf_detailed(const SparseOTF& base, const OTFPerturbation& pert, std::uint64_t seed);
SparseOTF perturb_otf(const SparseOTF& base, const OTFPerturbation& pert, std::uint64_t seed);

// Candidate support of each detector pixel for calibration: sorted DMD
// indices.
using SupportWindows = std::vector<std::vector<std::size_t>>;

// Ideal block of each detector pixel dilated by `dilation` pixels per side,
// clipped to the DMD.
SupportWindows default_windows(Extent2 detector, Extent2 dmd, std::size_t dilation = 4);

struct CalibrationResult {
  SparseOTF otf;
  std::vector<double> residual;  // per-row post-clamp residual norm
  std::size_t clamped = 0;       // negative coefficients set to zero
  double ridge = 0.0;            // ridge weight actually used
};

// Default ridge weight: 1e-6 * mean(mask^2) * window size.
double default_ridge(const Tensor& masks, std::size_t window_size);

// Per-row ridge least squares restricted to each window, followed by
// clamping negative coefficients to zero. masks [N x P x Q], frames
// [N x p x q]. ridge < 0 selects default_ridge for each row.
CalibrationResult calibrate_otf(const Tensor& masks, const Tensor& frames, const SupportWindows& windows,
                                double ridge = -1.0);

// Tiles the FOV with regions of `region_size` DMD pixels in row-major order.
std::vector<RegionSpec> split_fov(const RegionSpec& fov, Extent2 region_size);

struct RegionExtraction {
  SparseOTF otf;
  std::vector<double> leakage;  // dropped fraction of each row's mass
};

// Restricts rows to the region's detector pixels and columns to its DMD
// pixels. Both coordinate systems are those of `full`.
RegionExtraction extract_region(const SparseOTF& full, const RegionSpec& region);

// OTF container ("PCIO"):
//   magic "PCIO" | u32 version = 1 | u64 p | u64 q | u64 P | u64 Q |
//   u64 row_offsets[p*q + 1] | u64 col_indices[nnz] | f64 values[nnz]
// All little-endian. The support radius is refitted on load.
void write_otf(std::ostream& out, const SparseOTF& otf);
SparseOTF read_otf(std::istream& in);
void save_otf(const std::filesystem::path& path, const SparseOTF& otf);
SparseOTF load_otf(const std::filesystem::path& path);

}  // namespace pcisr
