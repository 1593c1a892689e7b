#pragma once

#include <cstdint>
#include <filesystem>

#include "pcisr/otf.hpp"
#include "pcisr/tensor.hpp"

namespace pcisr {

// Periodic tiling: [fy x fx] -> [rows x cols] or [N x fy x fx] -> [N x rows x cols].
// The gradient of an element cell is the sum over its tile positions.
Tensor tile(const Tensor& element, Extent2 size);

// Straight-through binarization: forward emits 1 where sigmoid(logit) >= 0.5
// (logit >= 0) and 0 elsewhere; backward multiplies by sigmoid'(logit).
Tensor binarize_st(const Tensor& logits);

// N binary modulation masks generated by tiling trainable fy x fx elements.
class MaskSet {
 public:
  explicit MaskSet(Tensor element_logits);

  // Logits i.i.d. uniform in [-0.5, 0.5].
  static MaskSet random(std::size_t n_masks, Extent2 element, std::uint64_t seed);
  // Logits +1 / -1 reproducing the given {0, 1} elements [N x fy x fx].
  static MaskSet from_binary_elements(const Tensor& elements);

  std::size_t n_masks() const noexcept { return logits_.extent(0); }
  Extent2 element_shape() const noexcept { return {logits_.extent(1), logits_.extent(2)}; }

  const Tensor& logits() const noexcept { return logits_; }
  Tensor& logits() noexcept { return logits_; }

  // {0, 1} elements [N x fy x fx], not tracked.
  Tensor binary_elements() const;
  // Differentiable tiled realization [N x P x Q].
  Tensor realize(Extent2 size) const;
  // Exact {0, 1} masks [N x P x Q], not tracked.
  Tensor binary(Extent2 size) const;

  MaskSet clone() const { return MaskSet(logits_.clone(logits_.requires_grad())); }

 private:
  Tensor logits_;
};

// Writes the binary realization at `size` as a PCIT tensor [N x P x Q].
void export_masks(const std::filesystem::path& path, const MaskSet& masks, Extent2 size);
// Reads a binary [N x P x Q] stack and recovers its element set. Throws
// FormatError when values are not binary or the stack is not periodic with
// the given element shape.
MaskSet load_masks(const std::filesystem::path& path, Extent2 element = {4, 4});

// Multi-image PBM (P4) with one image per mask; bit 1 marks a mask value of 1.
void write_pbm(const std::filesystem::path& path, const Tensor& masks);
Tensor read_pbm(const std::filesystem::path& path);

}  // namespace pcisr
