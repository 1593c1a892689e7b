#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pcisr/tensor.hpp"

namespace pcisr {

struct UNetConfig {
  std::size_t depth = 4;          // number of down-sampling stages
  std::size_t base_channels = 16;

  void validate() const;
  std::size_t channels(std::size_t level) const { return base_channels << level; }
};

struct ConvLayer {
  std::string name;
  Tensor kernel;  // [c_out x c_in x 3 x 3]
  Tensor bias;    // [c_out]
  std::size_t stride = 1;
};

// Layers in forward order:
//   stem, then per level l: enc_l, down_l (stride 2); bottleneck; then per
//   level d from deep to shallow: up_d (after 2x upsampling), merge_d (after
//   concatenation with enc_d's output); head.
// The first three convolutions (stem, enc_0, down_0) form the fine-tune subset.
struct UNetParams {
  UNetConfig config;
  std::vector<ConvLayer> layers;
  std::vector<std::size_t> finetune_subset;

  std::size_t layer_index(const std::string& name) const;
  std::size_t parameter_count() const;
  // Kernels and biases of every layer, interleaved, in layer order.
  std::vector<Tensor> tensors() const;
  // Same, restricted to the given layers.
  std::vector<Tensor> tensors(const std::vector<std::size_t>& layer_indices) const;
  // Independent copy; every tensor gets requires_grad = trainable.
  UNetParams clone(bool trainable) const;
  void set_trainable(bool trainable);
};

// Kaiming uniform kernels (bound sqrt(6 / fan_in)), zero biases.
UNetParams init_params(std::uint64_t seed, const UNetConfig& config = {});

// All-zero kernels and biases with the given architecture.
UNetParams zero_params(const UNetConfig& config = {});

// x [1 x H x W] or [H x W]; H and W divisible by 2^depth. Output has the
// input's shape with values in (0, 1). When `stages` is non-null it receives
// the activation after each encoder level, the bottleneck and each decoder
// level.
Tensor unet_forward(const UNetParams& params, const Tensor& x, std::vector<Tensor>* stages = nullptr);

// Copy of `params` in which only the fine-tune subset requires grad; the
// returned tensors are that subset's kernels and biases.
struct FinetuneView {
  UNetParams params;
  std::vector<Tensor> trainable;
};
FinetuneView select_finetune(const UNetParams& params);

// Weights as back-to-back PCIT tensors in `<base>.pcit` and a manifest with
// layer names, shapes, strides and the fine-tune subset in `<base>.json`.
void save_params(const std::filesystem::path& base, const UNetParams& params);
UNetParams load_params(const std::filesystem::path& base);

// FNV-1a over the raw bytes of the tensors' values.
std::uint64_t checksum(const std::vector<Tensor>& tensors);

}  // namespace pcisr
