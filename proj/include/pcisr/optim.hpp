#pragma once

#include <cstddef>
#include <vector>

#include "pcisr/tensor.hpp"

namespace pcisr {

struct AdamConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

// Adam with bias correction. Updates the parameter storage in place from the
// gradients accumulated on each tensor; tensors without a gradient are left
// untouched for that step.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  void step();
  void zero_grad();
  std::size_t steps() const noexcept { return t_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::size_t> counts_;  // per-tensor step count for bias correction
  std::size_t t_ = 0;
};

}  // namespace pcisr
