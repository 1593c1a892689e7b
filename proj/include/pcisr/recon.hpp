#pragma once

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "pcisr/forward_model.hpp"
#include "pcisr/masks.hpp"
#include "pcisr/otf.hpp"

namespace pcisr {

// Ghost-imaging estimate
//   X_GI = Reshape( 1/(p q) * sum_i sum_m y[m, i] * (row_i(C)^T (.) col(M_m)) )
// evaluated as 1/(p q) * sum_m M_m (.) C^T y_m. masks [N x P x Q], frames
// [N x p x q]; differentiable in both.
Tensor gi_reconstruct(const SparseOTF& otf, const Tensor& masks, const Tensor& frames);
Tensor gi_reconstruct(const SparseOTF& otf, const MaskSet& masks, const MeasurementSet& y);

// Same estimate with y[m, i] replaced by y[m, i] - mean_m y[m, i]. Needs at
// least two masks.
Tensor gi_reconstruct_centered(const SparseOTF& otf, const Tensor& masks, const Tensor& frames);
Tensor gi_reconstruct_centered(const SparseOTF& otf, const MaskSet& masks, const MeasurementSet& y);

// Stacked measurement operator A: x -> [C col(M_m (.) x)]_m and its adjoint.
class MeasurementOperator {
 public:
  MeasurementOperator(SparseOTF otf, Tensor masks);

  std::size_t image_size() const noexcept { return otf_.cols(); }
  std::size_t measurement_size() const noexcept { return n_ * otf_.rows(); }

  void apply(std::span<const double> x, std::span<double> y) const;
  void adjoint(std::span<const double> y, std::span<double> x) const;

 private:
  SparseOTF otf_;
  Tensor masks_;
  std::size_t n_;
};

struct TVConfig {
  double lambda = 1e-2;
  std::size_t max_iters = 300;
  double step_size = 1.0;  // initial step, shrunk by backtracking
  double tol = 1e-7;       // relative objective decrease that ends the solve
  std::size_t prox_iters = 30;

  void validate() const;
};

struct TVIteration {
  std::size_t iteration = 0;
  double objective = 0.0;
  double step_size = 0.0;
};

struct TVResult {
  Tensor image;  // [P x Q], values in [0, 1]
  std::vector<TVIteration> history;
  bool converged = false;
};

// Isotropic TV with forward differences and a reflective (Neumann) border.
double total_variation(std::span<const double> x, Extent2 size);

// Approximately minimizes 1/2 ||A x - y||^2 + lambda TV(x) over x in
// [0, 1]^{P x Q} with monotone proximal gradient and backtracking. The
// proximal step is a dual projected-gradient TV denoiser with box
// constraint. Hitting max_iters returns the last (best) iterate with
// converged = false.
TVResult tv_reconstruct(const SparseOTF& otf, const Tensor& masks, const Tensor& frames, const TVConfig& cfg);
TVResult tv_reconstruct(const SparseOTF& otf, const MaskSet& masks, const MeasurementSet& y, const TVConfig& cfg);

// CSV with header "iteration,objective,step_size".
void write_history_csv(std::ostream& out, const std::vector<TVIteration>& history);

}  // namespace pcisr
