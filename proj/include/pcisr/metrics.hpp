#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "pcisr/otf.hpp"
#include "pcisr/tensor.hpp"

namespace pcisr {

enum class PsnrConvention {
  as_printed,      // 10 log10(L^2 / sum (Y - X)^2)
  mse_normalized,  // 10 log10(L^2 / mean (Y - X)^2)
};

std::string to_string(PsnrConvention c);
PsnrConvention parse_psnr_convention(const std::string& s);

// Images are compared on [0, L] with L = 2^bit_depth - 1 after scaling from
// [0, 1].
struct MetricConfig {
  int bit_depth = 16;
  PsnrConvention convention = PsnrConvention::mse_normalized;
  double psnr_cap = 99.0;  // returned for identical images
  double c1 = -1.0;        // < 0 selects (0.01 L)^2
  double c2 = -1.0;        // < 0 selects (0.03 L)^2
  std::size_t window = 8;  // uniform window, stride 1, reflective edges

  void validate() const;
  double peak() const;
  double ssim_c1() const;
  double ssim_c2() const;
};

double psnr(const Tensor& x, const Tensor& y, const MetricConfig& cfg = {});
double ssim(const Tensor& x, const Tensor& y, const MetricConfig& cfg = {});

// A block of parallel stripes. Vertical stripes vary along columns.
struct StripeGroup {
  std::size_t period = 0;
  bool vertical = true;
  Index2 origin;
  Extent2 size;
};

struct ChartSpec {
  std::vector<StripeGroup> groups;
};

// Fixed stripe layout occupying the top-left 32 x 32 pixels: vertical and
// horizontal groups at periods {2, 3, 4, 6, 8}, every group 4-aligned.
ChartSpec default_chart();
// Renders the chart into a [rows x cols] image (rows, cols >= 32). A pixel at
// offset t from the group origin along the varying axis is 1 when
// 2 (t mod period) < period.
Tensor render_chart(Extent2 size, const ChartSpec& chart = default_chart());

struct StripeScore {
  StripeGroup group;
  double contrast = 0.0;
  bool resolved = false;
};

// Michelson contrast of each group's mean profile folded by stripe phase:
// the profile across the stripes is averaged over the group, then over every
// position with the same offset modulo the period. A group is resolved when
// contrast > threshold.
std::vector<StripeScore> stripe_resolvability(const Tensor& image, const ChartSpec& chart = default_chart(),
                                              double threshold = 0.2);
std::size_t count_resolved(const std::vector<StripeScore>& scores);

struct MetricRow {
  std::string image_id;
  std::string method;
  double sigma = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  PsnrConvention convention = PsnrConvention::mse_normalized;
};

// Header "image_id,method,sigma,psnr,ssim,convention".
void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows);

}  // namespace pcisr
