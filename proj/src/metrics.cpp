#include "pcisr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace pcisr {

std::string to_string(PsnrConvention c) {
  return c == PsnrConvention::as_printed ? "as-printed" : "mse-normalized";
}

PsnrConvention parse_psnr_convention(const std::string& s) {
  if (s == "as-printed") return PsnrConvention::as_printed;
  if (s == "mse-normalized") return PsnrConvention::mse_normalized;
  throw ConfigError("unknown PSNR convention '" + s + "' (expected as-printed or mse-normalized)");
}

void MetricConfig::validate() const {
  if (bit_depth < 1 || bit_depth > 32) throw ConfigError("bit depth must lie in [1, 32]");
  if (c1 == 0.0 || c2 == 0.0) throw ConfigError("SSIM constants must be positive");
  if (window < 1) throw ConfigError("SSIM window must be at least 1");
}

double MetricConfig::peak() const { return std::ldexp(1.0, bit_depth) - 1.0; }
double MetricConfig::ssim_c1() const { return c1 > 0.0 ? c1 : std::pow(0.01 * peak(), 2); }
double MetricConfig::ssim_c2() const { return c2 > 0.0 ? c2 : std::pow(0.03 * peak(), 2); }

namespace {

void require_pair(const Tensor& x, const Tensor& y, const char* what) {
  if (x.shape() != y.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(y.shape()));
  }
  if (x.ndim() != 2) throw ShapeError(std::string(what) + ": expected a 2-D image, got " + shape_string(x.shape()));
}

// Symmetric reflection: -1 -> 0, n -> n - 1.
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  const auto len = static_cast<std::ptrdiff_t>(n);
  while (i < 0 || i >= len) i = i < 0 ? -i - 1 : 2 * len - i - 1;
  return static_cast<std::size_t>(i);
}

}  // namespace

double psnr(const Tensor& x, const Tensor& y, const MetricConfig& cfg) {
  cfg.validate();
  require_pair(x, y, "psnr");
  const double peak = cfg.peak();
  double sse = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = (y[i] - x[i]) * peak;
    sse += d * d;
  }
  if (sse == 0.0) return cfg.psnr_cap;
  const double err = cfg.convention == PsnrConvention::mse_normalized ? sse / static_cast<double>(x.numel()) : sse;
  return 10.0 * std::log10(peak * peak / err);
}

double ssim(const Tensor& x, const Tensor& y, const MetricConfig& cfg) {
  cfg.validate();
  require_pair(x, y, "ssim");
  const std::size_t rows = x.extent(0), cols = x.extent(1), w = cfg.window;
  if (rows < w || cols < w) {
    throw ShapeError("ssim: image " + shape_string(x.shape()) + " is smaller than the " + std::to_string(w) +
                     "-pixel window");
  }
  const double peak = cfg.peak(), c1 = cfg.ssim_c1(), c2 = cfg.ssim_c2();
  const auto half = static_cast<std::ptrdiff_t>(w / 2);
  const double count = static_cast<double>(w * w);
  std::vector<double> wx(w * w), wy(w * w);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      for (std::size_t a = 0; a < w; ++a) {
        const std::size_t rr = reflect(static_cast<std::ptrdiff_t>(r + a) - half, rows);
        for (std::size_t b = 0; b < w; ++b) {
          const std::size_t cc = reflect(static_cast<std::ptrdiff_t>(c + b) - half, cols);
          wx[a * w + b] = x[rr * cols + cc] * peak;
          wy[a * w + b] = y[rr * cols + cc] * peak;
        }
      }
      double mx = 0.0, my = 0.0;
      for (std::size_t k = 0; k < wx.size(); ++k) {
        mx += wx[k];
        my += wy[k];
      }
      mx /= count;
      my /= count;
      double vx = 0.0, vy = 0.0, cxy = 0.0;
      for (std::size_t k = 0; k < wx.size(); ++k) {
        const double dx = wx[k] - mx, dy = wy[k] - my;
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
      }
      vx /= count;
      vy /= count;
      cxy /= count;
      total += ((2.0 * (mx * my) + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  }
  return total / static_cast<double>(rows * cols);
}

ChartSpec default_chart() {
  ChartSpec chart;
  auto v = [&](std::size_t p, std::size_t r, std::size_t c, std::size_t h, std::size_t w) {
    chart.groups.push_back({p, true, {r, c}, {h, w}});
  };
  auto hz = [&](std::size_t p, std::size_t r, std::size_t c, std::size_t h, std::size_t w) {
    chart.groups.push_back({p, false, {r, c}, {h, w}});
  };
  v(2, 0, 0, 8, 8);
  v(3, 0, 8, 8, 12);
  v(4, 0, 20, 8, 8);
  v(6, 8, 0, 8, 12);
  v(8, 8, 12, 8, 16);
  hz(8, 16, 0, 16, 6);
  hz(6, 16, 6, 12, 6);
  hz(4, 16, 12, 8, 6);
  hz(3, 16, 18, 12, 6);
  hz(2, 16, 24, 8, 6);
  return chart;
}

namespace {

void check_group(const StripeGroup& g, std::size_t rows, std::size_t cols) {
  if (g.period < 2) throw ConfigError("stripe period must be at least 2");
  if (g.size.rows == 0 || g.size.cols == 0 || g.origin.row + g.size.rows > rows || g.origin.col + g.size.cols > cols) {
    throw ShapeError("stripe group at (" + std::to_string(g.origin.row) + ", " + std::to_string(g.origin.col) +
                     ") lies outside the " + std::to_string(rows) + "x" + std::to_string(cols) + " image");
  }
  const std::size_t across = g.vertical ? g.size.cols : g.size.rows;
  if (across < g.period) throw ShapeError("stripe group narrower than one period");
}

}  // namespace

Tensor render_chart(Extent2 size, const ChartSpec& chart) {
  std::vector<double> img(size.count(), 0.0);
  for (const auto& g : chart.groups) {
    check_group(g, size.rows, size.cols);
    for (std::size_t r = 0; r < g.size.rows; ++r) {
      for (std::size_t c = 0; c < g.size.cols; ++c) {
        const std::size_t t = g.vertical ? c : r;
        img[(g.origin.row + r) * size.cols + g.origin.col + c] = 2 * (t % g.period) < g.period ? 1.0 : 0.0;
      }
    }
  }
  return Tensor(Shape{size.rows, size.cols}, std::move(img));
}

std::vector<StripeScore> stripe_resolvability(const Tensor& image, const ChartSpec& chart, double threshold) {
  if (image.ndim() != 2) throw ShapeError("stripe_resolvability expects a 2-D image");
  const std::size_t rows = image.extent(0), cols = image.extent(1);
  std::vector<StripeScore> scores;
  for (const auto& g : chart.groups) {
    check_group(g, rows, cols);
    const std::size_t across = g.vertical ? g.size.cols : g.size.rows;
    const std::size_t along = g.vertical ? g.size.rows : g.size.cols;
    std::vector<double> folded(g.period, 0.0), hits(g.period, 0.0);
    for (std::size_t t = 0; t < across; ++t) {
      double line = 0.0;
      for (std::size_t s = 0; s < along; ++s) {
        const std::size_t r = g.origin.row + (g.vertical ? s : t);
        const std::size_t c = g.origin.col + (g.vertical ? t : s);
        line += image[r * cols + c];
      }
      folded[t % g.period] += line / static_cast<double>(along);
      hits[t % g.period] += 1.0;
    }
    for (std::size_t k = 0; k < g.period; ++k) folded[k] /= hits[k];
    const auto [lo, hi] = std::minmax_element(folded.begin(), folded.end());
    const double contrast = *hi + *lo > 0.0 ? (*hi - *lo) / (*hi + *lo) : 0.0;
    scores.push_back({g, contrast, contrast > threshold});
  }
  return scores;
}

std::size_t count_resolved(const std::vector<StripeScore>& scores) {
  return static_cast<std::size_t>(std::count_if(scores.begin(), scores.end(), [](const auto& s) { return s.resolved; }));
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << "image_id,method,sigma,psnr,ssim,convention\n";
  const auto old_precision = out.precision(10);
  for (const auto& r : rows) {
    out << r.image_id << ',' << r.method << ',' << r.sigma << ',' << r.psnr << ',' << r.ssim << ','
        << to_string(r.convention) << '\n';
  }
  out.precision(old_precision);
}

}  // namespace pcisr
