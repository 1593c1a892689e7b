#include "pcisr/otf.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include "pcisr/io.hpp"

namespace pcisr {

namespace {

constexpr double kRadiusSlack = 1e-9;

double chebyshev_to_anchor(Extent2 detector, Extent2 dmd, std::size_t row, std::size_t col) {
  const std::size_t r = row / detector.cols;
  const std::size_t c = row % detector.cols;
  const double cy = (static_cast<double>(r) + 0.5) * static_cast<double>(dmd.rows) / detector.rows - 0.5;
  const double cx = (static_cast<double>(c) + 0.5) * static_cast<double>(dmd.cols) / detector.cols - 0.5;
  const double y = static_cast<double>(col / dmd.cols);
  const double x = static_cast<double>(col % dmd.cols);
  return std::max(std::abs(y - cy), std::abs(x - cx));
}

}  // namespace

SparseOTF::SparseOTF(Extent2 detector, Extent2 dmd, std::vector<std::size_t> row_offsets,
                     std::vector<std::size_t> col_indices, std::vector<double> values, double support_radius) {
  if (detector.count() == 0 || dmd.count() == 0) throw ShapeError("OTF extents must be positive");
  if (row_offsets.size() != detector.count() + 1 || row_offsets.front() != 0) {
    throw ShapeError("OTF needs p*q + 1 row offsets starting at 0");
  }
  if (col_indices.size() != values.size() || row_offsets.back() != values.size()) {
    throw ShapeError("OTF column/value arrays disagree with row offsets");
  }
  if (!(support_radius >= 0.0) || !std::isfinite(support_radius)) {
    throw ShapeError("OTF support radius must be finite and nonnegative");
  }
  for (std::size_t i = 0; i < detector.count(); ++i) {
    if (row_offsets[i + 1] < row_offsets[i]) throw ShapeError("OTF row offsets must be nondecreasing");
    for (std::size_t k = row_offsets[i]; k < row_offsets[i + 1]; ++k) {
      if (col_indices[k] >= dmd.count()) throw ShapeError("OTF column index outside the DMD");
      if (k > row_offsets[i] && col_indices[k] <= col_indices[k - 1]) {
        throw ShapeError("OTF column indices must be strictly increasing within a row");
      }
      if (!(values[k] >= 0.0) || !std::isfinite(values[k])) {
        throw NumericError("OTF values must be finite and nonnegative");
      }
      if (chebyshev_to_anchor(detector, dmd, i, col_indices[k]) > support_radius + kRadiusSlack) {
        throw ShapeError("OTF row " + std::to_string(i) + " exceeds its support radius");
      }
    }
  }
  auto data = std::make_shared<Data>();
  data->detector = detector;
  data->dmd = dmd;
  data->row_offsets = std::move(row_offsets);
  data->col_indices = std::move(col_indices);
  data->values = std::move(values);
  data->support_radius = support_radius;
  data_ = std::move(data);
}

SparseOTF SparseOTF::with_fitted_radius(Extent2 detector, Extent2 dmd, std::vector<std::size_t> row_offsets,
                                        std::vector<std::size_t> col_indices, std::vector<double> values) {
  double radius = 0.0;
  if (row_offsets.size() == detector.count() + 1 && detector.count() > 0 && dmd.count() > 0) {
    for (std::size_t i = 0; i < detector.count(); ++i) {
      for (std::size_t k = row_offsets[i]; k < row_offsets[i + 1] && k < col_indices.size(); ++k) {
        if (col_indices[k] < dmd.count()) {
          radius = std::max(radius, chebyshev_to_anchor(detector, dmd, i, col_indices[k]));
        }
      }
    }
  }
  return SparseOTF(detector, dmd, std::move(row_offsets), std::move(col_indices), std::move(values), radius);
}

std::span<const std::size_t> SparseOTF::row_cols(std::size_t i) const {
  const auto& d = *data_;
  return std::span<const std::size_t>(d.col_indices).subspan(d.row_offsets[i], d.row_offsets[i + 1] - d.row_offsets[i]);
}

std::span<const double> SparseOTF::row_values(std::size_t i) const {
  const auto& d = *data_;
  return std::span<const double>(d.values).subspan(d.row_offsets[i], d.row_offsets[i + 1] - d.row_offsets[i]);
}

double SparseOTF::row_sum(std::size_t i) const {
  double s = 0.0;
  for (double v : row_values(i)) s += v;
  return s;
}

std::pair<double, double> SparseOTF::anchor(std::size_t i) const {
  const auto det = data_->detector;
  const auto dmd = data_->dmd;
  const double cy = (static_cast<double>(i / det.cols) + 0.5) * static_cast<double>(dmd.rows) / det.rows - 0.5;
  const double cx = (static_cast<double>(i % det.cols) + 0.5) * static_cast<double>(dmd.cols) / det.cols - 0.5;
  return {cy, cx};
}

std::vector<double> SparseOTF::dense() const {
  std::vector<double> out(rows() * cols(), 0.0);
  for (std::size_t i = 0; i < rows(); ++i) {
    const auto c = row_cols(i);
    const auto v = row_values(i);
    for (std::size_t k = 0; k < c.size(); ++k) out[i * cols() + c[k]] = v[k];
  }
  return out;
}

void SparseOTF::apply(std::span<const double> image, std::span<double> out) const {
  const auto& d = *data_;
  for (std::size_t i = 0; i < rows(); ++i) {
    double acc = 0.0;
    for (std::size_t k = d.row_offsets[i]; k < d.row_offsets[i + 1]; ++k) acc += d.values[k] * image[d.col_indices[k]];
    out[i] = acc;
  }
}

void SparseOTF::apply_transpose_add(std::span<const double> frame, std::span<double> out) const {
  const auto& d = *data_;
  for (std::size_t i = 0; i < rows(); ++i) {
    const double f = frame[i];
    if (f == 0.0) continue;
    for (std::size_t k = d.row_offsets[i]; k < d.row_offsets[i + 1]; ++k) out[d.col_indices[k]] += d.values[k] * f;
  }
}

namespace {

// Splits a rank-2 or rank-3 tensor into (batch, trailing extent).
std::pair<std::size_t, Extent2> batch_layout(const Tensor& t, const char* what) {
  if (t.ndim() == 2) return {1, Extent2{t.extent(0), t.extent(1)}};
  if (t.ndim() == 3) return {t.extent(0), Extent2{t.extent(1), t.extent(2)}};
  throw ShapeError(std::string(what) + ": expected rank 2 or 3, got " + shape_string(t.shape()));
}

Shape with_trailing(const Tensor& like, std::size_t batch, Extent2 e) {
  if (like.ndim() == 2) return Shape{e.rows, e.cols};
  return Shape{batch, e.rows, e.cols};
}

}  // namespace

Tensor otf_apply(const SparseOTF& otf, const Tensor& images) {
  const auto [n, extent] = batch_layout(images, "otf_apply");
  if (extent != otf.dmd_shape()) {
    throw ShapeError("otf_apply: image extent " + shape_string(images.shape()) + " does not match the OTF DMD shape");
  }
  const std::size_t in_len = otf.cols(), out_len = otf.rows();
  std::vector<double> out(n * out_len);
  const auto x = images.data();
  for (std::size_t b = 0; b < n; ++b) {
    otf.apply(x.subspan(b * in_len, in_len), std::span<double>(out).subspan(b * out_len, out_len));
  }
  return record_op(with_trailing(images, n, otf.detector_shape()), std::move(out), {images},
                   [otf, n, in_len, out_len](auto g, auto gin) {
                     for (std::size_t b = 0; b < n; ++b) {
                       otf.apply_transpose_add(g.subspan(b * out_len, out_len), gin[0].subspan(b * in_len, in_len));
                     }
                   });
}

Tensor otf_apply_transpose(const SparseOTF& otf, const Tensor& frames) {
  const auto [n, extent] = batch_layout(frames, "otf_apply_transpose");
  if (extent != otf.detector_shape()) {
    throw ShapeError("otf_apply_transpose: frame extent " + shape_string(frames.shape()) +
                     " does not match the OTF detector shape");
  }
  const std::size_t in_len = otf.rows(), out_len = otf.cols();
  std::vector<double> out(n * out_len, 0.0);
  const auto y = frames.data();
  for (std::size_t b = 0; b < n; ++b) {
    otf.apply_transpose_add(y.subspan(b * in_len, in_len), std::span<double>(out).subspan(b * out_len, out_len));
  }
  return record_op(with_trailing(frames, n, otf.dmd_shape()), std::move(out), {frames},
                   [otf, n, in_len, out_len](auto g, auto gin) {
                     std::vector<double> tmp(in_len);
                     for (std::size_t b = 0; b < n; ++b) {
                       otf.apply(g.subspan(b * out_len, out_len), tmp);
                       for (std::size_t i = 0; i < in_len; ++i) gin[0][b * in_len + i] += tmp[i];
                     }
                   });
}

SparseOTF make_ideal_otf(Extent2 dmd, Extent2 factor) {
  if (factor.rows == 0 || factor.cols == 0) throw ShapeError("under-sampling factor must be positive");
  if (dmd.rows == 0 || dmd.cols == 0 || dmd.rows % factor.rows != 0 || dmd.cols % factor.cols != 0) {
    throw ShapeError("DMD extents " + std::to_string(dmd.rows) + "x" + std::to_string(dmd.cols) +
                     " are not divisible by the under-sampling factor");
  }
  const Extent2 det{dmd.rows / factor.rows, dmd.cols / factor.cols};
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> cols;
  std::vector<double> values;
  cols.reserve(dmd.count());
  values.reserve(dmd.count());
  for (std::size_t r = 0; r < det.rows; ++r) {
    for (std::size_t c = 0; c < det.cols; ++c) {
      for (std::size_t dy = 0; dy < factor.rows; ++dy) {
        for (std::size_t dx = 0; dx < factor.cols; ++dx) {
          cols.push_back((r * factor.rows + dy) * dmd.cols + c * factor.cols + dx);
          values.push_back(1.0);
        }
      }
      offsets.push_back(cols.size());
    }
  }
  const double radius = (static_cast<double>(std::max(factor.rows, factor.cols)) - 1.0) / 2.0;
  return SparseOTF(det, dmd, std::move(offsets), std::move(cols), std::move(values), radius);
}

void OTFPerturbation::validate() const {
  if (!std::isfinite(shift_y) || !std::isfinite(shift_x) || !std::isfinite(rotation)) {
    throw ConfigError("perturbation shift and rotation must be finite");
  }
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("perturbation scale must be positive");
  if (!(blur_sigma >= 0.0) || !std::isfinite(blur_sigma)) throw ConfigError("blur sigma must be nonnegative");
  if (!(gain_jitter >= 0.0) || !std::isfinite(gain_jitter)) throw ConfigError("gain jitter must be nonnegative");
}

namespace {

struct Box {
  long y0, y1, x0, x1;  // inclusive
  long height() const { return y1 - y0 + 1; }
  long width() const { return x1 - x0 + 1; }
};

std::vector<double> gaussian_kernel(double sigma) {
  const long r = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double total = 0.0;
  for (long i = -r; i <= r; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[i + r] = v;
    total += v;
  }
  for (auto& v : k) v /= total;
  return k;
}

// Resampled, blurred footprint of one row; returns (cols, values) in
// increasing column order.
void perturb_row(const SparseOTF& base, std::size_t row, const OTFPerturbation& p,
                 std::vector<std::size_t>& out_cols, std::vector<double>& out_vals) {
  const auto dmd = base.dmd_shape();
  const auto cols = base.row_cols(row);
  const auto vals = base.row_values(row);
  if (cols.empty()) return;

  Box src{static_cast<long>(dmd.rows), -1, static_cast<long>(dmd.cols), -1};
  for (auto c : cols) {
    const long y = static_cast<long>(c / dmd.cols), x = static_cast<long>(c % dmd.cols);
    src.y0 = std::min(src.y0, y);
    src.y1 = std::max(src.y1, y);
    src.x0 = std::min(src.x0, x);
    src.x1 = std::max(src.x1, x);
  }
  std::vector<double> patch(static_cast<std::size_t>(src.height() * src.width()), 0.0);
  double base_sum = 0.0;
  for (std::size_t k = 0; k < cols.size(); ++k) {
    const long y = static_cast<long>(cols[k] / dmd.cols), x = static_cast<long>(cols[k] % dmd.cols);
    patch[static_cast<std::size_t>((y - src.y0) * src.width() + (x - src.x0))] = vals[k];
    base_sum += vals[k];
  }
  if (base_sum == 0.0) {
    for (std::size_t k = 0; k < cols.size(); ++k) {
      out_cols.push_back(cols[k]);
      out_vals.push_back(0.0);
    }
    return;
  }
  auto sample = [&](double y, double x) {
    const double fy = std::floor(y), fx = std::floor(x);
    const double wy = y - fy, wx = x - fx;
    double acc = 0.0;
    for (int dy = 0; dy <= 1; ++dy) {
      for (int dx = 0; dx <= 1; ++dx) {
        const long yy = static_cast<long>(fy) + dy, xx = static_cast<long>(fx) + dx;
        if (yy < src.y0 || yy > src.y1 || xx < src.x0 || xx > src.x1) continue;
        const double w = (dy ? wy : 1.0 - wy) * (dx ? wx : 1.0 - wx);
        acc += w * patch[static_cast<std::size_t>((yy - src.y0) * src.width() + (xx - src.x0))];
      }
    }
    return acc;
  };

  const double cy = (static_cast<double>(dmd.rows) - 1.0) / 2.0;
  const double cx = (static_cast<double>(dmd.cols) - 1.0) / 2.0;
  const double cs = std::cos(p.rotation), sn = std::sin(p.rotation);
  auto forward_map = [&](double y, double x) {
    const double dy = y - cy, dx = x - cx;
    return std::pair{cy + p.scale * (cs * dy - sn * dx) + p.shift_y, cx + p.scale * (sn * dy + cs * dx) + p.shift_x};
  };

  double ymin = 1e300, ymax = -1e300, xmin = 1e300, xmax = -1e300;
  for (double y : {src.y0 - 1.0, src.y1 + 1.0}) {
    for (double x : {src.x0 - 1.0, src.x1 + 1.0}) {
      const auto [my, mx] = forward_map(y, x);
      ymin = std::min(ymin, my);
      ymax = std::max(ymax, my);
      xmin = std::min(xmin, mx);
      xmax = std::max(xmax, mx);
    }
  }
  const long margin = static_cast<long>(std::ceil(3.0 * p.blur_sigma)) + 1;
  Box dst{std::max(0L, static_cast<long>(std::floor(ymin)) - margin),
          std::min(static_cast<long>(dmd.rows) - 1, static_cast<long>(std::ceil(ymax)) + margin),
          std::max(0L, static_cast<long>(std::floor(xmin)) - margin),
          std::min(static_cast<long>(dmd.cols) - 1, static_cast<long>(std::ceil(xmax)) + margin)};
  if (dst.y1 < dst.y0 || dst.x1 < dst.x0) {
    throw NumericError("OTF row " + std::to_string(row) + " left the DMD entirely");
  }

  std::vector<double> field(static_cast<std::size_t>(dst.height() * dst.width()), 0.0);
  for (long y = dst.y0; y <= dst.y1; ++y) {
    for (long x = dst.x0; x <= dst.x1; ++x) {
      const double ey = y - cy - p.shift_y, ex = x - cx - p.shift_x;
      const double sy = cy + (cs * ey + sn * ex) / p.scale;
      const double sx = cx + (-sn * ey + cs * ex) / p.scale;
      field[static_cast<std::size_t>((y - dst.y0) * dst.width() + (x - dst.x0))] = sample(sy, sx);
    }
  }

  if (p.blur_sigma > 0.0) {
    const auto kernel = gaussian_kernel(p.blur_sigma);
    const long r = static_cast<long>(kernel.size() / 2);
    const long h = dst.height(), w = dst.width();
    std::vector<double> tmp(field.size(), 0.0);
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long k = -r; k <= r; ++k) {
          const long xx = x - k;
          if (xx >= 0 && xx < w) acc += kernel[k + r] * field[y * w + xx];
        }
        tmp[y * w + x] = acc;
      }
    }
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long k = -r; k <= r; ++k) {
          const long yy = y - k;
          if (yy >= 0 && yy < h) acc += kernel[k + r] * tmp[yy * w + x];
        }
        field[y * w + x] = acc;
      }
    }
  }

  double total = 0.0;
  for (double v : field) total += v;
  if (!(total > 0.0)) throw NumericError("OTF row " + std::to_string(row) + " lost all of its mass");
  const double renorm = base_sum / total;
  for (long y = dst.y0; y <= dst.y1; ++y) {
    for (long x = dst.x0; x <= dst.x1; ++x) {
      const double v = field[static_cast<std::size_t>((y - dst.y0) * dst.width() + (x - dst.x0))];
      if (v > 0.0) {
        out_cols.push_back(static_cast<std::size_t>(y) * dmd.cols + static_cast<std::size_t>(x));
        out_vals.push_back(v * renorm);
      }
    }
  }
}

}  // namespace

PerturbedOTF perturb_otf_detailed(const SparseOTF& base, const OTFPerturbation& pert, std::uint64_t seed) {
  pert.validate();
  std::vector<double> gains(base.rows(), 1.0);
  if (pert.gain_jitter > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& g : gains) g = std::max(0.0, 1.0 + pert.gain_jitter * normal(rng));
  }
  if (pert.is_geometric_identity() && pert.gain_jitter == 0.0) return PerturbedOTF{base, gains};

  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> cols;
  std::vector<double> values;
  for (std::size_t i = 0; i < base.rows(); ++i) {
    const std::size_t start = cols.size();
    if (pert.is_geometric_identity()) {
      const auto c = base.row_cols(i);
      const auto v = base.row_values(i);
      cols.insert(cols.end(), c.begin(), c.end());
      values.insert(values.end(), v.begin(), v.end());
    } else {
      perturb_row(base, i, pert, cols, values);
    }
    for (std::size_t k = start; k < values.size(); ++k) values[k] *= gains[i];
    offsets.push_back(cols.size());
  }
  auto otf = SparseOTF::with_fitted_radius(base.detector_shape(), base.dmd_shape(), std::move(offsets), std::move(cols),
                                           std::move(values));
  return PerturbedOTF{std::move(otf), std::move(gains)};
}

SparseOTF perturb_otf(const SparseOTF& base, const OTFPerturbation& pert, std::uint64_t seed) {
  return perturb_otf_detailed(base, pert, seed).otf;
}

SupportWindows default_windows(Extent2 detector, Extent2 dmd, std::size_t dilation) {
  if (detector.count() == 0 || dmd.count() == 0) throw ShapeError("window extents must be positive");
  const double fy = static_cast<double>(dmd.rows) / detector.rows;
  const double fx = static_cast<double>(dmd.cols) / detector.cols;
  const double ry = (fy - 1.0) / 2.0 + static_cast<double>(dilation);
  const double rx = (fx - 1.0) / 2.0 + static_cast<double>(dilation);
  SupportWindows windows(detector.count());
  for (std::size_t i = 0; i < detector.count(); ++i) {
    const double cy = (static_cast<double>(i / detector.cols) + 0.5) * fy - 0.5;
    const double cx = (static_cast<double>(i % detector.cols) + 0.5) * fx - 0.5;
    const long y0 = std::max(0L, static_cast<long>(std::ceil(cy - ry - kRadiusSlack)));
    const long y1 = std::min(static_cast<long>(dmd.rows) - 1, static_cast<long>(std::floor(cy + ry + kRadiusSlack)));
    const long x0 = std::max(0L, static_cast<long>(std::ceil(cx - rx - kRadiusSlack)));
    const long x1 = std::min(static_cast<long>(dmd.cols) - 1, static_cast<long>(std::floor(cx + rx + kRadiusSlack)));
    for (long y = y0; y <= y1; ++y) {
      for (long x = x0; x <= x1; ++x) windows[i].push_back(static_cast<std::size_t>(y) * dmd.cols + static_cast<std::size_t>(x));
    }
  }
  return windows;
}

double default_ridge(const Tensor& masks, std::size_t window_size) {
  double ms = 0.0;
  for (double v : masks.data()) ms += v * v;
  ms /= static_cast<double>(masks.numel());
  return 1e-6 * ms * static_cast<double>(window_size);
}

CalibrationResult calibrate_otf(const Tensor& masks, const Tensor& frames, const SupportWindows& windows,
                                double ridge) {
  if (masks.ndim() != 3 || frames.ndim() != 3) throw ShapeError("calibrate_otf expects [N x P x Q] masks and [N x p x q] frames");
  const std::size_t n = masks.extent(0);
  if (frames.extent(0) != n) throw ShapeError("calibrate_otf: mask and frame counts differ");
  const Extent2 dmd{masks.extent(1), masks.extent(2)};
  const Extent2 det{frames.extent(1), frames.extent(2)};
  if (windows.size() != det.count()) throw ShapeError("calibrate_otf: need one window per detector pixel");

  const auto m = masks.data();
  const auto y = frames.data();
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> cols;
  std::vector<double> values;
  CalibrationResult result{make_ideal_otf(Extent2{1, 1}, Extent2{1, 1}), std::vector<double>(det.count(), 0.0), 0, ridge};
  std::vector<std::size_t> singular_rows;

  for (std::size_t i = 0; i < det.count(); ++i) {
    const auto& window = windows[i];
    if (window.empty()) throw ShapeError("calibrate_otf: empty window for detector pixel " + std::to_string(i));
    for (std::size_t k = 0; k < window.size(); ++k) {
      if (window[k] >= dmd.count() || (k > 0 && window[k] <= window[k - 1])) {
        throw ShapeError("calibrate_otf: window indices must be sorted and inside the DMD");
      }
    }
    const auto w = static_cast<Eigen::Index>(window.size());
    Eigen::MatrixXd a(static_cast<Eigen::Index>(n), w);
    Eigen::VectorXd b(static_cast<Eigen::Index>(n));
    for (std::size_t s = 0; s < n; ++s) {
      for (Eigen::Index k = 0; k < w; ++k) a(static_cast<Eigen::Index>(s), k) = m[s * dmd.count() + window[k]];
      b(static_cast<Eigen::Index>(s)) = y[s * det.count() + i];
    }
    const double lambda = ridge < 0.0 ? default_ridge(masks, window.size()) : ridge;
    result.ridge = lambda;
    Eigen::VectorXd coef = Eigen::VectorXd::Zero(w);
    if (!b.isZero(0.0)) {
      Eigen::MatrixXd gram = a.transpose() * a;
      gram.diagonal().array() += lambda;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
      if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-13) {
        singular_rows.push_back(i);
        offsets.push_back(cols.size());
        continue;
      }
      coef = ldlt.solve(a.transpose() * b);
    }
    for (Eigen::Index k = 0; k < w; ++k) {
      if (coef(k) < 0.0) {
        coef(k) = 0.0;
        ++result.clamped;
      }
      if (coef(k) > 0.0) {
        cols.push_back(window[static_cast<std::size_t>(k)]);
        values.push_back(coef(k));
      }
    }
    result.residual[i] = (a * coef - b).norm();
    offsets.push_back(cols.size());
  }
  if (!singular_rows.empty()) {
    std::string rows;
    for (std::size_t k = 0; k < std::min<std::size_t>(singular_rows.size(), 8); ++k) {
      rows += (k ? ", " : "") + std::to_string(singular_rows[k]);
    }
    throw NumericError("calibrate_otf: singular normal equations for " + std::to_string(singular_rows.size()) +
                       " row(s) (first: " + rows + "); use a positive ridge or more masks");
  }
  result.otf = SparseOTF::with_fitted_radius(det, dmd, std::move(offsets), std::move(cols), std::move(values));
  return result;
}

std::vector<RegionSpec> split_fov(const RegionSpec& fov, Extent2 region_size) {
  const auto& s = fov.size;
  const auto& d = fov.detector_size;
  if (s.count() == 0 || d.count() == 0 || region_size.count() == 0) throw ShapeError("split_fov: extents must be positive");
  if (s.rows % d.rows != 0 || s.cols % d.cols != 0) {
    throw ShapeError("split_fov: FOV under-sampling factor must be integral");
  }
  const Extent2 factor{s.rows / d.rows, s.cols / d.cols};
  if (region_size.rows % factor.rows != 0 || region_size.cols % factor.cols != 0) {
    throw ShapeError("split_fov: region size must be a multiple of the under-sampling factor");
  }
  if (region_size.rows > s.rows || region_size.cols > s.cols) throw ShapeError("split_fov: region larger than the FOV");
  if (s.rows % region_size.rows != 0 || s.cols % region_size.cols != 0) {
    throw ShapeError("split_fov: regions must tile the FOV exactly");
  }
  std::vector<RegionSpec> regions;
  for (std::size_t r = 0; r < s.rows / region_size.rows; ++r) {
    for (std::size_t c = 0; c < s.cols / region_size.cols; ++c) {
      RegionSpec reg;
      reg.origin = {fov.origin.row + r * region_size.rows, fov.origin.col + c * region_size.cols};
      reg.size = region_size;
      reg.detector_origin = {fov.detector_origin.row + r * region_size.rows / factor.rows,
                             fov.detector_origin.col + c * region_size.cols / factor.cols};
      reg.detector_size = {region_size.rows / factor.rows, region_size.cols / factor.cols};
      regions.push_back(reg);
    }
  }
  return regions;
}

RegionExtraction extract_region(const SparseOTF& full, const RegionSpec& region) {
  const auto dmd = full.dmd_shape();
  const auto det = full.detector_shape();
  if (region.size.count() == 0 || region.detector_size.count() == 0) throw ShapeError("extract_region: empty region");
  if (region.origin.row + region.size.rows > dmd.rows || region.origin.col + region.size.cols > dmd.cols ||
      region.detector_origin.row + region.detector_size.rows > det.rows ||
      region.detector_origin.col + region.detector_size.cols > det.cols) {
    throw ShapeError("extract_region: region lies outside the FOV");
  }
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> cols;
  std::vector<double> values;
  std::vector<double> leakage;
  leakage.reserve(region.detector_size.count());
  for (std::size_t r = 0; r < region.detector_size.rows; ++r) {
    for (std::size_t c = 0; c < region.detector_size.cols; ++c) {
      const std::size_t row = (region.detector_origin.row + r) * det.cols + region.detector_origin.col + c;
      const auto rc = full.row_cols(row);
      const auto rv = full.row_values(row);
      double total = 0.0, dropped = 0.0;
      for (std::size_t k = 0; k < rc.size(); ++k) {
        const std::size_t y = rc[k] / dmd.cols, x = rc[k] % dmd.cols;
        total += rv[k];
        if (y >= region.origin.row && y < region.origin.row + region.size.rows && x >= region.origin.col &&
            x < region.origin.col + region.size.cols) {
          cols.push_back((y - region.origin.row) * region.size.cols + (x - region.origin.col));
          values.push_back(rv[k]);
        } else {
          dropped += rv[k];
        }
      }
      leakage.push_back(total > 0.0 ? dropped / total : 0.0);
      offsets.push_back(cols.size());
    }
  }
  auto otf = SparseOTF::with_fitted_radius(region.detector_size, region.size, std::move(offsets), std::move(cols),
                                           std::move(values));
  return RegionExtraction{std::move(otf), std::move(leakage)};
}

void write_otf(std::ostream& out, const SparseOTF& otf) {
  out.write("PCIO", 4);
  binary::put_u32(out, 1);
  binary::put_u64(out, otf.detector_shape().rows);
  binary::put_u64(out, otf.detector_shape().cols);
  binary::put_u64(out, otf.dmd_shape().rows);
  binary::put_u64(out, otf.dmd_shape().cols);
  for (auto v : otf.row_offsets()) binary::put_u64(out, v);
  for (auto v : otf.col_indices()) binary::put_u64(out, v);
  for (auto v : otf.values()) binary::put_f64(out, v);
  if (!out) throw FormatError("failed writing OTF");
}

SparseOTF read_otf(std::istream& in) {
  binary::expect_magic(in, "PCIO");
  if (binary::get_u32(in) != 1) throw FormatError("unsupported PCIO version");
  Extent2 det{binary::get_u64(in), binary::get_u64(in)};
  Extent2 dmd{binary::get_u64(in), binary::get_u64(in)};
  constexpr std::uint64_t kLimit = std::uint64_t{1} << 32;
  if (det.count() == 0 || dmd.count() == 0 || det.rows > kLimit || det.cols > kLimit || dmd.rows > kLimit ||
      dmd.cols > kLimit || det.count() > kLimit) {
    throw FormatError("invalid PCIO extents");
  }
  std::vector<std::size_t> offsets(det.count() + 1);
  for (auto& v : offsets) v = binary::get_u64(in);
  const std::size_t nnz = offsets.back();
  if (nnz > kLimit) throw FormatError("PCIO entry count too large");
  std::vector<std::size_t> cols(nnz);
  for (auto& v : cols) v = binary::get_u64(in);
  std::vector<double> values(nnz);
  for (auto& v : values) v = binary::get_f64(in);
  try {
    return SparseOTF::with_fitted_radius(det, dmd, std::move(offsets), std::move(cols), std::move(values));
  } catch (const Error& e) {
    throw FormatError(std::string("invalid PCIO contents: ") + e.what());
  }
}

void save_otf(const std::filesystem::path& path, const SparseOTF& otf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_otf(out, otf);
}

SparseOTF load_otf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_otf(in);
}

}  // namespace pcisr
